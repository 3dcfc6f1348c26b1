//! Diversity-driven training of a utility ensemble.
//!
//! Each candidate `g_i` is pushed away from its nearest neighbour in the
//! ensemble, both in value (`L_val`) and in finite-difference slope
//! (`L_grad`), over uniform samples of the unit cube. Members are updated
//! round-robin with plain projected gradient steps; after training every
//! member gets the `epsilon`-scaled linear term that makes it strictly
//! increasing.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::monotone_net::{MonotoneNet, ParamGradient, StrictUtility};

const PROBE_STREAM: u64 = 0x7072_6f62;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub k: usize,
    pub m_utilities: usize,
    /// Weight of the value term against the slope term.
    pub mu: f64,
    pub epsilon: f64,
    /// Round-robin sweeps; every sweep updates each member once.
    pub steps: usize,
    pub batch: usize,
    pub pair_batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Pre-activation widths of the hidden layers.
    pub hidden: Vec<usize>,
    /// Ascend (true) or descend (false) the discrepancy objective.
    pub maximize_diversity: bool,
    /// Rescale every member to `g(0) = 0`, `g(1) = 1` after each update,
    /// backtracking steps that would collapse its range.
    pub standardize_range: bool,
    /// Size of the fixed held-out batch used to report diversity.
    pub probe_size: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            k: 2,
            m_utilities: 10,
            mu: 0.5,
            epsilon: 0.01,
            steps: 500,
            batch: 64,
            pair_batch: 64,
            learning_rate: 1e-2,
            seed: 0,
            hidden: vec![16, 16],
            maximize_diversity: true,
            standardize_range: true,
            probe_size: 512,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_utilities < 2 {
            return Err(Error::Config(format!(
                "need at least 2 utilities for pairwise discrepancy, got {}",
                self.m_utilities
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!("mu must lie in [0,1], got {}", self.mu)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch == 0 || self.pair_batch == 0 || self.probe_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// `n` i.i.d. uniform points of `[0,1]^k`.
pub fn sample_unit_cube<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::EmptyBatch("unit-cube sample count must be positive"));
    }
    Ok((0..n)
        .map(|_| (0..k).map(|_| rng.random::<f64>()).collect())
        .collect())
}

/// A pair `(z, z')` with `z != z'` and its cached inverse distance.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub z: Vec<f64>,
    pub z_prime: Vec<f64>,
    inv_dist: f64,
}

impl SamplePair {
    pub fn new(z: Vec<f64>, z_prime: Vec<f64>) -> Result<Self> {
        if z.len() != z_prime.len() {
            return Err(Error::shape("sample pair", z.len(), z_prime.len()));
        }
        let dist = z
            .iter()
            .zip(&z_prime)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if !(dist > 0.0) {
            return Err(Error::DegeneratePair);
        }
        Ok(SamplePair {
            z,
            z_prime,
            inv_dist: 1.0 / dist,
        })
    }

    fn quotient(&self, net: &MonotoneNet) -> f64 {
        (net.forward_unchecked(&self.z_prime) - net.forward_unchecked(&self.z)) * self.inv_dist
    }
}

/// Independent uniform pairs, redrawn on the (probability-zero) collision `z = z'`.
pub fn sample_pairs<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<SamplePair>> {
    if n == 0 {
        return Err(Error::EmptyBatch("pair count must be positive"));
    }
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let z: Vec<f64> = (0..k).map(|_| rng.random()).collect();
        let zp: Vec<f64> = (0..k).map(|_| rng.random()).collect();
        match SamplePair::new(z, zp) {
            Ok(p) => pairs.push(p),
            Err(Error::DegeneratePair) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(pairs)
}

fn check_members(i: usize, nets: &[MonotoneNet]) -> Result<()> {
    if nets.len() < 2 {
        return Err(Error::Config(format!(
            "pairwise discrepancy needs at least 2 members, got {}",
            nets.len()
        )));
    }
    if i >= nets.len() {
        return Err(Error::Config(format!("member index {i} out of range")));
    }
    let k = nets[0].input_dim();
    if let Some(bad) = nets.iter().find(|n| n.input_dim() != k) {
        return Err(Error::shape("ensemble member input", k, bad.input_dim()));
    }
    Ok(())
}

fn check_points<'a>(k: usize, points: impl IntoIterator<Item = &'a [f64]>) -> Result<()> {
    for z in points {
        if z.len() != k {
            return Err(Error::shape("sample dimension", k, z.len()));
        }
    }
    Ok(())
}

/// Mean of `(a - b)^2` over aligned rows.
fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `(min_j mean((row_i - row_j)^2), argmin j)` over cached per-member rows.
fn nearest_discrepancy(i: usize, rows: &[Vec<f64>]) -> (f64, usize) {
    let mut best = (f64::INFINITY, usize::MAX);
    for (j, row) in rows.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = mean_sq_diff(&rows[i], row);
        if d < best.0 || best.1 == usize::MAX {
            best = (d, j);
        }
    }
    best
}

fn eval_rows(nets: &[MonotoneNet], batch: &[Vec<f64>]) -> Vec<Vec<f64>> {
    nets.iter()
        .map(|n| batch.iter().map(|z| n.forward_unchecked(z)).collect())
        .collect()
}

fn quotient_rows(nets: &[MonotoneNet], pairs: &[SamplePair]) -> Vec<Vec<f64>> {
    nets.iter()
        .map(|n| pairs.iter().map(|p| p.quotient(n)).collect())
        .collect()
}

/// `min_{j != i} mean_z (g_i(z) - g_j(z))^2` on the base networks.
pub fn value_discrepancy(i: usize, nets: &[MonotoneNet], batch: &[Vec<f64>]) -> Result<f64> {
    check_members(i, nets)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch("value discrepancy batch"));
    }
    check_points(nets[0].input_dim(), batch.iter().map(Vec::as_slice))?;
    Ok(nearest_discrepancy(i, &eval_rows(nets, batch)).0)
}

/// `min_{j != i}` of the mean squared difference of finite-difference slopes
/// `(g(z') - g(z)) / |z' - z|`.
pub fn grad_discrepancy(i: usize, nets: &[MonotoneNet], pairs: &[SamplePair]) -> Result<f64> {
    check_members(i, nets)?;
    if pairs.is_empty() {
        return Err(Error::EmptyBatch("gradient discrepancy pairs"));
    }
    check_points(
        nets[0].input_dim(),
        pairs.iter().flat_map(|p| [p.z.as_slice(), p.z_prime.as_slice()]),
    )?;
    Ok(nearest_discrepancy(i, &quotient_rows(nets, pairs)).0)
}

/// `mu * L_val + (1 - mu) * L_grad`.
pub fn diversity_objective(
    i: usize,
    nets: &[MonotoneNet],
    batch: &[Vec<f64>],
    pairs: &[SamplePair],
    mu: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Config(format!("mu must lie in [0,1], got {mu}")));
    }
    let l_val = value_discrepancy(i, nets, batch)?;
    let l_grad = grad_discrepancy(i, nets, pairs)?;
    Ok(mu * l_val + (1.0 - mu) * l_grad)
}

/// Smallest pairwise mean squared difference over all member pairs.
pub fn min_pairwise_discrepancy(nets: &[MonotoneNet], probe: &[Vec<f64>]) -> f64 {
    let rows = eval_rows(nets, probe);
    let mut best = f64::INFINITY;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            best = best.min(mean_sq_diff(&rows[i], &rows[j]));
        }
    }
    best
}

/// Fixed held-out probe batch for a given seed.
pub fn probe_batch(seed: u64, size: usize, k: usize) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PROBE_STREAM);
    sample_unit_cube(size, k, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub member: usize,
    pub l_val: f64,
    pub l_grad: f64,
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub ensemble: UtilityEnsemble,
    pub log: Vec<TrainLogRow>,
    /// Base networks right after initialization.
    pub initial_nets: Vec<MonotoneNet>,
    pub initial_probe_discrepancy: f64,
    pub final_probe_discrepancy: f64,
}

pub fn train_ensemble(config: &EnsembleConfig) -> Result<UtilityEnsemble> {
    train_ensemble_logged(config).map(|o| o.ensemble)
}

/// Largest fraction of its range a standardized member may lose in one update.
const MAX_RANGE_LOSS: f64 = 0.5;
const MAX_HALVINGS: usize = 20;

/// Gradient step, projection and standardization.
///
/// With standardization on, a step that would shrink the output range below
/// `1 - MAX_RANGE_LOSS` is halved until it does not; rescaling a nearly flat
/// net would otherwise blow its head weights up. After `MAX_HALVINGS` the
/// member is left unchanged for this sweep.
fn guarded_step(net: &MonotoneNet, grad: &ParamGradient, step: f64, standardize: bool) -> MonotoneNet {
    let mut step = step;
    for _ in 0..=MAX_HALVINGS {
        let mut next = net.clone();
        next.apply_gradient(grad, step);
        next.project_nonnegative();
        if !standardize {
            return next;
        }
        let (lo, hi) = next.output_range();
        if hi - lo >= 1.0 - MAX_RANGE_LOSS {
            next.standardize_range();
            return next;
        }
        step /= 2.0;
    }
    net.clone()
}

/// Final form of the members: range-standardized when configured.
fn packaged(nets: &[MonotoneNet], config: &EnsembleConfig) -> Result<Vec<MonotoneNet>> {
    let mut out = nets.to_vec();
    if config.standardize_range {
        for (i, net) in out.iter_mut().enumerate() {
            if !net.standardize_range() {
                return Err(Error::Divergence {
                    step: config.steps,
                    member: i,
                });
            }
        }
    }
    Ok(out)
}

pub fn train_ensemble_logged(config: &EnsembleConfig) -> Result<TrainingOutcome> {
    config.validate()?;
    let k = config.k;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut nets = (0..config.m_utilities)
        .map(|_| MonotoneNet::random(k, &config.hidden, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    if config.standardize_range {
        for net in &mut nets {
            net.standardize_range();
        }
    }
    let initial_nets = packaged(&nets, config)?;
    let probe = probe_batch(config.seed, config.probe_size, k)?;
    let initial_probe_discrepancy = min_pairwise_discrepancy(&initial_nets, &probe);

    let mu = config.mu;
    let direction = if config.maximize_diversity { 1.0 } else { -1.0 };
    let mut log = Vec::with_capacity(config.steps * nets.len());

    for step in 0..config.steps {
        let batch = sample_unit_cube(config.batch, k, &mut rng)?;
        let pairs = sample_pairs(config.pair_batch, k, &mut rng)?;
        let mut values = eval_rows(&nets, &batch);
        let mut slopes = quotient_rows(&nets, &pairs);

        for i in 0..nets.len() {
            let (l_val, j_val) = nearest_discrepancy(i, &values);
            let (l_grad, j_grad) = nearest_discrepancy(i, &slopes);
            let objective = mu * l_val + (1.0 - mu) * l_grad;
            if !objective.is_finite() {
                return Err(Error::Divergence { step, member: i });
            }
            log.push(TrainLogRow {
                step,
                member: i,
                l_val,
                l_grad,
                objective,
            });

            let net = &nets[i];
            let mut grad = ParamGradient::zeros_like(net);
            if mu > 0.0 {
                let scale = 2.0 * mu / batch.len() as f64;
                for (b, z) in batch.iter().enumerate() {
                    let diff = values[i][b] - values[j_val][b];
                    net.accumulate_gradients(z, scale * diff, &mut grad);
                }
            }
            if mu < 1.0 {
                let scale = 2.0 * (1.0 - mu) / pairs.len() as f64;
                for (p, pair) in pairs.iter().enumerate() {
                    let w = scale * (slopes[i][p] - slopes[j_grad][p]) * pair.inv_dist;
                    net.accumulate_gradients(&pair.z_prime, w, &mut grad);
                    net.accumulate_gradients(&pair.z, -w, &mut grad);
                }
            }
            if !grad.is_finite() {
                return Err(Error::Divergence { step, member: i });
            }
            let net = &mut nets[i];
            *net = guarded_step(net, &grad, direction * config.learning_rate, config.standardize_range);
            values[i] = batch.iter().map(|z| net.forward_unchecked(z)).collect();
            slopes[i] = pairs.iter().map(|p| p.quotient(net)).collect();
        }
    }

    let nets = packaged(&nets, config)?;
    let final_probe_discrepancy = min_pairwise_discrepancy(&nets, &probe);
    let ensemble = UtilityEnsemble::from_nets(nets, config.epsilon)?.with_config(config.clone());
    Ok(TrainingOutcome {
        ensemble,
        log,
        initial_nets,
        initial_probe_discrepancy,
        final_probe_discrepancy,
    })
}

/// `M` strictly increasing utilities sharing input dimension `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityEnsemble {
    utilities: Vec<StrictUtility>,
    k: usize,
    epsilon: f64,
    config: Option<EnsembleConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleDoc {
    k: usize,
    epsilon: f64,
    nets: Vec<MonotoneNet>,
}

impl UtilityEnsemble {
    pub fn from_nets(nets: Vec<MonotoneNet>, epsilon: f64) -> Result<Self> {
        let Some(first) = nets.first() else {
            return Err(Error::Config("ensemble needs at least one member".into()));
        };
        let k = first.input_dim();
        if let Some(bad) = nets.iter().find(|n| n.input_dim() != k) {
            return Err(Error::shape("ensemble member input", k, bad.input_dim()));
        }
        if nets.len() > 26 {
            log::warn!("{} utilities exceed the 26 letter-encodable tokens", nets.len());
        }
        let utilities = nets
            .into_iter()
            .map(|n| StrictUtility::new(n, epsilon))
            .collect::<Result<Vec<_>>>()?;
        Ok(UtilityEnsemble {
            utilities,
            k,
            epsilon,
            config: None,
        })
    }

    /// `m` unit-norm linear utilities `w . z` with `w` uniform on the
    /// non-negative part of the unit sphere.
    pub fn linear<R: Rng + ?Sized>(m: usize, k: usize, epsilon: f64, rng: &mut R) -> Result<Self> {
        if m == 0 || k == 0 {
            return Err(Error::Config("linear ensemble needs m > 0 and k > 0".into()));
        }
        let nets = (0..m)
            .map(|_| {
                let w: Vec<f64> = loop {
                    let w: Vec<f64> = (0..k)
                        .map(|_| StandardNormal.sample(rng))
                        .map(|x: f64| x.abs())
                        .collect();
                    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        break w.into_iter().map(|x| x / norm).collect();
                    }
                };
                MonotoneNet::linear(w)
            })
            .collect::<Result<Vec<_>>>()?;
        UtilityEnsemble::from_nets(nets, epsilon)
    }

    fn with_config(mut self, config: EnsembleConfig) -> Self {
        self.config = Some(config);
        self
    }

    pub fn config(&self) -> Option<&EnsembleConfig> {
        self.config.as_ref()
    }

    pub fn m(&self) -> usize {
        self.utilities.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn utilities(&self) -> &[StrictUtility] {
        &self.utilities
    }

    pub fn base_nets(&self) -> impl Iterator<Item = &MonotoneNet> {
        self.utilities.iter().map(|u| &u.base)
    }

    /// Strict utility values `U_i(z)` of every member at a normalized return.
    pub fn evaluate(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.k {
            return Err(Error::shape("ensemble input", self.k, z.len()));
        }
        self.utilities.iter().map(|u| u.strict_forward(z)).collect()
    }

    pub fn to_json(&self) -> String {
        let doc = EnsembleDoc {
            k: self.k,
            epsilon: self.epsilon,
            nets: self.base_nets().cloned().collect(),
        };
        serde_json::to_string_pretty(&doc).expect("ensemble serializes")
    }

    pub fn save<W: Write>(&self, mut sink: W) -> Result<()> {
        sink.write_all(self.to_json().as_bytes())?;
        sink.write_all(b"\n")?;
        Ok(())
    }

    /// Parses an ensemble document; `expected_k` adds a dimension check.
    pub fn from_json(text: &str, expected_k: Option<usize>) -> Result<Self> {
        let doc: EnsembleDoc = serde_json::from_str(text).map_err(|e| Error::Parse {
            location: format!("line {}, column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        if let Some(k) = expected_k {
            if doc.k != k {
                return Err(Error::shape("ensemble document k", k, doc.k));
            }
        }
        let ensemble = UtilityEnsemble::from_nets(doc.nets, doc.epsilon)?;
        if ensemble.k != doc.k {
            return Err(Error::shape("ensemble document nets", doc.k, ensemble.k));
        }
        Ok(ensemble)
    }

    pub fn load<R: Read>(mut source: R, expected_k: Option<usize>) -> Result<Self> {
        let mut text = String::new();
        source.read_to_string(&mut text)?;
        UtilityEnsemble::from_json(&text, expected_k)
    }
}
