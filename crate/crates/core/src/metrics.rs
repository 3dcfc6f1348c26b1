//! Pareto fronts, 2-D hypervolume and distributional preference metrics.
//!
//! The two distributional metrics score a set of policies against `m` random
//! preferences `p` and report `(1/m) * sum_p max_policy u(p, policy)`:
//!
//! * constraint satisfaction: `u` is the fraction of a policy's return samples
//!   satisfying every linear row `w . z >= c` of the preference;
//! * variance objective: `u = w1 . mean(Z) + sign * w2 . std(Z)`.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximization dominance: `a >= b` everywhere and `a > b` somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        strict |= x > y;
    }
    strict
}

fn uniform_dim(points: &[Vec<f64>]) -> Result<usize> {
    let k = points.first().map(Vec::len).ok_or(Error::EmptyBatch("no points"))?;
    if let Some(p) = points.iter().find(|p| p.len() != k) {
        return Err(Error::shape("point dimension", k, p.len()));
    }
    Ok(k)
}

/// Indices of the non-dominated points, in input order.
pub fn pareto_front_indices(points: &[Vec<f64>]) -> Result<Vec<usize>> {
    uniform_dim(points)?;
    // A dominator is lexicographically greater, so scanning in descending
    // lexicographic order only needs to test against the front found so far.
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[b]
            .iter()
            .zip(&points[a])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut front: Vec<usize> = Vec::new();
    for idx in order {
        if !front.iter().any(|&f| dominates(&points[f], &points[idx])) {
            front.push(idx);
        }
    }
    front.sort_unstable();
    Ok(front)
}

pub fn pareto_front(points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(pareto_front_indices(points)?
        .into_iter()
        .map(|i| points[i].clone())
        .collect())
}

/// Area dominated by `front` and dominating `reference` (K = 2).
///
/// Dominated members of `front` are allowed and contribute nothing.
pub fn hypervolume_2d(front: &[Vec<f64>], reference: &[f64]) -> Result<f64> {
    if reference.len() != 2 {
        return Err(Error::shape("hypervolume reference", 2, reference.len()));
    }
    if front.is_empty() {
        return Ok(0.0);
    }
    if uniform_dim(front)? != 2 {
        return Err(Error::shape("hypervolume point", 2, front[0].len()));
    }
    if let Some(p) = front.iter().find(|p| p[0] < reference[0] || p[1] < reference[1]) {
        return Err(Error::Validation(format!(
            "point {p:?} does not dominate reference {reference:?}"
        )));
    }
    let mut sorted: Vec<&Vec<f64>> = front.iter().collect();
    sorted.sort_by(|a, b| b[0].total_cmp(&a[0]).then(b[1].total_cmp(&a[1])));
    let mut area = 0.0;
    let mut level = reference[1];
    for p in sorted {
        if p[1] > level {
            area += (p[0] - reference[0]) * (p[1] - level);
            level = p[1];
        }
    }
    Ok(area)
}

/// Empirical return samples of one policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySampleSet {
    pub policy_id: String,
    pub samples: Vec<Vec<f64>>,
}

impl PolicySampleSet {
    pub fn new(policy_id: impl Into<String>, samples: Vec<Vec<f64>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch("policy sample set is empty"));
        }
        uniform_dim(&samples)?;
        Ok(PolicySampleSet {
            policy_id: policy_id.into(),
            samples,
        })
    }

    pub fn k(&self) -> usize {
        self.samples[0].len()
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.samples.len() as f64;
        (0..self.k())
            .map(|d| self.samples.iter().map(|z| z[d]).sum::<f64>() / n)
            .collect()
    }

    /// Population standard deviation per dimension.
    pub fn stdev(&self) -> Vec<f64> {
        let n = self.samples.len() as f64;
        self.mean()
            .iter()
            .enumerate()
            .map(|(d, m)| (self.samples.iter().map(|z| (z[d] - m).powi(2)).sum::<f64>() / n).sqrt())
            .collect()
    }
}

/// Intersection of half-spaces `w_i . z >= c_i`, each `w_i` on the simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub rows: Vec<(Vec<f64>, f64)>,
}

impl Constraint {
    pub fn new(rows: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        for (w, _) in &rows {
            check_simplex(w)?;
        }
        Ok(Constraint { rows })
    }

    pub fn is_satisfied(&self, z: &[f64]) -> bool {
        self.rows.iter().all(|(w, c)| dot(w, z) >= *c)
    }
}

fn check_simplex(w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > 1e-12 {
        return Err(Error::Validation(format!("weights {w:?} are not on the simplex")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean and spread weights; `(w1, w2)` together lie on the simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceWeights {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    /// `+1` rewards spread, `-1` penalizes it.
    pub sign: f64,
}

impl VarianceWeights {
    pub fn new(w1: Vec<f64>, w2: Vec<f64>, sign: f64) -> Result<Self> {
        if w1.len() != w2.len() {
            return Err(Error::shape("variance weights", w1.len(), w2.len()));
        }
        if sign != 1.0 && sign != -1.0 {
            return Err(Error::Validation(format!("sign must be +1 or -1, got {sign}")));
        }
        let joined: Vec<f64> = w1.iter().chain(&w2).copied().collect();
        check_simplex(&joined)?;
        Ok(VarianceWeights { w1, w2, sign })
    }
}

/// Uniform draw from the probability simplex (normalized exponentials).
pub fn sample_simplex<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    let mut w: Vec<f64> = e.iter().map(|x| x / total).collect();
    // push the rounding residue into the largest entry
    let residue = 1.0 - w.iter().sum::<f64>();
    if let Some(max) = w.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        *max += residue;
    }
    w
}

/// `m` random constraints of `n_rows` rows; each `c_i` is uniform over the
/// pool's projected range `[min w_i.z, max w_i.z]`.
pub fn gen_constraints<R: Rng + ?Sized>(
    m: usize,
    n_rows: usize,
    pool: &[&[f64]],
    rng: &mut R,
) -> Result<Vec<Constraint>> {
    let k = pool.first().map(|z| z.len()).ok_or(Error::EmptyBatch("constraint pool is empty"))?;
    (0..m)
        .map(|_| {
            let rows = (0..n_rows)
                .map(|_| {
                    let w = sample_simplex(k, rng);
                    let (lo, hi) = pool.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| {
                        let v = dot(&w, z);
                        (lo.min(v), hi.max(v))
                    });
                    let c = lo + (hi - lo) * rng.random::<f64>();
                    (w, c)
                })
                .collect();
            Constraint::new(rows)
        })
        .collect()
}

pub fn gen_variance_weights<R: Rng + ?Sized>(
    m: usize,
    k: usize,
    sign: f64,
    rng: &mut R,
) -> Result<Vec<VarianceWeights>> {
    (0..m)
        .map(|_| {
            let w = sample_simplex(2 * k, rng);
            VarianceWeights::new(w[..k].to_vec(), w[k..].to_vec(), sign)
        })
        .collect()
}

/// Fraction of samples satisfying every row.
pub fn constraint_utility(constraint: &Constraint, policy: &PolicySampleSet) -> f64 {
    let hits = policy.samples.iter().filter(|z| constraint.is_satisfied(z)).count();
    hits as f64 / policy.samples.len() as f64
}

pub fn variance_utility(weights: &VarianceWeights, policy: &PolicySampleSet) -> Result<f64> {
    if weights.w1.len() != policy.k() {
        return Err(Error::shape("variance weights", policy.k(), weights.w1.len()));
    }
    let mean_term = dot(&weights.w1, &policy.mean());
    if weights.w2.iter().all(|v| *v == 0.0) {
        return Ok(mean_term);
    }
    if policy.samples.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "policy '{}' has {} sample(s); spread needs at least 2",
            policy.policy_id,
            policy.samples.len()
        )));
    }
    Ok(mean_term + weights.sign * dot(&weights.w2, &policy.stdev()))
}

/// `(1/m) * sum_p max_policy u(p, policy)`.
fn mean_of_max(
    n_prefs: usize,
    policies: &[PolicySampleSet],
    mut u: impl FnMut(usize, &PolicySampleSet) -> Result<f64>,
) -> Result<f64> {
    if policies.is_empty() {
        return Err(Error::EmptyBatch("no policies to score"));
    }
    if n_prefs == 0 {
        return Err(Error::EmptyBatch("no preferences to score against"));
    }
    let mut total = 0.0;
    for p in 0..n_prefs {
        let mut best = f64::NEG_INFINITY;
        for policy in policies {
            best = best.max(u(p, policy)?);
        }
        total += best;
    }
    Ok(total / n_prefs as f64)
}

pub fn constraint_satisfaction(policies: &[PolicySampleSet], constraints: &[Constraint]) -> Result<f64> {
    if policies.iter().any(|p| p.samples.is_empty()) {
        return Err(Error::EmptyBatch("policy sample set is empty"));
    }
    mean_of_max(constraints.len(), policies, |i, pol| {
        Ok(constraint_utility(&constraints[i], pol))
    })
}

pub fn variance_objective(policies: &[PolicySampleSet], weights: &[VarianceWeights]) -> Result<f64> {
    mean_of_max(weights.len(), policies, |i, pol| variance_utility(&weights[i], pol))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub constraint_satisfaction: f64,
    pub variance_objective: f64,
    pub m: usize,
    pub seed: u64,
}
