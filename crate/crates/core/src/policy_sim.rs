//! Synthetic response environment and a token-conditioned categorical policy.
//!
//! A "response" is one draw from a discrete style, each with its own
//! Gaussian reward profile. The policy maps a conditioning token (a utility
//! index) to a distribution over styles. Training follows the same two
//! stages as the language-model pipeline: cross-entropy on percentile-labeled
//! offline data, then online iterations that generate, relabel, reject
//! low-percentile samples and retrain on a FIFO buffer.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ensemble::UtilityEnsemble;
use crate::error::{Error, Result};
use crate::labeler::{label_dataset, LabeledSample, RawSample, DEFAULT_TOKEN};
use crate::preference::{preference_to_reward, select_inference_index, PreferenceVector, RewardBounds};
use crate::reward_stats::{select_max_index, NormalizationParams, PercentileTable, RunningBounds};

// ChaCha stream ids, so that each stage draws from its own sequence.
const STREAM_OFFLINE: u64 = 1;
const STREAM_ONLINE: u64 = 16;
const STREAM_EVAL: u64 = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub mean: Vec<f64>,
    pub stdev: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnvDoc", into = "EnvDoc")]
pub struct SynthEnv {
    k: usize,
    styles: Vec<Style>,
}

#[derive(Serialize, Deserialize)]
struct EnvDoc {
    k: usize,
    styles: Vec<Style>,
}

impl TryFrom<EnvDoc> for SynthEnv {
    type Error = Error;

    fn try_from(doc: EnvDoc) -> Result<Self> {
        SynthEnv::new(doc.k, doc.styles)
    }
}

impl From<SynthEnv> for EnvDoc {
    fn from(env: SynthEnv) -> Self {
        EnvDoc {
            k: env.k,
            styles: env.styles,
        }
    }
}

impl SynthEnv {
    pub fn new(k: usize, styles: Vec<Style>) -> Result<Self> {
        if styles.len() < 2 {
            return Err(Error::Config("environment needs at least 2 styles".into()));
        }
        for (i, s) in styles.iter().enumerate() {
            if s.mean.len() != k || s.stdev.len() != k {
                return Err(Error::Config(format!("style {i} does not have {k} dimensions")));
            }
            if s.stdev.iter().any(|v| !(*v > 0.0)) || s.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("style {i} needs finite means and positive stdevs")));
            }
        }
        if styles.iter().all(|s| s.mean == styles[0].mean) {
            return Err(Error::Config("all style means are identical; no trade-off".into()));
        }
        Ok(SynthEnv { k, styles })
    }

    /// Two objectives: nine styles on a quarter-circle front plus four
    /// dominated interior styles.
    pub fn bundled_two_objective() -> Self {
        Self::arc_with_interior(9, 0.08)
    }

    /// Like [`SynthEnv::bundled_two_objective`] with `arc` front styles and a
    /// shared stdev.
    pub fn arc_with_interior(arc: usize, stdev: f64) -> Self {
        let mut styles: Vec<Style> = (0..arc)
            .map(|s| {
                let theta = std::f64::consts::FRAC_PI_2 * s as f64 / (arc - 1).max(1) as f64;
                Style {
                    mean: vec![0.2 + theta.cos(), 0.2 + theta.sin()],
                    stdev: vec![stdev; 2],
                }
            })
            .collect();
        for mean in [[0.55, 0.55], [0.8, 0.4], [0.4, 0.8], [0.45, 0.45]] {
            styles.push(Style {
                mean: mean.to_vec(),
                stdev: vec![stdev; 2],
            });
        }
        SynthEnv::new(2, styles).expect("bundled environment is valid")
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn styles(&self) -> &[Style] {
        &self.styles
    }

    pub fn n_styles(&self) -> usize {
        self.styles.len()
    }

    /// `mean + stdev * N(0, I)`.
    pub fn sample_response<R: Rng + ?Sized>(&self, style_id: usize, rng: &mut R) -> Result<Vec<f64>> {
        let style = self.styles.get(style_id).ok_or(Error::InvalidStyle {
            id: style_id,
            count: self.styles.len(),
        })?;
        Ok(style
            .mean
            .iter()
            .zip(&style.stdev)
            .map(|(m, s)| {
                let n: f64 = StandardNormal.sample(rng);
                m + s * n
            })
            .collect())
    }

    /// Componentwise `min(mean - stdev)` over styles: dominated by any
    /// reasonable policy's mean return.
    pub fn reference_point(&self) -> Vec<f64> {
        (0..self.k)
            .map(|d| {
                self.styles
                    .iter()
                    .map(|s| s.mean[d] - s.stdev[d])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }
}

/// Logits `[M tokens + 1 base row] x [S styles]`; the last row is the
/// unconditioned base policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionedPolicy {
    pub logits: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl ConditionedPolicy {
    /// Uniform over styles for every row.
    pub fn uniform(m_tokens: usize, n_styles: usize) -> Self {
        ConditionedPolicy {
            logits: vec![vec![0.0; n_styles]; m_tokens + 1],
            temperature: 1.0,
        }
    }

    pub fn m_tokens(&self) -> usize {
        self.logits.len() - 1
    }

    pub fn n_styles(&self) -> usize {
        self.logits[0].len()
    }

    fn row(&self, token: Option<usize>) -> Result<&[f64]> {
        let idx = token.unwrap_or(self.m_tokens());
        if idx > self.m_tokens() {
            return Err(Error::Validation(format!(
                "token {idx} out of range for a {}-token policy",
                self.m_tokens()
            )));
        }
        Ok(&self.logits[idx])
    }

    /// Style distribution for a token (`None` = base row).
    pub fn probabilities(&self, token: Option<usize>) -> Result<Vec<f64>> {
        Ok(softmax(self.row(token)?, self.temperature))
    }

    pub fn sample_style<R: Rng + ?Sized>(&self, token: Option<usize>, rng: &mut R) -> Result<usize> {
        let probs = self.probabilities(token)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (s, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(s);
            }
        }
        Ok(probs.len() - 1)
    }
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// One supervised example: the conditioning token and the style it should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenStyle {
    pub token: usize,
    pub style: usize,
}

/// Mean cross-entropy of each example's style under its token's row.
pub fn cross_entropy(policy: &ConditionedPolicy, data: &[TokenStyle]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch("cross-entropy needs data"));
    }
    let mut total = 0.0;
    for d in data {
        let p = policy.probabilities(Some(d.token))?;
        let ps = *p.get(d.style).ok_or(Error::InvalidStyle {
            id: d.style,
            count: p.len(),
        })?;
        total -= ps.ln();
    }
    Ok(total / data.len() as f64)
}

/// Full-batch gradient descent on the mean cross-entropy.
///
/// Returns the trained policy and the loss before each epoch plus the final
/// loss (`epochs + 1` values).
pub fn offline_train(
    policy: &ConditionedPolicy,
    data: &[TokenStyle],
    epochs: usize,
    lr: f64,
) -> Result<(ConditionedPolicy, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyBatch("offline training needs labeled data"));
    }
    let m = policy.m_tokens();
    let s = policy.n_styles();
    // Per-token style counts are a sufficient statistic for the loss.
    let mut counts = vec![vec![0.0; s]; m];
    for d in data {
        if d.token >= m {
            return Err(Error::Validation(format!("token {} out of range", d.token)));
        }
        if d.style >= s {
            return Err(Error::InvalidStyle { id: d.style, count: s });
        }
        counts[d.token][d.style] += 1.0;
    }
    let n = data.len() as f64;
    let t = policy.temperature;
    let mut out = policy.clone();
    let mut losses = Vec::with_capacity(epochs + 1);
    for epoch in 0..=epochs {
        let mut loss = 0.0;
        let mut grads = vec![vec![0.0; s]; m];
        for (row, c) in counts.iter().enumerate() {
            let row_n: f64 = c.iter().sum();
            if row_n == 0.0 {
                continue;
            }
            let p = softmax(&out.logits[row], t);
            for j in 0..s {
                if c[j] > 0.0 {
                    loss -= c[j] * p[j].ln();
                }
                grads[row][j] = (row_n * p[j] - c[j]) / (n * t);
            }
        }
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: epoch, member: 0 });
        }
        losses.push(loss);
        if epoch == epochs {
            break;
        }
        for (row, g) in out.logits.iter_mut().zip(&grads) {
            for (l, gj) in row.iter_mut().zip(g) {
                *l -= lr * gj;
            }
        }
    }
    Ok((out, losses))
}

/// Fraction of examples whose token row puts its highest probability on
/// the example's style.
pub fn conditional_accuracy(policy: &ConditionedPolicy, data: &[TokenStyle]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch("accuracy needs data"));
    }
    let mut hits = 0usize;
    for d in data {
        if select_max_index(&policy.probabilities(Some(d.token))?)? == d.style {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferedSample {
    pub chosen_index: usize,
    pub style: usize,
    pub rewards: Vec<f64>,
    pub utilities: Vec<f64>,
    /// Percentile of the chosen utility when the sample was admitted.
    pub admitted_percentile: f64,
}

/// FIFO training buffer of accepted online samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineBuffer {
    capacity: usize,
    samples: VecDeque<BufferedSample>,
}

impl OnlineBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(OnlineBuffer {
            capacity,
            samples: VecDeque::new(),
        })
    }

    pub fn push(&mut self, sample: BufferedSample) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &BufferedSample> {
        self.samples.iter()
    }

    pub fn training_data(&self) -> Vec<TokenStyle> {
        self.samples
            .iter()
            .map(|s| TokenStyle {
                token: s.chosen_index,
                style: s.style,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    pub n_generate: usize,
    /// Minimum percentile of the chosen utility for a sample to be kept.
    pub tau: f64,
    /// Optional per-utility thresholds overriding `tau`.
    pub tau_per_index: Option<Vec<f64>>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub buffer_capacity: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            n_generate: 2000,
            tau: 0.7,
            tau_per_index: None,
            epochs: 500,
            learning_rate: 0.5,
            buffer_capacity: 10_000,
        }
    }
}

impl OnlineConfig {
    fn threshold(&self, index: usize) -> f64 {
        self.tau_per_index
            .as_ref()
            .and_then(|t| t.get(index).copied())
            .unwrap_or(self.tau)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub generated: usize,
    pub accepted: usize,
    pub accept_rate: f64,
    /// Mean `U_t` over the samples generated under token `t`.
    pub mean_utility_per_token: Vec<f64>,
}

/// Normalizes with the training-time parameters and scores every utility.
fn score(z: &[f64], ensemble: &UtilityEnsemble, norm: &NormalizationParams) -> Result<Vec<f64>> {
    ensemble.evaluate(&norm.normalize(z)?)
}

/// One online round: generate, relabel against buffer + batch, reject,
/// append, retrain on the buffer.
pub fn online_iteration<R: Rng + ?Sized>(
    policy: &ConditionedPolicy,
    env: &SynthEnv,
    ensemble: &UtilityEnsemble,
    bounds: &RunningBounds,
    buffer: &OnlineBuffer,
    config: &OnlineConfig,
    rng: &mut R,
) -> Result<(ConditionedPolicy, OnlineBuffer, IterationStats)> {
    let m = ensemble.m();
    if policy.m_tokens() != m {
        return Err(Error::shape("policy token rows", m, policy.m_tokens()));
    }
    if env.k() != ensemble.k() {
        return Err(Error::shape("environment objectives", ensemble.k(), env.k()));
    }
    if config.n_generate == 0 {
        return Err(Error::EmptyBatch("online iteration generates nothing"));
    }
    let norm = bounds.normalization()?;

    let mut batch = Vec::with_capacity(config.n_generate);
    for _ in 0..config.n_generate {
        let token = rng.random_range(0..m);
        let style = policy.sample_style(Some(token), rng)?;
        let rewards = env.sample_response(style, rng)?;
        let utilities = score(&rewards, ensemble, &norm)?;
        batch.push((token, style, rewards, utilities));
    }

    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    for (token, _, _, u) in &batch {
        sums[*token] += u[*token];
        counts[*token] += 1;
    }
    let mean_utility_per_token = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| if *c == 0 { f64::NAN } else { s / *c as f64 })
        .collect();

    let reference: Vec<Vec<f64>> = buffer
        .iter()
        .map(|s| s.utilities.clone())
        .chain(batch.iter().map(|b| b.3.clone()))
        .collect();
    let table = PercentileTable::from_sample_utilities(&reference)?;

    let mut next_buffer = buffer.clone();
    let mut accepted = 0;
    for (_, style, rewards, utilities) in batch {
        let percentiles = table.percentiles(&utilities)?;
        let chosen = select_max_index(&percentiles)?;
        if percentiles[chosen] < config.threshold(chosen) {
            continue;
        }
        accepted += 1;
        next_buffer.push(BufferedSample {
            chosen_index: chosen,
            style,
            rewards,
            utilities,
            admitted_percentile: percentiles[chosen],
        });
    }

    let stats = IterationStats {
        generated: config.n_generate,
        accepted,
        accept_rate: accepted as f64 / config.n_generate as f64,
        mean_utility_per_token,
    };
    if accepted == 0 {
        log::warn!("online iteration accepted no samples; policy unchanged");
        return Ok((policy.clone(), next_buffer, stats));
    }
    let (trained, _) = offline_train(
        policy,
        &next_buffer.training_data(),
        config.epochs,
        config.learning_rate,
    )?;
    Ok((trained, next_buffer, stats))
}

/// Mean normalized utility per member over `n` responses conditioned on
/// `token_index`; each utility is min-max normalized over those responses.
pub fn evaluate_consistency<R: Rng + ?Sized>(
    policy: &ConditionedPolicy,
    env: &SynthEnv,
    ensemble: &UtilityEnsemble,
    bounds: &RunningBounds,
    token_index: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::EmptyBatch("consistency evaluation needs responses"));
    }
    let norm = bounds.normalization()?;
    let mut values = vec![Vec::with_capacity(n); ensemble.m()];
    for _ in 0..n {
        let style = policy.sample_style(Some(token_index), rng)?;
        let z = env.sample_response(style, rng)?;
        for (col, u) in values.iter_mut().zip(score(&z, ensemble, &norm)?) {
            col.push(u);
        }
    }
    Ok(values
        .iter()
        .map(|col| {
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                col.iter().map(|v| (v - lo) / (hi - lo)).sum::<f64>() / n as f64
            } else {
                0.5
            }
        })
        .collect())
}

/// Mean raw reward of `n` responses under the token each preference selects.
pub fn sweep_pareto<R: Rng + ?Sized>(
    policy: &ConditionedPolicy,
    env: &SynthEnv,
    ensemble: &UtilityEnsemble,
    bounds: &RunningBounds,
    preferences: &[PreferenceVector],
    n: usize,
    rng: &mut R,
) -> Result<Vec<SweepPoint>> {
    if n == 0 {
        return Err(Error::EmptyBatch("sweep needs responses per preference"));
    }
    let norm = bounds.normalization()?;
    let reward_bounds = RewardBounds::from(bounds);
    preferences
        .iter()
        .map(|w| {
            let target = preference_to_reward(w, &reward_bounds)?;
            let token = select_inference_index(&target, ensemble, &norm)?;
            let mut mean = vec![0.0; env.k()];
            for _ in 0..n {
                let style = policy.sample_style(Some(token), rng)?;
                for (acc, v) in mean.iter_mut().zip(env.sample_response(style, rng)?) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= n as f64);
            Ok(SweepPoint {
                preference: w.weights().to_vec(),
                token,
                mean_reward: mean,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub preference: Vec<f64>,
    pub token: usize,
    pub mean_reward: Vec<f64>,
}

/// `count` evenly spaced two-objective preferences `(t, 1 - t)`.
pub fn linear_preferences(count: usize) -> Vec<PreferenceVector> {
    (0..count)
        .map(|i| {
            let t = if count == 1 { 0.5 } else { i as f64 / (count - 1) as f64 };
            PreferenceVector::new(vec![t, 1.0 - t]).expect("t in [0,1]")
        })
        .collect()
}

/// `count` preferences for `k` objectives: [`linear_preferences`] for two,
/// otherwise evenly spaced points on the closed walk `e_0 -> e_1 -> ... -> e_0`
/// along the simplex edges.
pub fn sweep_preferences(count: usize, k: usize) -> Vec<PreferenceVector> {
    if k == 2 {
        return linear_preferences(count);
    }
    (0..count)
        .map(|i| {
            let pos = i as f64 * k as f64 / count as f64;
            let edge = (pos.floor() as usize).min(k - 1);
            let t = pos - edge as f64;
            let mut w = vec![0.0; k];
            w[edge] += 1.0 - t;
            w[(edge + 1) % k] += t;
            PreferenceVector::new(w).expect("convex weights")
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Offline samples drawn from the base (uniform) policy.
    pub n_offline: usize,
    pub offline_epochs: usize,
    pub learning_rate: f64,
    pub online_iters: usize,
    pub online: OnlineConfig,
    /// Responses per token for the per-stage utility statistics.
    pub n_stat: usize,
    pub token: String,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_offline: 2000,
            offline_epochs: 500,
            learning_rate: 0.5,
            online_iters: 2,
            online: OnlineConfig::default(),
            n_stat: 200,
            token: DEFAULT_TOKEN.to_string(),
            seed: 0,
        }
    }
}

/// Policy and statistics after one training stage (offline = stage 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub iter: usize,
    pub policy: ConditionedPolicy,
    pub accept_rate: f64,
    /// Mean `U_t` of responses conditioned on token `t` after this stage.
    pub mean_utility_per_token: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub bounds: RunningBounds,
    pub labeled: Vec<LabeledSample>,
    pub stages: Vec<StageResult>,
    pub buffer: OnlineBuffer,
}

impl PipelineRun {
    pub fn final_policy(&self) -> &ConditionedPolicy {
        &self.stages.last().expect("offline stage always present").policy
    }
}

/// Base-policy rollouts used as the offline dataset.
pub fn generate_offline_dataset<R: Rng + ?Sized>(
    env: &SynthEnv,
    n: usize,
    rng: &mut R,
) -> Result<Vec<RawSample>> {
    if n == 0 {
        return Err(Error::EmptyBatch("offline dataset size must be positive"));
    }
    (0..n)
        .map(|i| {
            let style = rng.random_range(0..env.n_styles());
            Ok(RawSample {
                prompt_id: format!("p{i:06}"),
                prompt: format!("prompt {i}"),
                response: format!("style-{style}"),
                rewards: env.sample_response(style, rng)?,
                style: Some(style),
            })
        })
        .collect()
}

fn stage_utilities(
    policy: &ConditionedPolicy,
    env: &SynthEnv,
    ensemble: &UtilityEnsemble,
    norm: &NormalizationParams,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_EVAL);
    (0..ensemble.m())
        .map(|t| {
            let mut total = 0.0;
            for _ in 0..n {
                let style = policy.sample_style(Some(t), &mut rng)?;
                let z = env.sample_response(style, &mut rng)?;
                total += score(&z, ensemble, norm)?[t];
            }
            Ok(total / n.max(1) as f64)
        })
        .collect()
}

/// Offline labeling and cross-entropy training followed by
/// `config.online_iters` online iterations; every stage's policy is kept.
pub fn run_pipeline(
    env: &SynthEnv,
    ensemble: &UtilityEnsemble,
    config: &PipelineConfig,
) -> Result<PipelineRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STREAM_OFFLINE);
    let raw = generate_offline_dataset(env, config.n_offline, &mut rng)?;
    let bounds = RunningBounds::from_samples(raw.iter().map(|s| s.rewards.as_slice()))?;
    run_pipeline_from_samples(env, ensemble, &raw, bounds, config)
}

/// Same as [`run_pipeline`] but starting from an existing offline dataset
/// whose samples carry their producing style.
pub fn run_pipeline_from_samples(
    env: &SynthEnv,
    ensemble: &UtilityEnsemble,
    raw: &[RawSample],
    bounds: RunningBounds,
    config: &PipelineConfig,
) -> Result<PipelineRun> {
    let norm = bounds.normalization()?;
    let (labeled, _) = label_dataset(raw, ensemble, &bounds, &config.token)?;
    let data = labeled
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let style = s
                .raw
                .style
                .ok_or_else(|| Error::Data(format!("sample {i} has no style")))?;
            Ok(TokenStyle {
                token: s.chosen_index,
                style,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let base = ConditionedPolicy::uniform(ensemble.m(), env.n_styles());
    let (offline, _) = offline_train(&base, &data, config.offline_epochs, config.learning_rate)?;
    let mut stages = vec![StageResult {
        iter: 0,
        mean_utility_per_token: stage_utilities(&offline, env, ensemble, &norm, config.n_stat, config.seed)?,
        policy: offline,
        accept_rate: 1.0,
    }];

    let mut buffer = OnlineBuffer::new(config.online.buffer_capacity)?;
    for iter in 1..=config.online_iters {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STREAM_ONLINE + iter as u64);
        let current = &stages.last().expect("non-empty").policy;
        let (policy, next, stats) =
            online_iteration(current, env, ensemble, &bounds, &buffer, &config.online, &mut rng)?;
        buffer = next;
        stages.push(StageResult {
            iter,
            mean_utility_per_token: stage_utilities(&policy, env, ensemble, &norm, config.n_stat, config.seed)?,
            policy,
            accept_rate: stats.accept_rate,
        });
    }
    Ok(PipelineRun {
        bounds,
        labeled,
        stages,
        buffer,
    })
}
