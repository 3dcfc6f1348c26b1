//! Small experiment drivers shared by the command line and the test suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::UtilityEnsemble;
use crate::error::{Error, Result};
use crate::metrics::{hypervolume_2d, pareto_front};
use crate::policy_sim::{
    evaluate_consistency, sweep_pareto, sweep_preferences, PipelineRun, Style, SweepPoint, SynthEnv,
};
use crate::reward_stats::select_max_index;

const STREAM_SWEEP: u64 = 2048;
const STREAM_CONSISTENCY: u64 = 4096;

/// Hypervolume of the swept mean rewards against `reference`. Points that do
/// not strictly dominate the reference add no area and are dropped.
pub fn sweep_hypervolume(points: &[SweepPoint], reference: &[f64]) -> Result<f64> {
    let inside: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.mean_reward.clone())
        .filter(|z| z.iter().zip(reference).all(|(v, r)| v > r))
        .collect();
    if inside.is_empty() {
        return Ok(0.0);
    }
    hypervolume_2d(&pareto_front(&inside)?, reference)
}

/// Preference sweep of every stage policy of a run. All stages share one
/// random stream so their differences come from the policies alone.
pub fn sweep_stages(
    run: &PipelineRun,
    env: &SynthEnv,
    ensemble: &UtilityEnsemble,
    n_preferences: usize,
    n_responses: usize,
    seed: u64,
) -> Result<Vec<Vec<SweepPoint>>> {
    let prefs = sweep_preferences(n_preferences, env.k());
    run.stages
        .iter()
        .map(|stage| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(STREAM_SWEEP);
            sweep_pareto(&stage.policy, env, ensemble, &run.bounds, &prefs, n_responses, &mut rng)
        })
        .collect()
}

/// Two-objective environment whose styles are the best responses of the
/// ensemble's members on a quarter circle.
#[derive(Clone, Debug)]
pub struct SeparableEnv {
    pub env: SynthEnv,
    /// Style each token's utility prefers.
    pub style_of_token: Vec<usize>,
    /// Tokens that are the only ones preferring their style.
    pub sole_owners: Vec<usize>,
}

/// Candidates are `n_candidates` points `(cos t, sin t)`, `t` in `[0, pi/2]`.
/// Each member picks its best candidate, and every distinct pick becomes a
/// style with noise `stdev` on both objectives.
pub fn separable_env(ensemble: &UtilityEnsemble, n_candidates: usize, stdev: f64) -> Result<SeparableEnv> {
    if ensemble.k() != 2 {
        return Err(Error::shape("separable environment objectives", 2, ensemble.k()));
    }
    if n_candidates < 2 {
        return Err(Error::Config("need at least 2 candidate responses".into()));
    }
    let candidates: Vec<Vec<f64>> = (0..n_candidates)
        .map(|c| {
            let t = std::f64::consts::FRAC_PI_2 * c as f64 / (n_candidates - 1) as f64;
            vec![t.cos(), t.sin()]
        })
        .collect();
    let scores = candidates
        .iter()
        .map(|z| ensemble.evaluate(z))
        .collect::<Result<Vec<_>>>()?;
    let best = (0..ensemble.m())
        .map(|t| select_max_index(&scores.iter().map(|s| s[t]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;

    let mut picks = best.clone();
    picks.sort_unstable();
    picks.dedup();
    let style_of_token: Vec<usize> = best
        .iter()
        .map(|b| picks.binary_search(b).expect("pick is present"))
        .collect();
    let sole_owners = (0..ensemble.m())
        .filter(|&t| style_of_token.iter().filter(|&&s| s == style_of_token[t]).count() == 1)
        .collect();
    let styles = picks
        .iter()
        .map(|&c| Style {
            mean: candidates[c].clone(),
            stdev: vec![stdev; 2],
        })
        .collect();
    Ok(SeparableEnv {
        env: SynthEnv::new(2, styles)?,
        style_of_token,
        sole_owners,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenConsistency {
    pub token: usize,
    /// Mean normalized score of every utility under this token.
    pub means: Vec<f64>,
    pub best_utility: usize,
}

impl TokenConsistency {
    pub fn consistent(&self) -> bool {
        self.best_utility == self.token
    }
}

/// Consistency means of the final policy for each of `tokens`.
pub fn consistency_report(
    run: &PipelineRun,
    env: &SynthEnv,
    ensemble: &UtilityEnsemble,
    tokens: &[usize],
    n_responses: usize,
    seed: u64,
) -> Result<Vec<TokenConsistency>> {
    tokens
        .iter()
        .map(|&token| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(STREAM_CONSISTENCY + token as u64);
            let means = evaluate_consistency(
                run.final_policy(),
                env,
                ensemble,
                &run.bounds,
                token,
                n_responses,
                &mut rng,
            )?;
            Ok(TokenConsistency {
                token,
                best_utility: select_max_index(&means)?,
                means,
            })
        })
        .collect()
}
