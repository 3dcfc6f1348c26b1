//! Inference-time token selection from a user preference vector.

use serde::{Deserialize, Serialize};

use crate::ensemble::UtilityEnsemble;
use crate::error::{Error, Result};
use crate::labeler::augment_prompt;
use crate::reward_stats::{select_max_index, NormalizationParams, RunningBounds};

/// Per-objective weights, each in `[0, 1]`. No simplex constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PreferenceVector(Vec<f64>);

impl PreferenceVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Validation("preference vector is empty".into()));
        }
        if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("preference w[{i}] = {v} is outside [0,1]")));
        }
        Ok(PreferenceVector(w))
    }

    /// Parses `"0.7,0.3"`.
    pub fn parse(csv: &str) -> Result<Self> {
        let w = csv
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Validation(format!("bad preference component '{s}': {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        PreferenceVector::new(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }
}

/// Observed raw reward range per objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBounds {
    pub r_min: Vec<f64>,
    pub r_max: Vec<f64>,
}

impl RewardBounds {
    pub fn new(r_min: Vec<f64>, r_max: Vec<f64>) -> Result<Self> {
        if r_min.len() != r_max.len() {
            return Err(Error::shape("reward bounds", r_min.len(), r_max.len()));
        }
        if let Some(i) = (0..r_min.len()).find(|&i| !(r_min[i] <= r_max[i])) {
            return Err(Error::Validation(format!(
                "r_min[{i}] = {} exceeds r_max[{i}] = {}",
                r_min[i], r_max[i]
            )));
        }
        Ok(RewardBounds { r_min, r_max })
    }

    pub fn k(&self) -> usize {
        self.r_min.len()
    }
}

impl From<&RunningBounds> for RewardBounds {
    fn from(b: &RunningBounds) -> Self {
        RewardBounds {
            r_min: b.z_min.clone(),
            r_max: b.z_max.clone(),
        }
    }
}

/// `z_i = w_i (r_max_i - r_min_i) + r_min_i`.
pub fn preference_to_reward(w: &PreferenceVector, bounds: &RewardBounds) -> Result<Vec<f64>> {
    if w.k() != bounds.k() {
        return Err(Error::shape("preference dimension", bounds.k(), w.k()));
    }
    Ok(w.weights()
        .iter()
        .zip(bounds.r_min.iter().zip(&bounds.r_max))
        .map(|(wi, (lo, hi))| wi * (hi - lo) + lo)
        .collect())
}

const CUBE_SLACK: f64 = 1e-9;

/// Raw argmax of `U_i(normalize(z_target))`, ties to the lowest index.
///
/// Components that normalize outside `[0,1]` are clamped to the cube.
pub fn select_inference_index(
    z_target: &[f64],
    ensemble: &UtilityEnsemble,
    norm: &NormalizationParams,
) -> Result<usize> {
    let mut z = norm.normalize(z_target)?;
    // the bound endpoints themselves can land a rounding error outside
    if z.iter().any(|v| !(-CUBE_SLACK..=1.0 + CUBE_SLACK).contains(v)) {
        log::warn!("target reward {z_target:?} normalizes outside the unit cube; clamping");
    }
    for v in &mut z {
        *v = v.clamp(0.0, 1.0);
    }
    select_max_index(&ensemble.evaluate(&z)?)
}

/// Preference -> target reward -> utility index -> augmented prompt.
pub fn build_inference_prompt(
    x: &str,
    w: &PreferenceVector,
    bounds: &RewardBounds,
    ensemble: &UtilityEnsemble,
    norm: &NormalizationParams,
    token: &str,
) -> Result<(usize, String)> {
    let z = preference_to_reward(w, bounds)?;
    let index = select_inference_index(&z, ensemble, norm)?;
    Ok((index, augment_prompt(x, index, token)?))
}
