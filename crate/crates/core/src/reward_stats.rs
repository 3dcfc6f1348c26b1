//! Return normalization and percentile-rank bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-dimension extrema over every return seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningBounds {
    pub z_min: Vec<f64>,
    pub z_max: Vec<f64>,
}

impl RunningBounds {
    /// Bounds of a single observation (`z_min = z_max = z`).
    pub fn from_first(z: &[f64]) -> Result<Self> {
        check_finite(z)?;
        Ok(RunningBounds {
            z_min: z.to_vec(),
            z_max: z.to_vec(),
        })
    }

    /// Folds a whole sample set; errors on an empty set.
    pub fn from_samples<'a, I>(samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut iter = samples.into_iter();
        let first = iter.next().ok_or(Error::EmptyBatch("bounds need one sample"))?;
        let mut bounds = RunningBounds::from_first(first)?;
        for z in iter {
            bounds.update(z)?;
        }
        Ok(bounds)
    }

    pub fn k(&self) -> usize {
        self.z_min.len()
    }

    /// Componentwise min/max merge.
    pub fn update(&mut self, z: &[f64]) -> Result<()> {
        if z.len() != self.k() {
            return Err(Error::shape("bounds update", self.k(), z.len()));
        }
        check_finite(z)?;
        for ((lo, hi), v) in self.z_min.iter_mut().zip(self.z_max.iter_mut()).zip(z) {
            *lo = lo.min(*v);
            *hi = hi.max(*v);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &RunningBounds) -> Result<()> {
        self.update(&other.z_min)?;
        self.update(&other.z_max)
    }

    pub fn normalization(&self) -> Result<NormalizationParams> {
        NormalizationParams::from_bounds(self)
    }
}

fn check_finite(z: &[f64]) -> Result<()> {
    match z.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Data(format!("non-finite reward component {i}: {}", z[i]))),
        None => Ok(()),
    }
}

/// Shared-scale affine map into `[0,1]^K`: `(z - z_mid) / d + 1/2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub z_mid: Vec<f64>,
    pub d: f64,
}

impl NormalizationParams {
    pub fn from_bounds(bounds: &RunningBounds) -> Result<Self> {
        let d = bounds
            .z_min
            .iter()
            .zip(&bounds.z_max)
            .map(|(lo, hi)| hi - lo)
            .fold(0.0, f64::max);
        if !(d > 0.0) {
            return Err(Error::DegenerateRange);
        }
        let z_mid = bounds
            .z_min
            .iter()
            .zip(&bounds.z_max)
            .map(|(lo, hi)| (lo + hi) / 2.0)
            .collect();
        Ok(NormalizationParams { z_mid, d })
    }

    pub fn k(&self) -> usize {
        self.z_mid.len()
    }

    pub fn normalize(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.k() {
            return Err(Error::shape("normalize", self.k(), z.len()));
        }
        if !(self.d > 0.0) {
            return Err(Error::DegenerateRange);
        }
        Ok(z.iter()
            .zip(&self.z_mid)
            .map(|(v, mid)| (v - mid) / self.d + 0.5)
            .collect())
    }
}

/// Sorted reference scores per utility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentileTable {
    #[serde(rename = "n")]
    n_samples: usize,
    scores: Vec<Vec<f64>>,
}

impl PercentileTable {
    /// `scores_per_utility[i]` holds utility `i`'s score on every reference sample.
    pub fn new(mut scores_per_utility: Vec<Vec<f64>>) -> Result<Self> {
        let n = scores_per_utility.first().map_or(0, Vec::len);
        if let Some(bad) = scores_per_utility.iter().find(|s| s.len() != n) {
            return Err(Error::shape("percentile table rows", n, bad.len()));
        }
        if scores_per_utility.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::Data("NaN utility score in percentile table".into()));
        }
        for row in &mut scores_per_utility {
            row.sort_by(f64::total_cmp);
        }
        Ok(PercentileTable {
            n_samples: n,
            scores: scores_per_utility,
        })
    }

    /// Builds the table from per-sample utility vectors (`utilities[s][i]`).
    pub fn from_sample_utilities(utilities: &[Vec<f64>]) -> Result<Self> {
        let m = utilities.first().map_or(0, Vec::len);
        let mut columns = vec![Vec::with_capacity(utilities.len()); m];
        for u in utilities {
            if u.len() != m {
                return Err(Error::shape("utility vector", m, u.len()));
            }
            for (col, v) in columns.iter_mut().zip(u) {
                col.push(*v);
            }
        }
        PercentileTable::new(columns)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn m(&self) -> usize {
        self.scores.len()
    }

    pub fn scores(&self, i: usize) -> Option<&[f64]> {
        self.scores.get(i).map(Vec::as_slice)
    }

    /// `(# reference scores <= score) / N`.
    pub fn percentile_rank(&self, i: usize, score: f64) -> Result<f64> {
        let refs = self
            .scores
            .get(i)
            .ok_or_else(|| Error::State(format!("no reference scores for utility {i}")))?;
        if refs.is_empty() {
            return Err(Error::State("empty percentile table".into()));
        }
        let rank = refs.partition_point(|r| *r <= score);
        Ok(rank as f64 / refs.len() as f64)
    }

    /// Percentiles of one sample's utility vector under every utility.
    pub fn percentiles(&self, utilities: &[f64]) -> Result<Vec<f64>> {
        if utilities.len() != self.m() {
            return Err(Error::shape("utility vector", self.m(), utilities.len()));
        }
        utilities
            .iter()
            .enumerate()
            .map(|(i, u)| self.percentile_rank(i, *u))
            .collect()
    }
}

/// Argmax with ties going to the lowest index.
pub fn select_max_index(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::State("cannot select from an empty sequence".into()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value at index {i}")));
    }
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn update_bounds_examples() {
        let mut b = RunningBounds {
            z_min: vec![0.0, 0.0],
            z_max: vec![1.0, 1.0],
        };
        b.update(&[2.0, -1.0]).unwrap();
        assert_eq!(b.z_min, vec![0.0, -1.0]);
        assert_eq!(b.z_max, vec![2.0, 1.0]);

        let before = b.clone();
        b.update(&[0.5, 0.5]).unwrap();
        assert_eq!(b, before);

        let first = RunningBounds::from_first(&[3.0, 4.0]).unwrap();
        assert_eq!(first.z_min, first.z_max);
    }

    #[test]
    fn update_bounds_rejects_non_finite() {
        let mut b = RunningBounds::from_first(&[0.0, 0.0]).unwrap();
        assert!(matches!(b.update(&[f64::NAN, 0.0]), Err(Error::Data(_))));
        assert!(matches!(b.update(&[0.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn normalize_examples() {
        let b = RunningBounds {
            z_min: vec![0.0, 0.0],
            z_max: vec![2.0, 1.0],
        };
        let p = b.normalization().unwrap();
        assert_eq!(p.d, 2.0);
        assert_eq!(p.normalize(&[2.0, 1.0]).unwrap(), vec![1.0, 0.75]);
        assert_eq!(p.normalize(&[0.0, 0.0]).unwrap(), vec![0.0, 0.25]);
        assert_eq!(p.normalize(&p.z_mid.clone()).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn degenerate_range_is_an_error() {
        let b = RunningBounds::from_first(&[1.0, 1.0]).unwrap();
        assert!(matches!(b.normalization(), Err(Error::DegenerateRange)));
    }

    #[test]
    fn percentile_examples() {
        let t = PercentileTable::new(vec![vec![0.3, 0.1, 0.2]]).unwrap();
        assert_eq!(t.percentile_rank(0, 0.3).unwrap(), 1.0);
        assert!((t.percentile_rank(0, 0.15).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(t.percentile_rank(0, 0.0).unwrap(), 0.0);

        let single = PercentileTable::new(vec![vec![0.4]]).unwrap();
        assert_eq!(single.percentile_rank(0, 0.4).unwrap(), 1.0);
        assert_eq!(single.percentile_rank(0, 9.0).unwrap(), 1.0);
    }

    #[test]
    fn empty_table_is_a_state_error() {
        let t = PercentileTable::new(vec![vec![]]).unwrap();
        assert!(matches!(t.percentile_rank(0, 1.0), Err(Error::State(_))));
        assert!(matches!(t.percentile_rank(3, 1.0), Err(Error::State(_))));
    }

    #[test]
    fn select_max_index_examples() {
        let p = [0.41, 0.52, 0.6767, 0.3, 0.5, 0.61, 0.2, 0.1, 0.66, 0.05];
        assert_eq!(select_max_index(&p).unwrap(), 2);
        assert_eq!(select_max_index(&[0.5, 0.5, 0.5]).unwrap(), 0);
        assert_eq!(select_max_index(&[0.9]).unwrap(), 0);
        assert!(matches!(select_max_index(&[]), Err(Error::State(_))));
    }

    #[test]
    fn table_snapshot_json_shape() {
        let t = PercentileTable::new(vec![vec![0.2, 0.1], vec![0.5, 0.7]]).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"{"n":2,"scores":[[0.1,0.2],[0.5,0.7]]}"#);
    }

    proptest! {
        #[test]
        fn percentile_matches_brute_force(
            refs in prop::collection::vec(-5.0f64..5.0, 1..60),
            score in -6.0f64..6.0,
        ) {
            let t = PercentileTable::new(vec![refs.clone()]).unwrap();
            let count = refs.iter().filter(|r| **r <= score).count();
            prop_assert_eq!(t.percentile_rank(0, score).unwrap(), count as f64 / refs.len() as f64);
        }

        #[test]
        fn percentile_invariant_under_increasing_transform(
            refs in prop::collection::vec(-2.0f64..2.0, 1..40),
            score in -2.0f64..2.0,
        ) {
            let f = |x: f64| 3.0 * x.exp() + 1.0;
            let t = PercentileTable::new(vec![refs.clone()]).unwrap();
            let t2 = PercentileTable::new(vec![refs.iter().map(|x| f(*x)).collect()]).unwrap();
            prop_assert_eq!(t.percentile_rank(0, score).unwrap(), t2.percentile_rank(0, f(score)).unwrap());
        }

        #[test]
        fn normalization_preserves_dominance(
            a in prop::collection::vec(-10.0f64..10.0, 3),
            b in prop::collection::vec(-10.0f64..10.0, 3),
        ) {
            let bounds = RunningBounds::from_samples([a.as_slice(), b.as_slice(), &[-10.0, -10.0, -10.0][..]]).unwrap();
            let p = bounds.normalization().unwrap();
            let (na, nb) = (p.normalize(&a).unwrap(), p.normalize(&b).unwrap());
            let dom = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(u, v)| u >= v);
            prop_assert_eq!(dom(&a, &b), dom(&na, &nb));
            prop_assert_eq!(dom(&b, &a), dom(&nb, &na));
            prop_assert!(na.iter().chain(&nb).all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        }

        #[test]
        fn bounds_fold_is_order_independent(
            mut samples in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..30),
        ) {
            let forward = RunningBounds::from_samples(samples.iter().map(Vec::as_slice)).unwrap();
            samples.reverse();
            let backward = RunningBounds::from_samples(samples.iter().map(Vec::as_slice)).unwrap();
            prop_assert_eq!(forward, backward);
        }
    }
}
