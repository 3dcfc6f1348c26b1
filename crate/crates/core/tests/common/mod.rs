#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, Normal};
use ucmoa::monotone_net::{MonotoneLayer, MonotoneNet, ParamGradient};

/// Straight-line evaluation of a net, independent of the library's forward
/// pass. Also returns the smallest distance of any hidden pre-activation to
/// an activation kink.
pub fn reference_forward(net: &MonotoneNet, z: &[f64]) -> (f64, f64) {
    let layers = net.layers();
    let mut x = z.to_vec();
    let mut kink_gap = f64::INFINITY;
    for (l, layer) in layers.iter().enumerate() {
        let mut pre = Vec::new();
        for (row, b) in layer.weights.iter().zip(&layer.bias) {
            let mut s = *b;
            for (w, v) in row.iter().zip(&x) {
                s += w * v;
            }
            pre.push(s);
        }
        if l + 1 == layers.len() {
            return (pre[0], kink_gap);
        }
        let mut next = Vec::new();
        for p in &pre {
            kink_gap = kink_gap.min((p - 0.5).abs()).min((p + 0.5).abs());
            next.push(if *p > -0.5 { *p } else { -0.5 });
        }
        for p in &pre {
            next.push(if *p < 0.5 { *p } else { 0.5 });
        }
        for p in &pre {
            next.push(p.max(-0.5).min(0.5));
        }
        x = next;
    }
    unreachable!("a net has at least one layer")
}

/// Random architecture with Gaussian parameters, not yet projected.
pub fn random_raw_net<R: Rng>(rng: &mut R, k: usize, hidden: &[usize], bias_sd: f64) -> MonotoneNet {
    let w = Normal::new(0.0, 1.0).unwrap();
    let b = Normal::new(0.0, bias_sd).unwrap();
    let mut fan_in = k;
    let mut layers = Vec::new();
    for &width in hidden.iter().chain(std::iter::once(&1)) {
        layers.push(MonotoneLayer {
            weights: (0..width)
                .map(|_| (0..fan_in).map(|_| w.sample(rng) / fan_in as f64).collect())
                .collect(),
            bias: (0..width).map(|_| b.sample(rng)).collect(),
        });
        fan_in = 3 * width;
    }
    MonotoneNet::new(layers).unwrap()
}

pub fn random_hidden<R: Rng>(rng: &mut R) -> Vec<usize> {
    let depth = rng.random_range(0..=2);
    (0..depth).map(|_| rng.random_range(1..=8)).collect()
}

/// Central finite-difference gradient of the output w.r.t. every parameter,
/// in the library's flattening order.
pub fn finite_difference_gradient(net: &MonotoneNet, z: &[f64], h: f64) -> Vec<f64> {
    let n = net.param_count();
    (0..n)
        .map(|p| {
            let mut plus = net.clone();
            let mut minus = net.clone();
            *plus.params_mut().nth(p).unwrap() += h;
            *minus.params_mut().nth(p).unwrap() -= h;
            (reference_forward(&plus, z).0 - reference_forward(&minus, z).0) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn flatten(g: &ParamGradient) -> Vec<f64> {
    g.flatten()
}

pub fn brute_front(points: &[Vec<f64>]) -> Vec<usize> {
    let dominated = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x >= y) && a.iter().zip(b).any(|(x, y)| x > y);
    (0..points.len())
        .filter(|&i| !(0..points.len()).any(|j| dominated(&points[j], &points[i])))
        .collect()
}

pub fn brute_percentile(references: &[f64], score: f64) -> f64 {
    references.iter().filter(|r| **r <= score).count() as f64 / references.len() as f64
}

pub fn brute_argmax(values: &[f64]) -> usize {
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values.iter().position(|v| *v == best).unwrap()
}
