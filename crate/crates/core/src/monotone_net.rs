//! Monotone feedforward networks.
//!
//! A [`MonotoneNet`] is an MLP whose weights are kept non-negative and whose
//! hidden activation is built from three non-decreasing clamps, so the scalar
//! output is non-decreasing in every input coordinate. [`StrictUtility`] adds
//! a small linear term on top of a trained network, which turns "non-decreasing"
//! into "strictly increasing".

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Saturation point of the clamped activation components.
pub const KINK: f64 = 0.5;

/// Hidden activation: `(max(x, -0.5), min(x, 0.5), clip(x, -0.5, 0.5))`.
pub fn nondecreasing_activation(x: f64) -> [f64; 3] {
    [x.max(-KINK), x.min(KINK), x.clamp(-KINK, KINK)]
}

/// Right-hand derivatives of the three activation components.
fn activation_slopes(x: f64) -> [f64; 3] {
    let upper = if x >= -KINK { 1.0 } else { 0.0 };
    let lower = if x < KINK { 1.0 } else { 0.0 };
    [upper, lower, upper * lower]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneLayer {
    /// Row-major `out x in`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl MonotoneLayer {
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        MonotoneLayer {
            weights: vec![vec![0.0; input_dim]; output_dim],
            bias: vec![0.0; output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn output_dim(&self) -> usize {
        self.bias.len()
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().flatten().chain(self.bias.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().flatten().chain(self.bias.iter_mut())
    }
}

/// Parameter-shaped gradient record (same layout as [`MonotoneNet::layers`]).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradient {
    pub layers: Vec<MonotoneLayer>,
}

impl ParamGradient {
    pub fn zeros_like(net: &MonotoneNet) -> Self {
        ParamGradient {
            layers: net
                .layers
                .iter()
                .map(|l| MonotoneLayer::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamGradient, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.params_mut().zip(b.params()) {
                *x += scale * y;
            }
        }
    }

    /// Flattened in the same order as [`MonotoneNet::params`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.params().all(|v| v.is_finite()))
    }
}

/// Monotone MLP `g: [0,1]^K -> R`.
///
/// Hidden layers are followed by [`nondecreasing_activation`], which triples
/// the width; the last layer is a scalar affine head with no activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetDoc", into = "NetDoc")]
pub struct MonotoneNet {
    layers: Vec<MonotoneLayer>,
}

#[derive(Serialize, Deserialize)]
struct NetDoc {
    layers: Vec<MonotoneLayer>,
}

impl TryFrom<NetDoc> for MonotoneNet {
    type Error = Error;

    fn try_from(doc: NetDoc) -> Result<Self> {
        MonotoneNet::new(doc.layers)
    }
}

impl From<MonotoneNet> for NetDoc {
    fn from(net: MonotoneNet) -> Self {
        NetDoc { layers: net.layers }
    }
}

impl MonotoneNet {
    /// Builds a network from explicit layers, checking that dimensions chain.
    pub fn new(layers: Vec<MonotoneLayer>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::Config("network needs at least one layer".into()));
        };
        if last.output_dim() != 1 {
            return Err(Error::shape("output layer width", 1, last.output_dim()));
        }
        for layer in &layers {
            if layer.input_dim() == 0 {
                return Err(Error::Config("layer with zero inputs".into()));
            }
            if let Some(row) = layer.weights.iter().find(|r| r.len() != layer.input_dim()) {
                return Err(Error::shape("ragged weight matrix", layer.input_dim(), row.len()));
            }
            if layer.weights.len() != layer.bias.len() {
                return Err(Error::shape("bias length", layer.weights.len(), layer.bias.len()));
            }
        }
        for pair in layers.windows(2) {
            let expected = 3 * pair[0].output_dim();
            if pair[1].input_dim() != expected {
                return Err(Error::shape("hidden layer chaining", expected, pair[1].input_dim()));
            }
        }
        Ok(MonotoneNet { layers })
    }

    /// Random non-negative initialization: weights `U[0, 1/fan_in]`, zero biases.
    ///
    /// `hidden` lists the pre-activation widths; `&[16, 16]` gives the default
    /// three fully connected layers.
    pub fn random<R: Rng + ?Sized>(k: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        if hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = k;
        for &width in hidden.iter().chain(std::iter::once(&1)) {
            let bound = 1.0 / fan_in as f64;
            let weights = (0..width)
                .map(|_| (0..fan_in).map(|_| rng.random::<f64>() * bound).collect())
                .collect();
            layers.push(MonotoneLayer {
                weights,
                bias: vec![0.0; width],
            });
            fan_in = 3 * width;
        }
        MonotoneNet::new(layers)
    }

    /// Single affine layer `w . z` (no hidden activation).
    pub fn linear(weights: Vec<f64>) -> Result<Self> {
        MonotoneNet::new(vec![MonotoneLayer {
            weights: vec![weights],
            bias: vec![0.0],
        }])
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn layers(&self) -> &[MonotoneLayer] {
        &self.layers
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(MonotoneLayer::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(MonotoneLayer::params_mut)
    }

    pub fn param_count(&self) -> usize {
        self.params().count()
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), z.len()));
        }
        Ok(())
    }

    pub fn forward(&self, z: &[f64]) -> Result<f64> {
        self.check_input(z)?;
        Ok(self.forward_unchecked(z))
    }

    pub(crate) fn forward_unchecked(&self, z: &[f64]) -> f64 {
        let (head, hidden) = self.layers.split_last().expect("non-empty");
        let mut x = z.to_vec();
        for layer in hidden {
            x = activate(&layer.affine(&x));
        }
        head.affine(&x)[0]
    }

    /// Gradient of `upstream * forward(z)` with respect to every weight and bias.
    ///
    /// Activation kinks use the right-hand derivative.
    pub fn param_gradients(&self, z: &[f64], upstream: f64) -> Result<ParamGradient> {
        self.check_input(z)?;
        let mut grad = ParamGradient::zeros_like(self);
        self.accumulate_gradients(z, upstream, &mut grad);
        Ok(grad)
    }

    /// Adds `upstream * d forward(z) / d params` into `grad` without allocating
    /// a fresh record. `z` must already have the right length.
    pub(crate) fn accumulate_gradients(&self, z: &[f64], upstream: f64, grad: &mut ParamGradient) {
        let n = self.layers.len();
        // inputs[l] is the input vector to layer l; pre[l] its pre-activation
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n - 1);
        let mut x = z.to_vec();
        for layer in &self.layers[..n - 1] {
            let a = layer.affine(&x);
            inputs.push(x);
            x = activate(&a);
            pre.push(a);
        }
        inputs.push(x);

        // delta = d out / d (pre-activation of layer l)
        let mut delta = vec![upstream];
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let g = &mut grad.layers[l];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                for (gw, xin) in g.weights[o].iter_mut().zip(&inputs[l]) {
                    *gw += d * xin;
                }
            }
            if l == 0 {
                break;
            }
            // back through the weights to the activation outputs of layer l-1
            let width = layer.input_dim();
            let mut d_act = vec![0.0; width];
            for (row, d) in layer.weights.iter().zip(&delta) {
                for (da, w) in d_act.iter_mut().zip(row) {
                    *da += d * w;
                }
            }
            let h = width / 3;
            delta = pre[l - 1]
                .iter()
                .enumerate()
                .map(|(u, &a)| {
                    let s = activation_slopes(a);
                    s[0] * d_act[u] + s[1] * d_act[h + u] + s[2] * d_act[2 * h + u]
                })
                .collect();
        }
    }

    /// Adds `step * grad` to the parameters.
    pub fn apply_gradient(&mut self, grad: &ParamGradient, step: f64) {
        for (p, g) in self.params_mut().zip(grad.layers.iter().flat_map(MonotoneLayer::params)) {
            *p += step * g;
        }
    }

    /// Clips every weight to be non-negative; biases are left alone.
    pub fn project_nonnegative(&mut self) {
        for w in self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().flatten()) {
            *w = w.max(0.0);
        }
    }


    pub fn projected(mut self) -> Self {
        self.project_nonnegative();
        self
    }

    /// `(g(0), g(1))`: the extreme outputs over the unit cube for a projected net.
    pub fn output_range(&self) -> (f64, f64) {
        let k = self.input_dim();
        (
            self.forward_unchecked(&vec![0.0; k]),
            self.forward_unchecked(&vec![1.0; k]),
        )
    }

    /// Rescales the output head so that `g(0) = 0` and `g(1) = 1`.
    ///
    /// This is a positive affine map of the output, so monotonicity and the
    /// sign of every weight are preserved. Returns `false` (and does nothing)
    /// when the net is constant on the cube.
    pub fn standardize_range(&mut self) -> bool {
        let (lo, hi) = self.output_range();
        let span = hi - lo;
        if !(span > 1e-12) || !span.is_finite() {
            return false;
        }
        let head = self.layers.last_mut().expect("non-empty");
        for w in head.weights.iter_mut().flatten() {
            *w /= span;
        }
        head.bias[0] = (head.bias[0] - lo) / span;
        true
    }
}

fn activate(pre: &[f64]) -> Vec<f64> {
    let h = pre.len();
    let mut out = vec![0.0; 3 * h];
    for (u, &a) in pre.iter().enumerate() {
        let [p, q, r] = nondecreasing_activation(a);
        out[u] = p;
        out[h + u] = q;
        out[2 * h + u] = r;
    }
    out
}

/// Strictly increasing utility `g(z) + (epsilon / K) * sum(z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StrictUtility {
    pub base: MonotoneNet,
    pub epsilon: f64,
}

impl StrictUtility {
    pub fn new(base: MonotoneNet, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(StrictUtility { base, epsilon })
    }

    pub fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    pub fn strict_forward(&self, z: &[f64]) -> Result<f64> {
        let g = self.base.forward(z)?;
        Ok(g + self.linear_term(z))
    }

    fn linear_term(&self, z: &[f64]) -> f64 {
        self.epsilon / z.len() as f64 * z.iter().sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine_net(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> MonotoneNet {
        MonotoneNet::new(vec![MonotoneLayer { weights, bias }]).unwrap()
    }

    #[test]
    fn activation_examples() {
        assert_eq!(nondecreasing_activation(0.0), [0.0, 0.0, 0.0]);
        assert_eq!(nondecreasing_activation(1.0), [1.0, 0.5, 0.5]);
        assert_eq!(nondecreasing_activation(-1.0), [-0.5, -1.0, -0.5]);
    }

    #[test]
    fn activation_components_nondecreasing_and_lipschitz() {
        let xs: Vec<f64> = (-400..=400).map(|i| i as f64 * 0.005).collect();
        for pair in xs.windows(2) {
            let a = nondecreasing_activation(pair[0]);
            let b = nondecreasing_activation(pair[1]);
            for c in 0..3 {
                assert!(b[c] >= a[c]);
                assert!(b[c] - a[c] <= pair[1] - pair[0] + 1e-15);
            }
        }
    }

    #[test]
    fn single_affine_layer_forward() {
        let net = affine_net(vec![vec![1.0, 1.0]], vec![0.0]);
        assert!((net.forward(&[0.2, 0.3]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let net = affine_net(vec![vec![1.0, 1.0]], vec![0.0]);
        assert!(matches!(net.forward(&[0.2]), Err(Error::Shape { .. })));
    }

    #[test]
    fn two_layer_net_matches_straight_line_evaluation() {
        // K=2, one hidden layer of width 2 (activation -> 6), scalar head.
        let hidden = MonotoneLayer {
            weights: vec![vec![0.8, 0.3], vec![1.5, 0.1]],
            bias: vec![-0.2, 0.1],
        };
        let head = MonotoneLayer {
            weights: vec![vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]],
            bias: vec![0.05],
        };
        let net = MonotoneNet::new(vec![hidden, head]).unwrap();
        let (z0, z1) = (0.7, 0.4);

        let a0 = 0.8 * z0 + 0.3 * z1 - 0.2;
        let a1 = 1.5 * z0 + 0.1 * z1 + 0.1;
        let mx = |x: f64| if x > -0.5 { x } else { -0.5 };
        let mn = |x: f64| if x < 0.5 { x } else { 0.5 };
        let cl = |x: f64| mn(mx(x));
        let expected = 0.1 * mx(a0) + 0.2 * mx(a1) + 0.3 * mn(a0) + 0.4 * mn(a1)
            + 0.5 * cl(a0)
            + 0.6 * cl(a1)
            + 0.05;
        assert!((net.forward(&[z0, z1]).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn new_rejects_broken_chain() {
        let hidden = MonotoneLayer::zeros(2, 4);
        let head = MonotoneLayer::zeros(4, 1);
        assert!(matches!(
            MonotoneNet::new(vec![hidden, head]),
            Err(Error::Shape { expected: 12, got: 4, .. })
        ));
    }

    #[test]
    fn strict_forward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MonotoneNet::random(3, &[4, 4], &mut rng).unwrap();
        let u = StrictUtility::new(net.clone(), 0.01).unwrap();
        let zeros = [0.0; 3];
        assert_eq!(u.strict_forward(&zeros).unwrap(), net.forward(&zeros).unwrap());
        let ones = [1.0; 3];
        let diff = u.strict_forward(&ones).unwrap() - net.forward(&ones).unwrap();
        assert!((diff - 0.01).abs() < 1e-15);

        let net2 = MonotoneNet::random(2, &[4], &mut rng).unwrap();
        let u2 = StrictUtility::new(net2.clone(), 0.02).unwrap();
        let diff = u2.strict_forward(&[1.0, 0.0]).unwrap() - net2.forward(&[1.0, 0.0]).unwrap();
        assert!((diff - 0.01).abs() < 1e-15);
    }

    #[test]
    fn strict_utility_requires_positive_epsilon() {
        let net = affine_net(vec![vec![1.0]], vec![0.0]);
        assert!(StrictUtility::new(net.clone(), 0.0).is_err());
        assert!(StrictUtility::new(net, f64::NAN).is_err());
    }

    #[test]
    fn affine_gradient_is_input() {
        let net = affine_net(vec![vec![0.3, 0.9]], vec![0.1]);
        let g = net.param_gradients(&[0.25, 0.75], 1.0).unwrap();
        assert_eq!(g.layers[0].weights[0], vec![0.25, 0.75]);
        assert_eq!(g.layers[0].bias, vec![1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = MonotoneNet::random(2, &[5, 5], &mut rng).unwrap();
        let g = net.param_gradients(&[0.3, 0.6], 0.0).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projection_clips_weights_only() {
        let mut net = affine_net(vec![vec![-0.3, 0.7]], vec![-1.0]);
        net.project_nonnegative();
        assert_eq!(net.layers()[0].weights[0], vec![0.0, 0.7]);
        assert_eq!(net.layers()[0].bias, vec![-1.0]);
    }

    #[test]
    fn standardize_maps_cube_corners_to_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = MonotoneNet::random(2, &[16, 16], &mut rng).unwrap();
        assert!(net.standardize_range());
        let (lo, hi) = net.output_range();
        assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        assert!(net.params().zip(net.clone().projected().params()).all(|(a, b)| a == b));

        let mut flat = affine_net(vec![vec![0.0, 0.0]], vec![0.4]);
        assert!(!flat.standardize_range());
    }

    #[test]
    fn serde_uses_layers_field() {
        let net = affine_net(vec![vec![1.0, 2.0]], vec![0.5]);
        let json = serde_json::to_string(&net).unwrap();
        assert_eq!(json, r#"{"layers":[{"weights":[[1.0,2.0]],"bias":[0.5]}]}"#);
        let back: MonotoneNet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
        assert!(serde_json::from_str::<MonotoneNet>(r#"{"layers":[]}"#).is_err());
    }
}
