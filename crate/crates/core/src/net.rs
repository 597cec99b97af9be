//! Multilayer perceptron with tanh hidden layers, hand-written reverse mode,
//! and Adam with decoupled weight decay.
//!
//! The networks here are small (one hidden layer of at most a few hundred
//! units), so everything is dense nalgebra. Full-batch training goes through
//! [`MlpParams::forward_batch`] / [`MlpParams::backward_batch`], which keep
//! one column per sample so the heavy lifting is a handful of GEMMs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("a network needs at least two layer sizes, got {0}")]
    TooFewLayers(usize),
    #[error("layer sizes must be positive")]
    ZeroSizedLayer,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite gradient entry")]
    NonFiniteGradient,
    #[error("parameter shapes do not match")]
    ShapeMismatch,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

/// One affine layer `y = W z + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }
    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// Parameters of an MLP. Hidden layers use tanh; the last layer is linear.
///
/// The same type doubles as the container for parameter gradients and for the
/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MlpCheckpoint", try_from = "MlpCheckpoint")]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    /// Seed the parameters were initialized from.
    pub seed: u64,
}

/// Activations saved by [`MlpParams::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchCache {
    /// `activations[0]` is the input batch; `activations[i]` the output of
    /// hidden layer `i`.
    activations: Vec<DMatrix<f64>>,
}

impl MlpParams {
    /// Uniform `±1/√fan_in` weights and zero biases, reproducible from `seed`.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self, NetError> {
        if layer_sizes.len() < 2 {
            return Err(NetError::TooFewLayers(layer_sizes.len()));
        }
        if layer_sizes.contains(&0) {
            return Err(NetError::ZeroSizedLayer);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..=bound));
                Layer {
                    weights,
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers, seed })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weights: DMatrix::zeros(l.outputs(), l.inputs()),
                    bias: DVector::zeros(l.outputs()),
                })
                .collect(),
            seed: self.seed,
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Layer::outputs));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.shape() == b.weights.shape() && a.bias.len() == b.bias.len())
    }

    /// Iterates over all scalars in a fixed order: per layer, weights in
    /// column-major order followed by the bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(l.bias.as_slice()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.as_mut_slice().iter_mut().chain(l.bias.as_mut_slice()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), NetError> {
        if flat.len() != self.param_count() {
            return Err(NetError::Dimension {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        for (dst, src) in self.values_mut().zip(flat) {
            *dst = *src;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.values_mut() {
            *v *= alpha;
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    fn check_input(&self, len: usize) -> Result<(), NetError> {
        if len != self.input_dim() {
            return Err(NetError::Dimension {
                expected: self.input_dim(),
                got: len,
            });
        }
        Ok(())
    }

    /// Evaluates the network at a single input.
    pub fn forward(&self, z: &DVector<f64>) -> Result<DVector<f64>, NetError> {
        self.check_input(z.len())?;
        let last = self.layers.len() - 1;
        let mut a = z.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.bias.clone();
            y.gemv(1.0, &layer.weights, &a, 1.0);
            if i < last {
                y.apply(|v| *v = v.tanh());
            }
            a = y;
        }
        Ok(a)
    }

    /// Jacobian of the output with respect to the input, `out × in`.
    pub fn input_jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>, NetError> {
        self.check_input(z.len())?;
        let last = self.layers.len() - 1;
        let mut a = z.clone();
        let mut jac = DMatrix::identity(z.len(), z.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.bias.clone();
            y.gemv(1.0, &layer.weights, &a, 1.0);
            jac = &layer.weights * jac;
            if i < last {
                y.apply(|v| *v = v.tanh());
                for (r, h) in y.iter().enumerate() {
                    jac.row_mut(r).scale_mut(1.0 - h * h);
                }
            }
            a = y;
        }
        Ok(jac)
    }

    /// Reverse-mode gradients of `upstreamᵀ · forward(z)` with respect to the
    /// parameters and to `z`.
    pub fn backward(&self, z: &DVector<f64>, upstream: &DVector<f64>) -> Result<(MlpParams, DVector<f64>), NetError> {
        self.check_input(z.len())?;
        let zb = DMatrix::from_column_slice(z.len(), 1, z.as_slice());
        let ub = DMatrix::from_column_slice(upstream.len(), 1, upstream.as_slice());
        let (_, cache) = self.forward_batch(&zb)?;
        let (grad, dz) = self.backward_batch(&cache, &ub)?;
        Ok((grad, dz.column(0).into_owned()))
    }

    /// Evaluates a batch stored one sample per column.
    pub fn forward_batch(&self, z: &DMatrix<f64>) -> Result<(DMatrix<f64>, BatchCache), NetError> {
        self.check_input(z.nrows())?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len());
        activations.push(z.clone());
        let mut out = DMatrix::zeros(0, 0);
        for (i, layer) in self.layers.iter().enumerate() {
            let input = &activations[i];
            let mut y = &layer.weights * input;
            for mut col in y.column_iter_mut() {
                col += &layer.bias;
            }
            if i < last {
                y.apply(|v| *v = v.tanh());
                activations.push(y);
            } else {
                out = y;
            }
        }
        Ok((out, BatchCache { activations }))
    }

    /// Backpropagates `upstream` (one column per sample) through a cached
    /// forward pass. Parameter gradients are summed over the batch.
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        upstream: &DMatrix<f64>,
    ) -> Result<(MlpParams, DMatrix<f64>), NetError> {
        if upstream.nrows() != self.output_dim() {
            return Err(NetError::Dimension {
                expected: self.output_dim(),
                got: upstream.nrows(),
            });
        }
        if upstream.ncols() != cache.activations[0].ncols() {
            return Err(NetError::Dimension {
                expected: cache.activations[0].ncols(),
                got: upstream.ncols(),
            });
        }
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[i];
            let gw = &delta * input.transpose();
            let gb = delta.column_sum();
            let mut back = layer.weights.transpose() * &delta;
            if i > 0 {
                // input is the tanh output of the previous layer
                back.zip_apply(input, |d, h| *d *= 1.0 - h * h);
            }
            grads.push(Layer { weights: gw, bias: gb });
            delta = back;
        }
        grads.reverse();
        Ok((
            MlpParams {
                layers: grads,
                seed: self.seed,
            },
            delta,
        ))
    }
}

/// Adam hyperparameters. Weight decay is decoupled: `p ← p − lr·wd·p` is
/// applied before each Adam update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::new(1e-3, 0.0)
    }
}

/// Adam moment estimates over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// One bias-corrected update of `params` along `grad`, in place.
    pub fn update<'p, 'g>(
        &mut self,
        params: impl Iterator<Item = &'p mut f64>,
        grad: impl Iterator<Item = &'g f64>,
    ) -> Result<(), NetError> {
        let grad: Vec<f64> = grad.copied().collect();
        if grad.len() != self.len() {
            return Err(NetError::ShapeMismatch);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(NetError::NonFiniteGradient);
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut count = 0;
        for (i, p) in params.enumerate() {
            let g = grad[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= c.learning_rate * c.weight_decay * *p;
            *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            count += 1;
        }
        if count != grad.len() {
            return Err(NetError::ShapeMismatch);
        }
        Ok(())
    }
}

/// Optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    inner: Adam,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        Self {
            inner: Adam::new(params.param_count(), config),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.inner.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.inner.config
    }
}

/// Applies one Adam step to `params` in place.
pub fn adam_step(params: &mut MlpParams, grad: &MlpParams, state: &mut AdamState) -> Result<(), NetError> {
    if !params.same_shape(grad) || state.inner.len() != params.param_count() {
        return Err(NetError::ShapeMismatch);
    }
    state.inner.update(params.values_mut(), grad.values())
}

/// On-disk form of [`MlpParams`]: layer sizes plus row-major weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
    pub layers: Vec<LayerCheckpoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCheckpoint {
    /// One inner vector per output row.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl From<MlpParams> for MlpCheckpoint {
    fn from(p: MlpParams) -> Self {
        Self {
            layer_sizes: p.layer_sizes(),
            seed: p.seed,
            layers: p
                .layers
                .iter()
                .map(|l| LayerCheckpoint {
                    weights: l.weights.row_iter().map(|r| r.iter().copied().collect()).collect(),
                    bias: l.bias.iter().copied().collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<MlpCheckpoint> for MlpParams {
    type Error = NetError;

    fn try_from(c: MlpCheckpoint) -> Result<Self, NetError> {
        if c.layer_sizes.len() < 2 {
            return Err(NetError::TooFewLayers(c.layer_sizes.len()));
        }
        if c.layers.len() + 1 != c.layer_sizes.len() {
            return Err(NetError::Checkpoint("layer count does not match layer sizes".into()));
        }
        let mut layers = Vec::with_capacity(c.layers.len());
        for (i, l) in c.layers.into_iter().enumerate() {
            let (fan_in, fan_out) = (c.layer_sizes[i], c.layer_sizes[i + 1]);
            if l.weights.len() != fan_out || l.weights.iter().any(|r| r.len() != fan_in) || l.bias.len() != fan_out {
                return Err(NetError::Checkpoint(format!("layer {i} has the wrong shape")));
            }
            let weights = DMatrix::from_fn(fan_out, fan_in, |r, col| l.weights[r][col]);
            let bias = DVector::from_vec(l.bias);
            if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
                return Err(NetError::Checkpoint(format!("layer {i} has non-finite entries")));
            }
            layers.push(Layer { weights, bias });
        }
        Ok(MlpParams { layers, seed: c.seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn constant_net(sizes: &[usize], value: f64) -> MlpParams {
        let mut p = MlpParams::init(sizes, 0).unwrap();
        for v in p.values_mut() {
            *v = value;
        }
        p
    }

    #[test]
    fn parameter_count() {
        assert_eq!(MlpParams::init(&[2, 64, 2], 0).unwrap().param_count(), 2 * 64 + 64 + 64 * 2 + 2);
        assert_eq!(MlpParams::init(&[3, 64, 2], 0).unwrap().param_count(), 386);
        let quad = MlpParams::init(&[17, 8, 13], 3).unwrap();
        assert_eq!(quad.layer_sizes(), vec![17, 8, 13]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = MlpParams::init(&[3, 16, 2], 9).unwrap();
        assert_eq!(a, MlpParams::init(&[3, 16, 2], 9).unwrap());
        assert_ne!(a, MlpParams::init(&[3, 16, 2], 10).unwrap());
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.layers[0].weights.iter().all(|w| w.abs() <= bound));
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_rejects_degenerate_shapes() {
        assert_eq!(MlpParams::init(&[3], 0), Err(NetError::TooFewLayers(1)));
        assert_eq!(MlpParams::init(&[3, 0, 1], 0), Err(NetError::ZeroSizedLayer));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = constant_net(&[3, 5, 2], 0.0);
        assert_eq!(p.forward(&dvector![1.0, -2.0, 7.0]).unwrap(), dvector![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let p = MlpParams {
            layers: vec![Layer {
                weights: DMatrix::identity(3, 3),
                bias: DVector::zeros(3),
            }],
            seed: 0,
        };
        let z = dvector![0.3, -1.0, 2.5];
        assert_eq!(p.forward(&z).unwrap(), z);
    }

    #[test]
    fn hand_evaluated_scalar_network() {
        let p = constant_net(&[1, 1, 1], 1.0);
        let y = p.forward(&dvector![0.0]).unwrap()[0];
        assert!((y - (1f64.tanh() + 1.0)).abs() < 1e-15);
        assert!((y - 1.76159).abs() < 1e-5);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let p = MlpParams::init(&[3, 4, 2], 0).unwrap();
        assert_eq!(
            p.forward(&dvector![1.0]),
            Err(NetError::Dimension { expected: 3, got: 1 })
        );
        assert!(p.backward(&dvector![1.0, 2.0, 3.0], &dvector![1.0]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = MlpParams::init(&[2, 6, 3], 1).unwrap();
        let (g, dz) = p.backward(&dvector![0.2, 0.4], &DVector::zeros(3)).unwrap();
        assert!(g.values().all(|&v| v == 0.0));
        assert!(dz.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let p = MlpParams {
            layers: vec![Layer {
                weights: dmatrix![1.0, 2.0; 3.0, 4.0; 5.0, 6.0],
                bias: dvector![0.1, 0.2, 0.3],
            }],
            seed: 0,
        };
        let z = dvector![0.5, -1.5];
        let up = dvector![1.0, -2.0, 0.5];
        let (g, dz) = p.backward(&z, &up).unwrap();
        assert_eq!(g.layers[0].weights, &up * z.transpose());
        assert_eq!(g.layers[0].bias, up);
        assert_eq!(dz, p.layers[0].weights.transpose() * &up);
    }

    #[test]
    fn batch_and_single_paths_agree() {
        let p = MlpParams::init(&[3, 7, 2], 5).unwrap();
        let z = dmatrix![0.1, -0.3; 0.7, 0.2; -1.0, 0.9];
        let (out, _) = p.forward_batch(&z).unwrap();
        for c in 0..2 {
            let single = p.forward(&z.column(c).into_owned()).unwrap();
            assert!((out.column(c) - single).amax() < 1e-14);
        }
    }

    #[test]
    fn input_jacobian_matches_backward() {
        let p = MlpParams::init(&[3, 9, 2], 11).unwrap();
        let z = dvector![0.4, -0.2, 1.1];
        let jac = p.input_jacobian(&z).unwrap();
        for r in 0..2 {
            let mut e = DVector::zeros(2);
            e[r] = 1.0;
            let (_, dz) = p.backward(&z, &e).unwrap();
            assert!((jac.row(r).transpose() - dz).amax() < 1e-14);
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = MlpParams::init(&[2, 4, 1], 2).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&p, AdamConfig::new(0.1, 0.0));
        let zero = p.zeros_like();
        for _ in 0..5 {
            adam_step(&mut p, &zero, &mut s).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.step_count(), 5);
    }

    #[test]
    fn adam_first_step() {
        let cfg = AdamConfig::new(0.1, 0.0);
        let mut adam = Adam::new(1, cfg);
        let mut p = [0.0];
        adam.update(p.iter_mut(), [1.0].iter()).unwrap();
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-16);
    }

    #[test]
    fn adam_minimizes_square() {
        let mut adam = Adam::new(1, AdamConfig::new(0.05, 0.0));
        let mut p = [1.0f64];
        let mut converged_at = None;
        for it in 0..500 {
            let g = [2.0 * p[0]];
            adam.update(p.iter_mut(), g.iter()).unwrap();
            if p[0].abs() < 1e-3 && converged_at.is_none() {
                converged_at = Some(it);
            }
        }
        assert!(converged_at.is_some(), "final p = {}", p[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = MlpParams::init(&[1, 2, 1], 0).unwrap();
        let mut g = p.zeros_like();
        g.layers[0].bias[1] = f64::NAN;
        let mut s = AdamState::new(&p, AdamConfig::default());
        assert_eq!(adam_step(&mut p, &g, &mut s), Err(NetError::NonFiniteGradient));
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut adam = Adam::new(1, AdamConfig::new(0.1, 0.5));
        let mut p = [2.0];
        adam.update(p.iter_mut(), [0.0].iter()).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut p = MlpParams::init(&[3, 5, 2], 77).unwrap();
        p.layers[1].bias[0] = 0.1 + 0.2;
        p.layers[0].weights[(4, 2)] = std::f64::consts::PI * 1e-300;
        let text = serde_json::to_string(&p).unwrap();
        let back: MlpParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn checkpoint_shape_is_validated() {
        let p = MlpParams::init(&[2, 3, 1], 0).unwrap();
        let mut ck = MlpCheckpoint::from(p);
        ck.layers[0].weights.pop();
        assert!(matches!(MlpParams::try_from(ck), Err(NetError::Checkpoint(_))));
    }
}
