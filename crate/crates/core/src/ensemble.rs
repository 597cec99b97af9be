//! Weighted ensembles of learned residuals sharing one nominal field.
//!
//! The ensemble residual is `Σ_j α_j d_j(x, u)`. Weights are either fixed and
//! equal, or fitted on a held-out validation segment. Since the one-step loss
//! is quadratic in `α`, fitting works on a precomputed Gram matrix and never
//! re-evaluates the networks.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TrajectoryDataset;
use crate::knode::{check_residual_shape, frozen_step, network_input, JacobianMode, KnodeError, KnodeModel};
use crate::net::{Adam, AdamConfig, MlpParams};
use crate::ode::{finite_difference_jacobians, DiscreteDynamics, DynamicsFn, IntegratorConfig, OdeError};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble needs at least one member")]
    NoMembers,
    #[error("{weights} weights for {members} members")]
    WeightCount { weights: usize, members: usize },
    #[error("validation split leaves {train} training and {validation} validation samples")]
    Split { train: usize, validation: usize },
    #[error(transparent)]
    Knode(#[from] KnodeError),
}

/// `α_j = 1/L` for `j < L`, with the last weight set to `1 − Σ_{j<L} α_j`.
pub fn equal_weights(count: usize) -> DVector<f64> {
    let mut w = DVector::from_element(count, 1.0 / count as f64);
    if count > 0 {
        let head: f64 = w.rows(0, count - 1).sum();
        w[count - 1] = 1.0 - head;
    }
    w
}

/// Euclidean projection onto `{α : α ≥ 0, Σ α = 1}`.
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if s - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

/// Euclidean projection onto `{α : Σ α = 1}`.
pub fn project_affine(v: &DVector<f64>) -> DVector<f64> {
    let shift = (v.sum() - 1.0) / v.len() as f64;
    v.map(|x| x - shift)
}

/// First `⌈fraction·M⌉` samples for training, the rest for validation.
pub fn chronological_split(
    data: &TrajectoryDataset,
    fraction: f64,
) -> Result<(TrajectoryDataset, TrajectoryDataset), EnsembleError> {
    let m = data.len();
    let cut = ((fraction * m as f64).ceil() as usize).min(m);
    if cut < 2 || m - cut < 2 {
        return Err(EnsembleError::Split {
            train: cut,
            validation: m - cut,
        });
    }
    Ok((data.slice(0..cut), data.slice(cut..m)))
}

#[derive(Clone)]
pub struct KnodeEnsemble {
    pub nominal: Arc<dyn DynamicsFn>,
    pub members: Vec<MlpParams>,
    pub weights: DVector<f64>,
    pub integrator: IntegratorConfig,
    pub jacobian_mode: JacobianMode,
}

impl std::fmt::Debug for KnodeEnsemble {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KnodeEnsemble")
            .field("members", &self.members.len())
            .field("weights", &self.weights.as_slice())
            .field("jacobian_mode", &self.jacobian_mode)
            .finish()
    }
}

impl KnodeEnsemble {
    pub fn new(
        nominal: Arc<dyn DynamicsFn>,
        members: Vec<MlpParams>,
        weights: DVector<f64>,
        integrator: IntegratorConfig,
    ) -> Result<Self, EnsembleError> {
        if members.is_empty() {
            return Err(EnsembleError::NoMembers);
        }
        if weights.len() != members.len() {
            return Err(EnsembleError::WeightCount {
                weights: weights.len(),
                members: members.len(),
            });
        }
        for member in &members {
            check_residual_shape(nominal.as_ref(), member)?;
        }
        Ok(Self {
            nominal,
            members,
            weights,
            integrator,
            jacobian_mode: JacobianMode::default(),
        })
    }

    pub fn with_jacobian_mode(mut self, mode: JacobianMode) -> Self {
        self.jacobian_mode = mode;
        self
    }

    /// Single-member ensemble with weight one.
    pub fn from_model(model: &KnodeModel) -> Self {
        Self {
            nominal: model.nominal.clone(),
            members: vec![model.residual.clone()],
            weights: DVector::from_element(1, 1.0),
            integrator: model.integrator,
            jacobian_mode: JacobianMode::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member(&self, j: usize) -> KnodeModel {
        KnodeModel {
            nominal: self.nominal.clone(),
            residual: self.members[j].clone(),
            integrator: self.integrator,
        }
    }

    /// `Σ_j α_j d_j(x, u)`.
    pub fn residual_at(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, KnodeError> {
        let z = network_input(x, u);
        let mut acc = DVector::zeros(x.len());
        for (member, &w) in self.members.iter().zip(self.weights.iter()) {
            acc.axpy(w, &member.forward(&z)?, 1.0);
        }
        Ok(acc)
    }
}

pub fn ensemble_predict(
    ens: &KnodeEnsemble,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<DVector<f64>, KnodeError> {
    let d = ens.residual_at(x, u)?;
    Ok(frozen_step(ens.nominal.as_ref(), x, u, t, dt, &d)?)
}

/// Central-difference Jacobians of a continuous vector field.
fn field_jacobians(
    f: &dyn DynamicsFn,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
    h: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (x.len(), u.len());
    let mut jx = DMatrix::zeros(n, n);
    let mut ju = DMatrix::zeros(n, m);
    let mut xp = x.clone();
    for j in 0..n {
        let s = h * x[j].abs().max(1.0);
        xp[j] = x[j] + s;
        let fp = f.eval(&xp, u, t);
        xp[j] = x[j] - s;
        let fm = f.eval(&xp, u, t);
        xp[j] = x[j];
        jx.set_column(j, &((fp - fm) / (2.0 * s)));
    }
    let mut up = u.clone();
    for j in 0..m {
        let s = h * u[j].abs().max(1.0);
        up[j] = u[j] + s;
        let fp = f.eval(x, &up, t);
        up[j] = u[j] - s;
        let fm = f.eval(x, &up, t);
        up[j] = u[j];
        ju.set_column(j, &((fp - fm) / (2.0 * s)));
    }
    (jx, ju)
}

impl DiscreteDynamics for KnodeEnsemble {
    fn state_dim(&self) -> usize {
        self.nominal.state_dim()
    }
    fn input_dim(&self) -> usize {
        self.nominal.input_dim()
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, k: usize) -> Result<DVector<f64>, OdeError> {
        let dt = self.integrator.dt;
        let d = self.residual_at(x, u).map_err(|_| OdeError::Dimension {
            expected: self.state_dim() + self.input_dim(),
            got: x.len() + u.len(),
        })?;
        frozen_step(self.nominal.as_ref(), x, u, k as f64 * dt, dt, &d)
    }
    fn jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        k: usize,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), OdeError> {
        match self.jacobian_mode {
            JacobianMode::FiniteDifference => finite_difference_jacobians(self, x, u, k, 1e-6),
            JacobianMode::Analytic => {
                let (n, m) = (x.len(), u.len());
                let dt = self.integrator.dt;
                let (mut jx, mut ju) = field_jacobians(self.nominal.as_ref(), x, u, k as f64 * dt, 1e-6);
                let z = network_input(x, u);
                for (member, &w) in self.members.iter().zip(self.weights.iter()) {
                    let jd = member.input_jacobian(&z).map_err(|_| OdeError::Dimension {
                        expected: member.input_dim(),
                        got: n + m,
                    })?;
                    jx += jd.columns(0, n) * w;
                    ju += jd.columns(n, m) * w;
                }
                let a = DMatrix::identity(n, n) + jx * dt;
                let b = ju * dt;
                if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                    return Err(OdeError::NonFinite { stage: 1, time: k as f64 * dt });
                }
                Ok((a, b))
            }
        }
    }
}

/// Validation loss as an explicit quadratic `(αᵀGα + 2hᵀα + c)/(M−1)` in the
/// ensemble weights.
#[derive(Debug, Clone)]
pub struct WeightObjective {
    pub gram: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub count: usize,
}

impl WeightObjective {
    pub fn new(
        nominal: &dyn DynamicsFn,
        members: &[MlpParams],
        data: &TrajectoryDataset,
    ) -> Result<Self, EnsembleError> {
        if members.is_empty() {
            return Err(EnsembleError::NoMembers);
        }
        if data.len() < 2 {
            return Err(KnodeError::TooFewSamples {
                needed: 2,
                got: data.len(),
            }
            .into());
        }
        let count = data.len() - 1;
        let (n, m) = (data.state_dim(), data.input_dim());
        let mut inputs = DMatrix::zeros(n + m, count);
        let mut base = DMatrix::zeros(n, count);
        let mut dts = Vec::with_capacity(count);
        for (i, tr) in data.transitions().enumerate() {
            inputs.column_mut(i).copy_from(&network_input(tr.x, tr.u));
            let pred = frozen_step(nominal, tr.x, tr.u, tr.t, tr.dt, &DVector::zeros(n)).map_err(KnodeError::from)?;
            base.column_mut(i).copy_from(&(pred - tr.next));
            dts.push(tr.dt);
        }
        // Scaled member contributions Δt_i·d_j(x_i, u_i), flattened per member.
        let mut contrib = DMatrix::zeros(n * count, members.len());
        for (j, member) in members.iter().enumerate() {
            check_residual_shape(nominal, member)?;
            let (mut out, _) = member.forward_batch(&inputs).map_err(KnodeError::from)?;
            for (i, mut col) in out.column_iter_mut().enumerate() {
                col *= dts[i];
            }
            contrib.column_mut(j).copy_from_slice(out.as_slice());
        }
        let flat_base = DVector::from_column_slice(base.as_slice());
        Ok(Self {
            gram: contrib.transpose() * &contrib,
            linear: contrib.transpose() * &flat_base,
            constant: flat_base.norm_squared(),
            count,
        })
    }

    pub fn loss(&self, alpha: &DVector<f64>) -> f64 {
        let quad = alpha.dot(&(&self.gram * alpha)) + 2.0 * self.linear.dot(alpha) + self.constant;
        quad.max(0.0) / self.count as f64
    }

    pub fn gradient(&self, alpha: &DVector<f64>) -> DVector<f64> {
        (&self.gram * alpha + &self.linear) * (2.0 / self.count as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// `α ≥ 0`, `Σ α = 1`.
    #[default]
    Simplex,
    /// `Σ α = 1` only.
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    pub mode: WeightMode,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Decoupled decay applied by the optimizer before projection.
    pub weight_decay: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            mode: WeightMode::Simplex,
            iterations: 2000,
            learning_rate: 0.01,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFit {
    pub weights: DVector<f64>,
    pub loss: f64,
    /// Validation loss of the equal-weight starting point.
    pub equal_loss: f64,
    pub history: Vec<f64>,
}

/// Projected Adam from equal weights. Returns the best feasible iterate, which
/// is never worse than the equal-weight start.
pub fn fit_weights(objective: &WeightObjective, config: &WeightConfig) -> WeightFit {
    let l = objective.gram.nrows();
    let project = |v: &DVector<f64>| match config.mode {
        WeightMode::Simplex => project_simplex(v),
        WeightMode::Affine => project_affine(v),
    };
    let start = equal_weights(l);
    let equal_loss = objective.loss(&start);
    let mut alpha = start.clone();
    let mut best = (equal_loss, start);
    let mut adam = Adam::new(l, AdamConfig::new(config.learning_rate, config.weight_decay));
    let mut history = Vec::with_capacity(config.iterations + 1);
    history.push(equal_loss);
    for _ in 0..config.iterations {
        let grad = objective.gradient(&alpha);
        if adam.update(alpha.iter_mut(), grad.iter()).is_err() {
            break;
        }
        alpha = project(&alpha);
        let loss = objective.loss(&alpha);
        history.push(loss);
        if loss < best.0 {
            best = (loss, alpha.clone());
        }
    }
    WeightFit {
        weights: best.1,
        loss: best.0,
        equal_loss,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Layer;
    use crate::ode::FnDynamics;
    use nalgebra::dvector;
    use std::collections::BTreeMap;

    #[test]
    fn equal_weights_sum_to_one() {
        for l in 1..12 {
            let w = equal_weights(l);
            assert_eq!(w.len(), l);
            assert!((w.sum() - 1.0).abs() < 1e-15);
        }
        assert_eq!(equal_weights(1)[0], 1.0);
    }

    #[test]
    fn simplex_projection_examples() {
        assert_eq!(project_simplex(&dvector![0.2, 0.8]), dvector![0.2, 0.8]);
        assert_eq!(project_simplex(&dvector![2.0, 0.0]), dvector![1.0, 0.0]);
        let p = project_simplex(&dvector![1.0, 1.0, -5.0]);
        assert!((p - dvector![0.5, 0.5, 0.0]).amax() < 1e-15);
    }

    fn constant_member(value: f64) -> MlpParams {
        MlpParams {
            layers: vec![Layer {
                weights: DMatrix::zeros(1, 2),
                bias: DVector::from_element(1, value),
            }],
            seed: 0,
        }
    }

    #[test]
    fn single_member_matches_knode() {
        let nominal: Arc<dyn DynamicsFn> =
            Arc::new(FnDynamics::new(1, 1, |x: &DVector<f64>, u: &DVector<f64>, _t| dvector![-x[0] + u[0]]));
        let member = MlpParams::init(&[2, 6, 1], 9).unwrap();
        let cfg = IntegratorConfig::new(0.05).unwrap();
        let model = KnodeModel::new(nominal, member, cfg).unwrap();
        let ens = KnodeEnsemble::from_model(&model);
        let (x, u) = (dvector![0.4], dvector![-0.1]);
        assert_eq!(
            ensemble_predict(&ens, &x, &u, 0.0, 0.05).unwrap(),
            crate::knode::one_step_predict(&model, &x, &u, 0.0, 0.05).unwrap()
        );
    }

    #[test]
    fn weights_recover_the_right_member() {
        // Data generated by x' = 1; members predict residuals 0 and 1 on top of
        // a zero nominal field, so the optimum puts all weight on the second.
        let nominal: Arc<dyn DynamicsFn> =
            Arc::new(FnDynamics::new(1, 1, |_x: &DVector<f64>, _u: &DVector<f64>, _t| dvector![0.0]));
        let dt = 0.1;
        let times: Vec<f64> = (0..20).map(|k| k as f64 * dt).collect();
        let states = times.iter().map(|t| dvector![*t]).collect();
        let inputs = vec![dvector![0.0]; 20];
        let data = TrajectoryDataset::new(times, states, inputs, BTreeMap::new()).unwrap();
        let members = vec![constant_member(0.0), constant_member(1.0)];
        let obj = WeightObjective::new(nominal.as_ref(), &members, &data).unwrap();
        let fit = fit_weights(&obj, &WeightConfig::default());
        assert!(fit.loss <= fit.equal_loss);
        assert!((fit.weights[1] - 1.0).abs() < 1e-3, "{:?}", fit.weights);
        assert!(fit.loss < 1e-7);
        assert!(fit.weights.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn split_is_chronological() {
        let times: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let states = times.iter().map(|t| dvector![*t]).collect();
        let data = TrajectoryDataset::new(times, states, vec![dvector![0.0]; 10], BTreeMap::new()).unwrap();
        let (train, val) = chronological_split(&data, 0.75).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(val.len(), 2);
        assert_eq!(val.times[0], 8.0);
        assert!(chronological_split(&data, 0.95).is_err());
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let nominal: Arc<dyn DynamicsFn> = Arc::new(FnDynamics::new(2, 1, |x: &DVector<f64>, u: &DVector<f64>, _t| {
            dvector![x[1], -x[0].sin() + 0.5 * u[0]]
        }));
        let members = vec![MlpParams::init(&[3, 5, 2], 1).unwrap(), MlpParams::init(&[3, 5, 2], 2).unwrap()];
        let ens = KnodeEnsemble::new(nominal, members, dvector![0.3, 0.7], IntegratorConfig::new(0.02).unwrap())
            .unwrap();
        let (x, u) = (dvector![0.4, -0.3], dvector![0.8]);
        let (a_fd, b_fd) = ens.jacobians(&x, &u, 0).unwrap();
        let ens = ens.with_jacobian_mode(JacobianMode::Analytic);
        let (a, b) = ens.jacobians(&x, &u, 0).unwrap();
        assert!((a - a_fd).amax() < 1e-8);
        assert!((b - b_fd).amax() < 1e-8);
    }
}
