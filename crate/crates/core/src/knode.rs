//! Knowledge-based neural ODE models: a first-principles vector field plus a
//! learned residual field, trained on one-step predictions.
//!
//! A one-step prediction integrates `f̂(x_i, u_i) + d_θ(x_i, u_i)` over
//! `[t_i, t_{i+1}]` with both arguments frozen at the sample, so the
//! integrand is constant and the step is `x_i + Δt·(f̂ + d_θ)`. Because of
//! that, the loss gradient needs nothing beyond one backward pass through the
//! residual network per sample.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TrajectoryDataset;
use crate::net::{adam_step, AdamConfig, AdamState, MlpParams, NetError};
use crate::ode::{finite_difference_jacobians, DiscreteDynamics, DynamicsFn, IntegratorConfig, OdeError};

#[derive(Debug, Error)]
pub enum KnodeError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("dataset needs at least {needed} samples, has {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("residual network maps {got_in} -> {got_out}, model needs {want_in} -> {want_out}")]
    ResidualShape {
        want_in: usize,
        want_out: usize,
        got_in: usize,
        got_out: usize,
    },
    #[error("non-finite value while evaluating the model")]
    NonFinite,
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize, history: Vec<f64> },
}

/// Concatenates state and input into a network input `[x; u]`.
pub fn network_input(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

/// Nominal field plus one learned residual.
#[derive(Clone)]
pub struct KnodeModel {
    pub nominal: Arc<dyn DynamicsFn>,
    pub residual: MlpParams,
    pub integrator: IntegratorConfig,
}

impl std::fmt::Debug for KnodeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KnodeModel")
            .field("layer_sizes", &self.residual.layer_sizes())
            .field("integrator", &self.integrator)
            .finish()
    }
}

impl KnodeModel {
    pub fn new(
        nominal: Arc<dyn DynamicsFn>,
        residual: MlpParams,
        integrator: IntegratorConfig,
    ) -> Result<Self, KnodeError> {
        check_residual_shape(nominal.as_ref(), &residual)?;
        Ok(Self {
            nominal,
            residual,
            integrator,
        })
    }

    /// Residual `d_θ(x, u)`.
    pub fn residual_at(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, KnodeError> {
        Ok(self.residual.forward(&network_input(x, u))?)
    }
}

pub(crate) fn check_residual_shape(nominal: &dyn DynamicsFn, residual: &MlpParams) -> Result<(), KnodeError> {
    let (n, m) = (nominal.state_dim(), nominal.input_dim());
    if residual.input_dim() != n + m || residual.output_dim() != n {
        return Err(KnodeError::ResidualShape {
            want_in: n + m,
            want_out: n,
            got_in: residual.input_dim(),
            got_out: residual.output_dim(),
        });
    }
    Ok(())
}

/// `x + dt·(f̂(x, u) + residual)`: the frozen-argument integral, shared by
/// single models and ensembles.
pub(crate) fn frozen_step(
    nominal: &dyn DynamicsFn,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
    dt: f64,
    residual: &DVector<f64>,
) -> Result<DVector<f64>, OdeError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(OdeError::InvalidStep(dt));
    }
    let mut rate = nominal.eval(x, u, t);
    rate += residual;
    if rate.iter().any(|v| !v.is_finite()) {
        return Err(OdeError::NonFinite { stage: 1, time: t });
    }
    Ok(x + rate * dt)
}

/// One-step prediction of the nominal model alone under the same frozen
/// integrand.
pub fn nominal_predict(
    nominal: &dyn DynamicsFn,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<DVector<f64>, OdeError> {
    frozen_step(nominal, x, u, t, dt, &DVector::zeros(x.len()))
}

/// The nominal field alone as a discrete model, stepped like the learned
/// models so that comparisons isolate the residual.
#[derive(Clone)]
pub struct NominalModel {
    pub nominal: Arc<dyn DynamicsFn>,
    pub integrator: IntegratorConfig,
}

impl NominalModel {
    pub fn new(nominal: Arc<dyn DynamicsFn>, integrator: IntegratorConfig) -> Self {
        Self { nominal, integrator }
    }
}

impl DiscreteDynamics for NominalModel {
    fn state_dim(&self) -> usize {
        self.nominal.state_dim()
    }
    fn input_dim(&self) -> usize {
        self.nominal.input_dim()
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, k: usize) -> Result<DVector<f64>, OdeError> {
        let dt = self.integrator.dt;
        nominal_predict(self.nominal.as_ref(), x, u, k as f64 * dt, dt)
    }
    fn jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        k: usize,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), OdeError> {
        finite_difference_jacobians(self, x, u, k, 1e-6)
    }
}

/// `x̂_{i+1} = x_i + ∫ f̂(x_i,u_i) + d_θ(x_i,u_i) dt` over `[t, t + dt]`.
pub fn one_step_predict(
    model: &KnodeModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<DVector<f64>, KnodeError> {
    let d = model.residual_at(x, u)?;
    Ok(frozen_step(model.nominal.as_ref(), x, u, t, dt, &d)?)
}

/// Mean squared one-step error `(1/(M−1)) Σ_{i≥2} ‖x̂_i − x_i‖²`.
pub fn knode_loss(model: &KnodeModel, data: &TrajectoryDataset) -> Result<f64, KnodeError> {
    let batch = TrainingBatch::new(model.nominal.as_ref(), data)?;
    let (loss, _) = batch.loss_and_errors(&model.residual)?;
    Ok(loss)
}

/// Exact gradient of [`knode_loss`] with respect to the residual parameters.
pub fn knode_loss_gradient(model: &KnodeModel, data: &TrajectoryDataset) -> Result<MlpParams, KnodeError> {
    let batch = TrainingBatch::new(model.nominal.as_ref(), data)?;
    let (_, grad) = batch.loss_and_gradient(&model.residual)?;
    Ok(grad)
}

/// Per-transition quantities that do not depend on θ, precomputed once.
pub(crate) struct TrainingBatch {
    /// Network inputs `[x_i; u_i]`, one column per transition.
    inputs: DMatrix<f64>,
    /// `x_i + Δt_i·f̂(x_i, u_i) − x_{i+1}`.
    base_error: DMatrix<f64>,
    dts: Vec<f64>,
}

impl TrainingBatch {
    pub(crate) fn new(nominal: &dyn DynamicsFn, data: &TrajectoryDataset) -> Result<Self, KnodeError> {
        if data.len() < 2 {
            return Err(KnodeError::TooFewSamples {
                needed: 2,
                got: data.len(),
            });
        }
        let (n, m) = (data.state_dim(), data.input_dim());
        let count = data.len() - 1;
        let mut inputs = DMatrix::zeros(n + m, count);
        let mut base_error = DMatrix::zeros(n, count);
        let mut dts = Vec::with_capacity(count);
        for (i, tr) in data.transitions().enumerate() {
            inputs.column_mut(i).copy_from(&network_input(tr.x, tr.u));
            let pred = nominal_predict(nominal, tr.x, tr.u, tr.t, tr.dt)?;
            base_error.column_mut(i).copy_from(&(pred - tr.next));
            dts.push(tr.dt);
        }
        Ok(Self {
            inputs,
            base_error,
            dts,
        })
    }

    fn count(&self) -> usize {
        self.dts.len()
    }

    fn errors_from(&self, residual_out: &DMatrix<f64>) -> DMatrix<f64> {
        let mut err = self.base_error.clone();
        for (j, mut col) in err.column_iter_mut().enumerate() {
            col.axpy(self.dts[j], &residual_out.column(j), 1.0);
        }
        err
    }

    pub(crate) fn loss_and_errors(&self, residual: &MlpParams) -> Result<(f64, DMatrix<f64>), KnodeError> {
        let (out, _) = residual.forward_batch(&self.inputs)?;
        let err = self.errors_from(&out);
        let loss = err.norm_squared() / self.count() as f64;
        if !loss.is_finite() {
            return Err(KnodeError::NonFinite);
        }
        Ok((loss, err))
    }

    pub(crate) fn loss_and_gradient(&self, residual: &MlpParams) -> Result<(f64, MlpParams), KnodeError> {
        let (out, cache) = residual.forward_batch(&self.inputs)?;
        let mut err = self.errors_from(&out);
        let loss = err.norm_squared() / self.count() as f64;
        if !loss.is_finite() {
            return Err(KnodeError::NonFinite);
        }
        let scale = 2.0 / self.count() as f64;
        for (j, mut col) in err.column_iter_mut().enumerate() {
            col *= scale * self.dts[j];
        }
        let (grad, _) = residual.backward_batch(&cache, &err)?;
        if !grad.is_finite() {
            return Err(NetError::NonFiniteGradient.into());
        }
        Ok((loss, grad))
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Hidden layer widths; input and output sizes follow from the plant.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: KnodeModel,
    /// `history[e]` is the loss before epoch `e`'s update; the last entry is
    /// the loss after the final update.
    pub history: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Full-batch Adam on the one-step loss. Returns the lowest-loss parameters
/// seen, so the returned model never does worse than its initialization.
pub fn train_knode(
    nominal: Arc<dyn DynamicsFn>,
    data: &TrajectoryDataset,
    integrator: IntegratorConfig,
    hyper: &TrainConfig,
) -> Result<TrainOutcome, KnodeError> {
    let (n, m) = (nominal.state_dim(), nominal.input_dim());
    let mut sizes = vec![n + m];
    sizes.extend(&hyper.hidden);
    sizes.push(n);
    let mut params = MlpParams::init(&sizes, hyper.seed)?;
    let batch = TrainingBatch::new(nominal.as_ref(), data)?;
    let mut opt = AdamState::new(&params, AdamConfig::new(hyper.learning_rate, hyper.weight_decay));

    let mut history = Vec::with_capacity(hyper.epochs + 1);
    let mut best = (f64::INFINITY, params.clone());
    for epoch in 0..hyper.epochs {
        let (loss, grad) = match batch.loss_and_gradient(&params) {
            Ok(v) => v,
            Err(KnodeError::NonFinite) | Err(KnodeError::Net(NetError::NonFiniteGradient)) => {
                return Err(KnodeError::Diverged { epoch, history })
            }
            Err(e) => return Err(e),
        };
        history.push(loss);
        if loss < best.0 {
            best = (loss, params.clone());
        }
        adam_step(&mut params, &grad, &mut opt)?;
    }
    match batch.loss_and_errors(&params) {
        Ok((loss, _)) => {
            history.push(loss);
            if loss < best.0 {
                best = (loss, params);
            }
        }
        Err(_) => {
            return Err(KnodeError::Diverged {
                epoch: hyper.epochs,
                history,
            })
        }
    }
    Ok(TrainOutcome {
        model: KnodeModel::new(nominal, best.1, integrator)?,
        history,
    })
}

/// How a learned model provides linearizations to the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    /// Central differences through the whole one-step map.
    #[default]
    FiniteDifference,
    /// Network input Jacobians in closed form; the nominal field is still
    /// differenced.
    Analytic,
}

impl DiscreteDynamics for KnodeModel {
    fn state_dim(&self) -> usize {
        self.nominal.state_dim()
    }
    fn input_dim(&self) -> usize {
        self.nominal.input_dim()
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, k: usize) -> Result<DVector<f64>, OdeError> {
        let dt = self.integrator.dt;
        let d = self
            .residual
            .forward(&network_input(x, u))
            .map_err(|_| OdeError::Dimension {
                expected: self.residual.input_dim(),
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
        finite_difference_jacobians(self, x, u, k, 1e-6)
    }
}
