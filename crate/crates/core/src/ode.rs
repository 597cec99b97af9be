//! Fixed-step integration of continuous-time dynamics.
//!
//! Everything in the crate that needs a state transition goes through
//! [`rk4_step`]: plant simulation, the discretized prediction models used by
//! the controller, and the certification pipeline. Inputs are zero-order held
//! across every step.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// A continuous-time vector field `x' = f(x, u, t)`.
///
/// Implementations must be deterministic and return a vector with the same
/// dimension as `x`.
pub trait DynamicsFn: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> DVector<f64>;

    /// Maps a state back onto its manifold after a discrete step (for example
    /// renormalizing a quaternion). The default is the identity.
    fn project_state(&self, _x: &mut DVector<f64>) {}
}

impl<T: DynamicsFn + ?Sized> DynamicsFn for std::sync::Arc<T> {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> DVector<f64> {
        (**self).eval(x, u, t)
    }
    fn project_state(&self, x: &mut DVector<f64>) {
        (**self).project_state(x)
    }
}

impl<T: DynamicsFn + ?Sized> DynamicsFn for &T {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> DVector<f64> {
        (**self).eval(x, u, t)
    }
    fn project_state(&self, x: &mut DVector<f64>) {
        (**self).project_state(x)
    }
}

/// Adapts a closure into a [`DynamicsFn`].
pub struct FnDynamics<F> {
    n: usize,
    m: usize,
    f: F,
}

impl<F> FnDynamics<F>
where
    F: Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync,
{
    pub fn new(state_dim: usize, input_dim: usize, f: F) -> Self {
        Self {
            n: state_dim,
            m: input_dim,
            f,
        }
    }
}

impl<F> DynamicsFn for FnDynamics<F>
where
    F: Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync,
{
    fn state_dim(&self) -> usize {
        self.n
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.f)(x, u, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum IntegrationMethod {
    Rk4,
}

/// Sampling interval and integration scheme shared by simulation and
/// prediction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub substeps: usize,
    pub method: IntegrationMethod,
}

impl IntegratorConfig {
    pub fn new(dt: f64) -> Result<Self, OdeError> {
        Self::with_substeps(dt, 1)
    }

    pub fn with_substeps(dt: f64, substeps: usize) -> Result<Self, OdeError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(OdeError::InvalidStep(dt));
        }
        if substeps == 0 {
            return Err(OdeError::ZeroSubsteps);
        }
        Ok(Self {
            dt,
            substeps,
            method: IntegrationMethod::Rk4,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("non-finite derivative in RK4 stage {stage} at t = {time}")]
    NonFinite { stage: usize, time: f64 },
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("interval end {t1} does not follow start {t0}")]
    InvalidInterval { t0: f64, t1: f64 },
    #[error("substeps must be at least 1")]
    ZeroSubsteps,
    #[error("vector field returned dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

fn checked_eval<F: DynamicsFn + ?Sized>(
    f: &F,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
    stage: usize,
) -> Result<DVector<f64>, OdeError> {
    let k = f.eval(x, u, t);
    if k.len() != x.len() {
        return Err(OdeError::Dimension {
            expected: x.len(),
            got: k.len(),
        });
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(OdeError::NonFinite { stage, time: t });
    }
    Ok(k)
}

/// One classical Runge-Kutta step with `u` held over `[t, t + dt]`.
pub fn rk4_step<F: DynamicsFn + ?Sized>(
    f: &F,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<DVector<f64>, OdeError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(OdeError::InvalidStep(dt));
    }
    let half = 0.5 * dt;
    let k1 = checked_eval(f, x, u, t, 1)?;
    let k2 = checked_eval(f, &(x + &k1 * half), u, t + half, 2)?;
    let k3 = checked_eval(f, &(x + &k2 * half), u, t + half, 3)?;
    let k4 = checked_eval(f, &(x + &k3 * dt), u, t + dt, 4)?;
    let mut incr = k1;
    incr.axpy(2.0, &k2, 1.0);
    incr.axpy(2.0, &k3, 1.0);
    incr += &k4;
    Ok(x + incr * (dt / 6.0))
}

/// Integrates over `[t0, t1]` with `substeps` equal RK4 steps.
pub fn integrate_interval<F: DynamicsFn + ?Sized>(
    f: &F,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t0: f64,
    t1: f64,
    substeps: usize,
) -> Result<DVector<f64>, OdeError> {
    if !(t1 > t0) {
        return Err(OdeError::InvalidInterval { t0, t1 });
    }
    if substeps == 0 {
        return Err(OdeError::ZeroSubsteps);
    }
    let h = (t1 - t0) / substeps as f64;
    let mut state = x.clone();
    for s in 0..substeps {
        state = rk4_step(f, &state, u, t0 + s as f64 * h, h)?;
    }
    Ok(state)
}

/// A sampled closed-loop trajectory: `states.len() == inputs.len() + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl Trajectory {
    fn start(x0: DVector<f64>) -> Self {
        Self {
            times: vec![0.0],
            states: vec![x0],
            inputs: Vec::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }
}

#[derive(Debug, Error)]
pub enum SimulationError<E: std::error::Error + 'static> {
    #[error("controller failed at step {step}: {source}")]
    Controller {
        step: usize,
        #[source]
        source: E,
        partial: Box<Trajectory>,
    },
    #[error("integration failed at step {step}: {source}")]
    Integration {
        step: usize,
        #[source]
        source: OdeError,
        partial: Box<Trajectory>,
    },
}

impl<E: std::error::Error + 'static> SimulationError<E> {
    pub fn partial(&self) -> &Trajectory {
        match self {
            Self::Controller { partial, .. } | Self::Integration { partial, .. } => partial,
        }
    }
}

/// Runs `controller` in feedback with `f` for `steps` sampling intervals.
pub fn simulate_closed_loop<F, C, E>(
    f: &F,
    x0: &DVector<f64>,
    mut controller: C,
    steps: usize,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, SimulationError<E>>
where
    F: DynamicsFn + ?Sized,
    C: FnMut(&DVector<f64>, usize) -> Result<DVector<f64>, E>,
    E: std::error::Error + 'static,
{
    let mut traj = Trajectory::start(x0.clone());
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let x = &traj.states[k];
        let u = match controller(x, k) {
            Ok(u) => u,
            Err(source) => {
                return Err(SimulationError::Controller {
                    step: k,
                    source,
                    partial: Box::new(traj),
                })
            }
        };
        let next = integrate_interval(f, x, &u, t, t + cfg.dt, cfg.substeps);
        match next {
            Ok(mut next) => {
                f.project_state(&mut next);
                traj.inputs.push(u);
                traj.states.push(next);
                traj.times.push((k + 1) as f64 * cfg.dt);
            }
            Err(source) => {
                return Err(SimulationError::Integration {
                    step: k,
                    source,
                    partial: Box::new(traj),
                })
            }
        }
    }
    Ok(traj)
}

/// A discrete-time transition map `x⁺ = F(x, u, k)`.
///
/// This is the form the controller and the certification code consume. The
/// default Jacobian is central finite differences through [`step`](Self::step).
pub trait DiscreteDynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, k: usize) -> Result<DVector<f64>, OdeError>;

    fn jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        k: usize,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), OdeError> {
        finite_difference_jacobians(self, x, u, k, 1e-6)
    }
}

impl<T: DiscreteDynamics + ?Sized> DiscreteDynamics for &T {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, k: usize) -> Result<DVector<f64>, OdeError> {
        (**self).step(x, u, k)
    }
    fn jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        k: usize,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), OdeError> {
        (**self).jacobians(x, u, k)
    }
}

impl<T: DiscreteDynamics + ?Sized> DiscreteDynamics for std::sync::Arc<T> {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, k: usize) -> Result<DVector<f64>, OdeError> {
        (**self).step(x, u, k)
    }
    fn jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        k: usize,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), OdeError> {
        (**self).jacobians(x, u, k)
    }
}

/// Central-difference Jacobians `(∂F/∂x, ∂F/∂u)` with a scale-aware step
/// `h * max(1, |v_i|)` per coordinate.
pub fn finite_difference_jacobians<D: DiscreteDynamics + ?Sized>(
    model: &D,
    x: &DVector<f64>,
    u: &DVector<f64>,
    k: usize,
    h: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), OdeError> {
    let n = x.len();
    let m = u.len();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let mut xp = x.clone();
    for j in 0..n {
        let step = h * x[j].abs().max(1.0);
        xp[j] = x[j] + step;
        let fp = model.step(&xp, u, k)?;
        xp[j] = x[j] - step;
        let fm = model.step(&xp, u, k)?;
        xp[j] = x[j];
        a.set_column(j, &((fp - fm) / (2.0 * step)));
    }
    let mut up = u.clone();
    for j in 0..m {
        let step = h * u[j].abs().max(1.0);
        up[j] = u[j] + step;
        let fp = model.step(x, &up, k)?;
        up[j] = u[j] - step;
        let fm = model.step(x, &up, k)?;
        up[j] = u[j];
        b.set_column(j, &((fp - fm) / (2.0 * step)));
    }
    Ok((a, b))
}

/// Sampling-interval map of a continuous vector field: RK4 over one interval
/// followed by [`DynamicsFn::project_state`].
#[derive(Debug, Clone)]
pub struct Discretized<F> {
    pub field: F,
    pub integrator: IntegratorConfig,
}

impl<F: DynamicsFn> Discretized<F> {
    pub fn new(field: F, integrator: IntegratorConfig) -> Self {
        Self { field, integrator }
    }
}

impl<F: DynamicsFn> DiscreteDynamics for Discretized<F> {
    fn state_dim(&self) -> usize {
        self.field.state_dim()
    }
    fn input_dim(&self) -> usize {
        self.field.input_dim()
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, k: usize) -> Result<DVector<f64>, OdeError> {
        let t0 = k as f64 * self.integrator.dt;
        let mut next =
            integrate_interval(&self.field, x, u, t0, t0 + self.integrator.dt, self.integrator.substeps)?;
        self.field.project_state(&mut next);
        Ok(next)
    }
}

/// Discrete dynamics given directly as a closure.
pub struct FnDiscrete<F> {
    n: usize,
    m: usize,
    f: F,
}

impl<F> FnDiscrete<F>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync,
{
    pub fn new(state_dim: usize, input_dim: usize, f: F) -> Self {
        Self {
            n: state_dim,
            m: input_dim,
            f,
        }
    }
}

impl<F> DiscreteDynamics for FnDiscrete<F>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync,
{
    fn state_dim(&self) -> usize {
        self.n
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, _k: usize) -> Result<DVector<f64>, OdeError> {
        let next = (self.f)(x, u);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::NonFinite { stage: 0, time: 0.0 });
        }
        Ok(next)
    }
}
