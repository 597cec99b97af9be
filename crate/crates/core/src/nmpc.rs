//! Receding-horizon control with a nonlinear discrete prediction model.
//!
//! Each control step solves
//!
//! ```text
//! minimize   Σ_{i<N} ‖x_i − x_ref,i‖²_Q + ‖u_i − u_ref,i‖²_R + ‖x_N − x_ref,N‖²_P
//! subject to x_{i+1} = F(x_i, u_i),  x_0 = x(k)
//!            x_i ∈ X,  u_i ∈ U,  ‖x_N − x_ref,N‖_P ≤ √γ
//! ```
//!
//! by multiple shooting and SQP. The cost is already quadratic, so each QP
//! uses its exact Hessian; the dynamics are linearized along the current
//! iterate and the terminal ellipsoid is replaced by its supporting halfspace.
//! An L1 merit function with backtracking globalizes the iteration.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ode::{DiscreteDynamics, OdeError};
use crate::qp::{solve_ocp_qp, OcpQp, QpSettings, QpStage, RowKind, TerminalRow};

/// Penalty on the linearized hard terminal row inside each QP, so that a
/// linearization that cannot reach the set still yields a step.
pub const ELASTIC_WEIGHT: f64 = 1e6;

/// Relative distance below which a returned input is placed on its bound.
pub const BOUND_SNAP: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum NmpcError {
    #[error(transparent)]
    Model(#[from] OdeError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TerminalMode {
    /// `x_N` must lie in the ellipsoid.
    Hard,
    /// Ellipsoid violation `‖e‖_P − √γ` is penalized with this weight.
    Soft { weight: f64 },
    /// Terminal cost only.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpConfig {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Terminal cost matrix.
    pub p: DMatrix<f64>,
    /// Terminal set level.
    pub gamma: f64,
    pub terminal: TerminalMode,
    pub x_lower: DVector<f64>,
    pub x_upper: DVector<f64>,
    pub u_lower: DVector<f64>,
    pub u_upper: DVector<f64>,
}

impl OcpConfig {
    /// Unbounded states, terminal cost only.
    pub fn new(horizon: usize, q: DMatrix<f64>, r: DMatrix<f64>, p: DMatrix<f64>, u_lower: DVector<f64>, u_upper: DVector<f64>) -> Self {
        let n = q.nrows();
        Self {
            horizon,
            q,
            r,
            p,
            gamma: f64::INFINITY,
            terminal: TerminalMode::Off,
            x_lower: DVector::from_element(n, f64::NEG_INFINITY),
            x_upper: DVector::from_element(n, f64::INFINITY),
            u_lower,
            u_upper,
        }
    }

    pub fn with_terminal_set(mut self, gamma: f64, mode: TerminalMode) -> Self {
        self.gamma = gamma;
        self.terminal = mode;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn validate(&self) -> Result<(), NmpcError> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let ok = self.horizon >= 1
            && self.q.shape() == (n, n)
            && self.p.shape() == (n, n)
            && self.r.shape() == (m, m)
            && self.x_lower.len() == n
            && self.x_upper.len() == n
            && self.u_lower.len() == m
            && self.u_upper.len() == m
            && self.x_lower.iter().zip(self.x_upper.iter()).all(|(l, h)| l <= h)
            && self.u_lower.iter().zip(self.u_upper.iter()).all(|(l, h)| l <= h);
        if ok {
            Ok(())
        } else {
            Err(NmpcError::Dimension("invalid OCP configuration".into()))
        }
    }

    fn clip_input(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            u.len(),
            u.iter()
                .zip(self.u_lower.iter().zip(self.u_upper.iter()))
                .map(|(v, (lo, hi))| v.clamp(*lo, *hi)),
        )
    }

    /// Clips to the box and moves entries within `BOUND_SNAP` of a bound onto
    /// it, so active bounds hold exactly rather than to interior-point
    /// accuracy.
    fn snap_input(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = self.clip_input(u);
        for ((v, lo), hi) in out.iter_mut().zip(self.u_lower.iter()).zip(self.u_upper.iter()) {
            if (*v - lo).abs() <= BOUND_SNAP * lo.abs().max(1.0) {
                *v = *lo;
            } else if (hi - *v).abs() <= BOUND_SNAP * hi.abs().max(1.0) {
                *v = *hi;
            }
        }
        out
    }

    fn contains_state(&self, x: &DVector<f64>) -> bool {
        x.iter()
            .zip(self.x_lower.iter().zip(self.x_upper.iter()))
            .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub step_tol: f64,
    pub kkt_tol: f64,
    pub armijo: f64,
    pub min_step: f64,
    /// Extra SQP passes against a slightly shrunk ellipsoid when the final
    /// iterate violates a hard terminal constraint.
    pub restoration_passes: usize,
    pub qp: QpSettings,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            step_tol: 1e-8,
            kkt_tol: 1e-6,
            armijo: 1e-4,
            min_step: 1e-6,
            restoration_passes: 3,
            qp: QpSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    pub inputs: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub cost: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// QP iterations summed over all subproblems of this solve.
    pub qp_iterations: usize,
    /// Largest dynamics defect of the last SQP iterate; the returned states
    /// are a rollout of the returned inputs, so they satisfy the model exactly.
    pub defect_norm: f64,
    /// `max(0, e_Nᵀ P e_N − γ)` of the returned trajectory.
    pub terminal_violation: f64,
    /// Merit values before and after each accepted step.
    pub merit_trace: Vec<(f64, f64)>,
}

/// References over one horizon: `N + 1` states and `N` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWindow {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl ReferenceWindow {
    pub fn constant(x: DVector<f64>, u: DVector<f64>, horizon: usize) -> Self {
        Self {
            states: vec![x; horizon + 1],
            inputs: vec![u; horizon],
        }
    }
}

struct Problem<'a, M: ?Sized> {
    model: &'a M,
    cfg: &'a OcpConfig,
    x0: &'a DVector<f64>,
    k0: usize,
    refs: &'a ReferenceWindow,
    gamma: f64,
}

impl<M: DiscreteDynamics + ?Sized> Problem<'_, M> {
    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn rollout(&self, inputs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>, NmpcError> {
        let mut xs = Vec::with_capacity(inputs.len() + 1);
        xs.push(self.x0.clone());
        for (i, u) in inputs.iter().enumerate() {
            let next = self.model.step(&xs[i], u, self.k0 + i)?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(NmpcError::NonFinite("model rollout"));
            }
            xs.push(next);
        }
        Ok(xs)
    }

    fn quadratic_cost(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
        let big_n = self.horizon();
        let mut j = 0.0;
        for i in 0..big_n {
            let e = &xs[i] - &self.refs.states[i];
            let v = &us[i] - &self.refs.inputs[i];
            j += e.dot(&(&self.cfg.q * &e)) + v.dot(&(&self.cfg.r * &v));
        }
        let e = &xs[big_n] - &self.refs.states[big_n];
        j + e.dot(&(&self.cfg.p * &e))
    }

    /// `‖x_N − x_ref,N‖_P − √γ` and its gradient.
    fn terminal_function(&self, x_n: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        if matches!(self.cfg.terminal, TerminalMode::Off) || !self.gamma.is_finite() {
            return None;
        }
        let e = x_n - &self.refs.states[self.horizon()];
        let pe = &self.cfg.p * &e;
        let norm = e.dot(&pe).max(0.0).sqrt();
        if norm < 1e-12 {
            return None;
        }
        Some((norm - self.gamma.sqrt(), pe / norm))
    }

    fn soft_penalty(&self, x_n: &DVector<f64>) -> f64 {
        match (self.cfg.terminal, self.terminal_function(x_n)) {
            (TerminalMode::Soft { weight }, Some((h, _))) => weight * h.max(0.0),
            _ => 0.0,
        }
    }

    fn objective(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
        self.quadratic_cost(xs, us) + self.soft_penalty(&xs[self.horizon()])
    }

    /// L1 infeasibility: defects, state boxes, hard terminal constraint.
    fn infeasibility(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> Result<(f64, f64), NmpcError> {
        let mut l1 = 0.0;
        let mut linf = 0.0f64;
        for i in 0..self.horizon() {
            let d = self.model.step(&xs[i], &us[i], self.k0 + i)? - &xs[i + 1];
            l1 += d.lp_norm(1);
            linf = linf.max(d.amax());
        }
        for x in &xs[1..] {
            for ((v, lo), hi) in x.iter().zip(self.cfg.x_lower.iter()).zip(self.cfg.x_upper.iter()) {
                let viol = (lo - v).max(v - hi).max(0.0);
                l1 += viol;
                linf = linf.max(viol);
            }
        }
        if matches!(self.cfg.terminal, TerminalMode::Hard) {
            if let Some((h, _)) = self.terminal_function(&xs[self.horizon()]) {
                l1 += h.max(0.0);
                linf = linf.max(h.max(0.0));
            }
        }
        if !l1.is_finite() {
            return Err(NmpcError::NonFinite("constraint evaluation"));
        }
        Ok((l1, linf))
    }

    /// Curvature of `‖e‖_P`, which is convex, at the last state.
    fn terminal_hessian(&self, x_n: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (_, grad) = self.terminal_function(x_n)?;
        let e = x_n - &self.refs.states[self.horizon()];
        let norm = e.dot(&(&self.cfg.p * &e)).sqrt();
        Some((&self.cfg.p - &grad * grad.transpose()) / norm)
    }

    /// `nu` weighs the terminal-function curvature in the Lagrangian.
    fn build_qp(&self, xs: &[DVector<f64>], us: &[DVector<f64>], nu: f64) -> Result<OcpQp, NmpcError> {
        let big_n = self.horizon();
        let (n, m) = (self.cfg.state_dim(), self.cfg.input_dim());
        let mut stages = Vec::with_capacity(big_n);
        for i in 0..big_n {
            let (a, b) = self.model.jacobians(&xs[i], &us[i], self.k0 + i)?;
            let c = self.model.step(&xs[i], &us[i], self.k0 + i)? - &xs[i + 1];
            if a.iter().chain(b.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
                return Err(NmpcError::NonFinite("linearization"));
            }
            stages.push(QpStage { a, b, c });
        }
        let q2 = &self.cfg.q * 2.0;
        let r2 = &self.cfg.r * 2.0;
        let mut q = vec![q2.clone(); big_n];
        q.push(&self.cfg.p * 2.0);
        let q_lin: Vec<DVector<f64>> = (0..=big_n)
            .map(|i| &q[i] * (&xs[i] - &self.refs.states[i]))
            .collect();
        if nu > 0.0 {
            if let Some(h) = self.terminal_hessian(&xs[big_n]) {
                q[big_n] += crate::linalg::symmetrize(&h) * nu;
            }
        }
        let r_lin = (0..big_n).map(|i| &r2 * (&us[i] - &self.refs.inputs[i])).collect();
        let u_bounds = us
            .iter()
            .map(|u| (&self.cfg.u_lower - u, &self.cfg.u_upper - u))
            .collect();
        let x_bounds = xs[1..]
            .iter()
            .map(|x| (&self.cfg.x_lower - x, &self.cfg.x_upper - x))
            .collect();
        let terminal = self.terminal_function(&xs[big_n]).and_then(|(h, grad)| match self.cfg.terminal {
            TerminalMode::Hard => Some(TerminalRow {
                a: grad,
                b: -h,
                kind: RowKind::Soft(ELASTIC_WEIGHT),
            }),
            TerminalMode::Soft { weight } => Some(TerminalRow {
                a: grad,
                b: -h,
                kind: RowKind::Soft(weight),
            }),
            TerminalMode::Off => None,
        });
        OcpQp {
            x0: DVector::zeros(n),
            stages,
            q,
            q_lin,
            r: vec![r2; big_n],
            r_lin,
            u_bounds,
            x_bounds,
            terminal,
        }
        .with_input_dim_check(m)
    }
}

impl OcpQp {
    fn with_input_dim_check(self, m: usize) -> Result<Self, NmpcError> {
        if self.input_dim() != m {
            return Err(NmpcError::Dimension(format!("model input dimension {} != {m}", self.input_dim())));
        }
        Ok(self)
    }
}

struct SqpOutcome {
    qp_iterations: usize,
    us: Vec<DVector<f64>>,
    status: SolveStatus,
    iterations: usize,
    kkt: f64,
    defect: f64,
    merit_trace: Vec<(f64, f64)>,
}

fn run_sqp<M: DiscreteDynamics + ?Sized>(
    pb: &Problem<'_, M>,
    mut us: Vec<DVector<f64>>,
    settings: &SolverSettings,
) -> Result<SqpOutcome, NmpcError> {
    let big_n = pb.horizon();
    let mut xs = pb.rollout(&us)?;
    let mut mu = 0.0f64;
    let mut merit_trace = Vec::new();
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;
    let mut kkt = f64::INFINITY;
    let mut qp_iterations = 0;
    let mut nu = 0.0;

    for it in 1..=settings.max_iterations {
        iterations = it;
        let qp = pb.build_qp(&xs, &us, nu)?;
        let sol = solve_ocp_qp(&qp, &settings.qp);
        qp_iterations += sol.iterations;
        nu = sol.terminal_dual.max(0.0);
        if sol.dx.iter().chain(sol.du.iter()).any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(NmpcError::NonFinite("QP step"));
        }

        let mut stationarity = 0.0f64;
        for i in 1..=big_n {
            stationarity = stationarity.max((&qp.q[i] * &sol.dx[i]).amax());
        }
        for i in 0..big_n {
            stationarity = stationarity.max((&qp.r[i] * &sol.du[i]).amax());
        }
        let step_norm = sol
            .dx
            .iter()
            .chain(sol.du.iter())
            .fold(0.0f64, |a, v| a.max(v.amax()));
        let (viol_l1, viol_inf) = pb.infeasibility(&xs, &us)?;
        kkt = stationarity.max(viol_inf);
        let converged = kkt < settings.kkt_tol || step_norm < settings.step_tol;

        mu = mu.max(1.5 * sol.max_dual() + 1e-6);
        let phi0 = pb.objective(&xs, &us) + mu * viol_l1;
        // Decrease predicted by the QP model of the merit function.
        let mut model_change = 0.0;
        for i in 1..=big_n {
            model_change += qp.q_lin[i].dot(&sol.dx[i]) + 0.5 * sol.dx[i].dot(&(&qp.q[i] * &sol.dx[i]));
        }
        for i in 0..big_n {
            model_change += qp.r_lin[i].dot(&sol.du[i]) + 0.5 * sol.du[i].dot(&(&qp.r[i] * &sol.du[i]));
        }
        if let (TerminalMode::Soft { weight }, Some(row)) = (pb.cfg.terminal, &qp.terminal) {
            let h0 = -row.b;
            model_change += weight * ((h0 + row.a.dot(&sol.dx[big_n])).max(0.0) - h0.max(0.0));
        }
        let predicted = (-model_change + mu * viol_l1).max(0.0);

        let mut t = 1.0;
        let mut accepted = false;
        while t >= settings.min_step {
            let us_new: Vec<DVector<f64>> = (0..big_n).map(|i| pb.cfg.clip_input(&(&us[i] + &sol.du[i] * t))).collect();
            let xs_new: Vec<DVector<f64>> = (0..=big_n).map(|i| &xs[i] + &sol.dx[i] * t).collect();
            if let Ok((l1, _)) = pb.infeasibility(&xs_new, &us_new) {
                let phi = pb.objective(&xs_new, &us_new) + mu * l1;
                let required = if converged { phi0 } else { phi0 - settings.armijo * t * predicted };
                if phi.is_finite() && phi <= required {
                    merit_trace.push((phi0, phi));
                    xs = xs_new;
                    us = us_new;
                    accepted = true;
                    break;
                }
            }
            if converged {
                break;
            }
            t *= 0.5;
        }
        if converged {
            status = SolveStatus::Optimal;
            break;
        }
        if !accepted {
            break;
        }
    }
    let defect = (0..big_n)
        .map(|i| pb.model.step(&xs[i], &us[i], pb.k0 + i).map(|f| (f - &xs[i + 1]).amax()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(0.0f64, f64::max);
    Ok(SqpOutcome {
        qp_iterations,
        us,
        status,
        iterations,
        kkt,
        defect,
        merit_trace,
    })
}

/// Solves the OCP from `x0` at time step `k0`. `initial_inputs` seeds the
/// SQP (states are rolled out from `x0`); without it the reference inputs
/// are used.
pub fn solve_ocp<M: DiscreteDynamics + ?Sized>(
    model: &M,
    cfg: &OcpConfig,
    x0: &DVector<f64>,
    k0: usize,
    refs: &ReferenceWindow,
    initial_inputs: Option<&[DVector<f64>]>,
    settings: &SolverSettings,
) -> Result<OcpSolution, NmpcError> {
    cfg.validate()?;
    let big_n = cfg.horizon;
    if x0.len() != cfg.state_dim() || model.state_dim() != cfg.state_dim() || model.input_dim() != cfg.input_dim() {
        return Err(NmpcError::Dimension("state or input dimension".into()));
    }
    if refs.states.len() < big_n + 1 || refs.inputs.len() < big_n {
        return Err(NmpcError::Dimension("reference window shorter than the horizon".into()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(NmpcError::NonFinite("initial state"));
    }
    let guess: Vec<DVector<f64>> = match initial_inputs {
        Some(us) if us.len() == big_n => us.iter().map(|u| cfg.clip_input(u)).collect(),
        _ => refs.inputs[..big_n].iter().map(|u| cfg.clip_input(u)).collect(),
    };
    let mut pb = Problem {
        model,
        cfg,
        x0,
        k0,
        refs,
        gamma: cfg.gamma,
    };
    if !cfg.contains_state(x0) {
        let xs = pb.rollout(&guess)?;
        return Ok(finish(&pb, xs, guess, SolveStatus::Infeasible, 0, f64::INFINITY, 0.0, vec![]));
    }

    let mut out = run_sqp(&pb, guess, settings)?;
    let mut total_iterations = out.iterations;
    let mut total_qp = out.qp_iterations;
    let mut trace = std::mem::take(&mut out.merit_trace);
    let violation = |pb: &Problem<'_, M>, us: &[DVector<f64>]| -> Result<f64, NmpcError> {
        let xs = pb.rollout(us)?;
        Ok(terminal_violation(cfg, &xs[big_n], &refs.states[big_n]))
    };
    if matches!(cfg.terminal, TerminalMode::Hard) && cfg.gamma.is_finite() {
        let mut shrink = 1.0;
        let mut passes = 0;
        while violation(&pb, &out.us)? > 1e-6 && passes < settings.restoration_passes {
            shrink *= 0.99;
            pb.gamma = cfg.gamma * shrink;
            let mut again = run_sqp(&pb, out.us.clone(), settings)?;
            total_iterations += again.iterations;
            total_qp += again.qp_iterations;
            trace.append(&mut again.merit_trace);
            out = again;
            passes += 1;
        }
        if violation(&pb, &out.us)? > 1e-6 {
            out.status = SolveStatus::Infeasible;
        }
    }
    let us: Vec<DVector<f64>> = out.us.iter().map(|u| cfg.snap_input(u)).collect();
    let xs = pb.rollout(&us)?;
    let mut sol = finish(&pb, xs, us, out.status, total_iterations, out.kkt, out.defect, trace);
    sol.qp_iterations = total_qp;
    Ok(sol)
}

fn terminal_violation(cfg: &OcpConfig, x_n: &DVector<f64>, r_n: &DVector<f64>) -> f64 {
    if !cfg.gamma.is_finite() {
        return 0.0;
    }
    let e = x_n - r_n;
    (e.dot(&(&cfg.p * &e)) - cfg.gamma).max(0.0)
}

#[allow(clippy::too_many_arguments)]
fn finish<M: DiscreteDynamics + ?Sized>(
    pb: &Problem<'_, M>,
    xs: Vec<DVector<f64>>,
    us: Vec<DVector<f64>>,
    status: SolveStatus,
    iterations: usize,
    kkt_residual: f64,
    defect_norm: f64,
    merit_trace: Vec<(f64, f64)>,
) -> OcpSolution {
    let big_n = pb.horizon();
    let terminal_violation = match pb.cfg.terminal {
        TerminalMode::Off => 0.0,
        _ => terminal_violation(pb.cfg, &xs[big_n], &pb.refs.states[big_n]),
    };
    OcpSolution {
        cost: pb.objective(&xs, &us),
        inputs: us,
        states: xs,
        status,
        iterations,
        kkt_residual,
        qp_iterations: 0,
        defect_norm,
        terminal_violation,
        merit_trace,
    }
}

/// Reference provider: step index → `(x_ref, u_ref)`.
pub type ReferenceFn = Arc<dyn Fn(usize) -> (DVector<f64>, DVector<f64>) + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub step: usize,
    pub sqp_iterations: usize,
    pub kkt_residual: f64,
    pub cost: f64,
    pub status: Option<SolveStatus>,
    pub fallback: bool,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcStep {
    pub input: DVector<f64>,
    pub solution: Option<OcpSolution>,
    /// The solver failed and the previous input was held.
    pub fallback: bool,
}

/// Receding-horizon controller with a shifted warm start.
pub struct MpcController<M> {
    pub model: M,
    pub config: OcpConfig,
    pub settings: SolverSettings,
    pub reference: ReferenceFn,
    warm: Option<Vec<DVector<f64>>>,
    last_input: Option<DVector<f64>>,
    pub telemetry: Vec<StepTelemetry>,
}

impl<M: DiscreteDynamics> MpcController<M> {
    pub fn new(model: M, config: OcpConfig, settings: SolverSettings, reference: ReferenceFn) -> Self {
        Self {
            model,
            config,
            settings,
            reference,
            warm: None,
            last_input: None,
            telemetry: Vec::new(),
        }
    }

    pub fn window(&self, k: usize) -> ReferenceWindow {
        let big_n = self.config.horizon;
        let mut states = Vec::with_capacity(big_n + 1);
        let mut inputs = Vec::with_capacity(big_n);
        for i in 0..=big_n {
            let (x, u) = (self.reference)(k + i);
            states.push(x);
            if i < big_n {
                inputs.push(u);
            }
        }
        ReferenceWindow { states, inputs }
    }

    /// Warm-start inputs for the next call.
    pub fn warm_start(&self) -> Option<&[DVector<f64>]> {
        self.warm.as_deref()
    }

    pub fn reset(&mut self) {
        self.warm = None;
        self.last_input = None;
        self.telemetry.clear();
    }

    pub fn step(&mut self, x: &DVector<f64>, k: usize) -> MpcStep {
        let start = Instant::now();
        let refs = self.window(k);
        let result = solve_ocp(
            &self.model,
            &self.config,
            x,
            k,
            &refs,
            self.warm.as_deref(),
            &self.settings,
        );
        let (step, telemetry) = match result {
            Ok(sol) if sol.status != SolveStatus::Infeasible => {
                let input = sol.inputs[0].clone();
                let mut shifted: Vec<DVector<f64>> = sol.inputs[1..].to_vec();
                shifted.push(sol.inputs[sol.inputs.len() - 1].clone());
                self.warm = Some(shifted);
                self.last_input = Some(input.clone());
                let tel = StepTelemetry {
                    step: k,
                    sqp_iterations: sol.iterations,
                    kkt_residual: sol.kkt_residual,
                    cost: sol.cost,
                    status: Some(sol.status),
                    fallback: false,
                    wall_time: 0.0,
                };
                (
                    MpcStep {
                        input,
                        solution: Some(sol),
                        fallback: false,
                    },
                    tel,
                )
            }
            other => {
                let input = self
                    .last_input
                    .clone()
                    .unwrap_or_else(|| self.config.clip_input(&refs.inputs[0]));
                let sol = other.ok();
                let tel = StepTelemetry {
                    step: k,
                    sqp_iterations: sol.as_ref().map_or(0, |s| s.iterations),
                    kkt_residual: sol.as_ref().map_or(f64::NAN, |s| s.kkt_residual),
                    cost: sol.as_ref().map_or(f64::NAN, |s| s.cost),
                    status: sol.as_ref().map(|s| s.status),
                    fallback: true,
                    wall_time: 0.0,
                };
                self.last_input = Some(input.clone());
                (
                    MpcStep {
                        input,
                        solution: sol,
                        fallback: true,
                    },
                    tel,
                )
            }
        };
        self.telemetry.push(StepTelemetry {
            wall_time: start.elapsed().as_secs_f64(),
            ..telemetry
        });
        step
    }
}

/// `J*(x(k+1)) − J*(x(k))` along a closed-loop run.
pub fn evaluate_value_descent(costs: &[f64]) -> Vec<f64> {
    costs.windows(2).map(|w| w[1] - w[0]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::FnDiscrete;
    use nalgebra::{dmatrix, dvector};

    fn scalar_integrator() -> FnDiscrete<impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync> {
        FnDiscrete::new(1, 1, |x: &DVector<f64>, u: &DVector<f64>| dvector![x[0] + u[0]])
    }

    #[test]
    fn origin_is_optimal_in_one_iteration() {
        let model = scalar_integrator();
        let cfg = OcpConfig::new(5, dmatrix![1.0], dmatrix![1.0], dmatrix![2.0], dvector![-1.0], dvector![1.0]);
        let refs = ReferenceWindow::constant(dvector![0.0], dvector![0.0], 5);
        let sol = solve_ocp(&model, &cfg, &dvector![0.0], 0, &refs, None, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.cost, 0.0);
        assert!(sol.inputs.iter().all(|u| u[0] == 0.0));
    }

    #[test]
    fn clipped_scalar_optimum() {
        let model = scalar_integrator();
        let cfg = OcpConfig::new(1, dmatrix![1.0], dmatrix![1.0], dmatrix![2.0], dvector![-0.1], dvector![0.1]);
        let refs = ReferenceWindow::constant(dvector![0.0], dvector![0.0], 1);
        let sol = solve_ocp(&model, &cfg, &dvector![1.0], 0, &refs, None, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_eq!(sol.inputs[0][0], -0.1);
        assert_eq!(sol.states[1][0], 0.9);
    }

    #[test]
    fn unconstrained_scalar_optimum() {
        let model = scalar_integrator();
        let cfg = OcpConfig::new(1, dmatrix![1.0], dmatrix![1.0], dmatrix![2.0], dvector![-5.0], dvector![5.0]);
        let refs = ReferenceWindow::constant(dvector![0.0], dvector![0.0], 1);
        let sol = solve_ocp(&model, &cfg, &dvector![1.0], 0, &refs, None, &SolverSettings::default()).unwrap();
        assert!((sol.inputs[0][0] + 2.0 / 3.0).abs() < 1e-8);
        assert!(sol.merit_trace.iter().all(|(a, b)| b <= a));
    }

    #[test]
    fn initial_state_outside_box_is_infeasible() {
        let model = scalar_integrator();
        let mut cfg = OcpConfig::new(3, dmatrix![1.0], dmatrix![1.0], dmatrix![2.0], dvector![-1.0], dvector![1.0]);
        cfg.x_lower = dvector![-0.5];
        cfg.x_upper = dvector![0.5];
        let refs = ReferenceWindow::constant(dvector![0.0], dvector![0.0], 3);
        let sol = solve_ocp(&model, &cfg, &dvector![1.0], 0, &refs, None, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn hard_terminal_set_is_respected() {
        // Weak terminal cost, so the constraint must do the work.
        let model = scalar_integrator();
        let cfg = OcpConfig::new(2, dmatrix![0.01], dmatrix![1.0], dmatrix![1.0], dvector![-1.0], dvector![1.0])
            .with_terminal_set(0.01, TerminalMode::Hard);
        let refs = ReferenceWindow::constant(dvector![0.0], dvector![0.0], 2);
        let sol = solve_ocp(&model, &cfg, &dvector![1.0], 0, &refs, None, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.terminal_violation <= 1e-6);
        assert!(sol.states[2][0] <= 0.1 + 1e-6);
        // Without the set the optimum stops well short of it.
        let free = OcpConfig::new(2, dmatrix![0.01], dmatrix![1.0], dmatrix![1.0], dvector![-1.0], dvector![1.0]);
        let sol = solve_ocp(&model, &free, &dvector![1.0], 0, &refs, None, &SolverSettings::default()).unwrap();
        assert!(sol.states[2][0] > 0.2);
    }

    #[test]
    fn controller_holds_origin_and_is_deterministic() {
        let cfg = OcpConfig::new(4, dmatrix![1.0], dmatrix![1.0], dmatrix![2.0], dvector![-1.0], dvector![1.0]);
        let reference: ReferenceFn = Arc::new(|_k| (dvector![0.0], dvector![0.0]));
        let mut ctl = MpcController::new(scalar_integrator(), cfg.clone(), SolverSettings::default(), reference.clone());
        for k in 0..5 {
            let step = ctl.step(&dvector![0.0], k);
            assert_eq!(step.input[0], 0.0);
            assert!(!step.fallback);
        }
        let mut a = MpcController::new(scalar_integrator(), cfg.clone(), SolverSettings::default(), reference.clone());
        let mut b = MpcController::new(scalar_integrator(), cfg, SolverSettings::default(), reference);
        let ua = a.step(&dvector![0.7], 3).input;
        let ub = b.step(&dvector![0.7], 3).input;
        assert_eq!(ua, ub);
        assert_eq!(a.warm_start().unwrap().len(), 4);
    }

    #[test]
    fn value_differences() {
        assert_eq!(evaluate_value_descent(&[3.0, 2.0, 2.5]), vec![-1.0, 0.5]);
        assert!(evaluate_value_descent(&[0.0; 4]).iter().all(|d| *d == 0.0));
    }
}
