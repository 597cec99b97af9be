//! Terminal cost and terminal set for the stabilizing MPC formulation.
//!
//! Given a discrete model linearized at an equilibrium, an LQR gain `K`
//! stabilizes the linear part, the scaled Lyapunov equation
//! `A_clᵀ P A_cl + ρ(Q + KᵀRK) − P = 0` yields the terminal cost `xᵀPx`, and
//! the terminal set `{x : xᵀPx ≤ γ}` is sized so that the linearization error
//! cannot eat the `(ρ − 1)` slack. Everything is in deviation coordinates
//! around the equilibrium.
//!
//! The nonlinear part of the argument is checked by sampling, not proven.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{is_positive_definite, min_eigenvalue, spectral_norm, spectral_radius, symmetrize};
use crate::ode::{finite_difference_jacobians, DiscreteDynamics, OdeError};

pub const SAFETY_FACTOR: f64 = 1.25;
pub const LYAPUNOV_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error("not an equilibrium: ‖F(x0, u0) − x0‖∞ = {0:e}")]
    NotEquilibrium(f64),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("non-finite Jacobian entries")]
    NonFinite,
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("Riccati iteration did not converge in {0} iterations (not stabilizable?)")]
    RiccatiDiverged(usize),
    #[error("closed loop is not Schur stable (spectral radius {0})")]
    Unstable(f64),
    #[error("Lyapunov system is singular")]
    Singular,
    #[error("Lyapunov residual {0:e} exceeds tolerance")]
    Residual(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Discrete-time linear model `x⁺ = Ax + Bu` in deviation coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Central-difference linearization of `f` at the equilibrium `(x0, u0)`.
pub fn linearize<D: DiscreteDynamics + ?Sized>(
    f: &D,
    x0: &DVector<f64>,
    u0: &DVector<f64>,
    h: f64,
) -> Result<LinearModel, CertifyError> {
    let residual = (f.step(x0, u0, 0)? - x0).amax();
    if !(residual < 1e-6) {
        return Err(CertifyError::NotEquilibrium(residual));
    }
    let (a, b) = finite_difference_jacobians(f, x0, u0, 0, h)?;
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(CertifyError::NonFinite);
    }
    Ok(LinearModel { a, b })
}

/// Infinite-horizon discrete LQR by fixed-point iteration of the Riccati
/// recursion. Returns `(K, P)` with the convention `u = Kx`.
pub fn dlqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>), CertifyError> {
    let (n, m) = (a.nrows(), b.ncols());
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(CertifyError::Dimension("dlqr operands".into()));
    }
    if !is_positive_definite(q) {
        return Err(CertifyError::NotPositiveDefinite("Q"));
    }
    if !is_positive_definite(r) {
        return Err(CertifyError::NotPositiveDefinite("R"));
    }
    let gain = |p: &DMatrix<f64>| -> Result<DMatrix<f64>, CertifyError> {
        let g = r + b.transpose() * p * b;
        let chol = nalgebra::linalg::Cholesky::new(symmetrize(&g)).ok_or(CertifyError::NotPositiveDefinite("R + BᵀPB"))?;
        Ok(-chol.solve(&(b.transpose() * p * a)))
    };
    let mut p = q.clone();
    for _ in 0..max_iter {
        let k = gain(&p)?;
        let next = symmetrize(&(q + a.transpose() * &p * a + a.transpose() * &p * b * &k));
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        let change = (&next - &p).amax();
        p = next;
        if change <= tol * p.amax().max(1.0) {
            let k = gain(&p)?;
            let rho = spectral_radius(&(a + b * &k));
            if rho >= 1.0 {
                return Err(CertifyError::Unstable(rho));
            }
            return Ok((k, p));
        }
    }
    Err(CertifyError::RiccatiDiverged(max_iter))
}

/// Solves `A_clᵀ P A_cl + M − P = 0` through the vectorized system
/// `(I − A_clᵀ ⊗ A_clᵀ) vec(P) = vec(M)`, then symmetrizes.
pub fn solve_dlyap(a_cl: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>, CertifyError> {
    let n = a_cl.nrows();
    if a_cl.ncols() != n || m.shape() != (n, n) {
        return Err(CertifyError::Dimension("dlyap operands".into()));
    }
    let radius = spectral_radius(a_cl);
    if radius >= 1.0 {
        return Err(CertifyError::Unstable(radius));
    }
    let at = a_cl.transpose();
    let system = DMatrix::identity(n * n, n * n) - at.kronecker(&at);
    let rhs = DVector::from_column_slice(m.as_slice());
    let lu = system.clone().lu();
    let mut sol = lu.solve(&rhs).ok_or(CertifyError::Singular)?;
    // one step of iterative refinement
    let resid = &rhs - &system * &sol;
    if let Some(corr) = lu.solve(&resid) {
        sol += corr;
    }
    Ok(symmetrize(&DMatrix::from_column_slice(n, n, sol.as_slice())))
}

pub fn lyapunov_residual(a_cl: &DMatrix<f64>, p: &DMatrix<f64>, m: &DMatrix<f64>) -> f64 {
    spectral_norm(&(a_cl.transpose() * p * a_cl + m - p))
}

/// `K`, `A_cl`, `P`, `ρ` plus the terminal-set size once certified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalIngredients {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub a_cl: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl TerminalIngredients {
    /// LQR gain for `(Q, R)` and the `ρ`-scaled Lyapunov solution. `γ` and `ε`
    /// stay zero until [`certify_terminal_set`] sizes the set.
    pub fn new(lin: &LinearModel, q: &DMatrix<f64>, r: &DMatrix<f64>, rho: f64) -> Result<Self, CertifyError> {
        if !(rho > 1.0) {
            return Err(CertifyError::Dimension(format!("rho must exceed 1, got {rho}")));
        }
        let (k, _) = dlqr(&lin.a, &lin.b, q, r, 1e-12, 100_000)?;
        Self::with_gain(lin, q, r, k, rho)
    }

    pub fn with_gain(
        lin: &LinearModel,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        k: DMatrix<f64>,
        rho: f64,
    ) -> Result<Self, CertifyError> {
        let a_cl = &lin.a + &lin.b * &k;
        let m = stage_weight(q, r, &k) * rho;
        let p = solve_dlyap(&a_cl, &m)?;
        let res = lyapunov_residual(&a_cl, &p, &m);
        if !(res < LYAPUNOV_TOL * p.amax().max(1.0)) {
            return Err(CertifyError::Residual(res));
        }
        if !is_positive_definite(&p) {
            return Err(CertifyError::NotPositiveDefinite("P"));
        }
        Ok(Self {
            a: lin.a.clone(),
            b: lin.b.clone(),
            q: q.clone(),
            r: r.clone(),
            k,
            a_cl,
            p,
            rho,
            gamma: 0.0,
            epsilon: 0.0,
        })
    }

    /// `Q + KᵀRK`.
    pub fn stage_weight(&self) -> DMatrix<f64> {
        stage_weight(&self.q, &self.r, &self.k)
    }

    pub fn in_terminal_set(&self, x: &DVector<f64>) -> bool {
        x.dot(&(&self.p * x)) <= self.gamma
    }
}

fn stage_weight(q: &DMatrix<f64>, r: &DMatrix<f64>, k: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(q + k.transpose() * r * k))
}

/// Closed-loop map `x ↦ F(x_eq + x, u_eq + Kx) − x_eq` in deviation
/// coordinates.
pub struct ClosedLoop<'a, D: ?Sized> {
    pub model: &'a D,
    pub x_eq: &'a DVector<f64>,
    pub u_eq: &'a DVector<f64>,
    pub k: &'a DMatrix<f64>,
}

impl<D: DiscreteDynamics + ?Sized> ClosedLoop<'_, D> {
    pub fn step(&self, x: &DVector<f64>) -> Result<DVector<f64>, OdeError> {
        let u = self.u_eq + self.k * x;
        Ok(self.model.step(&(self.x_eq + x), &u, 0)? - self.x_eq)
    }
}

/// `−xᵀ(Q + KᵀRK)x − [p(f(x, Kx)) − p(x)]`; nonnegative means the descent
/// condition holds at `x`.
pub fn descent_check<D: DiscreteDynamics + ?Sized>(
    cl: &ClosedLoop<'_, D>,
    ing: &TerminalIngredients,
    x: &DVector<f64>,
) -> Result<f64, OdeError> {
    let next = cl.step(x)?;
    let p = |v: &DVector<f64>| v.dot(&(&ing.p * v));
    let stage = x.dot(&(ing.stage_weight() * x));
    Ok(-stage - (p(&next) - p(x)))
}

/// Input box, absolute bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl InputBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Self {
        Self { lower, upper }
    }

    pub fn symmetric(bound: &[f64]) -> Self {
        let upper = DVector::from_column_slice(bound);
        Self {
            lower: -upper.clone(),
            upper,
        }
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        u.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub delta: f64,
    pub samples: usize,
    pub seed: u64,
    /// Terminal-set sizes to check in addition to the certified one.
    pub requested_gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    /// Sampled `sup ‖e(x)‖/‖x‖` over the ball of radius `δ`.
    pub s_delta: f64,
    /// The same ratio over the certified ball of radius `ε`.
    pub s_epsilon: f64,
    /// Largest sampled spectral norm of a Hessian of `e`; informational.
    pub e_delta_bound: f64,
    pub delta: f64,
    pub delta1: f64,
    pub epsilon: f64,
    pub gamma: f64,
    /// Minimum over samples in the terminal set of the descent margin; `None`
    /// when the certified set is empty.
    pub descent_margin: Option<f64>,
    pub samples_checked: usize,
    /// Samples of the terminal set that left the ball `B_ε` or the input box.
    pub containment_failures: usize,
    /// Samples whose closed-loop successor left the terminal set.
    pub invariance_failures: usize,
    pub requested_gamma: Option<f64>,
    pub requested_gamma_certified: Option<bool>,
    /// Descent margin sampled over the requested terminal set.
    pub requested_descent_margin: Option<f64>,
    pub seed: u64,
}

impl CertificationReport {
    pub fn passed(&self) -> bool {
        self.descent_margin.is_some_and(|m| m >= 0.0) && self.containment_failures == 0 && self.epsilon > 0.0
    }
}

fn unit_ball_samples(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    (0..count)
        .map(|_| {
            let mut d = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
            let norm = d.norm();
            if norm > 0.0 {
                d /= norm;
            }
            d * rng.random_range(0.0..=1.0)
        })
        .collect()
}

/// Radius `δ₁` of the largest ball on which `u_eq + Kx` stays inside the box.
pub fn input_ball_radius(k: &DMatrix<f64>, u_eq: &DVector<f64>, bounds: &InputBox) -> f64 {
    let mut radius = f64::INFINITY;
    for i in 0..k.nrows() {
        let slack = (bounds.upper[i] - u_eq[i]).min(u_eq[i] - bounds.lower[i]);
        let row = k.row(i).norm();
        if row > 0.0 {
            radius = radius.min(slack / row);
        } else if slack < 0.0 {
            radius = 0.0;
        }
    }
    radius.max(0.0)
}

fn linearization_error_ratio<D: DiscreteDynamics + ?Sized>(
    cl: &ClosedLoop<'_, D>,
    a_cl: &DMatrix<f64>,
    unit: &[DVector<f64>],
    radius: f64,
) -> Result<f64, OdeError> {
    let mut worst = 0.0f64;
    for s in unit {
        let x = s * radius;
        let norm = x.norm();
        if norm == 0.0 {
            continue;
        }
        let e = cl.step(&x)? - a_cl * &x;
        worst = worst.max(e.norm() / norm);
    }
    Ok(worst)
}

fn hessian_norm_estimate<D: DiscreteDynamics + ?Sized>(
    cl: &ClosedLoop<'_, D>,
    points: &[DVector<f64>],
) -> Result<f64, OdeError> {
    let n = cl.x_eq.len();
    let h = 1e-4;
    let jac = |x: &DVector<f64>| -> Result<DMatrix<f64>, OdeError> {
        let mut j = DMatrix::zeros(n, n);
        let mut xp = x.clone();
        for c in 0..n {
            xp[c] = x[c] + h;
            let fp = cl.step(&xp)?;
            xp[c] = x[c] - h;
            let fm = cl.step(&xp)?;
            xp[c] = x[c];
            j.set_column(c, &((fp - fm) / (2.0 * h)));
        }
        Ok(j)
    };
    let mut worst = 0.0f64;
    for x in points {
        // hess[k][(a, b)] = ∂²e_k/∂x_a∂x_b
        let mut hess = vec![DMatrix::zeros(n, n); n];
        let mut xp = x.clone();
        for b in 0..n {
            xp[b] = x[b] + h;
            let jp = jac(&xp)?;
            xp[b] = x[b] - h;
            let jm = jac(&xp)?;
            xp[b] = x[b];
            let dj = (jp - jm) / (2.0 * h);
            for (k, hk) in hess.iter_mut().enumerate() {
                for a in 0..n {
                    hk[(a, b)] = dj[(k, a)];
                }
            }
        }
        for hk in &hess {
            worst = worst.max(spectral_norm(&symmetrize(hk)));
        }
    }
    Ok(worst)
}

fn min_descent_margin<D: DiscreteDynamics + ?Sized>(
    cl: &ClosedLoop<'_, D>,
    ing: &TerminalIngredients,
    unit: &[DVector<f64>],
    gamma: f64,
) -> Result<(f64, usize), CertifyError> {
    // x = √γ · L⁻ᵀ w maps the unit ball onto {xᵀPx ≤ γ} when P = LLᵀ.
    let chol = nalgebra::linalg::Cholesky::new(ing.p.clone()).ok_or(CertifyError::NotPositiveDefinite("P"))?;
    let lt = chol.l().transpose();
    let mut margin = f64::INFINITY;
    let mut invariance_failures = 0;
    for w in unit {
        let x = lt
            .solve_upper_triangular(&(w * gamma.sqrt()))
            .ok_or(CertifyError::Singular)?;
        margin = margin.min(descent_check(cl, ing, &x)?);
        let next = cl.step(&x)?;
        if next.dot(&(&ing.p * &next)) > gamma * (1.0 + 1e-12) {
            invariance_failures += 1;
        }
    }
    Ok((margin, invariance_failures))
}

/// Sizes and checks the terminal set `{x : xᵀPx ≤ γ}` for the model `f`
/// around the equilibrium `(x_eq, u_eq)`. On success `ing.gamma` and
/// `ing.epsilon` are filled in.
pub fn certify_terminal_set<D: DiscreteDynamics + ?Sized>(
    f: &D,
    x_eq: &DVector<f64>,
    u_eq: &DVector<f64>,
    ing: &mut TerminalIngredients,
    bounds: &InputBox,
    cfg: &CertifyConfig,
) -> Result<CertificationReport, CertifyError> {
    let n = x_eq.len();
    let cl = ClosedLoop {
        model: f,
        x_eq,
        u_eq,
        k: &ing.k,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = unit_ball_samples(n, cfg.samples, &mut rng);

    let a_cl_t_p = spectral_norm(&(ing.a_cl.transpose() * &ing.p));
    let p_norm = spectral_norm(&ing.p);
    let budget = (ing.rho - 1.0) * min_eigenvalue(&ing.stage_weight());
    let holds = |s: f64| {
        let s = SAFETY_FACTOR * s;
        2.0 * s * a_cl_t_p + s * s * p_norm <= budget
    };

    let s_delta = linearization_error_ratio(&cl, &ing.a_cl, &unit, cfg.delta)?;
    let delta1 = input_ball_radius(&ing.k, u_eq, bounds);
    let upper = cfg.delta.min(delta1);

    let mut epsilon = 0.0;
    if upper > 0.0 {
        if holds(linearization_error_ratio(&cl, &ing.a_cl, &unit, upper)?) {
            epsilon = upper;
        } else {
            let (mut lo, mut hi) = (0.0, upper);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if holds(linearization_error_ratio(&cl, &ing.a_cl, &unit, mid)?) {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-9 * upper {
                    break;
                }
            }
            epsilon = lo;
        }
    }
    let s_epsilon = linearization_error_ratio(&cl, &ing.a_cl, &unit, epsilon)?;
    let gamma = min_eigenvalue(&ing.p) * epsilon * epsilon;
    ing.gamma = gamma;
    ing.epsilon = epsilon;

    let hessian_points: Vec<DVector<f64>> = unit.iter().take(8).map(|s| s * cfg.delta).collect();
    let e_delta_bound = hessian_norm_estimate(&cl, &hessian_points)?;

    let (descent_margin, invariance_failures, containment_failures) = if epsilon > 0.0 {
        let (margin, inv) = min_descent_margin(&cl, ing, &unit, gamma)?;
        let chol = nalgebra::linalg::Cholesky::new(ing.p.clone()).ok_or(CertifyError::NotPositiveDefinite("P"))?;
        let lt = chol.l().transpose();
        let mut contain = 0;
        for w in &unit {
            let x = lt.solve_upper_triangular(&(w * gamma.sqrt())).ok_or(CertifyError::Singular)?;
            let u = u_eq + &ing.k * &x;
            if x.norm() > epsilon * (1.0 + 1e-9) || !bounds.contains(&u, 1e-12) {
                contain += 1;
            }
        }
        (Some(margin), inv, contain)
    } else {
        (None, 0, 0)
    };

    let (requested_gamma_certified, requested_descent_margin) = match cfg.requested_gamma {
        Some(g) => {
            let (margin, _) = min_descent_margin(&cl, ing, &unit, g)?;
            (Some(g <= gamma), Some(margin))
        }
        None => (None, None),
    };

    Ok(CertificationReport {
        s_delta,
        s_epsilon,
        e_delta_bound,
        delta: cfg.delta,
        delta1,
        epsilon,
        gamma,
        descent_margin,
        samples_checked: unit.len(),
        containment_failures,
        invariance_failures,
        requested_gamma: cfg.requested_gamma,
        requested_gamma_certified,
        requested_descent_margin,
        seed: cfg.seed,
    })
}
