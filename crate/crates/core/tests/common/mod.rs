//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls the solver it is used to check.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use knode_mpc::ensemble::WeightObjective;
use knode_mpc::knode::{knode_loss, knode_loss_gradient, KnodeModel};
use knode_mpc::nmpc::{solve_ocp, OcpConfig, OcpSolution, ReferenceWindow, SolverSettings};
use knode_mpc::ode::{rk4_step, DynamicsFn, FnDiscrete, FnDynamics, IntegratorConfig};
use knode_mpc::plants::{Pendulum, PendulumParams};
use knode_mpc::{MlpParams, TrajectoryDataset};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Global RK4 errors at `t = 1` on `ẋ = −x` for `dt = 0.1 / 2^k`, and the
/// ratios of successive errors.
pub fn rk4_decay_ratios(halvings: usize) -> Vec<f64> {
    let f = FnDynamics::new(1, 0, |x: &DVector<f64>, _u: &DVector<f64>, _t| -x);
    let u = DVector::zeros(0);
    let errors: Vec<f64> = (0..=halvings)
        .map(|k| {
            let steps = 10usize << k;
            let dt = 1.0 / steps as f64;
            let mut x = DVector::from_element(1, 1.0);
            for s in 0..steps {
                x = rk4_step(&f, &x, &u, s as f64 * dt, dt).unwrap();
            }
            (x[0] - (-1.0f64).exp()).abs()
        })
        .collect();
    errors.windows(2).map(|w| w[0] / w[1]).collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `theta`, step `h·max(1, |θ_i|)`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let s = h * theta[i].abs().max(1.0);
            t[i] = theta[i] + s;
            let fp = f(&t);
            t[i] = theta[i] - s;
            let fm = f(&t);
            t[i] = theta[i];
            (fp - fm) / (2.0 * s)
        })
        .collect()
}

fn random_vector(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// Relative error between the backpropagated parameter gradient of
/// `cᵀ·mlp(z)` and central differences, on a random network.
pub fn mlp_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let depth = r.random_range(1..=3);
    let mut sizes = vec![r.random_range(1..=5)];
    for _ in 0..depth {
        sizes.push(r.random_range(2..=8));
    }
    sizes.push(r.random_range(1..=4));
    let params = MlpParams::init(&sizes, seed).unwrap();
    let z = random_vector(sizes[0], &mut r);
    let c = random_vector(*sizes.last().unwrap(), &mut r);
    let (grad, _) = params.backward(&z, &c).unwrap();
    let theta = params.to_flat();
    let fd = fd_gradient(
        |t| {
            let mut p = params.clone();
            p.set_flat(t).unwrap();
            p.forward(&z).unwrap().dot(&c)
        },
        &theta,
        1e-6,
    );
    relative_error(&grad.to_flat(), &fd)
}

/// A short pendulum trajectory of the 0.55 kg plant under random torques.
pub fn pendulum_data(seed: u64, samples: usize, dt: f64) -> TrajectoryDataset {
    let mut r = rng(seed);
    let truth = Pendulum::new(PendulumParams::true_plant());
    let mut x = random_vector(2, &mut r) * 0.5;
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    for k in 0..samples {
        let u = random_vector(1, &mut r) * 2.0;
        times.push(k as f64 * dt);
        states.push(x.clone());
        inputs.push(u.clone());
        x = rk4_step(&truth, &x, &u, k as f64 * dt, dt).unwrap();
    }
    TrajectoryDataset::new(times, states, inputs, BTreeMap::new()).unwrap()
}

pub fn nominal_pendulum() -> Arc<dyn DynamicsFn> {
    Arc::new(Pendulum::new(PendulumParams::nominal()))
}

/// Relative error of the KNODE one-step loss gradient against central
/// differences, for a random residual width and dataset.
pub fn knode_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let width = r.random_range(2..=12);
    let dt = 0.01;
    let data = pendulum_data(seed, r.random_range(5..=40), dt);
    let residual = MlpParams::init(&[3, width, 2], seed).unwrap();
    let model = KnodeModel::new(nominal_pendulum(), residual, IntegratorConfig::new(dt).unwrap()).unwrap();
    let grad = knode_loss_gradient(&model, &data).unwrap();
    let theta = model.residual.to_flat();
    let fd = fd_gradient(
        |t| {
            let mut m = model.clone();
            m.residual.set_flat(t).unwrap();
            knode_loss(&m, &data).unwrap()
        },
        &theta,
        1e-6,
    );
    relative_error(&grad.to_flat(), &fd)
}

/// Random matrix rescaled to spectral radius `radius`.
pub fn random_stable(n: usize, radius: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let rho = a
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if rho == 0.0 {
        a
    } else {
        a * (radius / rho)
    }
}

pub fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &l * l.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Linear-quadratic instance `x⁺ = Ax + Bu`, cost
/// `Σ xᵀQx + uᵀRu + x_NᵀPx_N`, references at the origin.
#[derive(Debug, Clone)]
pub struct LinearOcp {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub horizon: usize,
}

impl LinearOcp {
    pub fn random(seed: u64) -> Self {
        let mut g = rng(seed);
        let n = g.random_range(1..=4);
        let m = g.random_range(1..=n.min(2));
        let a = DMatrix::from_fn(n, n, |_, _| g.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(n, m, |_, _| g.random_range(-1.0..1.0));
        let q = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| g.random_range(0.1..2.0)));
        let r = DMatrix::from_diagonal(&DVector::from_fn(m, |_, _| g.random_range(0.1..2.0)));
        let p = random_spd(n, &mut g);
        let x0 = random_vector(n, &mut g);
        let horizon = g.random_range(2..=8);
        Self {
            a,
            b,
            q,
            r,
            p,
            x0,
            horizon,
        }
    }

    pub fn double_integrator(dt: f64, horizon: usize, x0: DVector<f64>) -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]),
            q: DMatrix::identity(2, 2),
            r: DMatrix::identity(1, 1) * 0.1,
            p: DMatrix::identity(2, 2) * 5.0,
            x0,
            horizon,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Unconstrained optimum from the full KKT system in the stacked
    /// variables `(u_0..u_{N−1}, x_1..x_N)` with the dynamics as equality
    /// constraints.
    pub fn kkt_optimum(&self) -> Vec<DVector<f64>> {
        let (n, m, big_n) = (self.state_dim(), self.input_dim(), self.horizon);
        let nu = big_n * m;
        let nv = nu + big_n * n;
        let nc = big_n * n;
        let mut kkt = DMatrix::zeros(nv + nc, nv + nc);
        let mut rhs = DVector::zeros(nv + nc);
        let u_at = |i: usize| i * m;
        let x_at = |i: usize| nu + (i - 1) * n;
        for i in 0..big_n {
            kkt.view_mut((u_at(i), u_at(i)), (m, m)).copy_from(&(&self.r * 2.0));
        }
        for i in 1..=big_n {
            let w = if i == big_n { &self.p } else { &self.q };
            kkt.view_mut((x_at(i), x_at(i)), (n, n)).copy_from(&(w * 2.0));
        }
        // Row block i: x_{i+1} − A x_i − B u_i = (A x0 if i = 0 else 0).
        for i in 0..big_n {
            let row = nv + i * n;
            let mut c = DMatrix::zeros(n, nv);
            c.view_mut((0, x_at(i + 1)), (n, n)).copy_from(&DMatrix::identity(n, n));
            c.view_mut((0, u_at(i)), (n, m)).copy_from(&(-&self.b));
            if i > 0 {
                c.view_mut((0, x_at(i)), (n, n)).copy_from(&(-&self.a));
            } else {
                rhs.rows_mut(row, n).copy_from(&(&self.a * &self.x0));
            }
            kkt.view_mut((row, 0), (n, nv)).copy_from(&c);
            kkt.view_mut((0, row), (nv, n)).copy_from(&c.transpose());
        }
        let sol = kkt.lu().solve(&rhs).expect("KKT matrix is nonsingular");
        (0..big_n).map(|i| sol.rows(u_at(i), m).into_owned()).collect()
    }

    pub fn model(&self) -> FnDiscrete<impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync> {
        let (a, b) = (self.a.clone(), self.b.clone());
        FnDiscrete::new(self.state_dim(), self.input_dim(), move |x: &DVector<f64>, u: &DVector<f64>| {
            &a * x + &b * u
        })
    }

    /// Regulation problem with inputs boxed to `±bound` and no state box.
    pub fn config(&self, bound: f64) -> OcpConfig {
        let m = self.input_dim();
        OcpConfig::new(
            self.horizon,
            self.q.clone(),
            self.r.clone(),
            self.p.clone(),
            DVector::from_element(m, -bound),
            DVector::from_element(m, bound),
        )
    }

    pub fn solve(&self, cfg: &OcpConfig) -> OcpSolution {
        let refs = ReferenceWindow::constant(DVector::zeros(self.state_dim()), DVector::zeros(self.input_dim()), self.horizon);
        solve_ocp(&self.model(), cfg, &self.x0, 0, &refs, None, &SolverSettings::default()).unwrap()
    }

    pub fn cost(&self, us: &[DVector<f64>]) -> f64 {
        let mut x = self.x0.clone();
        let mut j = 0.0;
        for u in us {
            j += x.dot(&(&self.q * &x)) + u.dot(&(&self.r * u));
            x = &self.a * &x + &self.b * u;
        }
        j + x.dot(&(&self.p * &x))
    }
}

pub fn max_diff(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

/// Largest box violation of the returned inputs and states.
pub fn box_violation(cfg: &OcpConfig, sol: &OcpSolution) -> f64 {
    let over = |v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>| {
        v.iter()
            .zip(lo.iter().zip(hi.iter()))
            .map(|(x, (l, h))| (l - x).max(x - h).max(0.0))
            .fold(0.0, f64::max)
    };
    let u = sol.inputs.iter().map(|u| over(u, &cfg.u_lower, &cfg.u_upper));
    let x = sol.states[1..].iter().map(|x| over(x, &cfg.x_lower, &cfg.x_upper));
    u.chain(x).fold(0.0, f64::max)
}

/// A random linear instance whose state stays inside a box it is given,
/// with inputs clipped to `±0.2`.
pub fn boxed_instance(seed: u64) -> (LinearOcp, OcpConfig) {
    let mut inst = LinearOcp::random(100 + seed);
    inst.a = random_stable(inst.state_dim(), 0.9, &mut rng(seed));
    let mut cfg = inst.config(0.2);
    let reach = inst.x0.amax() + 1.0;
    cfg.x_lower = DVector::from_element(inst.state_dim(), -reach);
    cfg.x_upper = DVector::from_element(inst.state_dim(), reach);
    (inst, cfg)
}

/// One step of `x⁺ = x + u` from `x = 1`: the cost `1 + u² + 2(1 + u)²` is
/// minimized at `u = −2/3`, so with `|u| ≤ 0.1` the optimum is `u = −0.1`.
/// Returns the solver's input.
pub fn clipped_scalar_input() -> f64 {
    let model = FnDiscrete::new(1, 1, |x: &DVector<f64>, u: &DVector<f64>| x + u);
    let one = DMatrix::from_element(1, 1, 1.0);
    let cfg = OcpConfig::new(
        1,
        one.clone(),
        one,
        DMatrix::from_element(1, 1, 2.0),
        DVector::from_element(1, -0.1),
        DVector::from_element(1, 0.1),
    );
    let refs = ReferenceWindow::constant(DVector::zeros(1), DVector::zeros(1), 1);
    let x0 = DVector::from_element(1, 1.0);
    solve_ocp(&model, &cfg, &x0, 0, &refs, None, &SolverSettings::default()).unwrap().inputs[0][0]
}

/// Best `α = (a, 1 − a)` on a grid of the given resolution.
pub fn grid_search_pair(objective: &WeightObjective, resolution: f64) -> (DVector<f64>, f64) {
    let steps = (1.0 / resolution).round() as usize;
    (0..=steps)
        .map(|i| {
            let a = i as f64 / steps as f64;
            let alpha = DVector::from_vec(vec![a, 1.0 - a]);
            let loss = objective.loss(&alpha);
            (alpha, loss)
        })
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .unwrap()
}

/// One regulation run of the true pendulum under hard-terminal MPC with
/// ingredients certified on the same model.
pub struct RegulationRun {
    pub costs: Vec<f64>,
    /// Whether `x(k)` lies in the terminal set.
    pub inside: Vec<bool>,
    pub gamma: f64,
    pub final_state: DVector<f64>,
}

impl RegulationRun {
    /// `J*(x(k+1)) − J*(x(k))` for every `k` at or after the first entry into
    /// the terminal set.
    pub fn increments_after_entry(&self) -> Vec<f64> {
        match self.inside.iter().position(|&b| b) {
            Some(first) => self.costs[first..].windows(2).map(|w| w[1] - w[0]).collect(),
            None => Vec::new(),
        }
    }
}

pub fn pendulum_regulation(seed: u64, steps: usize) -> RegulationRun {
    use knode_mpc::certify::{certify_terminal_set, linearize, CertifyConfig, InputBox, TerminalIngredients};
    use knode_mpc::linalg::diag;
    use knode_mpc::nmpc::{MpcController, ReferenceFn, TerminalMode};
    use knode_mpc::ode::Discretized;

    let dt = 0.01;
    let truth = Pendulum::new(PendulumParams::true_plant());
    let model = Arc::new(Discretized::new(truth, IntegratorConfig::new(dt).unwrap()));
    let (x_eq, u_eq) = (DVector::zeros(2), DVector::zeros(1));
    let q = diag(&[1.0, 0.1]);
    let r = DMatrix::from_element(1, 1, 1e-5);
    let lin = linearize(model.as_ref(), &x_eq, &u_eq, 1e-5).unwrap();
    let mut ing = TerminalIngredients::new(&lin, &q, &r, 1.1).unwrap();
    let report = certify_terminal_set(
        model.as_ref(),
        &x_eq,
        &u_eq,
        &mut ing,
        &InputBox::symmetric(&[3.0]),
        &CertifyConfig {
            delta: 0.5,
            samples: 10_000,
            seed: 1,
            requested_gamma: None,
        },
    )
    .unwrap();
    assert!(report.passed());
    let cfg = OcpConfig::new(10, q, r, ing.p.clone(), DVector::from_element(1, -3.0), DVector::from_element(1, 3.0))
        .with_terminal_set(ing.gamma, TerminalMode::Hard);
    let reference: ReferenceFn = Arc::new(|_| (DVector::zeros(2), DVector::zeros(1)));
    let mut ctl = MpcController::new(model, cfg, SolverSettings::default(), reference);

    let mut g = rng(seed);
    let mut x = DVector::from_vec(vec![g.random_range(-0.05..0.05), g.random_range(-0.2..0.2)]);
    let mut costs = Vec::with_capacity(steps);
    let mut inside = Vec::with_capacity(steps);
    for k in 0..steps {
        let step = ctl.step(&x, k);
        let sol = step.solution.expect("regulation OCP solved");
        costs.push(sol.cost);
        inside.push(ing.in_terminal_set(&x));
        x = rk4_step(&truth, &x, &step.input, k as f64 * dt, dt).unwrap();
    }
    RegulationRun {
        costs,
        inside,
        gamma: ing.gamma,
        final_state: x,
    }
}
