//! Convex QPs with optimal-control structure, solved by a primal-dual
//! interior-point method.
//!
//! The problem is
//!
//! ```text
//! minimize   Σ_{i<N} ½ dxᵢᵀQᵢdxᵢ + qᵢᵀdxᵢ + ½ duᵢᵀRᵢduᵢ + rᵢᵀduᵢ + ½ dx_NᵀQ_N dx_N + q_Nᵀdx_N
//! subject to dx_{i+1} = Aᵢdxᵢ + Bᵢduᵢ + cᵢ,  dx_0 given
//!            lo ≤ duᵢ ≤ hi,  lo ≤ dxᵢ ≤ hi  (componentwise, may be infinite)
//!            aᵀdx_N ≤ b      (hard, or as the penalty w·max(0, aᵀdx_N − b))
//! ```
//!
//! Each Newton system is an equality-constrained LQ problem: the barrier
//! curvature of box rows lands on the diagonals of `Q` and `R`, the terminal
//! row adds a rank-one term to `Q_N`, and a Riccati recursion solves it.
//! Predictor and corrector share one factorization (Mehrotra).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::symmetrize;

#[derive(Debug, Clone, PartialEq)]
pub struct QpStage {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RowKind {
    Hard,
    /// Exact L1 penalty with this weight.
    Soft(f64),
}

/// One linear inequality `aᵀdx_N ≤ b` on the last state.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalRow {
    pub a: DVector<f64>,
    pub b: f64,
    pub kind: RowKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpQp {
    pub x0: DVector<f64>,
    pub stages: Vec<QpStage>,
    /// `N + 1` state Hessians; the first one is unused since `dx_0` is fixed.
    pub q: Vec<DMatrix<f64>>,
    pub q_lin: Vec<DVector<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub r_lin: Vec<DVector<f64>>,
    /// Bounds on `du_i`, one pair per stage.
    pub u_bounds: Vec<(DVector<f64>, DVector<f64>)>,
    /// Bounds on `dx_i` for `i = 1..=N`; infinite entries are ignored.
    pub x_bounds: Vec<(DVector<f64>, DVector<f64>)>,
    pub terminal: Option<TerminalRow>,
}

impl OcpQp {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }

    pub fn input_dim(&self) -> usize {
        self.stages.first().map_or(0, |s| s.b.ncols())
    }

    /// Quadratic objective at `(dx, du)`, excluding any soft penalty.
    pub fn objective(&self, dx: &[DVector<f64>], du: &[DVector<f64>]) -> f64 {
        let mut j = 0.0;
        for i in 1..dx.len() {
            j += 0.5 * dx[i].dot(&(&self.q[i] * &dx[i])) + self.q_lin[i].dot(&dx[i]);
        }
        for i in 0..du.len() {
            j += 0.5 * du[i].dot(&(&self.r[i] * &du[i])) + self.r_lin[i].dot(&du[i]);
        }
        j
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub max_iter: usize,
    /// Bound on the scaled KKT residuals and on the mean complementarity.
    pub tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iter: 60,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Solved,
    MaxIterations,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub dx: Vec<DVector<f64>>,
    pub du: Vec<DVector<f64>>,
    /// Multipliers of the dynamics equalities, `λ_{i+1}` for `i < N`.
    pub costates: Vec<DVector<f64>>,
    /// One signed multiplier per bounded input or state component (upper
    /// minus lower), then the terminal multiplier if there is a terminal row.
    pub ineq_duals: Vec<f64>,
    /// Multiplier of `aᵀdx_N ≤ b` in the caller's scaling.
    pub terminal_dual: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub complementarity: f64,
}

impl QpSolution {
    pub fn max_dual(&self) -> f64 {
        self.costates
            .iter()
            .flat_map(|l| l.iter())
            .chain(self.ineq_duals.iter())
            .fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Target {
    Input(usize, usize),
    State(usize, usize),
    Terminal,
    Slack,
}

/// `sign · v ≤ bound`; the terminal row reads `âᵀdx_N − s ≤ bound` with `s`
/// present only for a soft row, and the slack row is `−s ≤ 0`.
#[derive(Debug, Clone, Copy)]
struct Row {
    target: Target,
    sign: f64,
    bound: f64,
    /// Index into the reported multiplier list.
    report: usize,
}

struct Layout {
    rows: Vec<Row>,
    term_dir: Option<DVector<f64>>,
    term_norm: f64,
    /// Weight on the slack of a soft terminal row, in normalized units.
    soft_weight: Option<f64>,
    reported: usize,
}

fn layout(qp: &OcpQp) -> Layout {
    let mut rows = Vec::new();
    let mut reported = 0;
    let mut boxes = |target: fn(usize, usize) -> Target, offset: usize, bounds: &[(DVector<f64>, DVector<f64>)]| {
        for (i, (lo, hi)) in bounds.iter().enumerate() {
            for j in 0..lo.len() {
                if !(lo[j].is_finite() || hi[j].is_finite()) {
                    continue;
                }
                if hi[j].is_finite() {
                    rows.push(Row {
                        target: target(i + offset, j),
                        sign: 1.0,
                        bound: hi[j],
                        report: reported,
                    });
                }
                if lo[j].is_finite() {
                    rows.push(Row {
                        target: target(i + offset, j),
                        sign: -1.0,
                        bound: -lo[j],
                        report: reported,
                    });
                }
                reported += 1;
            }
        }
    };
    boxes(Target::Input, 0, &qp.u_bounds);
    boxes(Target::State, 1, &qp.x_bounds);
    let (mut term_dir, mut term_norm, mut soft_weight) = (None, 1.0, None);
    if let Some(t) = &qp.terminal {
        let norm = t.a.norm();
        if norm > 0.0 {
            term_dir = Some(&t.a / norm);
            term_norm = norm;
            rows.push(Row {
                target: Target::Terminal,
                sign: 1.0,
                bound: t.b / norm,
                report: reported,
            });
            if let RowKind::Soft(w) = t.kind {
                soft_weight = Some(w * norm);
                rows.push(Row {
                    target: Target::Slack,
                    sign: -1.0,
                    bound: 0.0,
                    report: usize::MAX,
                });
            }
            reported += 1;
        }
    }
    Layout {
        rows,
        term_dir,
        term_norm,
        soft_weight,
        reported,
    }
}

/// Trajectory-shaped storage: `N + 1` state blocks and `N` input blocks in
/// two flat vectors.
#[derive(Clone)]
struct Traj {
    x: DVector<f64>,
    u: DVector<f64>,
}

impl Traj {
    fn zeros(n: usize, m: usize, big_n: usize) -> Self {
        Self {
            x: DVector::zeros((big_n + 1) * n),
            u: DVector::zeros(big_n * m),
        }
    }

    fn fill(&mut self, v: f64) {
        self.x.fill(v);
        self.u.fill(v);
    }

    fn amax_from(&self, first_state: usize, n: usize) -> f64 {
        self.x.rows_range(first_state * n..).amax().max(self.u.amax())
    }
}

struct Factor {
    n: usize,
    m: usize,
    gains: Vec<DMatrix<f64>>,
    g_chol: Vec<Option<nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>>>,
    /// `P_{i+1}` for `i < N` at index `i + 1`.
    p: Vec<DMatrix<f64>>,
    pb: DMatrix<f64>,
    pa: DMatrix<f64>,
    g: DMatrix<f64>,
    h: DMatrix<f64>,
    // backward-pass scratch
    p_vecs: DVector<f64>,
    k_ff: DVector<f64>,
    s: DVector<f64>,
    bk: DVector<f64>,
}

impl Factor {
    fn new(qp: &OcpQp) -> Self {
        let (n, m, big_n) = (qp.state_dim(), qp.input_dim(), qp.horizon());
        Self {
            n,
            m,
            gains: vec![DMatrix::zeros(m, n); big_n],
            g_chol: vec![None; big_n],
            p: vec![DMatrix::zeros(n, n); big_n + 1],
            pb: DMatrix::zeros(n, m),
            pa: DMatrix::zeros(n, n),
            g: DMatrix::zeros(m, m),
            h: DMatrix::zeros(m, n),
            p_vecs: DVector::zeros((big_n + 1) * n),
            k_ff: DVector::zeros(big_n * m),
            s: DVector::zeros(n),
            bk: DVector::zeros(n),
        }
    }

    /// Riccati factorization with diagonal additions `sigma` (state block 0
    /// unused) and `sigma_n · â âᵀ` on the last state.
    fn refactor(&mut self, qp: &OcpQp, sigma: &Traj, term: Option<(&DVector<f64>, f64)>) -> bool {
        let (n, m, big_n) = (self.n, self.m, qp.horizon());
        self.p[big_n].copy_from(&qp.q[big_n]);
        add_diagonal(&mut self.p[big_n], sigma.x.rows(big_n * n, n).as_slice());
        if let Some((a, s)) = term {
            self.p[big_n].ger(s, a, a, 1.0);
        }
        for i in (0..big_n).rev() {
            let st = &qp.stages[i];
            let (head, tail) = self.p.split_at_mut(i + 1);
            let p_next = &tail[0];
            self.pb.gemm(1.0, p_next, &st.b, 0.0);
            self.g.copy_from(&qp.r[i]);
            add_diagonal(&mut self.g, sigma.u.rows(i * m, m).as_slice());
            self.g.gemm_tr(1.0, &st.b, &self.pb, 1.0);
            self.h.gemm_tr(1.0, &self.pb, &st.a, 0.0);
            let chol = match nalgebra::linalg::Cholesky::new(symmetrize(&self.g)) {
                Some(c) => c,
                None => return false,
            };
            let k = &mut self.gains[i];
            k.copy_from(&self.h);
            chol.solve_mut(k);
            k.neg_mut();
            if i > 0 {
                self.pa.gemm(1.0, p_next, &st.a, 0.0);
                let p_i = &mut head[i];
                p_i.copy_from(&qp.q[i]);
                add_diagonal(p_i, sigma.x.rows(i * n, n).as_slice());
                p_i.gemm_tr(1.0, &st.a, &self.pa, 1.0);
                p_i.gemm_tr(1.0, &self.h, k, 1.0);
                for r in 0..n {
                    for c in r + 1..n {
                        let v = 0.5 * (p_i[(r, c)] + p_i[(c, r)]);
                        p_i[(r, c)] = v;
                        p_i[(c, r)] = v;
                    }
                }
            }
            self.g_chol[i] = Some(chol);
        }
        self.p.iter().skip(1).all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Minimizes `½vᵀH̃v + hᵀv` subject to `x_{i+1} = Aᵢxᵢ + Bᵢuᵢ + eᵢ`
    /// and the given `x_0`, writing the primal solution and the costates.
    fn solve(&mut self, qp: &OcpQp, h: &Traj, e: &DVector<f64>, x0: &DVector<f64>, out: &mut Traj, lam: &mut DVector<f64>) {
        let (n, m, big_n) = (self.n, self.m, qp.horizon());
        self.p_vecs.rows_mut(big_n * n, n).copy_from(&h.x.rows(big_n * n, n));
        for i in (0..big_n).rev() {
            let st = &qp.stages[i];
            let p_next = &self.p[i + 1];
            self.s.copy_from(&self.p_vecs.rows((i + 1) * n, n));
            self.s.gemv(1.0, p_next, &e.rows(i * n, n), 1.0);
            let mut k = self.k_ff.rows_mut(i * m, m);
            k.copy_from(&h.u.rows(i * m, m));
            k.gemv_tr(1.0, &st.b, &self.s, 1.0);
            self.g_chol[i].as_ref().expect("factored").solve_mut(&mut k);
            k.neg_mut();
            self.bk.gemv(1.0, &st.b, &k, 0.0);
            self.s.gemv(1.0, p_next, &self.bk, 1.0);
            let mut p_i = self.p_vecs.rows_mut(i * n, n);
            p_i.copy_from(&h.x.rows(i * n, n));
            p_i.gemv_tr(1.0, &st.a, &self.s, 1.0);
        }
        out.x.rows_mut(0, n).copy_from(x0);
        for i in 0..big_n {
            let st = &qp.stages[i];
            let (done, rest) = out.x.as_mut_slice().split_at_mut((i + 1) * n);
            let xi = nalgebra::DVectorView::from_slice(&done[i * n..], n);
            let mut u = out.u.rows_mut(i * m, m);
            u.copy_from(&self.k_ff.rows(i * m, m));
            u.gemv(1.0, &self.gains[i], &xi, 1.0);
            let mut next = nalgebra::DVectorViewMut::from_slice(&mut rest[..n], n);
            next.copy_from(&e.rows(i * n, n));
            next.gemv(1.0, &st.a, &xi, 1.0);
            next.gemv(1.0, &st.b, &u, 1.0);
            let mut l = lam.rows_mut(i * n, n);
            l.copy_from(&self.p_vecs.rows((i + 1) * n, n));
            l.gemv(1.0, &self.p[i + 1], &next, 1.0);
        }
    }
}

fn add_diagonal(m: &mut DMatrix<f64>, d: &[f64]) {
    for (j, v) in d.iter().enumerate() {
        m[(j, j)] += v;
    }
}

struct Point {
    v: Traj,
    s: f64,
    /// `λ_{i+1}` in block `i`.
    lambda: DVector<f64>,
    t: DVector<f64>,
    z: DVector<f64>,
}

impl Layout {
    fn row_value(&self, row: &Row, v: &Traj, s: f64, n: usize, m: usize) -> f64 {
        match row.target {
            Target::Input(i, j) => row.sign * v.u[i * m + j],
            Target::State(i, j) => row.sign * v.x[i * n + j],
            Target::Terminal => {
                let a = self.term_dir.as_ref().expect("terminal row without direction");
                let slack = if self.soft_weight.is_some() { s } else { 0.0 };
                let last = v.x.len() - n;
                a.dot(&v.x.rows(last, n)) - slack
            }
            Target::Slack => -s,
        }
    }

    fn row_values(&self, v: &Traj, s: f64, n: usize, m: usize, out: &mut DVector<f64>) {
        for (k, row) in self.rows.iter().enumerate() {
            out[k] = self.row_value(row, v, s, n, m);
        }
    }

    /// Adds `Cᵀw` into `g` and the slack accumulator.
    fn scatter(&self, w: &DVector<f64>, g: &mut Traj, gs: &mut f64, n: usize, m: usize) {
        let last = g.x.len() - n;
        for (row, &v) in self.rows.iter().zip(w.iter()) {
            match row.target {
                Target::Input(i, j) => g.u[i * m + j] += row.sign * v,
                Target::State(i, j) => g.x[i * n + j] += row.sign * v,
                Target::Terminal => {
                    if let Some(a) = &self.term_dir {
                        g.x.rows_mut(last, n).axpy(v, a, 1.0);
                    }
                    if self.soft_weight.is_some() {
                        *gs -= v;
                    }
                }
                Target::Slack => *gs -= v,
            }
        }
    }
}

struct Residuals {
    /// Stationarity; state block 0 is unused.
    rd: Traj,
    rd_s: f64,
    /// Dynamics defects, one state block per stage.
    rp: DVector<f64>,
    ri: DVector<f64>,
}

impl Residuals {
    fn new(n: usize, m: usize, big_n: usize, rows: usize) -> Self {
        Self {
            rd: Traj::zeros(n, m, big_n),
            rd_s: 0.0,
            rp: DVector::zeros(big_n * n),
            ri: DVector::zeros(rows),
        }
    }

    fn dual_inf(&self, n: usize) -> f64 {
        self.rd.amax_from(1, n).max(self.rd_s.abs())
    }

    fn primal_inf(&self) -> f64 {
        self.rp.amax().max(self.ri.amax())
    }
}

struct Solver<'a> {
    qp: &'a OcpQp,
    lay: &'a Layout,
    n: usize,
    m: usize,
    fac: Factor,
    sigma: DVector<f64>,
    sigma_traj: Traj,
    term_row: Option<usize>,
    slack_row: Option<usize>,
    // scratch
    h: Traj,
    g: DVector<f64>,
    cdv: DVector<f64>,
    zero_x0: DVector<f64>,
}

struct Direction {
    v: Traj,
    ds: f64,
    dlambda: DVector<f64>,
    dt: DVector<f64>,
    dz: DVector<f64>,
}

impl Direction {
    fn new(n: usize, m: usize, big_n: usize, rows: usize) -> Self {
        Self {
            v: Traj::zeros(n, m, big_n),
            ds: 0.0,
            dlambda: DVector::zeros(big_n * n),
            dt: DVector::zeros(rows),
            dz: DVector::zeros(rows),
        }
    }
}

impl<'a> Solver<'a> {
    fn new(qp: &'a OcpQp, lay: &'a Layout) -> Self {
        let (n, m, big_n) = (qp.state_dim(), qp.input_dim(), qp.horizon());
        let rows = lay.rows.len();
        let term_row = lay.rows.iter().position(|r| r.target == Target::Terminal);
        let slack_row = lay.rows.iter().position(|r| r.target == Target::Slack);
        Self {
            qp,
            lay,
            n,
            m,
            fac: Factor::new(qp),
            sigma: DVector::zeros(rows),
            sigma_traj: Traj::zeros(n, m, big_n),
            term_row,
            slack_row,
            h: Traj::zeros(n, m, big_n),
            g: DVector::zeros(rows),
            cdv: DVector::zeros(rows),
            zero_x0: DVector::zeros(n),
        }
    }

    fn residuals(&self, pt: &Point, res: &mut Residuals) {
        let (qp, n, m, big_n) = (self.qp, self.n, self.m, self.qp.horizon());
        res.rd_s = self.lay.soft_weight.unwrap_or(0.0);
        for i in 1..=big_n {
            let mut r = res.rd.x.rows_mut(i * n, n);
            r.copy_from(&qp.q_lin[i]);
            r.gemv(1.0, &qp.q[i], &pt.v.x.rows(i * n, n), 1.0);
            r -= pt.lambda.rows((i - 1) * n, n);
            if i < big_n {
                r.gemv_tr(1.0, &qp.stages[i].a, &pt.lambda.rows(i * n, n), 1.0);
            }
        }
        for i in 0..big_n {
            let mut r = res.rd.u.rows_mut(i * m, m);
            r.copy_from(&qp.r_lin[i]);
            r.gemv(1.0, &qp.r[i], &pt.v.u.rows(i * m, m), 1.0);
            r.gemv_tr(1.0, &qp.stages[i].b, &pt.lambda.rows(i * n, n), 1.0);
        }
        self.lay.scatter(&pt.z, &mut res.rd, &mut res.rd_s, n, m);
        for i in 0..big_n {
            let st = &qp.stages[i];
            let mut r = res.rp.rows_mut(i * n, n);
            r.copy_from(&st.c);
            r.gemv(1.0, &st.a, &pt.v.x.rows(i * n, n), 1.0);
            r.gemv(1.0, &st.b, &pt.v.u.rows(i * m, m), 1.0);
            r -= pt.v.x.rows((i + 1) * n, n);
        }
        self.lay.row_values(&pt.v, pt.s, n, m, &mut res.ri);
        for (k, row) in self.lay.rows.iter().enumerate() {
            res.ri[k] += pt.t[k] - row.bound;
        }
    }

    fn factor(&mut self, pt: &Point) -> bool {
        let (n, m) = (self.n, self.m);
        self.sigma.copy_from(&pt.z);
        self.sigma.component_div_assign(&pt.t);
        self.sigma_traj.fill(0.0);
        for (k, row) in self.lay.rows.iter().enumerate() {
            match row.target {
                Target::Input(i, j) => self.sigma_traj.u[i * m + j] += self.sigma[k],
                Target::State(i, j) => self.sigma_traj.x[i * n + j] += self.sigma[k],
                _ => {}
            }
        }
        let term_sigma = self.term_row.map(|kt| match self.slack_row {
            Some(ks) => self.sigma[kt] * self.sigma[ks] / (self.sigma[kt] + self.sigma[ks]),
            None => self.sigma[kt],
        });
        let term = self.lay.term_dir.as_ref().zip(term_sigma);
        self.fac.refactor(self.qp, &self.sigma_traj, term)
    }

    /// Newton direction for the complementarity target `rc` (the step
    /// drives `t∘z` toward `t∘z − rc`).
    fn direction(&mut self, pt: &Point, res: &Residuals, rc: &DVector<f64>, dir: &mut Direction) {
        let (n, m, big_n) = (self.n, self.m, self.qp.horizon());
        self.g.copy_from(&pt.z);
        self.g.component_mul_assign(&res.ri);
        self.g -= rc;
        self.g.component_div_assign(&pt.t);
        self.h.x.copy_from(&res.rd.x);
        self.h.u.copy_from(&res.rd.u);
        let mut hs = res.rd_s;
        self.lay.scatter(&self.g, &mut self.h, &mut hs, n, m);
        let soft = match (self.slack_row, self.term_row, &self.lay.term_dir) {
            (Some(ks), Some(kt), Some(a)) => Some((kt, self.sigma[ks] + self.sigma[kt], a)),
            _ => None,
        };
        if let Some((kt, sum, a)) = soft {
            self.h.x.rows_mut(big_n * n, n).axpy(self.sigma[kt] * hs / sum, a, 1.0);
        }
        self.fac.solve(self.qp, &self.h, &res.rp, &self.zero_x0, &mut dir.v, &mut dir.dlambda);
        dir.ds = match soft {
            Some((kt, sum, a)) => (self.sigma[kt] * a.dot(&dir.v.x.rows(big_n * n, n)) - hs) / sum,
            None => 0.0,
        };
        self.lay.row_values(&dir.v, dir.ds, n, m, &mut self.cdv);
        dir.dt.copy_from(&res.ri);
        dir.dt += &self.cdv;
        dir.dt.neg_mut();
        dir.dz.copy_from(&self.sigma);
        dir.dz.component_mul_assign(&self.cdv);
        dir.dz += &self.g;
    }
}

/// Largest `α ≤ 1` with `v + α·dv ≥ (1 − τ)·v` componentwise.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>, tau: f64) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -tau * x / d)
        .fold(1.0, f64::min)
}

fn data_scale(qp: &OcpQp) -> f64 {
    qp.q_lin
        .iter()
        .chain(qp.r_lin.iter())
        .chain(qp.stages.iter().map(|s| &s.c))
        .map(|v| v.amax())
        .fold(1.0f64, f64::max)
}

fn flatten(blocks: &[DVector<f64>], skip: usize, len: usize) -> DVector<f64> {
    let mut out = DVector::zeros(len);
    let mut at = 0;
    for b in &blocks[skip..] {
        out.rows_mut(at, b.len()).copy_from(b);
        at += b.len();
    }
    out
}

fn blocks(v: &DVector<f64>, size: usize) -> Vec<DVector<f64>> {
    v.as_slice().chunks(size.max(1)).map(DVector::from_column_slice).collect()
}

pub fn solve_ocp_qp(qp: &OcpQp, settings: &QpSettings) -> QpSolution {
    let (n, m, big_n) = (qp.state_dim(), qp.input_dim(), qp.horizon());
    let lay = layout(qp);
    let nrows = lay.rows.len();
    let mut solver = Solver::new(qp, &lay);

    // Start from the solution that ignores every inequality.
    let mut pt = Point {
        v: Traj::zeros(n, m, big_n),
        s: 0.0,
        lambda: DVector::zeros(big_n * n),
        t: DVector::zeros(nrows),
        z: DVector::from_element(nrows, 1.0),
    };
    let zero_sigma = Traj::zeros(n, m, big_n);
    if !solver.fac.refactor(qp, &zero_sigma, None) {
        return failed(qp, &lay);
    }
    let mut lin = Traj {
        x: flatten(&qp.q_lin, 0, (big_n + 1) * n),
        u: flatten(&qp.r_lin, 0, big_n * m),
    };
    let c = flatten(&qp.stages.iter().map(|s| s.c.clone()).collect::<Vec<_>>(), 0, big_n * n);
    solver.fac.solve(qp, &lin, &c, &qp.x0, &mut pt.v, &mut pt.lambda);
    lin.fill(0.0);
    if let (Some(_), Some(a), Some(kt)) = (lay.soft_weight, &lay.term_dir, solver.term_row) {
        pt.s = (a.dot(&pt.v.x.rows(big_n * n, n)) - lay.rows[kt].bound).max(0.0) + 1.0;
    }
    if let (Some(w), Some(kt), Some(ks)) = (lay.soft_weight, solver.term_row, solver.slack_row) {
        pt.z[kt] = (0.5 * w).max(1.0);
        pt.z[ks] = (0.5 * w).max(1.0);
    }
    let mut values = DVector::zeros(nrows);
    lay.row_values(&pt.v, pt.s, n, m, &mut values);
    for (k, row) in lay.rows.iter().enumerate() {
        pt.t[k] = (row.bound - values[k]).max(1.0);
    }

    let scale = data_scale(qp).max(lay.soft_weight.unwrap_or(0.0));
    let mut status = QpStatus::MaxIterations;
    let mut iterations = 0;
    let mut res = Residuals::new(n, m, big_n, nrows);
    solver.residuals(&pt, &mut res);
    let mut aff = Direction::new(n, m, big_n, nrows);
    let mut dir = Direction::new(n, m, big_n, nrows);
    let mut rc = DVector::zeros(nrows);

    for it in 0..=settings.max_iter {
        let mu = if nrows == 0 { 0.0 } else { pt.t.dot(&pt.z) / nrows as f64 };
        let (dual, primal) = (res.dual_inf(n), res.primal_inf());
        if !(dual.is_finite() && primal.is_finite() && mu.is_finite()) {
            status = QpStatus::NonFinite;
            break;
        }
        if dual <= settings.tol * scale && primal <= settings.tol * scale && mu <= settings.tol {
            status = QpStatus::Solved;
            break;
        }
        if it == settings.max_iter {
            break;
        }
        iterations = it + 1;
        if !solver.factor(&pt) {
            status = QpStatus::NonFinite;
            break;
        }
        rc.copy_from(&pt.t);
        rc.component_mul_assign(&pt.z);
        solver.direction(&pt, &res, &rc, &mut aff);
        let alpha_aff = max_step(&pt.t, &aff.dt, 1.0).min(max_step(&pt.z, &aff.dz, 1.0));
        let mu_aff = if nrows == 0 {
            0.0
        } else {
            (&pt.t + &aff.dt * alpha_aff).dot(&(&pt.z + &aff.dz * alpha_aff)) / nrows as f64
        };
        let centering = if mu > 0.0 { (mu_aff / mu).powi(3) } else { 0.0 };
        let second_order = if alpha_aff < 0.1 { 0.0 } else { 1.0 };
        for k in 0..nrows {
            rc[k] += second_order * aff.dt[k] * aff.dz[k] - centering * mu;
        }
        solver.direction(&pt, &res, &rc, &mut dir);
        let alpha = max_step(&pt.t, &dir.dt, 0.995).min(max_step(&pt.z, &dir.dz, 0.995));

        pt.v.x.rows_range_mut(n..).axpy(alpha, &dir.v.x.rows_range(n..), 1.0);
        pt.v.u.axpy(alpha, &dir.v.u, 1.0);
        pt.lambda.axpy(alpha, &dir.dlambda, 1.0);
        pt.s += alpha * dir.ds;
        pt.t.axpy(alpha, &dir.dt, 1.0);
        pt.z.axpy(alpha, &dir.dz, 1.0);
        solver.residuals(&pt, &mut res);
    }

    let mut ineq_duals = vec![0.0; lay.reported];
    let mut terminal_dual = 0.0;
    for (row, z) in lay.rows.iter().zip(pt.z.iter()) {
        match row.target {
            Target::Terminal => {
                terminal_dual = z / lay.term_norm;
                ineq_duals[row.report] = terminal_dual;
            }
            Target::Slack => {}
            _ => ineq_duals[row.report] += row.sign * z,
        }
    }
    let complementarity = if nrows == 0 { 0.0 } else { pt.t.dot(&pt.z) / nrows as f64 };
    let (primal_residual, dual_residual) = (res.primal_inf(), res.dual_inf(n));
    QpSolution {
        dx: blocks(&pt.v.x, n),
        du: if m == 0 { vec![DVector::zeros(0); big_n] } else { blocks(&pt.v.u, m) },
        costates: blocks(&pt.lambda, n),
        ineq_duals,
        terminal_dual,
        status,
        iterations,
        primal_residual,
        dual_residual,
        complementarity,
    }
}

fn failed(qp: &OcpQp, lay: &Layout) -> QpSolution {
    let (n, m, big_n) = (qp.state_dim(), qp.input_dim(), qp.horizon());
    QpSolution {
        dx: vec![DVector::zeros(n); big_n + 1],
        du: vec![DVector::zeros(m); big_n],
        costates: vec![DVector::zeros(n); big_n],
        ineq_duals: vec![0.0; lay.reported],
        terminal_dual: 0.0,
        status: QpStatus::NonFinite,
        iterations: 0,
        primal_residual: f64::INFINITY,
        dual_residual: f64::INFINITY,
        complementarity: f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn scalar_qp(lo: f64, hi: f64) -> OcpQp {
        // x⁺ = x + u, x0 = 1, cost x0² + u² + 2x1² (½-scaled Hessians).
        OcpQp {
            x0: dvector![1.0],
            stages: vec![QpStage {
                a: dmatrix![1.0],
                b: dmatrix![1.0],
                c: dvector![0.0],
            }],
            q: vec![dmatrix![2.0], dmatrix![4.0]],
            q_lin: vec![dvector![0.0], dvector![0.0]],
            r: vec![dmatrix![2.0]],
            r_lin: vec![dvector![0.0]],
            u_bounds: vec![(dvector![lo], dvector![hi])],
            x_bounds: vec![(dvector![f64::NEG_INFINITY], dvector![f64::INFINITY])],
            terminal: None,
        }
    }

    #[test]
    fn unconstrained_scalar() {
        let sol = solve_ocp_qp(&scalar_qp(-10.0, 10.0), &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.du[0][0] + 2.0 / 3.0).abs() < 1e-8, "{sol:?}");
        assert!((sol.dx[1][0] - 1.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn clipped_scalar() {
        let sol = solve_ocp_qp(&scalar_qp(-0.1, 0.1), &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.du[0][0] + 0.1).abs() < 1e-7, "{}", sol.du[0][0]);
        // multiplier of the active lower bound: 2u + 4(1+u) + y = 0 at u = −0.1
        assert!((sol.ineq_duals[0] + 3.4).abs() < 1e-5, "{:?}", sol.ineq_duals);
    }

    #[test]
    fn terminal_halfspace() {
        // Require dx_1 ≤ 0.1: stage cost pulls u to 0, terminal pulls x1 down.
        let mut qp = scalar_qp(-10.0, 10.0);
        qp.q[1] = dmatrix![0.0];
        qp.terminal = Some(TerminalRow {
            a: dvector![2.0],
            b: 0.2,
            kind: RowKind::Hard,
        });
        let sol = solve_ocp_qp(&qp, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.dx[1][0] - 0.1).abs() < 1e-7);
        assert!((sol.du[0][0] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn soft_terminal_penalty() {
        // min u² + w·max(0, 1 + u − 0.1): optimum u = −w/2 when w/2 < 0.9.
        let mut qp = scalar_qp(-10.0, 10.0);
        qp.q[1] = dmatrix![0.0];
        qp.terminal = Some(TerminalRow {
            a: dvector![1.0],
            b: 0.1,
            kind: RowKind::Soft(1.0),
        });
        let sol = solve_ocp_qp(&qp, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.du[0][0] + 0.5).abs() < 1e-7, "{}", sol.du[0][0]);
        assert!((sol.terminal_dual - 1.0).abs() < 1e-6);
    }

    #[test]
    fn large_soft_weight_acts_as_hard() {
        let mut qp = scalar_qp(-1.0, 1.0);
        qp.q[1] = dmatrix![0.0];
        qp.terminal = Some(TerminalRow {
            a: dvector![1.0],
            b: 0.1,
            kind: RowKind::Soft(1e6),
        });
        let sol = solve_ocp_qp(&qp, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.du[0][0] + 0.9).abs() < 1e-7, "{}", sol.du[0][0]);
        assert!((sol.terminal_dual - 1.8).abs() < 1e-6);
    }
}
