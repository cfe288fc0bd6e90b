//! Independent reference solutions and the built-in benchmark problems.
//!
//! The Riccati oracle solves linear-quadratic problems without ever touching the
//! costate sweep; the direct method minimizes the discretized cost by projected
//! gradient descent. Neither shares the fixed-point iteration of [`crate::msa`].

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::norms::{dual_kind, induced_norm_between, log_norm, symmetric_eigenvalues, NormKind};
use crate::problem::{bounded_sets, LipschitzData, LipschitzValues, ProblemSpec};
use crate::signals::{sup_distance, BoxSet, Grid, Interpolation, Signal};
use crate::sweep::{backward_sweep, cost_along, forward_sweep};

/// Linear dynamics `ẋ = Ax + Bu` with running cost `½xᵀQx + ½uᵀRu` and
/// terminal cost `½xᵀP_T x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LqrParams", into = "LqrParams")]
pub struct LqrSpec {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    p_t: DMatrix<f64>,
    x0: DVector<f64>,
    horizon: f64,
    control_box: BoxSet,
    state_norm: NormKind,
    control_norm: NormKind,
    /// Contraction rate; defaults to `−μ(A)` in the state norm.
    c: Option<f64>,
}

/// Row-major plain-data form of [`LqrSpec`], used in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrParams {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_t: Option<Vec<Vec<f64>>>,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub control_box: BoxSet,
    #[serde(default = "default_norm")]
    pub state_norm: NormKind,
    #[serde(default = "default_norm")]
    pub control_norm: NormKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

fn default_norm() -> NormKind {
    NormKind::L2
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(invalid(format!("matrix {name} must be a nonempty rectangular array")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TryFrom<LqrParams> for LqrSpec {
    type Error = Error;

    fn try_from(p: LqrParams) -> Result<Self> {
        let a = matrix(&p.a, "A")?;
        let n = a.nrows();
        let p_t = match &p.p_t {
            Some(m) => matrix(m, "P_T")?,
            None => DMatrix::zeros(n, n),
        };
        LqrSpec::new(
            a,
            matrix(&p.b, "B")?,
            matrix(&p.q, "Q")?,
            matrix(&p.r, "R")?,
            p_t,
            DVector::from_vec(p.x0),
            p.horizon,
            p.control_box,
        )?
        .with_norms(p.state_norm, p.control_norm)?
        .with_rate(p.c)
    }
}

impl From<LqrSpec> for LqrParams {
    fn from(s: LqrSpec) -> Self {
        LqrParams {
            a: rows(&s.a),
            b: rows(&s.b),
            q: rows(&s.q),
            r: rows(&s.r),
            p_t: Some(rows(&s.p_t)),
            x0: s.x0.iter().copied().collect(),
            horizon: s.horizon,
            control_box: s.control_box,
            state_norm: s.state_norm,
            control_norm: s.control_norm,
            c: s.c,
        }
    }
}

fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(invalid(format!("{name} must be symmetric")));
    }
    let eig = symmetric_eigenvalues(m)?;
    if eig.iter().any(|e| *e < -1e-12 * scale) {
        return Err(invalid(format!("{name} must be positive semidefinite")));
    }
    Ok(())
}

impl LqrSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        p_t: DMatrix<f64>,
        x0: DVector<f64>,
        horizon: f64,
        control_box: BoxSet,
    ) -> Result<Self> {
        let n = a.nrows();
        let k = b.ncols();
        if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (k, k) || p_t.shape() != (n, n) {
            return Err(invalid("LQR matrices have inconsistent shapes"));
        }
        if x0.len() != n || control_box.dim() != k {
            return Err(invalid("initial state or control box has the wrong dimension"));
        }
        for m in [&a, &b, &q, &r, &p_t] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(invalid("LQR matrices must be finite"));
            }
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid("horizon must be positive"));
        }
        check_psd(&q, "Q")?;
        check_psd(&p_t, "P_T")?;
        if (&r - r.transpose()).amax() > 1e-12 * r.amax().max(1.0) || r.clone().cholesky().is_none() {
            return Err(invalid("R must be symmetric positive definite"));
        }
        Ok(LqrSpec {
            a,
            b,
            q,
            r,
            p_t,
            x0,
            horizon,
            control_box,
            state_norm: NormKind::L2,
            control_norm: NormKind::L2,
            c: None,
        })
    }

    pub fn with_norms(mut self, state_norm: NormKind, control_norm: NormKind) -> Result<Self> {
        state_norm.validate(self.a.nrows())?;
        control_norm.validate(self.b.ncols())?;
        self.state_norm = state_norm;
        self.control_norm = control_norm;
        Ok(self)
    }

    /// Declares the contraction rate instead of using `−μ(A)`.
    pub fn with_rate(mut self, c: Option<f64>) -> Result<Self> {
        if let Some(c) = c {
            if !(c > 0.0 && c.is_finite()) {
                return Err(invalid("contraction rate must be positive"));
            }
        }
        self.c = c;
        Ok(self)
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid("horizon must be positive"));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    fn r_inv(&self) -> DMatrix<f64> {
        self.r.clone().cholesky().expect("validated positive definite").inverse()
    }

    /// The corresponding [`ProblemSpec`] with the analytic minimizer `−R⁻¹Bᵀλ`.
    pub fn to_problem(&self) -> Result<ProblemSpec> {
        let (a, a2) = (self.a.clone(), self.a.clone());
        let (b, b2) = (self.b.clone(), self.b.clone());
        let (q, q2) = (self.q.clone(), self.q.clone());
        let (r, pt, pt2) = (self.r.clone(), self.p_t.clone(), self.p_t.clone());
        let gain = self.r_inv() * self.b.transpose();
        ProblemSpec::builder(self.x0.clone(), self.horizon, self.control_box.clone())
            .dynamics(move |_, x, u| &a * x + &b * u, move |_, _, _| a2.clone(), move |_, _, _| b2.clone())
            .running_cost(move |_, x, u| 0.5 * (x.dot(&(&q * x)) + u.dot(&(&r * u))), move |_, x, _| &q2 * x)
            .terminal_cost(move |x| 0.5 * x.dot(&(&pt * x)), move |x| &pt2 * x)
            .minimizer(move |_, _, lam| -(&gain * lam))
            .norms(self.state_norm.clone(), self.control_norm.clone())
            .build()
    }

    /// Exact constants: every Jacobian is constant, so each Lipschitz constant is
    /// an operator norm between the prescribed norms.
    pub fn declared_constants(&self) -> Result<LipschitzValues> {
        let xn = &self.state_norm;
        let un = &self.control_norm;
        let dn = dual_kind(xn);
        let c = match self.c {
            Some(c) => c,
            None => -log_norm(&self.a, xn)?,
        };
        if !(c > 0.0) {
            return Err(invalid(format!("A is not contracting in the state norm (rate {c})")));
        }
        Ok(LipschitzValues {
            c,
            l_fu: induced_norm_between(&self.b, un, xn)?,
            l_fxx: 0.0,
            l_fxu: 0.0,
            l_phixx: induced_norm_between(&self.q, xn, &dn)?,
            l_phixu: 0.0,
            l_psixx: induced_norm_between(&self.p_t, xn, &dn)?,
            l_hx: 0.0,
            l_hlam: induced_norm_between(&(self.r_inv() * self.b.transpose()), &dn, un)?,
        })
    }
}

/// Output of [`riccati_solve`].
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// `P(t_j)` at every node.
    pub p: Vec<DMatrix<f64>>,
    /// `u*(t) = −R⁻¹BᵀP(t)x*(t)`, unclamped.
    pub u_star: Signal,
    pub x_star: Signal,
}

impl RiccatiSolution {
    /// Whether the unconstrained optimal control stays inside `box_set`.
    pub fn fits_box(&self, box_set: &BoxSet) -> bool {
        box_set.signal_in_box(&self.u_star)
    }
}

/// Solves `−Ṗ = AᵀP + PA − PBR⁻¹BᵀP + Q`, `P(T) = P_T`, then the closed loop.
///
/// The Riccati equation runs in reversed time with half the grid step, so the
/// closed-loop RK4 has `P` at every stage time.
pub fn riccati_solve(lqr: &LqrSpec, grid: Grid) -> Result<RiccatiSolution> {
    if (grid.horizon() - lqr.horizon).abs() > 1e-12 * lqr.horizon {
        return Err(invalid("grid horizon differs from the LQR horizon"));
    }
    let big_n = grid.steps();
    let hh = 0.5 * grid.step_size();
    let s_mat = &lqr.b * lqr.r_inv() * lqr.b.transpose();
    let rhs = |p: &DMatrix<f64>| lqr.a.transpose() * p + p * &lqr.a - p * &s_mat * p + &lqr.q;
    // half[i] = P(T − i·h/2)
    let mut half = Vec::with_capacity(2 * big_n + 1);
    let mut p = lqr.p_t.clone();
    half.push(p.clone());
    for i in 0..2 * big_n {
        let k1 = rhs(&p);
        let k2 = rhs(&(&p + &k1 * (0.5 * hh)));
        let k3 = rhs(&(&p + &k2 * (0.5 * hh)));
        let k4 = rhs(&(&p + &k3 * hh));
        p += (k1 + (k2 + k3) * 2.0 + k4) * (hh / 6.0);
        p = (&p + p.transpose()) * 0.5;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("Riccati solution escaped at half-step {}", i + 1)));
        }
        half.push(p.clone());
    }
    let p_at = |j2: usize| &half[2 * big_n - j2]; // P at time j2·h/2
    let gain = lqr.r_inv() * lqr.b.transpose();
    let closed = |j2: usize, x: &DVector<f64>| (&lqr.a - &lqr.b * &gain * p_at(j2)) * x;

    let h = grid.step_size();
    let mut xs = Vec::with_capacity(grid.len());
    let mut x = lqr.x0.clone();
    xs.push(x.clone());
    for j in 0..big_n {
        let k1 = closed(2 * j, &x);
        let k2 = closed(2 * j + 1, &(&x + &k1 * (0.5 * h)));
        let k3 = closed(2 * j + 1, &(&x + &k2 * (0.5 * h)));
        let k4 = closed(2 * j + 2, &(&x + &k3 * h));
        x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged { node: j + 1 });
        }
        xs.push(x.clone());
    }
    let p_nodes: Vec<DMatrix<f64>> = (0..=big_n).map(|j| p_at(2 * j).clone()).collect();
    let us: Vec<DVector<f64>> = xs.iter().zip(&p_nodes).map(|(x, p)| -(&gain * p * x)).collect();
    Ok(RiccatiSolution {
        p: p_nodes,
        u_star: Signal::new(grid, us, Interpolation::PiecewiseLinear)?,
        x_star: Signal::new(grid, xs, Interpolation::PiecewiseLinear)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectOptions {
    pub max_iter: usize,
    /// Stop once a projected step moves the control less than this (sup norm).
    pub tol: f64,
    /// Seed for the perturbations that estimate the gradient's Lipschitz constant.
    pub seed: u64,
}

impl Default for DirectOptions {
    fn default() -> Self {
        DirectOptions { max_iter: 2000, tol: 1e-11, seed: 0 }
    }
}

/// Output of [`direct_solve`].
#[derive(Debug, Clone)]
pub struct DirectSolution {
    /// Lowest-cost iterate.
    pub u: Signal,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `∂H/∂u` at every node, the gradient of the cost in the `L²` sense.
fn cost_gradient(spec: &ProblemSpec, u: &Signal) -> Result<(f64, Signal)> {
    let x = forward_sweep(spec, u)?;
    let lam = backward_sweep(spec, &x, u)?;
    let j = cost_along(spec, &x, u)?;
    let grid = *u.grid();
    let g = (0..grid.len())
        .map(|i| spec.hamiltonian_gradient_u(grid.time(i), x.state.value(i), lam.costate.value(i), u.value(i)))
        .collect();
    Ok((j, Signal::new(grid, g, Interpolation::PiecewiseLinear)?))
}

fn projected(spec: &ProblemSpec, u: &Signal, g: &Signal, alpha: f64) -> Result<Signal> {
    u.map_values(|j, v| spec.control_box().clamp(&(v - g.value(j) * alpha)))
}

/// Projected gradient descent on the discretized cost over node controls.
///
/// The step starts at `1/L` with `L` a sampled estimate of the gradient's
/// Lipschitz constant, and is halved whenever the cost would increase.
pub fn direct_solve(spec: &ProblemSpec, u0: &Signal, options: DirectOptions) -> Result<DirectSolution> {
    if options.max_iter == 0 {
        return Err(invalid("max_iter must be at least 1"));
    }
    let mut u = u0.clone().with_interpolation(Interpolation::PiecewiseLinear);
    let (mut j, mut g) = cost_gradient(spec, &u)?;

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut l_est = 0.0_f64;
    let width = (spec.control_box().upper() - spec.control_box().lower()).amax();
    for _ in 0..4 {
        let delta = 1e-3 * width.max(1e-6);
        let pert = u.map_values(|_, v| {
            let d = DVector::from_fn(v.len(), |_, _| delta * (2.0 * rng.gen::<f64>() - 1.0));
            v + d
        })?;
        let pert = pert.map_values(|_, v| spec.control_box().clamp(v))?;
        let du = sup_distance(&pert, &u, &NormKind::LInf)?;
        if du > 0.0 {
            let (_, gp) = cost_gradient(spec, &pert)?;
            l_est = l_est.max(sup_distance(&gp, &g, &NormKind::LInf)? / du);
        }
    }
    let mut alpha = if l_est > 0.0 { 1.0 / l_est } else { 1.0 };

    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..options.max_iter {
        iterations += 1;
        let mut accepted = None;
        while alpha > 1e-16 {
            let trial = projected(spec, &u, &g, alpha)?;
            let (jt, gt) = cost_gradient(spec, &trial)?;
            if !jt.is_finite() {
                return Err(Error::Diverged("direct method produced a non-finite cost".to_string()));
            }
            if jt <= j + 1e-13 * (1.0 + j.abs()) {
                accepted = Some((trial, jt, gt));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, jt, gt)) = accepted else { break };
        let moved = sup_distance(&trial, &u, &NormKind::LInf)?;
        u = trial;
        j = jt;
        g = gt;
        if moved <= options.tol {
            converged = true;
            break;
        }
    }
    Ok(DirectSolution { u, cost: j, iterations, converged })
}

/// Which oracle serves as ground truth for a benchmark.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Reference {
    Riccati(LqrSpec),
    Direct,
}

/// A named problem with exactly known (declared) constants.
#[derive(Debug, Clone)]
pub struct BenchmarkProblem {
    pub name: String,
    pub spec: ProblemSpec,
    pub constants: LipschitzData,
    pub reference: Reference,
    pub default_steps: usize,
}

pub const BUILTIN_NAMES: [&str; 4] = ["lqr-scalar", "lqr-2d", "tanh-input", "cubic-damped"];

fn lqr_scalar() -> Result<LqrSpec> {
    let one = DMatrix::from_element(1, 1, 1.0);
    LqrSpec::new(
        DMatrix::from_element(1, 1, -1.0),
        one.clone(),
        one.clone(),
        one,
        DMatrix::zeros(1, 1),
        DVector::from_element(1, 1.0),
        1.0,
        BoxSet::symmetric(1, 10.0)?,
    )
}

fn lqr_2d() -> Result<LqrSpec> {
    let a = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 0.0, -2.0]);
    // weights that symmetrize the coupling enough for μ(A) = −1.6
    LqrSpec::new(
        a,
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::zeros(2, 2),
        DVector::from_vec(vec![1.0, 1.0]),
        1.0,
        BoxSet::symmetric(2, 10.0)?,
    )?
    .with_norms(NormKind::WeightedL2(vec![1.0, 1.25]), NormKind::L2)?
    .with_rate(Some(1.0))
}

fn scalar_box(r: f64) -> Result<BoxSet> {
    BoxSet::symmetric(1, r)
}

fn tanh_input(horizon: f64) -> Result<ProblemSpec> {
    ProblemSpec::builder(DVector::from_element(1, 1.0), horizon, scalar_box(1.0)?)
        .dynamics(
            |_, x, u| DVector::from_element(1, -x[0] + u[0].tanh()),
            |_, _, _| DMatrix::from_element(1, 1, -1.0),
            |_, _, u| DMatrix::from_element(1, 1, 1.0 / u[0].cosh().powi(2)),
        )
        .running_cost(
            |_, x, u| 0.5 * (x[0] * x[0] + u[0] * u[0]),
            |_, x, _| DVector::from_element(1, x[0]),
        )
        .build()
}

fn cubic_damped(horizon: f64) -> Result<ProblemSpec> {
    ProblemSpec::builder(DVector::from_element(1, 0.5), horizon, scalar_box(0.5)?)
        .dynamics(
            |_, x, u| DVector::from_element(1, -x[0] - x[0].powi(3) + u[0]),
            |_, x, _| DMatrix::from_element(1, 1, -1.0 - 3.0 * x[0] * x[0]),
            |_, _, _| DMatrix::from_element(1, 1, 1.0),
        )
        .running_cost(
            |_, x, u| 0.5 * (x[0] * x[0] + u[0] * u[0]),
            |_, x, _| DVector::from_element(1, x[0]),
        )
        .terminal_cost(|x| 0.5 * x[0] * x[0], |x| DVector::from_element(1, x[0]))
        .minimizer(|_, _, lam| DVector::from_element(1, -lam[0]))
        .build()
}

/// Benchmark for any LQR problem, with declared constants and the Riccati reference.
pub fn lqr_benchmark(name: &str, lqr: LqrSpec, default_steps: usize) -> Result<BenchmarkProblem> {
    Ok(BenchmarkProblem {
        name: name.to_string(),
        spec: lqr.to_problem()?,
        constants: LipschitzData::declared(lqr.declared_constants()?)?,
        reference: Reference::Riccati(lqr),
        default_steps,
    })
}

/// Built-in benchmark at its default horizon.
pub fn builtin(name: &str) -> Result<BenchmarkProblem> {
    builtin_with(name, None)
}

/// Built-in benchmark, optionally at another horizon. Constants that depend on
/// the horizon are recomputed.
pub fn builtin_with(name: &str, horizon: Option<f64>) -> Result<BenchmarkProblem> {
    let lqr = |spec: LqrSpec, steps: usize| -> Result<BenchmarkProblem> {
        let spec = match horizon {
            Some(t) => spec.with_horizon(t)?,
            None => spec,
        };
        lqr_benchmark(name, spec, steps)
    };
    let t = horizon.unwrap_or(1.0);
    match name {
        "lqr-scalar" => lqr(lqr_scalar()?, 400),
        "lqr-2d" => lqr(lqr_2d()?, 400),
        "tanh-input" => Ok(BenchmarkProblem {
            name: name.to_string(),
            spec: tanh_input(t)?,
            // |dh/dλ| ≤ 1: the stationarity condition λ sech²u + u = 0 forces λ tanh u ≤ 0
            constants: LipschitzData::declared(LipschitzValues {
                c: 1.0,
                l_fu: 1.0,
                l_phixx: 1.0,
                l_hlam: 1.0,
                ..Default::default()
            })?,
            reference: Reference::Direct,
            default_steps: 200,
        }),
        "cubic-damped" => {
            let spec = cubic_damped(t)?;
            let mut values = LipschitzValues {
                c: 1.0,
                l_fu: 1.0,
                l_phixx: 1.0,
                l_psixx: 1.0,
                l_hlam: 1.0,
                ..Default::default()
            };
            // ∂/∂x of (−1 − 3x²)λ is −6xλ; bound it over the reachable balls
            let sets = bounded_sets(&spec, &LipschitzData::declared(values)?, spec.grid(200)?)?;
            let x_max = sets.x_center[0].abs() + sets.x_radius;
            values.l_fxx = 6.0 * x_max * sets.lam_radius;
            Ok(BenchmarkProblem {
                name: name.to_string(),
                spec,
                constants: LipschitzData::declared(values)?,
                reference: Reference::Direct,
                default_steps: 200,
            })
        }
        other => Err(Error::NotFound(other.to_string())),
    }
}
