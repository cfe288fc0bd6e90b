//! Fixed-step RK4 sweeps: the state forward in time and the costate backward.

use nalgebra::DVector;

use crate::error::{invalid, Error, Result};
use crate::problem::ProblemSpec;
use crate::signals::{Grid, Interpolation, Signal};

pub use crate::msa::pmp_residual;

/// Forward solution `x(t)` on the control's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub state: Signal,
}

/// Backward solution `λ(t)` on the control's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CostateTrajectory {
    pub costate: Signal,
}

fn check_control(spec: &ProblemSpec, u: &Signal) -> Result<()> {
    let g = u.grid();
    if (g.horizon() - spec.horizon()).abs() > 1e-12 * spec.horizon() {
        return Err(invalid(format!(
            "control grid horizon {} differs from the problem horizon {}",
            g.horizon(),
            spec.horizon()
        )));
    }
    if u.dim() != spec.control_dim() {
        return Err(invalid(format!("control has dimension {}, expected {}", u.dim(), spec.control_dim())));
    }
    if !spec.control_box().signal_in_box(u) {
        return Err(invalid("control leaves the control box"));
    }
    Ok(())
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|a| a.is_finite())
}

/// Integrates `ẋ = f(t, x, u)` from `x0`.
pub fn forward_sweep_from(spec: &ProblemSpec, x0: &DVector<f64>, u: &Signal) -> Result<Trajectory> {
    check_control(spec, u)?;
    if x0.len() != spec.state_dim() {
        return Err(invalid("initial state has the wrong dimension"));
    }
    let grid = *u.grid();
    let h = grid.step_size();
    let mut values = Vec::with_capacity(grid.len());
    let mut x = x0.clone();
    values.push(x.clone());
    for j in 0..grid.steps() {
        let t = grid.time(j);
        let (u0, um, u1) = (u.in_step(j, 0.0), u.in_step(j, 0.5), u.in_step(j, 1.0));
        let k1 = spec.f(t, &x, &u0);
        let k2 = spec.f(t + 0.5 * h, &(&x + &k1 * (0.5 * h)), &um);
        let k3 = spec.f(t + 0.5 * h, &(&x + &k2 * (0.5 * h)), &um);
        let k4 = spec.f(grid.time(j + 1), &(&x + &k3 * h), &u1);
        x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        if !finite(&x) {
            return Err(Error::IntegrationDiverged { node: j + 1 });
        }
        values.push(x.clone());
    }
    Ok(Trajectory { state: Signal::new(grid, values, Interpolation::PiecewiseLinear)? })
}

/// Integrates the state equation from the problem's `x0`.
pub fn forward_sweep(spec: &ProblemSpec, u: &Signal) -> Result<Trajectory> {
    forward_sweep_from(spec, spec.x0(), u)
}

/// State at the middle of step `j`, by cubic Hermite interpolation of the
/// node values and slopes. Keeps the backward sweep fourth-order accurate.
pub(crate) fn state_midpoint(spec: &ProblemSpec, x: &Signal, u: &Signal, j: usize) -> DVector<f64> {
    let grid = x.grid();
    let h = grid.step_size();
    let (xa, xb) = (x.value(j), x.value(j + 1));
    let fa = spec.f(grid.time(j), xa, &u.in_step(j, 0.0));
    let fb = spec.f(grid.time(j + 1), xb, &u.in_step(j, 1.0));
    (xa + xb) * 0.5 + (fa - fb) * (h / 8.0)
}

/// Integrates the costate equation `λ̇ = −D_x fᵀ λ − φ_x` backward from
/// `λ(T) = terminal`.
///
/// The integration runs forward in reversed time `s = T − t` on
/// `dλ̃/ds = D_x fᵀ λ̃ + φ_x`, evaluated along `x` and `u`, and the result is
/// reversed back.
pub fn integrate_costate(
    spec: &ProblemSpec,
    x: &Trajectory,
    u: &Signal,
    terminal: DVector<f64>,
) -> Result<CostateTrajectory> {
    check_control(spec, u)?;
    let grid = *u.grid();
    if *x.state.grid() != grid {
        return Err(invalid("state and control live on different grids"));
    }
    let n = spec.state_dim();
    if terminal.len() != n || x.state.dim() != n {
        return Err(invalid("terminal costate or state has the wrong dimension"));
    }
    let h = grid.step_size();
    let big_n = grid.steps();
    let field = |t: f64, xs: &DVector<f64>, us: &DVector<f64>, lam: &DVector<f64>| {
        spec.dxf(t, xs, us).transpose() * lam + spec.phix(t, xs, us)
    };
    // reversed[i] holds λ̃(s_i) = λ(T − s_i)
    let mut reversed = Vec::with_capacity(grid.len());
    let mut lam = terminal;
    reversed.push(lam.clone());
    for i in 0..big_n {
        let j = big_n - 1 - i; // the step [t_j, t_{j+1}] traversed right to left
        let (t1, t0, tm) = (grid.time(j + 1), grid.time(j), grid.time(j) + 0.5 * h);
        let (x1, x0) = (x.state.value(j + 1), x.state.value(j));
        let xm = state_midpoint(spec, &x.state, u, j);
        let (u1, u0, um) = (u.in_step(j, 1.0), u.in_step(j, 0.0), u.in_step(j, 0.5));
        let k1 = field(t1, x1, &u1, &lam);
        let k2 = field(tm, &xm, &um, &(&lam + &k1 * (0.5 * h)));
        let k3 = field(tm, &xm, &um, &(&lam + &k2 * (0.5 * h)));
        let k4 = field(t0, x0, &u0, &(&lam + &k3 * h));
        lam += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        if !finite(&lam) {
            return Err(Error::IntegrationDiverged { node: j });
        }
        reversed.push(lam.clone());
    }
    let reversed = Signal::new(grid, reversed, Interpolation::PiecewiseLinear)?;
    Ok(CostateTrajectory { costate: reversed.reverse() })
}

/// Costate for the PMP boundary condition `λ(T) = ψ_x(x(T))`.
pub fn backward_sweep(spec: &ProblemSpec, x: &Trajectory, u: &Signal) -> Result<CostateTrajectory> {
    let terminal = spec.psix(x.state.value(x.state.grid().steps()));
    integrate_costate(spec, x, u, terminal)
}

/// `J[u] = ∫ φ dt + ψ(x(T))` with composite Simpson quadrature per step, given
/// the state already computed for `u`.
pub fn cost_along(spec: &ProblemSpec, x: &Trajectory, u: &Signal) -> Result<f64> {
    let grid: Grid = *u.grid();
    if *x.state.grid() != grid {
        return Err(invalid("state and control live on different grids"));
    }
    let h = grid.step_size();
    let mut running = 0.0;
    for j in 0..grid.steps() {
        let xm = state_midpoint(spec, &x.state, u, j);
        let a = spec.phi(grid.time(j), x.state.value(j), &u.in_step(j, 0.0));
        let m = spec.phi(grid.time(j) + 0.5 * h, &xm, &u.in_step(j, 0.5));
        let b = spec.phi(grid.time(j + 1), x.state.value(j + 1), &u.in_step(j, 1.0));
        running += h / 6.0 * (a + 4.0 * m + b);
    }
    let total = running + spec.psi(x.state.value(grid.steps()));
    if !total.is_finite() {
        return Err(Error::Diverged("cost is not finite".to_string()));
    }
    Ok(total)
}

/// Runs a forward sweep and evaluates the cost functional.
pub fn cost(spec: &ProblemSpec, u: &Signal) -> Result<f64> {
    let x = forward_sweep(spec, u)?;
    cost_along(spec, &x, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::BoxSet;
    use nalgebra::{dmatrix, dvector, DMatrix};

    fn scalar(psi: bool) -> ProblemSpec {
        let b = ProblemSpec::builder(dvector![1.0], 1.0, BoxSet::symmetric(1, 10.0).unwrap()).dynamics(
            |_, x, u| dvector![-x[0] + u[0]],
            |_, _, _| dmatrix![-1.0],
            |_, _, _| dmatrix![1.0],
        );
        let b = if psi { b.terminal_cost(|x| 0.5 * x[0] * x[0], |x| dvector![x[0]]) } else { b };
        b.build().unwrap()
    }

    fn constant(spec: &ProblemSpec, steps: usize, v: f64) -> Signal {
        Signal::constant(spec.grid(steps).unwrap(), dvector![v], Interpolation::PiecewiseLinear).unwrap()
    }

    #[test]
    fn decay_and_equilibrium() {
        let spec = scalar(false);
        let x = forward_sweep(&spec, &constant(&spec, 100, 0.0)).unwrap();
        assert!((x.state.value(100)[0] - (-1.0f64).exp()).abs() < 1e-9);
        let x = forward_sweep(&spec, &constant(&spec, 100, 1.0)).unwrap();
        assert!(x.state.values().iter().all(|v| v[0] == 1.0));
    }

    fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        // scaling and squaring with a Taylor series
        let s = 10;
        let scaled = a / 2f64.powi(s);
        let mut term = DMatrix::identity(a.nrows(), a.ncols());
        let mut sum = term.clone();
        for k in 1..20 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn matches_matrix_exponential() {
        let a = dmatrix![-1.3, 0.4; -0.2, -0.8];
        let a2 = a.clone();
        let spec = ProblemSpec::builder(dvector![1.0, -0.5], 2.0, BoxSet::symmetric(1, 1.0).unwrap())
            .dynamics(move |_, x, _| &a * x, move |_, _, _| a2.clone(), |_, _, _| DMatrix::zeros(2, 1))
            .build()
            .unwrap();
        let a = dmatrix![-1.3, 0.4; -0.2, -0.8];
        let x = forward_sweep(&spec, &spec.zero_control(spec.grid(200).unwrap())).unwrap();
        for j in [0, 50, 137, 200] {
            let t = x.state.grid().time(j);
            let exact = expm(&(&a * t)) * spec.x0();
            assert!((x.state.value(j) - exact).amax() < 1e-8);
        }
    }

    #[test]
    fn costate_examples() {
        let spec = scalar(true);
        let u = constant(&spec, 100, 0.3);
        let x = forward_sweep(&spec, &u).unwrap();
        let lam = backward_sweep(&spec, &x, &u).unwrap();
        let xt = x.state.value(100)[0];
        assert_eq!(lam.costate.value(100)[0], xt);
        for (j, t) in lam.costate.grid().times().enumerate() {
            assert!((lam.costate.value(j)[0] - xt * (-(1.0 - t)).exp()).abs() < 1e-9);
        }
        let free = scalar(false);
        let lam = backward_sweep(&free, &forward_sweep(&free, &u).unwrap(), &u).unwrap();
        assert!(lam.costate.values().iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn diverging_dynamics_are_reported() {
        let spec = ProblemSpec::builder(dvector![1.0], 1.0, BoxSet::symmetric(1, 1.0).unwrap())
            .dynamics(|_, x, _| dvector![x[0] * x[0]], |_, x, _| dmatrix![2.0 * x[0]], |_, _, _| dmatrix![0.0])
            .build();
        // the derivative check samples states near x0 only, so this builds
        let spec = spec.unwrap().with_x0(dvector![1e200]).unwrap();
        let err = forward_sweep(&spec, &constant(&spec, 10, 0.0)).unwrap_err();
        assert!(matches!(err, Error::IntegrationDiverged { .. }));
    }

    #[test]
    fn rejects_mismatched_controls() {
        let spec = scalar(false);
        let other = Signal::constant(Grid::new(2.0, 10).unwrap(), dvector![0.0], Interpolation::PiecewiseLinear).unwrap();
        assert!(forward_sweep(&spec, &other).is_err());
        assert!(forward_sweep(&spec, &constant(&spec, 10, 11.0)).is_err());
    }

    #[test]
    fn cost_examples() {
        let spec = ProblemSpec::builder(dvector![1.0], 1.0, BoxSet::symmetric(1, 1.0).unwrap())
            .dynamics(|_, x, _| dvector![-x[0]], |_, _, _| dmatrix![-1.0], |_, _, _| dmatrix![0.0])
            .running_cost(|_, x, _| 0.5 * x[0] * x[0], |_, x, _| dvector![x[0]])
            .build()
            .unwrap();
        let j = cost(&spec, &spec.zero_control(spec.grid(100).unwrap())).unwrap();
        assert!((j - (1.0 - (-2.0f64).exp()) / 4.0).abs() < 1e-8);

        let term = scalar(true);
        let u = constant(&term, 50, 0.2);
        let x = forward_sweep(&term, &u).unwrap();
        let xt = x.state.value(50)[0];
        assert_eq!(cost(&term, &u).unwrap(), 0.5 * xt * xt);
    }
}
