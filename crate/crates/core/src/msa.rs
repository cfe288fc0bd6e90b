//! The successive-approximations operator: forward sweep, backward sweep,
//! pointwise Hamiltonian minimization; and its fixed-point iteration.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::problem::{hamiltonian, ProblemSpec};
use crate::signals::{sup_distance, Grid, Interpolation, Signal};
use crate::sweep::{backward_sweep, cost_along, forward_sweep, CostateTrajectory, Trajectory};

const STATIONARITY_TOL: f64 = 1e-9;
const MAX_POLISH_ITERS: usize = 2000;
/// Restarts whose minima differ by more than this in `H` are reported.
const RESTART_DISAGREEMENT: f64 = 1e-6;

/// A numerically located minimizer of `u ↦ H(t, x, λ, u)` over the box.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianMin {
    pub u: DVector<f64>,
    pub value: f64,
    /// Two differently started searches ended more than `1e-6` apart in `H`.
    pub restarts_disagree: bool,
}

fn h_value(spec: &ProblemSpec, t: f64, x: &DVector<f64>, lam: &DVector<f64>, u: &DVector<f64>) -> f64 {
    lam.dot(&spec.f(t, x, u)) + spec.phi(t, x, u)
}

fn coordinate_search(spec: &ProblemSpec, t: f64, x: &DVector<f64>, lam: &DVector<f64>) -> DVector<f64> {
    let bx = spec.control_box();
    let width = bx.upper() - bx.lower();
    let mut u = bx.center();
    let mut best = h_value(spec, t, x, lam, &u);
    let mut scale = 0.5;
    while scale > 1e-3 {
        let mut improved = false;
        for i in 0..u.len() {
            for sign in [-1.0, 1.0] {
                let mut trial = u.clone();
                trial[i] += sign * scale * width[i];
                let trial = bx.clamp(&trial);
                let v = h_value(spec, t, x, lam, &trial);
                if v < best {
                    best = v;
                    u = trial;
                    improved = true;
                }
            }
        }
        if !improved {
            scale *= 0.5;
        }
    }
    u
}

fn projected_step(spec: &ProblemSpec, u: &DVector<f64>, g: &DVector<f64>, alpha: f64) -> DVector<f64> {
    spec.control_box().clamp(&(u - g * alpha))
}

/// Projected gradient descent with Barzilai–Borwein steps and backtracking.
/// Returns the final point and its projected-gradient residual.
fn polish(
    spec: &ProblemSpec,
    t: f64,
    x: &DVector<f64>,
    lam: &DVector<f64>,
    start: DVector<f64>,
) -> (DVector<f64>, f64) {
    let mut u = start;
    let mut hu = h_value(spec, t, x, lam, &u);
    let mut g = spec.hamiltonian_gradient_u(t, x, lam, &u);
    let mut alpha = 1.0;
    let mut stat = (&u - projected_step(spec, &u, &g, 1.0)).amax();
    for _ in 0..MAX_POLISH_ITERS {
        if stat <= STATIONARITY_TOL {
            break;
        }
        let mut a = alpha;
        let mut moved = false;
        while a > 1e-16 {
            let trial = projected_step(spec, &u, &g, a);
            let d = &u - &trial;
            let ht = h_value(spec, t, x, lam, &trial);
            let decrease = g.dot(&d);
            // tolerate roundoff once the step is tiny
            let slack = 1e-15 * (1.0 + hu.abs());
            if ht <= hu - 1e-4 * decrease || (d.amax() < 1e-7 && ht <= hu + slack) {
                let gt = spec.hamiltonian_gradient_u(t, x, lam, &trial);
                let s = &trial - &u;
                let y = &gt - &g;
                let sy = s.dot(&y);
                alpha = if sy > 0.0 { (s.dot(&s) / sy).clamp(1e-8, 1e8) } else { (a * 2.0).min(1e8) };
                u = trial;
                hu = ht;
                g = gt;
                moved = true;
                break;
            }
            a *= 0.5;
        }
        stat = (&u - projected_step(spec, &u, &g, 1.0)).amax();
        if !moved {
            break;
        }
    }
    (u, stat)
}

/// Minimizes the Hamiltonian over the control box at one time instant.
///
/// With an analytic minimizer the clamped analytic value is returned. Otherwise
/// a coordinate search from the box centre seeds a projected-gradient polish,
/// and a second polish started at the box centre itself guards against
/// ties and local minima.
pub fn minimize_hamiltonian_report(
    spec: &ProblemSpec,
    t: f64,
    x: &DVector<f64>,
    lam: &DVector<f64>,
) -> Result<HamiltonianMin> {
    if x.iter().chain(lam.iter()).any(|v| !v.is_finite()) {
        return Err(invalid("state and costate must be finite"));
    }
    if let Some(u) = spec.analytic_minimizer(t, x, lam) {
        let value = hamiltonian(spec, t, x, lam, &u)?;
        return Ok(HamiltonianMin { u, value, restarts_disagree: false });
    }
    let (ua, sa) = polish(spec, t, x, lam, coordinate_search(spec, t, x, lam));
    let (ub, sb) = polish(spec, t, x, lam, spec.control_box().center());
    let (ha, hb) = (h_value(spec, t, x, lam, &ua), h_value(spec, t, x, lam, &ub));
    let (u, value, stat) = if hb < ha { (ub, hb, sb) } else { (ua, ha, sa) };
    if !(stat <= STATIONARITY_TOL) || !value.is_finite() {
        return Err(Error::MinimizerFailed { t });
    }
    Ok(HamiltonianMin { u, value, restarts_disagree: (ha - hb).abs() > RESTART_DISAGREEMENT })
}

/// A selection of `argmin_{u ∈ U} H(t, x, λ, u)`.
pub fn minimize_hamiltonian(spec: &ProblemSpec, t: f64, x: &DVector<f64>, lam: &DVector<f64>) -> Result<DVector<f64>> {
    minimize_hamiltonian_report(spec, t, x, lam).map(|m| m.u)
}

/// One application of the operator, with the sweeps it used.
#[derive(Debug, Clone)]
pub struct MsaStep {
    pub u_next: Signal,
    pub x: Trajectory,
    pub lam: CostateTrajectory,
    /// Nodes where minimizer restarts disagreed.
    pub disagreements: usize,
}

/// `u ↦ h(·, x[u](·), λ[u](·))` evaluated node by node.
pub fn msa_step(spec: &ProblemSpec, u: &Signal) -> Result<MsaStep> {
    let x = forward_sweep(spec, u)?;
    let lam = backward_sweep(spec, &x, u)?;
    let grid = *u.grid();
    let mut values = Vec::with_capacity(grid.len());
    let mut disagreements = 0;
    for j in 0..grid.len() {
        let m = minimize_hamiltonian_report(spec, grid.time(j), x.state.value(j), lam.costate.value(j))?;
        disagreements += m.restarts_disagree as usize;
        values.push(m.u);
    }
    let u_next = Signal::new(grid, values, u.interpolation())?;
    Ok(MsaStep { u_next, x, lam, disagreements })
}

/// `sup_j ‖u(t_j) − h(t_j, x(t_j), λ(t_j))‖_U`; zero exactly at a discrete fixed point.
pub fn pmp_residual(spec: &ProblemSpec, u: &Signal) -> Result<f64> {
    let step = msa_step(spec, u)?;
    sup_distance(&step.u_next, u, spec.control_norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { max_iter: 200, tol: 1e-9 }
    }
}

/// History of a fixed-point run.
#[derive(Debug, Clone, Serialize)]
pub struct MsaReport {
    /// `u⁽⁰⁾, u⁽¹⁾, …`; one more entry than `residuals`.
    #[serde(skip)]
    pub iterates: Vec<Signal>,
    /// `‖u⁽ⁱ⁾ − u⁽ⁱ⁻¹⁾‖` for `i = 1..=iterations`.
    pub residuals: Vec<f64>,
    /// `J[u⁽ⁱ⁾]` for every iterate.
    pub costs: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_pmp_residual: f64,
    pub minimizer_disagreements: usize,
    /// State and costate along the final iterate.
    #[serde(skip)]
    pub final_state: Trajectory,
    #[serde(skip)]
    pub final_costate: CostateTrajectory,
}

impl MsaReport {
    pub fn final_control(&self) -> &Signal {
        self.iterates.last().expect("at least the initial iterate")
    }

    /// `residuals[i+1] / residuals[i]`, skipping pairs whose denominator is at roundoff level.
    pub fn residual_ratios(&self) -> Vec<f64> {
        self.residuals
            .windows(2)
            .filter(|w| w[0] > 1e-12)
            .map(|w| w[1] / w[0])
            .collect()
    }
}

/// Iterates the operator from `u0` until the sup-norm residual drops to `tol`
/// or `max_iter` steps have been taken.
pub fn solve(spec: &ProblemSpec, u0: &Signal, options: SolveOptions) -> Result<MsaReport> {
    if options.max_iter == 0 {
        return Err(invalid("max_iter must be at least 1"));
    }
    if !(options.tol > 0.0 && options.tol.is_finite()) {
        return Err(invalid("tolerance must be positive"));
    }
    let norm = spec.control_norm();
    let mut iterates = vec![u0.clone()];
    let mut residuals = Vec::new();
    let mut costs = Vec::new();
    let mut disagreements = 0;
    let mut converged = false;
    for _ in 0..options.max_iter {
        let current = iterates.last().expect("nonempty");
        let step = msa_step(spec, current)?;
        disagreements += step.disagreements;
        costs.push(cost_along(spec, &step.x, current)?);
        let r = sup_distance(&step.u_next, current, norm)?;
        if !r.is_finite() {
            return Err(Error::Diverged("control residual is not finite".to_string()));
        }
        residuals.push(r);
        iterates.push(step.u_next);
        if r <= options.tol {
            converged = true;
            break;
        }
    }
    let last = iterates.last().expect("nonempty");
    let final_step = msa_step(spec, last)?;
    costs.push(cost_along(spec, &final_step.x, last)?);
    let final_pmp_residual = sup_distance(&final_step.u_next, last, norm)?;
    Ok(MsaReport {
        iterations: residuals.len(),
        iterates,
        residuals,
        costs,
        converged,
        final_pmp_residual,
        minimizer_disagreements: disagreements + final_step.disagreements,
        final_state: final_step.x,
        final_costate: final_step.lam,
    })
}

/// A control with independent uniform node values in the box.
pub fn random_control(spec: &ProblemSpec, grid: Grid, rng: &mut impl Rng) -> Result<Signal> {
    let bx = spec.control_box();
    let values = (0..grid.len())
        .map(|_| {
            let s: Vec<f64> = (0..bx.dim()).map(|_| rng.gen::<f64>()).collect();
            bx.from_unit(&s)
        })
        .collect();
    Signal::new(grid, values, Interpolation::PiecewiseLinear)
}

/// `‖MSA(u) − MSA(ū)‖ / ‖u − ū‖` in the sup-over-time control norm.
pub fn contraction_ratio(spec: &ProblemSpec, u: &Signal, v: &Signal) -> Result<f64> {
    let norm = spec.control_norm();
    let den = sup_distance(u, v, norm)?;
    if den == 0.0 {
        return Err(invalid("controls coincide"));
    }
    let a = msa_step(spec, u)?.u_next;
    let b = msa_step(spec, v)?.u_next;
    Ok(sup_distance(&a, &b, norm)? / den)
}

/// Ratios over `pairs` seeded random in-box control pairs.
pub fn contraction_ratios(spec: &ProblemSpec, grid: Grid, pairs: usize, seed: u64) -> Result<Vec<f64>> {
    if pairs == 0 {
        return Err(invalid("pairs must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(pairs);
    let mut attempts = 0;
    while ratios.len() < pairs {
        attempts += 1;
        if attempts > 10 * pairs {
            return Err(invalid("could not draw distinct control pairs; is the box a single point?"));
        }
        let u = random_control(spec, grid, &mut rng)?;
        let v = random_control(spec, grid, &mut rng)?;
        if sup_distance(&u, &v, spec.control_norm())? == 0.0 {
            continue;
        }
        ratios.push(contraction_ratio(spec, &u, &v)?);
    }
    Ok(ratios)
}

/// Largest observed contraction ratio, an empirical lower bound on Lip(MSA).
pub fn empirical_contraction(spec: &ProblemSpec, grid: Grid, pairs: usize, seed: u64) -> Result<f64> {
    Ok(contraction_ratios(spec, grid, pairs, seed)?.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::BoxSet;
    use nalgebra::{dmatrix, dvector};

    fn quadratic(analytic: bool) -> ProblemSpec {
        let b = ProblemSpec::builder(dvector![1.0], 1.0, BoxSet::symmetric(1, 1.0).unwrap())
            .dynamics(|_, _, u| dvector![u[0]], |_, _, _| dmatrix![0.0], |_, _, _| dmatrix![1.0])
            .running_cost(|_, _, u| 0.5 * u[0] * u[0], |_, _, _| dvector![0.0]);
        let b = if analytic { b.minimizer(|_, _, lam| dvector![-lam[0]]) } else { b };
        b.build().unwrap()
    }

    #[test]
    fn quadratic_hamiltonian_examples() {
        for analytic in [true, false] {
            let spec = quadratic(analytic);
            let x = dvector![0.0];
            let u = minimize_hamiltonian(&spec, 0.0, &x, &dvector![0.5]).unwrap();
            assert!((u[0] + 0.5).abs() < 1e-9, "{analytic} {u}");
            let u = minimize_hamiltonian(&spec, 0.0, &x, &dvector![3.0]).unwrap();
            assert_eq!(u[0], -1.0);
        }
    }

    fn lqr(analytic: bool) -> ProblemSpec {
        let b = ProblemSpec::builder(dvector![1.0], 1.0, BoxSet::symmetric(1, 10.0).unwrap())
            .dynamics(|_, x, u| dvector![-x[0] + u[0]], |_, _, _| dmatrix![-1.0], |_, _, _| dmatrix![1.0])
            .running_cost(|_, x, u| 0.5 * (x[0] * x[0] + u[0] * u[0]), |_, x, _| dvector![x[0]]);
        let b = if analytic { b.minimizer(|_, _, lam| dvector![-lam[0]]) } else { b };
        b.build().unwrap()
    }

    #[test]
    fn numeric_minimizer_matches_analytic() {
        let (a, n) = (lqr(true), lqr(false));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let t = rng.gen::<f64>();
            let x = dvector![rng.gen_range(-3.0..3.0)];
            let lam = dvector![rng.gen_range(-15.0..15.0)];
            let ua = minimize_hamiltonian(&a, t, &x, &lam).unwrap();
            let un = minimize_hamiltonian_report(&n, t, &x, &lam).unwrap();
            assert!((ua[0] - un.u[0]).abs() < 1e-7, "{lam} {ua} {}", un.u);
            assert!(!un.restarts_disagree);
        }
    }

    #[test]
    fn two_dimensional_box_minimizer() {
        let spec = ProblemSpec::builder(dvector![0.0, 0.0], 1.0, BoxSet::new(dvector![-1.0, -0.5], dvector![2.0, 0.5]).unwrap())
            .dynamics(|_, _, u| u.clone(), |_, _, _| dmatrix![0.0, 0.0; 0.0, 0.0], |_, _, _| dmatrix![1.0, 0.0; 0.0, 1.0])
            .running_cost(
                |_, _, u| u[0].powi(4) + 0.5 * u[1] * u[1] + 0.25 * u[0] * u[1],
                |_, _, _| dvector![0.0, 0.0],
            )
            .build()
            .unwrap();
        let lam = dvector![-1.0, 2.0];
        let m = minimize_hamiltonian_report(&spec, 0.0, &dvector![0.0, 0.0], &lam).unwrap();
        // brute force over a fine lattice
        let mut best = f64::INFINITY;
        for i in 0..=600 {
            for k in 0..=200 {
                let u = dvector![-1.0 + 3.0 * i as f64 / 600.0, -0.5 + k as f64 / 200.0];
                best = best.min(h_value(&spec, 0.0, &dvector![0.0, 0.0], &lam, &u));
            }
        }
        assert!(m.value <= best + 1e-12);
        assert!(m.value >= best - 1e-3);
        assert_eq!(m.u[1], -0.5);
    }

    #[test]
    fn zero_problem_stays_at_zero() {
        let spec = ProblemSpec::builder(dvector![1.0], 1.0, BoxSet::symmetric(1, 1.0).unwrap())
            .dynamics(|_, x, u| dvector![-x[0] + u[0]], |_, _, _| dmatrix![-1.0], |_, _, _| dmatrix![1.0])
            .minimizer(|_, _, _| dvector![0.0])
            .build()
            .unwrap();
        let grid = spec.grid(20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_control(&spec, grid, &mut rng).unwrap();
        let step = msa_step(&spec, &u).unwrap();
        assert!(step.lam.costate.values().iter().all(|v| v[0] == 0.0));
        assert!(step.u_next.values().iter().all(|v| v[0] == 0.0));
        assert_eq!(empirical_contraction(&spec, grid, 5, 3).unwrap(), 0.0);
    }

    #[test]
    fn solve_converges_and_restarts_in_one_step() {
        let spec = lqr(true);
        let grid = spec.grid(100).unwrap();
        let rep = solve(&spec, &spec.zero_control(grid), SolveOptions { max_iter: 100, tol: 1e-10 }).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.residuals.len(), rep.iterations);
        assert_eq!(rep.costs.len(), rep.iterates.len());
        assert!(rep.final_pmp_residual <= 1e-10);
        let again = solve(&spec, rep.final_control(), SolveOptions { max_iter: 100, tol: 1e-9 }).unwrap();
        assert!(again.converged);
        assert_eq!(again.iterations, 1);
        assert!(pmp_residual(&spec, &spec.zero_control(grid)).unwrap() > 0.0);
    }

    #[test]
    fn solve_rejects_bad_options() {
        let spec = lqr(true);
        let u = spec.zero_control(spec.grid(10).unwrap());
        assert!(solve(&spec, &u, SolveOptions { max_iter: 0, tol: 1e-9 }).is_err());
        assert!(solve(&spec, &u, SolveOptions { max_iter: 3, tol: 0.0 }).is_err());
    }

    #[test]
    fn ratio_is_invariant_to_shrinking_pairs_for_affine_operators() {
        let spec = lqr(true);
        let grid = spec.grid(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_control(&spec, grid, &mut rng).unwrap();
        let v = random_control(&spec, grid, &mut rng).unwrap();
        let r = contraction_ratio(&spec, &u, &v).unwrap();
        // pull v halfway toward u; the box constraint stays inactive at this scale
        let mid = v.map_values(|j, vv| (vv + u.value(j)) * 0.5).unwrap();
        let r2 = contraction_ratio(&spec, &u, &mid).unwrap();
        assert!((r - r2).abs() < 1e-9);
    }
}
