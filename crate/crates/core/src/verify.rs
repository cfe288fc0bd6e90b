//! End-to-end verification of one benchmark: oracle agreement, solver
//! behaviour and every comparison bound, each reported as a measured value
//! against an allowed value.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::certificate::{
    certify, costate_bound_rhs_nodes, costate_sup_rhs, gronwall_rhs_nodes, Certificate, InputGap,
};
use crate::error::Result;
use crate::msa::{empirical_contraction, pmp_residual, random_control, solve, MsaReport, SolveOptions};
use crate::norms::vector_norm;
use crate::oracle::{builtin_with, direct_solve, riccati_solve, BenchmarkProblem, DirectOptions, Reference};
use crate::problem::{
    bounded_sets, derivative_deviation, verify_contraction, verify_costate_contraction, BoundedSets,
    ProblemSpec, DERIVATIVE_TOLERANCE,
};
use crate::sampling::{ball_point, Sampler};
use crate::signals::{sup_distance, Grid, Interpolation, Signal};
use crate::sweep::{backward_sweep, forward_sweep, forward_sweep_from, integrate_costate};

/// Slack for comparisons between a measured deviation and a bound.
pub const BOUND_SLACK: f64 = 1e-6;
/// Slack on observed contraction ratios.
pub const RATIO_SLACK: f64 = 0.05;
/// Agreement required between independent solutions.
pub const ORACLE_TOLERANCE: f64 = 1e-4;
pub const PMP_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Solver grid; the benchmark default when `None`.
    pub steps: Option<usize>,
    pub horizon: Option<f64>,
    /// Random perturbations per bound check, and control pairs for the contraction ratio.
    pub draws: usize,
    /// Grid used by the bound checks, fine enough that quadrature error stays well below the slack.
    pub bound_steps: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub sample_budget: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            steps: None,
            horizon: None,
            draws: 50,
            bound_steps: 2000,
            tol: 1e-9,
            max_iter: 200,
            sample_budget: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub allowed: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, measured: f64, allowed: f64) -> Self {
        Check { name: name.to_string(), measured, allowed, passed: measured <= allowed }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub problem: String,
    pub seed: u64,
    pub steps: usize,
    pub horizon: f64,
    pub certificate: Certificate,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// A smooth in-box control `a + b·sin(ωt + φ)` per component with random
/// offset, amplitude, frequency and phase.
pub fn smooth_control(spec: &ProblemSpec, grid: Grid, rng: &mut impl Rng) -> Result<Signal> {
    let bx = spec.control_box();
    let k = bx.dim();
    let params: Vec<[f64; 4]> = (0..k)
        .map(|i| {
            let (lo, hi) = (bx.lower()[i], bx.upper()[i]);
            let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
            [
                mid + half * rng.gen_range(-0.5..0.5),
                half * rng.gen_range(0.0..0.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    Signal::from_fn(grid, Interpolation::PiecewiseLinear, |t| {
        bx.clamp(&DVector::from_fn(k, |i, _| {
            let [a, b, w, p] = params[i];
            a + b * (w * t + p).sin()
        }))
    })
}

fn node_gaps(a: &Signal, b: &Signal, kind: &crate::norms::NormKind) -> Result<Vec<f64>> {
    a.values().iter().zip(b.values()).map(|(x, y)| vector_norm(&(x - y), kind)).collect()
}

fn scalar(grid: Grid, v: &[f64]) -> Result<Signal> {
    Signal::scalar(grid, v, Interpolation::PiecewiseLinear)
}

fn max_of(it: impl IntoIterator<Item = f64>) -> f64 {
    it.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Default)]
struct BoundExcess {
    forward_contraction: f64,
    gronwall: f64,
    dual_contraction: f64,
    costate_pointwise: f64,
    costate_sup: f64,
    hierarchy: f64,
}

fn bound_checks(b: &BenchmarkProblem, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let spec = &b.spec;
    let lip = b.constants.values();
    let c = lip.c;
    let xn = spec.state_norm();
    let un = spec.control_norm();
    let dn = spec.costate_norm();
    let grid = spec.grid(opts.bound_steps)?;
    let n = spec.state_dim();
    let zero = DVector::zeros(n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6b0d);
    let mut ex = BoundExcess {
        forward_contraction: f64::NEG_INFINITY,
        gronwall: f64::NEG_INFINITY,
        dual_contraction: f64::NEG_INFINITY,
        costate_pointwise: f64::NEG_INFINITY,
        costate_sup: f64::NEG_INFINITY,
        hierarchy: f64::NEG_INFINITY,
    };
    for _ in 0..opts.draws {
        let u = smooth_control(spec, grid, &mut rng)?;
        let ub = smooth_control(spec, grid, &mut rng)?;
        let s: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let x0b = ball_point(spec.x0(), 0.5, xn, &s);
        let x0_gap = vector_norm(&(spec.x0() - &x0b), xn)?;

        // two initial states, one input
        let xa = forward_sweep(spec, &u)?;
        let xs = forward_sweep_from(spec, &x0b, &u)?;
        for (j, t) in grid.times().enumerate() {
            let d = vector_norm(&(xa.state.value(j) - xs.state.value(j)), xn)?;
            ex.forward_contraction = ex.forward_contraction.max(d - (-c * t).exp() * x0_gap);
        }

        // two initial states and two inputs
        let xg = forward_sweep_from(spec, &x0b, &ub)?;
        let u_gap = scalar(grid, &node_gaps(&u, &ub, un)?)?;
        let rhs = gronwall_rhs_nodes(c, x0_gap, &[InputGap { gain: lip.l_fu, gap: &u_gap }])?;
        let dev = node_gaps(&xa.state, &xg.state, xn)?;
        ex.gronwall = ex.gronwall.max(max_of(dev.iter().zip(&rhs).map(|(d, r)| d - r)));

        // two terminal costates along one trajectory
        let s1: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let s2: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let (t1, t2) = (ball_point(&zero, 1.0, &dn, &s1), ball_point(&zero, 1.0, &dn, &s2));
        let gap_t = vector_norm(&(&t1 - &t2), &dn)?;
        let la = integrate_costate(spec, &xa, &u, t1)?;
        let lb = integrate_costate(spec, &xa, &u, t2)?;
        let horizon = grid.horizon();
        for (j, t) in grid.times().enumerate() {
            let d = vector_norm(&(la.costate.value(j) - lb.costate.value(j)), &dn)?;
            ex.dual_contraction = ex.dual_contraction.max(d - (-c * (horizon - t)).exp() * gap_t);
        }

        // costates of two inputs from the same initial state
        let xb = forward_sweep(spec, &ub)?;
        let lam_a = backward_sweep(spec, &xa, &u)?;
        let lam_b = backward_sweep(spec, &xb, &ub)?;
        let terminal = vector_norm(&(lam_a.costate.value(grid.steps()) - lam_b.costate.value(grid.steps())), &dn)?;
        let v_nodes: Vec<f64> = grid
            .times()
            .enumerate()
            .map(|(j, t)| {
                let va = spec.phix(t, xa.state.value(j), u.value(j));
                let vb = spec.phix(t, xb.state.value(j), ub.value(j));
                vector_norm(&(va - vb), &dn)
            })
            .collect::<Result<_>>()?;
        let v_gap = scalar(grid, &v_nodes)?;
        let pointwise = costate_bound_rhs_nodes(&lip, terminal, &v_gap, &u_gap)?;
        let sup = costate_sup_rhs(&lip, terminal, max_of(v_nodes.iter().copied()), max_of(u_gap.values().iter().map(|v| v[0])), horizon)?;
        let dev = node_gaps(&lam_a.costate, &lam_b.costate, &dn)?;
        ex.costate_pointwise = ex.costate_pointwise.max(max_of(dev.iter().zip(&pointwise).map(|(d, r)| d - r)));
        ex.costate_sup = ex.costate_sup.max(max_of(dev.iter().copied()) - sup);
        ex.hierarchy = ex.hierarchy.max(max_of(pointwise.iter().copied()) - sup);
    }
    Ok(vec![
        Check::at_most("forward_contraction_excess", ex.forward_contraction, BOUND_SLACK),
        Check::at_most("state_comparison_bound_excess", ex.gronwall, BOUND_SLACK),
        Check::at_most("dual_costate_contraction_excess", ex.dual_contraction, BOUND_SLACK),
        Check::at_most("costate_pointwise_bound_excess", ex.costate_pointwise, BOUND_SLACK),
        Check::at_most("costate_sup_bound_excess", ex.costate_sup, BOUND_SLACK),
        Check::at_most("sup_bound_below_pointwise_bound", ex.hierarchy, 1e-12),
    ])
}

fn containment_checks(b: &BenchmarkProblem, sets: &BoundedSets, grid: Grid, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let spec = &b.spec;
    let dn = spec.costate_norm();
    let center = sets.center();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xb0c5);
    let (mut x_excess, mut lam_excess) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for _ in 0..opts.draws {
        let u = random_control(spec, grid, &mut rng)?;
        let x = forward_sweep(spec, &u)?;
        let lam = backward_sweep(spec, &x, &u)?;
        for v in x.state.values() {
            x_excess = x_excess.max(vector_norm(&(v - &center), spec.state_norm())? - sets.x_radius);
        }
        for v in lam.costate.values() {
            lam_excess = lam_excess.max(vector_norm(v, &dn)? - sets.lam_radius);
        }
    }
    Ok(vec![
        Check::at_most("states_inside_state_ball", x_excess, BOUND_SLACK),
        Check::at_most("costates_inside_costate_ball", lam_excess, BOUND_SLACK),
    ])
}

fn solver_checks(b: &BenchmarkProblem, cert: &Certificate, rep: &MsaReport, grid: Grid, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let spec = &b.spec;
    let un = spec.control_norm();
    let mut checks = vec![
        Check::at_most("msa_final_residual", rep.residuals.last().copied().unwrap_or(f64::INFINITY), opts.tol),
        Check::at_most("msa_pmp_residual", rep.final_pmp_residual, PMP_TOLERANCE),
        Check::at_most("minimizer_restart_disagreements", rep.minimizer_disagreements as f64, 0.0),
        Check::at_most(
            "iterates_outside_box",
            rep.iterates.iter().filter(|u| !spec.control_box().signal_in_box(u)).count() as f64,
            0.0,
        ),
    ];
    if cert.contractive {
        let ratios: Vec<f64> = rep
            .residuals
            .windows(2)
            .filter(|w| w[0] > 1e3 * opts.tol)
            .map(|w| w[1] / w[0])
            .collect();
        checks.push(Check::at_most("residual_ratio", max_of(ratios.iter().copied()).max(0.0), cert.lip_bound + RATIO_SLACK));
        let gap = rep.residuals[0];
        let predicted = cert.iterations_for(opts.tol, gap).unwrap_or(usize::MAX);
        checks.push(Check::at_most("iterations_vs_banach_count", rep.iterations as f64, predicted as f64 + 5.0));
        let last = rep.final_control();
        let mut excess = f64::NEG_INFINITY;
        for (i, u) in rep.iterates.iter().enumerate() {
            let envelope = cert.banach_envelope(i, gap).unwrap_or(f64::INFINITY);
            excess = excess.max(sup_distance(u, last, un)? - envelope);
        }
        checks.push(Check::at_most("banach_envelope_excess", excess, BOUND_SLACK));
        let emp = empirical_contraction(spec, grid, opts.draws, opts.seed)?;
        checks.push(Check::at_most("empirical_contraction", emp, cert.lip_bound + RATIO_SLACK));
    }
    Ok(checks)
}

fn oracle_checks(b: &BenchmarkProblem, rep: &MsaReport, grid: Grid, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let spec = &b.spec;
    let un = spec.control_norm();
    let msa_u = rep.final_control();
    let direct = direct_solve(spec, &spec.zero_control(grid), DirectOptions { seed: opts.seed, ..Default::default() })?;
    let msa_cost = *rep.costs.last().expect("costs recorded");
    let mut checks = vec![
        Check::at_most("direct_vs_msa", sup_distance(&direct.u, msa_u, un)?, ORACLE_TOLERANCE),
        Check::at_most("direct_vs_msa_cost", (direct.cost - msa_cost).abs(), BOUND_SLACK),
        Check::at_most("direct_pmp_residual", pmp_residual(spec, &direct.u)?, PMP_TOLERANCE),
    ];
    if let Reference::Riccati(lqr) = &b.reference {
        let sol = riccati_solve(lqr, grid)?;
        let fits = sol.fits_box(spec.control_box());
        checks.push(Check::at_most("riccati_control_outside_box", if fits { 0.0 } else { 1.0 }, 0.0));
        if fits {
            checks.push(Check::at_most("riccati_vs_msa", sup_distance(&sol.u_star, msa_u, un)?, ORACLE_TOLERANCE));
            checks.push(Check::at_most("riccati_vs_direct", sup_distance(&sol.u_star, &direct.u, un)?, ORACLE_TOLERANCE));
            checks.push(Check::at_most("riccati_pmp_residual", pmp_residual(spec, &sol.u_star)?, PMP_TOLERANCE));
            let x = forward_sweep(spec, &sol.u_star)?;
            let lam = backward_sweep(spec, &x, &sol.u_star)?;
            let mut worst = 0.0_f64;
            for (j, p) in sol.p.iter().enumerate() {
                let px = p * sol.x_star.value(j);
                worst = worst.max(vector_norm(&(lam.costate.value(j) - px), &spec.costate_norm())?);
            }
            checks.push(Check::at_most("costate_vs_riccati_product", worst, BOUND_SLACK));
        }
        // the unconstrained oracle is only valid if no iterate touches the box
        let touching = rep
            .iterates
            .iter()
            .flat_map(|u| u.values().iter())
            .filter(|v| {
                let bx = spec.control_box();
                v.iter().enumerate().any(|(i, x)| *x <= bx.lower()[i] || *x >= bx.upper()[i])
            })
            .count();
        checks.push(Check::at_most("iterate_nodes_on_box_boundary", touching as f64, 0.0));
    }
    Ok(checks)
}

/// Runs every check on the named built-in problem.
pub fn run_verification(name: &str, opts: &VerifyOptions) -> Result<VerifyReport> {
    let b = builtin_with(name, opts.horizon)?;
    verify_benchmark(&b, opts)
}

pub fn verify_benchmark(b: &BenchmarkProblem, opts: &VerifyOptions) -> Result<VerifyReport> {
    let spec = &b.spec;
    let steps = opts.steps.unwrap_or(b.default_steps);
    let grid = spec.grid(steps)?;
    let cert = certify(&b.constants, spec.horizon())?;
    let c = b.constants.c.value;
    let sets = bounded_sets(spec, &b.constants, grid)?;
    let sampler = Sampler::new(opts.sample_budget, opts.seed);

    let mut checks = vec![Check::at_most("derivative_deviation", derivative_deviation(spec)?, DERIVATIVE_TOLERANCE)];
    let state = verify_contraction(spec, &sets, c, sampler)?;
    checks.push(Check::at_most("state_jacobian_lognorm", state.max_lognorm, -c + 1e-9));
    let costate = verify_costate_contraction(spec, &sets, c, sampler)?;
    checks.push(Check::at_most("costate_jacobian_lognorm", costate.max_lognorm, -c + 1e-9));
    let kappa_direct = (1.0 - (-c * spec.horizon()).exp()) / c;
    checks.push(Check::at_most("kappa_recomputed", (cert.kappa - kappa_direct).abs(), 1e-12));

    checks.extend(containment_checks(b, &sets, grid, opts)?);
    checks.extend(bound_checks(b, opts)?);

    let rep = solve(spec, &spec.zero_control(grid), SolveOptions { max_iter: opts.max_iter, tol: opts.tol })?;
    checks.extend(solver_checks(b, &cert, &rep, grid, opts)?);
    checks.extend(oracle_checks(b, &rep, grid, opts)?);

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        problem: b.name.clone(),
        seed: opts.seed,
        steps,
        horizon: spec.horizon(),
        certificate: cert,
        checks,
        passed,
    })
}
