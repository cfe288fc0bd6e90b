//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails. Run with `cargo test -p contracting-msa --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use contracting_msa::certificate::{certify, critical_horizon};
use contracting_msa::msa::{empirical_contraction, pmp_residual, solve, SolveOptions};
use contracting_msa::norms::{dual_kind, induced_matrix_norm, log_norm, vector_norm, NormKind};
use contracting_msa::oracle::{builtin, direct_solve, riccati_solve, DirectOptions, Reference, BUILTIN_NAMES};
use contracting_msa::problem::{LipschitzData, ProblemSpec};
use contracting_msa::signals::{sup_distance, Interpolation, Signal};
use contracting_msa::sweep::{backward_sweep, forward_sweep};
use contracting_msa::verify::{run_verification, Check, VerifyOptions};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// pinned tolerances
const DUAL_REL_TOL: f64 = 1e-9;
const DUAL_RUNTIME: Duration = Duration::from_secs(5);
const COSTATE_RUNTIME: Duration = Duration::from_secs(30);
const KAPPA_TOL: f64 = 1e-12;
const CRITICAL_TOL: f64 = 1e-9;
const RATIO_SLACK: f64 = 0.05;
const ENVELOPE_SLACK: f64 = 1e-6;
const EXTRA_ITERATIONS: usize = 5;
const SOLVE_TOL: f64 = 1e-9;
const AGREEMENT_TOL: f64 = 1e-4;
const PMP_TOL: f64 = 1e-5;
const ORACLE_RUNTIME: Duration = Duration::from_secs(60);
const ORDER_FACTOR: f64 = 8.0;

type Outcome = (bool, String);

fn check_named<'a>(checks: &'a [Check], name: &str) -> &'a Check {
    checks.iter().find(|c| c.name == name).unwrap_or_else(|| panic!("no check named {name}"))
}

fn dual_norm_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-3.0..3.0));
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..5.0)).collect();
        let kinds = [
            NormKind::L1,
            NormKind::L2,
            NormKind::LInf,
            NormKind::WeightedL1(w.clone()),
            NormKind::WeightedL2(w.clone()),
            NormKind::WeightedLInf(w),
        ];
        for k in &kinds {
            let d = dual_kind(k);
            let at = a.transpose();
            let pairs = [
                (induced_matrix_norm(&a, k).unwrap(), induced_matrix_norm(&at, &d).unwrap()),
                (log_norm(&a, k).unwrap(), log_norm(&at, &d).unwrap()),
            ];
            for (p, q) in pairs {
                worst = worst.max((p - q).abs() / p.abs().max(q.abs()).max(1.0));
            }
        }
    }
    let elapsed = start.elapsed();
    (
        worst <= DUAL_REL_TOL && elapsed < DUAL_RUNTIME,
        format!("max relative gap {worst:.2e} (allowed {DUAL_REL_TOL:.0e}), {elapsed:.2?}"),
    )
}

fn verify_all() -> Vec<(String, Vec<Check>)> {
    BUILTIN_NAMES
        .iter()
        .map(|name| (name.to_string(), run_verification(name, &VerifyOptions::default()).unwrap().checks))
        .collect()
}

fn summarize(reports: &[(String, Vec<Check>)], names: &[&str]) -> Outcome {
    let mut ok = true;
    let mut worst = Vec::new();
    for (problem, checks) in reports {
        for name in names {
            let c = check_named(checks, name);
            ok &= c.passed;
            if !c.passed {
                worst.push(format!("{problem}/{name} {:.3e} > {:.3e}", c.measured, c.allowed));
            }
        }
    }
    let detail = if worst.is_empty() { format!("{} problems, {} checks each", reports.len(), names.len()) } else { worst.join("; ") };
    (ok, detail)
}

fn dual_costate_contraction(reports: &[(String, Vec<Check>)], elapsed: Duration) -> Outcome {
    let (ok, detail) = summarize(reports, &["dual_costate_contraction_excess"]);
    (ok && elapsed < COSTATE_RUNTIME, format!("{detail}, {elapsed:.2?} for all verify runs"))
}

fn comparison_bounds(reports: &[(String, Vec<Check>)]) -> Outcome {
    summarize(
        reports,
        &[
            "state_comparison_bound_excess",
            "costate_pointwise_bound_excess",
            "costate_sup_bound_excess",
            "sup_bound_below_pointwise_bound",
        ],
    )
}

fn certificate_arithmetic() -> Outcome {
    let b = builtin("lqr-scalar").unwrap();
    let cert = certify(&b.constants, 1.0).unwrap();
    let kappa = 1.0 - (-1.0_f64).exp();
    let ok_kappa = (cert.kappa - kappa).abs() <= KAPPA_TOL;
    let ok_b = cert.b1 == 0.0 && (cert.b2 - 1.0).abs() <= KAPPA_TOL;
    let ok_lip = (cert.lip_bound - kappa * kappa).abs() <= KAPPA_TOL && cert.contractive;
    let mut values = b.constants.values();
    values.c = 0.5;
    let slow = LipschitzData::declared(values).unwrap();
    let tc = critical_horizon(&slow).unwrap_or(f64::NAN);
    let ok_tc = (tc - 2.0 * 2.0_f64.ln()).abs() <= CRITICAL_TOL;
    (
        ok_kappa && ok_b && ok_lip && ok_tc,
        format!(
            "kappa {:.12}, b1 {}, b2 {}, lip {:.5}, critical horizon {:.12} (2 ln 2 = {:.12})",
            cert.kappa,
            cert.b1,
            cert.b2,
            cert.lip_bound,
            tc,
            2.0 * 2.0_f64.ln()
        ),
    )
}

fn msa_contractivity() -> Outcome {
    let b = builtin("lqr-scalar").unwrap();
    let spec = &b.spec;
    let cert = certify(&b.constants, spec.horizon()).unwrap();
    let grid = spec.grid(b.default_steps).unwrap();
    let emp = empirical_contraction(spec, grid, 50, 0).unwrap();
    let rep = solve(spec, &spec.zero_control(grid), SolveOptions { max_iter: 200, tol: SOLVE_TOL }).unwrap();
    // ratios below roundoff carry no information
    let ratio = rep
        .residuals
        .windows(2)
        .filter(|w| w[0] > 1e3 * SOLVE_TOL)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max);
    let allowed = cert.lip_bound + RATIO_SLACK;
    (
        emp <= allowed && ratio <= allowed,
        format!("empirical {emp:.4}, worst residual ratio {ratio:.4}, allowed {allowed:.4}"),
    )
}

fn banach_convergence() -> Outcome {
    let b = builtin("lqr-scalar").unwrap();
    let spec = &b.spec;
    let cert = certify(&b.constants, spec.horizon()).unwrap();
    let grid = spec.grid(b.default_steps).unwrap();
    let rep = solve(spec, &spec.zero_control(grid), SolveOptions { max_iter: 200, tol: SOLVE_TOL }).unwrap();
    let gap = rep.residuals[0];
    let predicted = cert.iterations_for(SOLVE_TOL, gap).unwrap();
    let last = rep.final_control();
    let mut excess = f64::NEG_INFINITY;
    for (i, u) in rep.iterates.iter().enumerate() {
        let d = sup_distance(u, last, spec.control_norm()).unwrap();
        excess = excess.max(d - cert.banach_envelope(i, gap).unwrap());
    }
    (
        rep.converged && rep.iterations <= predicted + EXTRA_ITERATIONS && excess <= ENVELOPE_SLACK,
        format!(
            "{} iterations (predicted {predicted} + {EXTRA_ITERATIONS}), envelope excess {excess:.2e}",
            rep.iterations
        ),
    )
}

fn oracle_agreement() -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["lqr-scalar", "lqr-2d"] {
        let b = builtin(name).unwrap();
        let spec = &b.spec;
        let Reference::Riccati(lqr) = &b.reference else { panic!("{name} has no Riccati reference") };
        let grid = spec.grid(b.default_steps).unwrap();
        let un = spec.control_norm();
        let msa = solve(spec, &spec.zero_control(grid), SolveOptions { max_iter: 200, tol: SOLVE_TOL }).unwrap();
        let direct = direct_solve(spec, &spec.zero_control(grid), DirectOptions::default()).unwrap();
        let ric = riccati_solve(lqr, grid).unwrap();
        let u_msa = msa.final_control();
        let gaps = [
            sup_distance(u_msa, &direct.u, un).unwrap(),
            sup_distance(u_msa, &ric.u_star, un).unwrap(),
            sup_distance(&direct.u, &ric.u_star, un).unwrap(),
        ];
        let pmp = [
            pmp_residual(spec, u_msa).unwrap(),
            pmp_residual(spec, &direct.u).unwrap(),
            pmp_residual(spec, &ric.u_star).unwrap(),
        ];
        let worst_gap = gaps.iter().copied().fold(0.0, f64::max);
        let worst_pmp = pmp.iter().copied().fold(0.0, f64::max);
        ok &= worst_gap <= AGREEMENT_TOL && worst_pmp <= PMP_TOL;
        parts.push(format!("{name}: gap {worst_gap:.2e}, pmp {worst_pmp:.2e}"));
    }
    let elapsed = start.elapsed();
    (ok && elapsed < ORACLE_RUNTIME, format!("{}, {elapsed:.2?}", parts.join("; ")))
}

fn sweep_errors(spec: &ProblemSpec, steps: usize, reference: usize) -> (f64, f64) {
    let run = |n: usize| {
        let grid = spec.grid(n).unwrap();
        let bx = spec.control_box();
        let value = bx.center() + 0.3 * (bx.upper() - bx.center());
        let u = Signal::constant(grid, value, Interpolation::PiecewiseLinear).unwrap();
        let x = forward_sweep(spec, &u).unwrap();
        let lam = backward_sweep(spec, &x, &u).unwrap();
        (x.state, lam.costate)
    };
    let (xr, lr) = run(reference);
    let (x, l) = run(steps);
    let stride = reference / steps;
    let err = |s: &Signal, r: &Signal, kind: &NormKind| {
        (0..=steps)
            .map(|j| vector_norm(&(s.value(j) - r.value(j * stride)), kind).unwrap())
            .fold(0.0, f64::max)
    };
    (err(&x, &xr, spec.state_norm()), err(&l, &lr, &spec.costate_norm()))
}

fn integrator_order() -> Outcome {
    let mut worst = f64::INFINITY;
    let mut parts = Vec::new();
    for name in BUILTIN_NAMES {
        let spec = builtin(name).unwrap().spec;
        for coarse in [10, 20] {
            let fine = 2 * coarse;
            let reference = 10 * fine;
            let (xc, lc) = sweep_errors(&spec, coarse, reference);
            let (xf, lf) = sweep_errors(&spec, fine, reference);
            let ratio = (xc / xf).min(lc / lf);
            worst = worst.min(ratio);
            parts.push(format!("{name} {coarse}->{fine}: {:.1}/{:.1}", xc / xf, lc / lf));
        }
    }
    (worst >= ORDER_FACTOR, format!("worst ratio {worst:.2} (forward/backward per case: {})", parts.join(", ")))
}

fn reproducibility() -> Outcome {
    let run = || {
        BUILTIN_NAMES
            .iter()
            .map(|name| serde_json::to_vec(&run_verification(name, &VerifyOptions::default()).unwrap()).unwrap())
            .collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    let bytes: usize = a.iter().map(Vec::len).sum();
    (a == b, format!("{} reports, {bytes} bytes each run", a.len()))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    })
}

fn main() {
    let start = Instant::now();
    let reports = verify_all();
    let verify_elapsed = start.elapsed();

    let results: Vec<(&str, Outcome)> = vec![
        ("1 dual norm identities", guarded(dual_norm_identities)),
        ("2 dual costate contraction", guarded(|| dual_costate_contraction(&reports, verify_elapsed))),
        ("3 state and costate comparison bounds", guarded(|| comparison_bounds(&reports))),
        ("4 certificate arithmetic", guarded(certificate_arithmetic)),
        ("5 MSA contractivity", guarded(msa_contractivity)),
        ("6 Banach convergence", guarded(banach_convergence)),
        ("7 oracle agreement", guarded(oracle_agreement)),
        ("8 integrator order", guarded(integrator_order)),
        ("9 reproducibility", guarded(reproducibility)),
    ];
    for (name, (ok, detail)) in &results {
        println!("{} {name}: {detail}", if *ok { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|(_, (ok, _))| !ok).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
