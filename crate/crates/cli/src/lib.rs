//! `cmsa`: solve, certify, verify and benchmark from the command line.
//!
//! Exit codes: 0 on success, 1 when a run or verification fails, 2 on a bad
//! configuration.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use contracting_msa::certificate::certify;
use contracting_msa::msa::{empirical_contraction, solve, MsaReport, SolveOptions};
use contracting_msa::oracle::{builtin_with, lqr_benchmark, BenchmarkProblem, LqrParams, LqrSpec, Reference, BUILTIN_NAMES};
use contracting_msa::problem::{bounded_sets, estimate_constants, LipschitzData, LipschitzValues};
use contracting_msa::sampling::Sampler;
use contracting_msa::signals::Signal;
use contracting_msa::sweep::{backward_sweep, forward_sweep};
use contracting_msa::verify::{verify_benchmark, VerifyOptions};
use serde::Serialize;

pub use config::{parse_norm, ConstantsSource, RunConfig};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "CMSA_OUT_DIR";

const INLINE_STEPS: usize = 400;

#[derive(Parser, Debug)]
#[command(name = "cmsa", version, about = "Forward-backward sweep solver with contraction certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the sweep iteration from the zero control and report its history.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Write state, costate and control of every iterate.
        #[arg(long)]
        dump_trajectories: bool,
    },
    /// Compute the convergence certificate.
    Certify {
        #[command(flatten)]
        common: Common,
    },
    /// Check the solver against the oracles and every bound.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Write the JSON report of every check here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sweep the horizon and tabulate certificate against observed behaviour.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.1)]
        t_min: f64,
        #[arg(long, default_value_t = 10.0)]
        t_max: f64,
        #[arg(long, default_value_t = 8)]
        per_decade: usize,
        /// Control pairs per horizon for the empirical contraction ratio.
        #[arg(long, default_value_t = 20)]
        pairs: usize,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Built-in problem name.
    #[arg(long)]
    problem: Option<String>,
    /// JSON run configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    grid_steps: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to $CMSA_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    /// State norm: l1, l2, linf, or wl1/wl2/wlinf with weights, e.g. wl2:1,1.25.
    #[arg(long, value_parser = parse_norm_arg)]
    state_norm: Option<contracting_msa::norms::NormKind>,
    #[arg(long, value_parser = parse_norm_arg)]
    control_norm: Option<contracting_msa::norms::NormKind>,
    /// JSON file of Lipschitz constants.
    #[arg(long, conflicts_with = "estimate")]
    declared_constants: Option<PathBuf>,
    /// Estimate the constants by sampling, with an optional budget.
    #[arg(long, num_args = 0..=1, default_missing_value = "256")]
    estimate: Option<usize>,
}

fn parse_norm_arg(s: &str) -> Result<contracting_msa::norms::NormKind, String> {
    parse_norm(s).map_err(|e| e.to_string())
}

enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

trait Stage<T> {
    fn config(self) -> Result<T, Failure>;
    fn run(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn run(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Run(e.into()))
    }
}

/// Parses `args` (program name first) and runs the subcommand, returning the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match execute(cli, out) {
        Ok(code) => code,
        Err(Failure::Config(e)) => {
            let _ = writeln!(err, "error: {e:#}");
            2
        }
        Err(Failure::Run(e)) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(p) = &common.problem {
        cfg.problem = Some(p.clone());
        cfg.lqr = None;
    }
    if let Some(n) = common.grid_steps {
        cfg.grid_steps = Some(n);
    }
    if let Some(t) = common.horizon {
        cfg.horizon = Some(t);
    }
    if let Some(t) = common.tol {
        cfg.tol = t;
    }
    if let Some(n) = common.max_iter {
        cfg.max_iter = n;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(k) = &common.state_norm {
        cfg.state_norm = Some(k.clone());
    }
    if let Some(k) = &common.control_norm {
        cfg.control_norm = Some(k.clone());
    }
    if let Some(path) = &common.declared_constants {
        cfg.constants = ConstantsSource::File { path: path.clone() };
    }
    if let Some(budget) = common.estimate {
        cfg.constants = ConstantsSource::Estimate { budget };
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the benchmark a configuration describes, with its constants resolved.
pub fn load_problem(cfg: &RunConfig) -> anyhow::Result<BenchmarkProblem> {
    let mut b = match (&cfg.problem, &cfg.lqr) {
        (Some(name), None) => builtin_with(name, cfg.horizon).map_err(|e| match e {
            contracting_msa::error::Error::NotFound(n) => {
                anyhow!("unknown problem `{n}`; built-in problems are {}", BUILTIN_NAMES.join(", "))
            }
            other => other.into(),
        })?,
        (None, Some(params)) => {
            let mut p = params.clone();
            if let Some(t) = cfg.horizon {
                p.horizon = t;
            }
            lqr_benchmark("inline-lqr", LqrSpec::try_from(p)?, INLINE_STEPS)?
        }
        _ => bail!("give exactly one of a problem name and inline lqr parameters"),
    };
    if cfg.state_norm.is_some() || cfg.control_norm.is_some() {
        b = match &b.reference {
            Reference::Riccati(lqr) => {
                let mut p = LqrParams::from(lqr.clone());
                if let Some(k) = &cfg.state_norm {
                    p.state_norm = k.clone();
                }
                if let Some(k) = &cfg.control_norm {
                    p.control_norm = k.clone();
                }
                lqr_benchmark(&b.name, LqrSpec::try_from(p)?, b.default_steps)?
            }
            Reference::Direct => {
                if !matches!(cfg.constants, ConstantsSource::Estimate { .. }) {
                    bail!("norm overrides on `{}` need --estimate: its declared constants hold only in its default norms", b.name);
                }
                let spec = b.spec.with_norms(
                    cfg.state_norm.clone().unwrap_or_else(|| b.spec.state_norm().clone()),
                    cfg.control_norm.clone().unwrap_or_else(|| b.spec.control_norm().clone()),
                )?;
                BenchmarkProblem { spec, ..b }
            }
        };
    }
    b.constants = constants_for(cfg, &b)?;
    Ok(b)
}

fn constants_for(cfg: &RunConfig, b: &BenchmarkProblem) -> anyhow::Result<LipschitzData> {
    Ok(match &cfg.constants {
        ConstantsSource::Declared => b.constants,
        ConstantsSource::File { path } => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let values: LipschitzValues =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            LipschitzData::declared(values)?
        }
        ConstantsSource::Estimate { budget } => {
            // the sampling region comes from the declared constants
            let grid = b.spec.grid(cfg.grid_steps.unwrap_or(b.default_steps))?;
            let sets = bounded_sets(&b.spec, &b.constants, grid)?;
            estimate_constants(&b.spec, &sets, Sampler::new(*budget, cfg.seed))?.constants
        }
    })
}

fn out_dir(cfg: &RunConfig) -> Option<PathBuf> {
    cfg.out.clone().or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_signal(dir: &Path, name: &str, s: &Signal) -> anyhow::Result<()> {
    write_file(dir, name, s.to_csv_string().as_bytes())
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    problem: &'a str,
    horizon: f64,
    grid_steps: usize,
    tol: f64,
    max_iter: usize,
    #[serde(flatten)]
    report: &'a MsaReport,
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32, Failure> {
    match cli.command {
        Command::Solve { common, dump_trajectories } => {
            let cfg = resolve(&common).config()?;
            let b = load_problem(&cfg).config()?;
            let dir = out_dir(&cfg);
            if dump_trajectories && dir.is_none() {
                return Err(Failure::Config(anyhow!("--dump-trajectories needs --out or ${OUT_DIR_ENV}")));
            }
            let steps = cfg.grid_steps.unwrap_or(b.default_steps);
            let grid = b.spec.grid(steps).config()?;
            let rep = solve(&b.spec, &b.spec.zero_control(grid), SolveOptions { max_iter: cfg.max_iter, tol: cfg.tol }).run()?;
            let text = json(&SolveOutput {
                problem: &b.name,
                horizon: b.spec.horizon(),
                grid_steps: steps,
                tol: cfg.tol,
                max_iter: cfg.max_iter,
                report: &rep,
            });
            if let Some(dir) = dir {
                write_file(&dir, "report.json", text.as_bytes()).run()?;
                write_signal(&dir, "state.csv", &rep.final_state.state).run()?;
                write_signal(&dir, "costate.csv", &rep.final_costate.costate).run()?;
                write_signal(&dir, "control.csv", rep.final_control()).run()?;
                if dump_trajectories {
                    let iter_dir = dir.join("iterations");
                    for (i, u) in rep.iterates.iter().enumerate() {
                        let x = forward_sweep(&b.spec, u).run()?;
                        let lam = backward_sweep(&b.spec, &x, u).run()?;
                        write_signal(&iter_dir, &format!("iter_{i:04}_state.csv"), &x.state).run()?;
                        write_signal(&iter_dir, &format!("iter_{i:04}_costate.csv"), &lam.costate).run()?;
                        write_signal(&iter_dir, &format!("iter_{i:04}_control.csv"), u).run()?;
                    }
                }
            }
            write!(out, "{text}").run()?;
            Ok(if rep.converged { 0 } else { 1 })
        }
        Command::Certify { common } => {
            let cfg = resolve(&common).config()?;
            let b = load_problem(&cfg).config()?;
            let cert = certify(&b.constants, b.spec.horizon()).config()?;
            let text = json(&cert);
            if let Some(dir) = out_dir(&cfg) {
                write_file(&dir, "certificate.json", text.as_bytes()).run()?;
            }
            write!(out, "{text}").run()?;
            Ok(0)
        }
        Command::Verify { common, report } => {
            let cfg = resolve(&common).config()?;
            let b = load_problem(&cfg).config()?;
            let opts = VerifyOptions {
                seed: cfg.seed,
                steps: cfg.grid_steps,
                horizon: cfg.horizon,
                tol: cfg.tol,
                max_iter: cfg.max_iter,
                ..Default::default()
            };
            let rep = verify_benchmark(&b, &opts).run()?;
            let text = json(&rep);
            if let Some(path) = report {
                fs::write(&path, text.as_bytes()).with_context(|| format!("writing {}", path.display())).run()?;
            }
            if let Some(dir) = out_dir(&cfg) {
                write_file(&dir, "verify.json", text.as_bytes()).run()?;
            }
            for c in &rep.checks {
                writeln!(
                    out,
                    "{:4} {:36} measured {:>12.4e}  allowed {:>12.4e}",
                    if c.passed { "ok" } else { "FAIL" },
                    c.name,
                    c.measured,
                    c.allowed
                )
                .run()?;
            }
            let failed = rep.failures().count();
            writeln!(
                out,
                "{}: {} of {} checks passed",
                rep.problem,
                rep.checks.len() - failed,
                rep.checks.len()
            )
            .run()?;
            Ok(if rep.passed { 0 } else { 1 })
        }
        Command::Bench { common, t_min, t_max, per_decade, pairs } => {
            let cfg = resolve(&common).config()?;
            let horizons = log_horizons(t_min, t_max, per_decade).config()?;
            let mut csv = String::from("T,kappa,lip_bound,empirical_contraction,converged\n");
            for t in horizons {
                let point = RunConfig { horizon: Some(t), ..cfg.clone() };
                let b = load_problem(&point).config()?;
                let cert = certify(&b.constants, t).run()?;
                let grid = b.spec.grid(cfg.grid_steps.unwrap_or(b.default_steps)).config()?;
                let emp = if pairs > 0 {
                    empirical_contraction(&b.spec, grid, pairs, cfg.seed).run()?
                } else {
                    f64::NAN
                };
                // a diverging run counts as not converged
                let converged = solve(&b.spec, &b.spec.zero_control(grid), SolveOptions { max_iter: cfg.max_iter, tol: cfg.tol })
                    .map(|r| r.converged)
                    .unwrap_or(false);
                csv.push_str(&format!("{t},{},{},{emp},{converged}\n", cert.kappa, cert.lip_bound));
            }
            if let Some(dir) = out_dir(&cfg) {
                write_file(&dir, "bench.csv", csv.as_bytes()).run()?;
            }
            write!(out, "{csv}").run()?;
            Ok(0)
        }
    }
}

/// `per_decade` logarithmically spaced horizons from `t_min`, ending at `t_max`.
pub fn log_horizons(t_min: f64, t_max: f64, per_decade: usize) -> anyhow::Result<Vec<f64>> {
    if !(t_min > 0.0 && t_max >= t_min && t_max.is_finite()) || per_decade == 0 {
        bail!("need 0 < t_min <= t_max and at least one point per decade");
    }
    let decades = (t_max / t_min).log10();
    let n = (decades * per_decade as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut out: Vec<f64> = (0..n).map(|k| t_min * 10f64.powf(k as f64 / per_decade as f64)).collect();
    out.push(t_max);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizons_log_spaced() {
        let t = log_horizons(0.1, 10.0, 8).unwrap();
        assert_eq!(t.len(), 17);
        assert_eq!(t[0], 0.1);
        assert_eq!(t[16], 10.0);
        for w in t.windows(2) {
            assert!((w[1] / w[0] - 10f64.powf(0.125)).abs() < 1e-12);
        }
        assert_eq!(log_horizons(2.0, 2.0, 8).unwrap(), vec![2.0]);
        assert_eq!(log_horizons(1.0, 5.0, 1).unwrap(), vec![1.0, 5.0]);
        assert!(log_horizons(0.0, 1.0, 8).is_err());
        assert!(log_horizons(2.0, 1.0, 8).is_err());
        assert!(log_horizons(1.0, 2.0, 0).is_err());
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"problem": "lqr-2d", "tol": 1e-6, "seed": 3}"#).unwrap();
        let cli = Cli::try_parse_from(["cmsa", "certify", "--config", path.to_str().unwrap(), "--tol", "1e-8", "--estimate"]).unwrap();
        let Command::Certify { common } = cli.command else { unreachable!() };
        let cfg = resolve(&common).unwrap();
        assert_eq!(cfg.problem.as_deref(), Some("lqr-2d"));
        assert_eq!(cfg.tol, 1e-8);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.constants, ConstantsSource::Estimate { budget: 256 });
    }

    #[test]
    fn norm_override_changes_lqr_constants() {
        let base = load_problem(&RunConfig { problem: Some("lqr-2d".into()), ..Default::default() }).unwrap();
        let l1 = load_problem(&RunConfig {
            problem: Some("lqr-2d".into()),
            state_norm: Some(contracting_msa::norms::NormKind::L1),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(l1.spec.state_norm(), &contracting_msa::norms::NormKind::L1);
        assert_ne!(base.constants.l_fu.value, l1.constants.l_fu.value);
    }

    #[test]
    fn norm_override_on_nonlinear_needs_estimate() {
        let cfg = RunConfig {
            problem: Some("tanh-input".into()),
            state_norm: Some(contracting_msa::norms::NormKind::L1),
            ..Default::default()
        };
        assert!(load_problem(&cfg).is_err());
        let est = RunConfig { constants: ConstantsSource::Estimate { budget: 32 }, ..cfg };
        assert!(load_problem(&est).unwrap().constants.any_estimated());
    }
}
