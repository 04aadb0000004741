//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O failure or failed oracle, 2 invalid plan or
//! configuration, 3 divergence of a simulated chain.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::error::{LabError, Result};
use crate::experiments::plan::{apply_overrides, ExperimentPlan};
use crate::experiments::{self, exit_code, ExperimentReport, RunOptions};
use crate::oracle::{self, SuiteOptions};

#[derive(Debug, Parser)]
#[command(
    name = "meta-risk-lab",
    version = experiments::VERSION,
    about = "Averaged-SGD MAML on mixed linear regression: simulations, exact risks and bounds"
)]
pub struct Cli {
    /// Worker threads (0 = one per CPU).
    #[arg(long, global = true, env = "META_RISK_LAB_JOBS")]
    pub jobs: Option<usize>,
    /// Suppress the per-series progress log on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment plan and write its CSVs and manifest.
    Run(RunArgs),
    /// Resolve a plan and report derived quantities and invariant checks.
    Validate(PlanArgs),
    /// Check the closed forms against independent numerical estimates.
    Oracle(OracleArgs),
    /// Run a plan over an evenly spaced beta_tr grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Plan JSON file, or a manifest.json from an earlier run.
    pub plan: PathBuf,
    /// Dotted `key=value` overrides applied to the plan before validation.
    pub overrides: Vec<String>,
    /// Replace the plan seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace the number of replications.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Simulate even when alpha exceeds the stability threshold; bounds are left empty.
    #[arg(long)]
    pub allow_unstable: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub plan: PlanArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Plan JSON file; its first series configuration is checked.
    pub plan: PathBuf,
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte-Carlo draws for the meta-covariance check.
    #[arg(long, default_value_t = 20_000)]
    pub reps: usize,
    /// Test tasks for the risk and Bayes-error checks.
    #[arg(long, default_value_t = 10_000)]
    pub tasks: usize,
    /// Random (omega, task) pairs for the gradient checks.
    #[arg(long, default_value_t = 50)]
    pub pairs: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Grid as START:STOP:COUNT, inclusive of both ends.
    #[arg(long = "beta-tr", allow_hyphen_values = true)]
    pub beta_tr: String,
    /// Read the grid in units of 1/lambda_1.
    #[arg(long)]
    pub scaled: bool,
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main_from_env() -> i32 {
    let cli = Cli::parse();
    run_cli(cli)
}

pub fn run_cli(cli: Cli) -> i32 {
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 1;
        }
    };
    let quiet = cli.quiet;
    pool.install(|| match cli.command {
        Command::Run(args) => cmd_run(&args, None, quiet),
        Command::Validate(args) => cmd_validate(&args),
        Command::Oracle(args) => cmd_oracle(&args),
        Command::Sweep(args) => match linspace_arg(&args.beta_tr) {
            Ok(grid) => cmd_run(&args.run, Some((grid, args.scaled)), quiet),
            Err(e) => report_error(&e),
        },
    })
}

fn report_error(e: &LabError) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

fn linspace_arg(text: &str) -> Result<Vec<f64>> {
    let bad = || LabError::InvalidPlan(format!("--beta-tr `{text}` is not START:STOP:COUNT"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let stop: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    match count {
        0 => Err(bad()),
        1 => Ok(vec![start]),
        n => Ok((0..n)
            .map(|i| start + (stop - start) * i as f64 / (n - 1) as f64)
            .collect()),
    }
}

/// Reads a plan (or manifest), applies overrides and flags, and parses it.
pub fn load_plan(args: &PlanArgs, extra: &[String]) -> Result<(ExperimentPlan, PathBuf)> {
    let text = std::fs::read_to_string(&args.plan).map_err(|e| LabError::io(&args.plan, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| LabError::Parse {
        what: args.plan.display().to_string(),
        message: e.to_string(),
    })?;
    let mut value = experiments::plan_document(value);
    let mut overrides = args.overrides.clone();
    overrides.extend_from_slice(extra);
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(reps) = args.reps {
        overrides.push(format!("replications={reps}"));
    }
    if args.allow_unstable {
        overrides.push("allow_unstable=true".into());
    }
    apply_overrides(&mut value, &overrides)?;
    let plan = ExperimentPlan::from_value(value).map_err(|e| match e {
        LabError::Parse { message, .. } => LabError::Parse {
            what: args.plan.display().to_string(),
            message,
        },
        other => other,
    })?;
    let base_dir = args
        .plan
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    Ok((plan, base_dir))
}

fn sweep_overrides(plan: &PlanArgs, grid: &[f64], scaled: bool) -> Result<Vec<String>> {
    let entries: Vec<Value> = grid
        .iter()
        .map(|&b| {
            if scaled {
                serde_json::json!({ "scaled": b })
            } else {
                serde_json::json!(b)
            }
        })
        .collect();
    let mut out = vec![format!("sweep.beta_tr={}", Value::Array(entries))];
    let text = std::fs::read_to_string(&plan.plan).map_err(|e| LabError::io(&plan.plan, e))?;
    let kind = serde_json::from_str::<Value>(&text)
        .ok()
        .map(experiments::plan_document)
        .and_then(|v| v.get("kind").and_then(Value::as_str).map(str::to_string));
    if !matches!(kind.as_deref(), Some("lr_tradeoff") | Some("stopping_time")) {
        out.push("kind=\"lr_tradeoff\"".into());
    }
    Ok(out)
}

fn cmd_run(args: &RunArgs, sweep: Option<(Vec<f64>, bool)>, quiet: bool) -> i32 {
    let extra = match &sweep {
        Some((grid, scaled)) => match sweep_overrides(&args.plan, grid, *scaled) {
            Ok(v) => v,
            Err(e) => return report_error(&e),
        },
        None => Vec::new(),
    };
    let (plan, base_dir) = match load_plan(&args.plan, &extra) {
        Ok(p) => p,
        Err(e) => {
            if let Err(io) = experiments::write_failure_manifest(&args.out, &e) {
                eprintln!("error: {io}");
            }
            return report_error(&e);
        }
    };
    let log = |line: &str| eprintln!("{line}");
    let options = RunOptions {
        base_dir,
        log: if quiet { None } else { Some(&log) },
    };
    match experiments::execute(&plan, &args.out, &options) {
        Ok(report) => {
            print_summary(&report, &args.out);
            0
        }
        Err(e) => report_error(&e),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4e}")).unwrap_or_else(|| "-".into())
}

fn print_summary(report: &ExperimentReport, out: &Path) {
    for name in report.outputs.names() {
        println!("wrote {}", out.join(name).display());
    }
    println!("wrote {}", out.join("manifest.json").display());
    for s in &report.series {
        println!(
            "{:<32} final mean excess risk {:.6e} (std {:.2e}, bayes error {:.6e})",
            s.label,
            s.curve.final_mean(),
            s.curve.std.last().copied().unwrap_or(0.0),
            s.bayes_error
        );
    }
    for r in &report.rates {
        println!(
            "{:<32} fitted exponent {:.4} (predicted {}, residual {:.3e})",
            r.series,
            r.exponent,
            r.predicted
                .map(|p| format!("{p:.4}"))
                .unwrap_or_else(|| "-".into()),
            r.residual_rms
        );
    }
    for row in &report.stopping {
        println!(
            "{:<32} eps {:.4e}: t_eps {} log t_eps {} envelope [{}, {}]",
            row.series,
            row.epsilon,
            row.t_eps
                .map(|t| t.to_string())
                .unwrap_or_else(|| "-".into()),
            row.t_eps
                .map(|t| format!("{:.3}", (t as f64).ln()))
                .unwrap_or_else(|| "-".into()),
            opt(row.log_t_lower),
            opt(row.log_t_upper)
        );
    }
    if !report.sandwich.is_empty() {
        let passed = report
            .sandwich
            .iter()
            .filter(|r| r.passed == Some(true))
            .count();
        let evaluated = report
            .sandwich
            .iter()
            .filter(|r| r.passed.is_some())
            .count();
        println!(
            "sandwich: {passed}/{evaluated} configurations inside [lower, upper] ({} without bounds)",
            report.sandwich.len() - evaluated
        );
    }
}

fn cmd_validate(args: &PlanArgs) -> i32 {
    let (mut plan, base_dir) = match load_plan(args, &[]) {
        Ok(p) => p,
        Err(e) => return report_error(&e),
    };
    let enforce = !plan.allow_unstable;
    plan.allow_unstable = true;
    let options = RunOptions {
        base_dir,
        log: None,
    };
    let specs = match experiments::plan_series(&plan, &options) {
        Ok(s) => s,
        Err(e) => return report_error(&e),
    };
    plan.allow_unstable = !enforce;
    match serde_json::to_string_pretty(&plan) {
        Ok(text) => println!("{text}"),
        Err(e) => eprintln!("error: {e}"),
    }
    let mut failures = 0;
    for spec in &specs {
        let c = &spec.config;
        println!("series {}", spec.label);
        println!(
            "  d = {}, T = {}, n1 = {}, n2 = {}, m = {}, noise_sigma = {}",
            c.d, c.t, c.n1, c.n2, c.m, c.noise_sigma
        );
        println!(
            "  alpha = {:.6e}, beta_tr = {:.6e}, beta_te = {:.6e}",
            c.alpha, c.beta_tr, c.beta_te
        );
        match c.derived() {
            Ok(d) => {
                println!(
                    "  tr(Sigma) = {:.6e}, tr(Sigma^2) = {:.6e}, lambda_1 = {:.6e}",
                    d.trace_sigma, d.trace_sigma_sq, d.lambda_max
                );
                println!(
                    "  c(beta_tr, Sigma) = {:.6e}, alpha threshold = {:.6e}",
                    d.c_beta_tr, d.alpha_threshold
                );
                println!(
                    "  mu_min train = {:.6e}, mu_min test = {:.6e}",
                    d.mu_train_min, d.mu_test_min
                );
            }
            Err(e) => println!("  derived quantities unavailable: {e}"),
        }
        let structural = c.validate(false);
        let stable = c.validate(true);
        let mut check = |name: &str, ok: bool, detail: String, fatal: bool| {
            println!("  [{}] {name} {detail}", if ok { "ok" } else { "FAIL" });
            if !ok && fatal {
                failures += 1;
            }
        };
        check(
            "structure, |βtr| < 1/λ1, |βte| < 1/λ1, μ > 0",
            structural.is_ok(),
            structural.err().map(|e| e.to_string()).unwrap_or_default(),
            true,
        );
        check(
            "α < 1/(c(βtr,Σ)·tr(Σ))",
            stable.is_ok(),
            stable.err().map(|e| e.to_string()).unwrap_or_default(),
            enforce,
        );
        check("T > 10 (lower bound)", c.t > 10, String::new(), false);
    }
    if failures > 0 {
        eprintln!("error: {failures} invariant check(s) failed");
        2
    } else {
        0
    }
}

fn cmd_oracle(args: &OracleArgs) -> i32 {
    let plan_args = PlanArgs {
        plan: args.plan.clone(),
        overrides: args.overrides.clone(),
        seed: args.seed,
        reps: None,
        allow_unstable: true,
    };
    let (plan, base_dir) = match load_plan(&plan_args, &[]) {
        Ok(p) => p,
        Err(e) => return report_error(&e),
    };
    let options = RunOptions {
        base_dir,
        log: None,
    };
    let config = match experiments::plan_series(&plan, &options) {
        Ok(specs) => match specs.into_iter().next() {
            Some(s) => s.config,
            None => return report_error(&LabError::InvalidPlan("plan has no series".into())),
        },
        Err(e) => return report_error(&e),
    };
    let suite = SuiteOptions {
        meta_reps: args.reps,
        test_tasks: args.tasks,
        gradient_pairs: args.pairs,
        seed: plan.seed,
    };
    match oracle::run_suite(&config, suite, &oracle::closed_meta_covariance) {
        Ok(results) => {
            for r in &results {
                println!("{r}");
            }
            if results.iter().all(|r| r.passed) {
                0
            } else {
                1
            }
        }
        Err(e) => report_error(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn linspace_parsing() {
        assert_eq!(linspace_arg("-1:1:3").unwrap(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(linspace_arg("0.5:2:1").unwrap(), vec![0.5]);
        assert!(linspace_arg("0:1").is_err());
        assert!(linspace_arg("0:1:0").is_err());
        assert!(linspace_arg("a:1:2").is_err());
    }
}
