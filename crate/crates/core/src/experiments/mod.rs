//! Replicated experiments driven by [`ExperimentPlan`]s.
//!
//! Every experiment reduces to a list of series, one per swept setting, each
//! simulated over the plan's replications. Replication `r` of every series
//! uses random stream `r`, so series within a plan share their random
//! numbers. All (series, replication) pairs run in parallel and are
//! collected in order, so outputs do not depend on the worker count.

mod kinds;
pub mod plan;

pub use kinds::battery_config;

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::bounds::{bounds, BoundBreakdown, TradeoffPoint, V2Form};
use crate::error::{LabError, Result};
use crate::io::{cell, csv_error, FileDigest, OutputSet};
use crate::maml_sgd::{run_maml_sgd, run_single_task_sgd, DerivedQuantities, ProblemConfig};
use crate::meta_model::MetaCovariance;
use crate::risk::{bayes_error, excess_risk_weighted, CurveStats};

pub use plan::{ExperimentKind, ExperimentPlan};

pub const VERSION: &str = env!("META_RISK_LAB_VERSION");
pub const MANIFEST_SCHEMA: u32 = 1;

/// Which chain a series runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Chain {
    Maml,
    SingleTask,
}

/// One swept setting to simulate.
#[derive(Debug, Clone)]
pub struct SeriesSpec {
    pub label: String,
    pub config: ProblemConfig,
    pub checkpoints: Vec<usize>,
    pub chain: Chain,
}

/// Replicated results for one series.
#[derive(Debug, Clone, Serialize)]
pub struct SeriesResult {
    pub label: String,
    pub chain: Chain,
    #[serde(skip)]
    pub config: ProblemConfig,
    pub curve: CurveStats,
    /// Replication mean of the windowed training loss, per checkpoint.
    pub train_loss: Vec<f64>,
    pub bayes_error: f64,
    /// `per_rep_risk[r][k]`: replication `r` at checkpoint `k`.
    #[serde(skip)]
    pub per_rep_risk: Vec<Vec<f64>>,
    #[serde(skip)]
    pub per_rep_train: Vec<Vec<f64>>,
}

/// Bounds evaluated for one series at one horizon.
#[derive(Debug, Clone, Serialize)]
pub struct BoundRow {
    pub series: String,
    pub t: usize,
    pub breakdown: Option<BoundBreakdown>,
    pub error: Option<String>,
}

/// Least-squares fit of `ln(mean risk)` against `ln T`.
#[derive(Debug, Clone, Serialize)]
pub struct RateFit {
    pub series: String,
    /// Negated slope, so a decaying curve has a positive exponent.
    pub exponent: f64,
    pub intercept: f64,
    pub residual_rms: f64,
    pub predicted: Option<f64>,
    pub points: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StoppingRow {
    pub series: String,
    pub beta_tr: f64,
    pub epsilon: f64,
    pub t_eps: Option<usize>,
    pub t_eps_half: Option<usize>,
    pub final_mean_risk: f64,
    pub log_t_lower: Option<f64>,
    pub log_t_upper: Option<f64>,
    pub envelope: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SandwichRow {
    pub series: String,
    pub d: usize,
    pub t: usize,
    pub spectrum: String,
    pub lower: Option<f64>,
    pub mean_risk: f64,
    pub std_error: f64,
    pub upper: Option<f64>,
    pub passed: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseRow {
    pub series: String,
    pub r: f64,
    pub p: f64,
    pub regime: &'static str,
    pub final_mean_risk: f64,
}

/// Everything an experiment produced, in memory.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub series: Vec<SeriesResult>,
    pub bounds: Vec<BoundRow>,
    pub rates: Vec<RateFit>,
    pub tradeoff: Vec<(String, Vec<TradeoffPoint>)>,
    pub stopping: Vec<StoppingRow>,
    pub sandwich: Vec<SandwichRow>,
    pub phase: Vec<PhaseRow>,
    pub outputs: OutputSet,
}

impl ExperimentReport {
    fn new(kind: ExperimentKind) -> Self {
        ExperimentReport {
            kind,
            series: Vec::new(),
            bounds: Vec::new(),
            rates: Vec::new(),
            tradeoff: Vec::new(),
            stopping: Vec::new(),
            sandwich: Vec::new(),
            phase: Vec::new(),
            outputs: OutputSet::new(),
        }
    }

    pub fn series(&self, label: &str) -> Option<&SeriesResult> {
        self.series.iter().find(|s| s.label == label)
    }
}

/// Settings that do not change results.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Directory that relative spectrum CSV paths are resolved against.
    pub base_dir: PathBuf,
    /// Receives one line per finished series.
    pub log: Option<&'a (dyn Fn(&str) + Sync)>,
}

impl RunOptions<'_> {
    fn note(&self, line: &str) {
        if let Some(log) = self.log {
            log(line);
        }
    }
}

/// Runs a plan and renders its output files into the report.
pub fn run_plan(plan: &ExperimentPlan, options: &RunOptions<'_>) -> Result<ExperimentReport> {
    plan.check()?;
    let mut report = match plan.kind {
        ExperimentKind::PhaseTransition => kinds::phase_transition(plan, options)?,
        ExperimentKind::RateCheck => kinds::rate_check(plan, options)?,
        ExperimentKind::LrTradeoff => kinds::lr_tradeoff(plan, options)?,
        ExperimentKind::StoppingTime => kinds::stopping_time(plan, options)?,
        ExperimentKind::SingleVsMeta => kinds::single_vs_meta(plan, options)?,
        ExperimentKind::BoundSandwich => kinds::bound_sandwich(plan, options)?,
    };
    render(&mut report)?;
    Ok(report)
}

/// Resolves every series a plan would simulate, without running anything.
pub fn plan_series(plan: &ExperimentPlan, options: &RunOptions<'_>) -> Result<Vec<SeriesSpec>> {
    plan.check()?;
    Ok(match plan.kind {
        ExperimentKind::PhaseTransition => kinds::phase_setup(plan, options)?.specs,
        ExperimentKind::RateCheck => kinds::rate_setup(plan, options)?.specs,
        ExperimentKind::LrTradeoff => kinds::tradeoff_setup(plan, options)?.specs,
        ExperimentKind::StoppingTime => kinds::stopping_setup(plan, options)?,
        ExperimentKind::SingleVsMeta => kinds::single_setup(plan, options)?,
        ExperimentKind::BoundSandwich => kinds::sandwich_setup(plan)?.0,
    })
}

/// Simulates every series over `reps` replications.
pub fn simulate(
    specs: &[SeriesSpec],
    reps: usize,
    options: &RunOptions<'_>,
) -> Result<Vec<SeriesResult>> {
    let mut weights = Vec::with_capacity(specs.len());
    for spec in specs {
        let c = &spec.config;
        weights.push(MetaCovariance::new(&c.data_spectrum, c.m, c.beta_te)?.mu);
    }
    let work: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|s| (0..reps).map(move |r| (s, r)))
        .collect();
    let runs: Vec<Result<(Vec<f64>, Vec<f64>)>> = work
        .par_iter()
        .map(|&(s, r)| {
            let spec = &specs[s];
            let traj = match spec.chain {
                Chain::Maml => run_maml_sgd(&spec.config, &spec.checkpoints, r as u64)?,
                Chain::SingleTask => {
                    run_single_task_sgd(&spec.config, &spec.checkpoints, r as u64)?
                }
            };
            let risks = traj
                .omega_bar
                .iter()
                .map(|w| excess_risk_weighted(&weights[s], w, &spec.config.theta_star))
                .collect::<Result<Vec<f64>>>()?;
            Ok((risks, traj.train_loss))
        })
        .collect();

    let mut runs = runs.into_iter();
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut per_rep_risk = Vec::with_capacity(reps);
        let mut per_rep_train = Vec::with_capacity(reps);
        for _ in 0..reps {
            let (risk, train) = runs.next().expect("one result per work item")?;
            per_rep_risk.push(risk);
            per_rep_train.push(train);
        }
        let curve = CurveStats::from_replications(&spec.checkpoints, &per_rep_risk)?;
        let train_loss = CurveStats::from_replications(&spec.checkpoints, &per_rep_train)?.mean;
        let c = &spec.config;
        let bayes = bayes_error(
            &c.task_spectrum,
            &c.data_spectrum,
            c.m,
            c.beta_te,
            c.noise_sigma,
        )?;
        options.note(&format!(
            "{}: final mean risk {:.6e} at T = {} over {} replications",
            spec.label,
            curve.final_mean(),
            c.t,
            reps
        ));
        out.push(SeriesResult {
            label: spec.label.clone(),
            chain: spec.chain,
            config: spec.config.clone(),
            curve,
            train_loss,
            bayes_error: bayes,
            per_rep_risk,
            per_rep_train,
        });
    }
    Ok(out)
}

/// Bounds at each horizon in `horizons`; configuration failures become rows
/// with an error message.
pub fn bound_rows(
    label: &str,
    config: &ProblemConfig,
    horizons: &[usize],
    form: V2Form,
) -> Result<Vec<BoundRow>> {
    horizons
        .iter()
        .map(|&t| {
            let mut c = config.clone();
            c.t = t;
            match bounds(&c, form) {
                Ok(b) => Ok(BoundRow {
                    series: label.to_string(),
                    t,
                    breakdown: Some(b),
                    error: None,
                }),
                Err(e) if e.is_config_error() => Ok(BoundRow {
                    series: label.to_string(),
                    t,
                    breakdown: None,
                    error: Some(e.to_string()),
                }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Slope of `ln y` against `ln t` by ordinary least squares.
pub fn fit_log_log(points: &[(usize, f64)]) -> Result<(f64, f64, f64)> {
    if points.len() < 2 || points.iter().any(|&(t, y)| t == 0 || !(y > 0.0)) {
        return Err(LabError::InvalidPlan(
            "a log-log fit needs at least two points with positive t and risk".into(),
        ));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(t, _)| (t as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, y)| y.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(LabError::InvalidPlan(
            "log-log fit needs distinct horizons".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    Ok((slope, intercept, (ss / n).sqrt()))
}

fn render(report: &mut ExperimentReport) -> Result<()> {
    let mut out = OutputSet::new();
    if !report.series.is_empty() {
        out.csv("curves.csv", |buf| write_curves(&report.series, buf))?;
        out.csv("curves_per_seed.csv", |buf| {
            write_curves_per_seed(&report.series, buf)
        })?;
    }
    out.csv("bounds.csv", |buf| write_bounds(&report.bounds, buf))?;
    if !report.rates.is_empty() {
        out.csv("rates.csv", |buf| write_rates(&report.rates, buf))?;
    }
    for (label, points) in &report.tradeoff {
        out.csv(&format!("tradeoff_{label}.csv"), |buf| {
            crate::bounds::write_tradeoff_csv(points, buf)
        })?;
    }
    if report.kind == ExperimentKind::StoppingTime {
        out.csv("stopping.csv", |buf| write_stopping(&report.stopping, buf))?;
    }
    if !report.sandwich.is_empty() {
        out.csv("sandwich.csv", |buf| write_sandwich(&report.sandwich, buf))?;
    }
    if !report.phase.is_empty() {
        out.csv("phase.csv", |buf| write_phase(&report.phase, buf))?;
    }
    report.outputs = out;
    Ok(())
}

fn finish(w: csv::Writer<&mut Vec<u8>>) -> Result<()> {
    let mut w = w;
    w.flush().map_err(|e| LabError::io("<csv buffer>", e))
}

fn write_curves(series: &[SeriesResult], buf: &mut Vec<u8>) -> Result<()> {
    let err = csv_error("curves.csv");
    let mut w = csv::Writer::from_writer(buf);
    w.write_record([
        "series",
        "t",
        "mean_risk",
        "std_risk",
        "n_reps",
        "bayes_error",
        "mean_total_risk",
        "mean_train_loss",
    ])
    .map_err(&err)?;
    for s in series {
        for k in 0..s.curve.t.len() {
            w.write_record([
                s.label.clone(),
                s.curve.t[k].to_string(),
                s.curve.mean[k].to_string(),
                s.curve.std[k].to_string(),
                s.curve.n_reps.to_string(),
                s.bayes_error.to_string(),
                (s.curve.mean[k] + s.bayes_error).to_string(),
                s.train_loss[k].to_string(),
            ])
            .map_err(&err)?;
        }
    }
    finish(w)
}

fn write_curves_per_seed(series: &[SeriesResult], buf: &mut Vec<u8>) -> Result<()> {
    let err = csv_error("curves_per_seed.csv");
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(["series", "rep", "t", "excess_risk", "train_loss"])
        .map_err(&err)?;
    for s in series {
        for (r, (risk, train)) in s.per_rep_risk.iter().zip(&s.per_rep_train).enumerate() {
            for k in 0..s.curve.t.len() {
                w.write_record([
                    s.label.clone(),
                    r.to_string(),
                    s.curve.t[k].to_string(),
                    risk[k].to_string(),
                    train[k].to_string(),
                ])
                .map_err(&err)?;
            }
        }
    }
    finish(w)
}

fn write_bounds(rows: &[BoundRow], buf: &mut Vec<u8>) -> Result<()> {
    let err = csv_error("bounds.csv");
    let mut w = csv::Writer::from_writer(buf);
    w.write_record([
        "series",
        "t",
        "bias",
        "v1",
        "v2",
        "var_total",
        "upper",
        "lower_bias",
        "lower_var",
        "lower",
        "remainder",
        "xi_sum",
        "leading_count",
        "error",
    ])
    .map_err(&err)?;
    for row in rows {
        let b = row.breakdown.as_ref();
        w.write_record([
            row.series.clone(),
            row.t.to_string(),
            cell(b.map(|b| b.bias)),
            cell(b.map(|b| b.v1)),
            cell(b.map(|b| b.v2)),
            cell(b.map(|b| b.var_total)),
            cell(b.map(|b| b.upper)),
            cell(b.and_then(|b| b.lower_bias)),
            cell(b.and_then(|b| b.lower_var)),
            cell(b.and_then(|b| b.lower)),
            cell(b.map(|b| b.remainder)),
            cell(b.map(|b| b.xi_sum)),
            b.map(|b| b.leading_count.to_string()).unwrap_or_default(),
            row.error.clone().unwrap_or_default(),
        ])
        .map_err(&err)?;
    }
    finish(w)
}

fn write_rates(rows: &[RateFit], buf: &mut Vec<u8>) -> Result<()> {
    let err = csv_error("rates.csv");
    let mut w = csv::Writer::from_writer(buf);
    w.write_record([
        "series",
        "exponent",
        "intercept",
        "residual_rms",
        "predicted",
        "n_points",
    ])
    .map_err(&err)?;
    for r in rows {
        w.write_record([
            r.series.clone(),
            r.exponent.to_string(),
            r.intercept.to_string(),
            r.residual_rms.to_string(),
            cell(r.predicted),
            r.points.len().to_string(),
        ])
        .map_err(&err)?;
    }
    finish(w)
}

fn write_stopping(rows: &[StoppingRow], buf: &mut Vec<u8>) -> Result<()> {
    let err = csv_error("stopping.csv");
    let mut w = csv::Writer::from_writer(buf);
    w.write_record([
        "series",
        "beta_tr",
        "epsilon",
        "t_eps",
        "t_eps_half",
        "final_mean_risk",
        "log_t_lower",
        "log_t_upper",
        "envelope",
    ])
    .map_err(&err)?;
    let int = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.series.clone(),
            r.beta_tr.to_string(),
            r.epsilon.to_string(),
            int(r.t_eps),
            int(r.t_eps_half),
            r.final_mean_risk.to_string(),
            cell(r.log_t_lower),
            cell(r.log_t_upper),
            r.envelope.clone().unwrap_or_default(),
        ])
        .map_err(&err)?;
    }
    finish(w)
}

fn write_sandwich(rows: &[SandwichRow], buf: &mut Vec<u8>) -> Result<()> {
    let err = csv_error("sandwich.csv");
    let mut w = csv::Writer::from_writer(buf);
    w.write_record([
        "series",
        "d",
        "T",
        "spectrum",
        "lower",
        "mean_risk",
        "std_error",
        "upper",
        "passed",
        "error",
    ])
    .map_err(&err)?;
    for r in rows {
        w.write_record([
            r.series.clone(),
            r.d.to_string(),
            r.t.to_string(),
            r.spectrum.clone(),
            cell(r.lower),
            r.mean_risk.to_string(),
            r.std_error.to_string(),
            cell(r.upper),
            r.passed.map(|p| p.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(&err)?;
    }
    finish(w)
}

fn write_phase(rows: &[PhaseRow], buf: &mut Vec<u8>) -> Result<()> {
    let err = csv_error("phase.csv");
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(["series", "r", "p", "regime", "final_mean_risk"])
        .map_err(&err)?;
    for r in rows {
        w.write_record([
            r.series.clone(),
            r.r.to_string(),
            r.p.to_string(),
            r.regime.to_string(),
            r.final_mean_risk.to_string(),
        ])
        .map_err(&err)?;
    }
    finish(w)
}

/// A resolved series configuration as recorded in a manifest.
#[derive(Debug, Clone, Serialize)]
pub struct ManifestConfig {
    pub series: String,
    pub fingerprint: String,
    pub config: ProblemConfig,
    pub derived: Option<DerivedQuantities>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestError {
    pub exit_code: i32,
    pub message: String,
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub manifest_schema: u32,
    pub version: String,
    pub kind: Option<&'static str>,
    pub seed: Option<u64>,
    /// The plan with overrides applied and every default materialised.
    /// Absent when the plan itself failed to parse.
    pub plan: Option<ExperimentPlan>,
    pub configs: Vec<ManifestConfig>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub wall_clock_seconds: f64,
    pub files: Vec<FileDigest>,
    pub error: Option<ManifestError>,
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Exit code for a failed run: 2 for configuration errors, 3 for
/// divergence, 1 otherwise.
pub fn exit_code(err: &LabError) -> i32 {
    match err {
        LabError::Diverged { .. } => 3,
        e if e.is_config_error() => 2,
        _ => 1,
    }
}

/// Runs a plan, writes its outputs and a manifest to `out_dir`. A manifest
/// is written on failure as well, carrying the error.
pub fn execute(
    plan: &ExperimentPlan,
    out_dir: &Path,
    options: &RunOptions<'_>,
) -> Result<ExperimentReport> {
    let started = unix_ms();
    let clock = Instant::now();
    let result = run_plan(plan, options);
    let (files, configs, error) = match &result {
        Ok(report) => {
            let files = report.outputs.write_to(out_dir)?;
            let configs = report
                .series
                .iter()
                .map(|s| ManifestConfig {
                    series: s.label.clone(),
                    fingerprint: s.config.fingerprint(),
                    config: s.config.clone(),
                    derived: s.config.derived().ok(),
                })
                .collect();
            (files, configs, None)
        }
        Err(e) => (
            Vec::new(),
            Vec::new(),
            Some(ManifestError {
                exit_code: exit_code(e),
                message: e.to_string(),
            }),
        ),
    };
    let manifest = RunManifest {
        manifest_schema: MANIFEST_SCHEMA,
        version: VERSION.to_string(),
        kind: Some(plan.kind.as_str()),
        seed: Some(plan.seed),
        plan: Some(plan.clone()),
        configs,
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        files,
        error,
    };
    write_manifest(out_dir, &manifest)?;
    result
}

/// Records a failure that happened before a plan could be run.
pub fn write_failure_manifest(out_dir: &Path, err: &LabError) -> Result<()> {
    let now = unix_ms();
    let manifest = RunManifest {
        manifest_schema: MANIFEST_SCHEMA,
        version: VERSION.to_string(),
        kind: None,
        seed: None,
        plan: None,
        configs: Vec::new(),
        started_unix_ms: now,
        finished_unix_ms: now,
        wall_clock_seconds: 0.0,
        files: Vec::new(),
        error: Some(ManifestError {
            exit_code: exit_code(err),
            message: err.to_string(),
        }),
    };
    write_manifest(out_dir, &manifest)
}

fn write_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| LabError::io(&path, e))
}

/// Returns the plan document embedded in a manifest, or the document itself
/// when it is already a plan.
pub fn plan_document(value: Value) -> Value {
    match value {
        Value::Object(mut map) if map.contains_key("manifest_schema") => {
            map.remove("plan").unwrap_or(Value::Null)
        }
        other => other,
    }
}
