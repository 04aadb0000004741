use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::plan::{
    BetaSpec, ConfigSpec, EpsilonSpec, LabelledSpectrum, SpectrumSpec, TaskSpectrumSpec,
};
use super::{
    bound_rows, fit_log_log, simulate, Chain, ExperimentPlan, ExperimentReport, PhaseRow, RateFit,
    RunOptions, SandwichRow, SeriesSpec, StoppingRow,
};
use crate::bounds::{
    stopping_time_envelope, stopping_time_envelope_edges, tradeoff_curve, EnvelopeConstants,
};
use crate::error::{LabError, Result};
use crate::maml_sgd::ProblemConfig;
use crate::meta_model::RateConstants;
use crate::risk::empirical_stopping_time;
use crate::rng::{self, Domain};
use crate::spectra::{Spectrum, TaskSpectrum};

fn base(plan: &ExperimentPlan) -> Result<&ConfigSpec> {
    plan.base
        .as_ref()
        .ok_or_else(|| LabError::InvalidPlan("missing field `base`".into()))
}

fn resolve(
    spec: &ConfigSpec,
    plan: &ExperimentPlan,
    options: &RunOptions<'_>,
) -> Result<ProblemConfig> {
    let config = spec.resolve(plan.seed, &options.base_dir)?;
    config.validate(!plan.allow_unstable)?;
    Ok(config)
}

/// The plan's schedule up to `t`, merged with any `t_grid` horizons.
fn checkpoints(plan: &ExperimentPlan, t: usize) -> Result<Vec<usize>> {
    let mut ts = plan.checkpoints.resolve(t);
    if let Some(grid) = &plan.sweep.t_grid {
        if let Some(&bad) = grid.iter().find(|&&g| g > t) {
            return Err(LabError::InvalidPlan(format!(
                "t_grid entry {bad} exceeds T = {t}"
            )));
        }
        ts.extend(grid);
        ts.sort_unstable();
        ts.dedup();
    }
    Ok(ts)
}

fn horizons(plan: &ExperimentPlan, checkpoints: &[usize]) -> Vec<usize> {
    plan.sweep
        .t_grid
        .clone()
        .unwrap_or_else(|| checkpoints.to_vec())
}

fn spectra(plan: &ExperimentPlan, base: &ConfigSpec) -> Vec<LabelledSpectrum> {
    plan.sweep.spectra.clone().unwrap_or_else(|| {
        vec![LabelledSpectrum {
            label: "base".into(),
            data_spectrum: base.data_spectrum.clone(),
        }]
    })
}

pub(super) struct PhaseSetup {
    pub specs: Vec<SeriesSpec>,
    rs: Vec<f64>,
    p: f64,
}

pub(super) fn phase_setup(plan: &ExperimentPlan, options: &RunOptions<'_>) -> Result<PhaseSetup> {
    let base = base(plan)?;
    let p = match base.data_spectrum {
        SpectrumSpec::LogDecay { p } => p,
        _ => {
            return Err(LabError::InvalidPlan(
                "phase_transition needs a log_decay data spectrum".into(),
            ))
        }
    };
    let scale = match base.task_spectrum {
        TaskSpectrumSpec::LogGrowth { scale, .. } => scale,
        _ => {
            return Err(LabError::InvalidPlan(
                "phase_transition needs a log_growth task spectrum".into(),
            ))
        }
    };
    let rs = plan.sweep.r.clone().unwrap_or_default();
    let mut specs = Vec::with_capacity(rs.len());
    for &r in &rs {
        let mut spec = base.clone();
        spec.task_spectrum = TaskSpectrumSpec::LogGrowth { r, scale };
        let config = resolve(&spec, plan, options)?;
        let cps = checkpoints(plan, config.t)?;
        specs.push(SeriesSpec {
            label: format!("r={r}"),
            config,
            checkpoints: cps,
            chain: Chain::Maml,
        });
    }
    Ok(PhaseSetup { specs, rs, p })
}

pub(super) fn phase_transition(
    plan: &ExperimentPlan,
    options: &RunOptions<'_>,
) -> Result<ExperimentReport> {
    let PhaseSetup { specs, rs, p } = phase_setup(plan, options)?;
    let mut report = ExperimentReport::new(plan.kind);
    report.series = simulate(&specs, plan.replications, options)?;
    let boundary = 2.0 * p - 1.0;
    for (s, &r) in report.series.iter().zip(&rs) {
        let hs = horizons(plan, &s.curve.t);
        report
            .bounds
            .extend(bound_rows(&s.label, &s.config, &hs, plan.v2_form)?);
        report.phase.push(PhaseRow {
            series: s.label.clone(),
            r,
            p,
            regime: if r < boundary {
                "below"
            } else if r > boundary {
                "above"
            } else {
                "boundary"
            },
            final_mean_risk: s.curve.final_mean(),
        });
    }
    Ok(report)
}

pub(super) struct RateSetup {
    pub specs: Vec<SeriesSpec>,
    predicted: Vec<Option<f64>>,
}

pub(super) fn rate_setup(plan: &ExperimentPlan, options: &RunOptions<'_>) -> Result<RateSetup> {
    let base = base(plan)?;
    let labelled = spectra(plan, base);
    let mut specs = Vec::new();
    let mut predicted = Vec::new();
    for ls in &labelled {
        let mut spec = base.clone();
        spec.data_spectrum = ls.data_spectrum.clone();
        let config = resolve(&spec, plan, options)?;
        let cps = checkpoints(plan, config.t)?;
        specs.push(SeriesSpec {
            label: ls.label.clone(),
            config: config.clone(),
            checkpoints: cps.clone(),
            chain: Chain::Maml,
        });
        predicted.push(ls.data_spectrum.predicted_rate());
        if plan.sweep.single_task {
            specs.push(SeriesSpec {
                label: format!("{}/single", ls.label),
                config,
                checkpoints: cps,
                chain: Chain::SingleTask,
            });
            predicted.push(ls.data_spectrum.predicted_rate());
        }
    }
    Ok(RateSetup { specs, predicted })
}

pub(super) fn rate_check(
    plan: &ExperimentPlan,
    options: &RunOptions<'_>,
) -> Result<ExperimentReport> {
    let grid = plan.sweep.t_grid.clone().unwrap_or_default();
    let RateSetup { specs, predicted } = rate_setup(plan, options)?;
    let mut report = ExperimentReport::new(plan.kind);
    report.series = simulate(&specs, plan.replications, options)?;
    for (s, pred) in report.series.iter().zip(predicted) {
        let points: Vec<(usize, f64)> = grid
            .iter()
            .map(|&t| (t, s.curve.at(t).expect("t_grid is part of the schedule")))
            .collect();
        let (slope, intercept, residual_rms) = fit_log_log(&points)?;
        report.rates.push(RateFit {
            series: s.label.clone(),
            exponent: -slope,
            intercept,
            residual_rms,
            predicted: pred,
            points,
        });
        if s.chain == Chain::Maml {
            report
                .bounds
                .extend(bound_rows(&s.label, &s.config, &grid, plan.v2_form)?);
        }
    }
    Ok(report)
}

pub(super) struct TradeoffSetup {
    pub specs: Vec<SeriesSpec>,
    per_spectrum: Vec<(String, ConfigSpec, Vec<f64>)>,
}

pub(super) fn tradeoff_setup(
    plan: &ExperimentPlan,
    options: &RunOptions<'_>,
) -> Result<TradeoffSetup> {
    let base = base(plan)?;
    let betas = plan.sweep.beta_tr.clone().unwrap_or_default();
    let labelled = spectra(plan, base);

    let mut per_spectrum = Vec::new();
    let mut specs = Vec::new();
    for ls in &labelled {
        let sigma = ls.data_spectrum.resolve(base.d, &options.base_dir)?;
        let mut spec = base.clone();
        spec.data_spectrum = ls.data_spectrum.clone();
        let grid: Vec<f64> = betas.iter().map(|b| b.resolve(&sigma)).collect();
        for &beta in &grid {
            let mut s = spec.clone();
            s.beta_tr = BetaSpec::Value(beta);
            let config = resolve(&s, plan, options)?;
            let cps = checkpoints(plan, config.t)?;
            specs.push(SeriesSpec {
                label: format!("{}/beta_tr={beta}", ls.label),
                config,
                checkpoints: cps,
                chain: Chain::Maml,
            });
        }
        per_spectrum.push((ls.label.clone(), spec, grid));
    }

    Ok(TradeoffSetup {
        specs,
        per_spectrum,
    })
}

pub(super) fn lr_tradeoff(
    plan: &ExperimentPlan,
    options: &RunOptions<'_>,
) -> Result<ExperimentReport> {
    let TradeoffSetup {
        specs,
        per_spectrum,
    } = tradeoff_setup(plan, options)?;
    let mut report = ExperimentReport::new(plan.kind);
    report.series = simulate(&specs, plan.replications, options)?;
    let mut offset = 0;
    for (label, spec, grid) in per_spectrum {
        let block = &report.series[offset..offset + grid.len()];
        offset += grid.len();
        let results: HashMap<u64, (f64, f64)> = block
            .iter()
            .map(|s| {
                let k = s.curve.t.len() - 1;
                (
                    s.config.beta_tr.to_bits(),
                    (s.curve.mean[k], s.curve.std[k]),
                )
            })
            .collect();
        let lookup = |c: &ProblemConfig| -> Result<(f64, f64)> {
            results.get(&c.beta_tr.to_bits()).copied().ok_or_else(|| {
                LabError::InvalidPlan(format!("no simulation for beta_tr = {}", c.beta_tr))
            })
        };
        let make = |beta: f64| -> Result<ProblemConfig> {
            let mut s = spec.clone();
            s.beta_tr = BetaSpec::Value(beta);
            s.resolve(plan.seed, &options.base_dir)
        };
        let points = tradeoff_curve(&make, &grid, plan.v2_form, Some(&lookup))?;
        for s in block {
            report.bounds.extend(bound_rows(
                &s.label,
                &s.config,
                &[s.config.t],
                plan.v2_form,
            )?);
        }
        report.tradeoff.push((label, points));
    }
    Ok(report)
}

pub(super) fn stopping_setup(
    plan: &ExperimentPlan,
    options: &RunOptions<'_>,
) -> Result<Vec<SeriesSpec>> {
    let base = base(plan)?;
    let sigma = base.data_spectrum.resolve(base.d, &options.base_dir)?;
    let betas: Vec<f64> = plan
        .sweep
        .beta_tr
        .clone()
        .unwrap_or_default()
        .iter()
        .map(|b| b.resolve(&sigma))
        .collect();
    let mut specs = Vec::with_capacity(betas.len());
    for &beta in &betas {
        let mut s = base.clone();
        s.beta_tr = BetaSpec::Value(beta);
        let config = resolve(&s, plan, options)?;
        let cps = checkpoints(plan, config.t)?;
        specs.push(SeriesSpec {
            label: format!("beta_tr={beta}"),
            config,
            checkpoints: cps,
            chain: Chain::Maml,
        });
    }
    Ok(specs)
}

pub(super) fn stopping_time(
    plan: &ExperimentPlan,
    options: &RunOptions<'_>,
) -> Result<ExperimentReport> {
    let base = base(plan)?;
    let specs = stopping_setup(plan, options)?;
    let mut report = ExperimentReport::new(plan.kind);
    report.series = simulate(&specs, plan.replications, options)?;

    let best = report
        .series
        .iter()
        .map(|s| s.curve.final_mean())
        .fold(f64::INFINITY, f64::min);
    let epsilons: Vec<f64> = plan
        .sweep
        .epsilon
        .clone()
        .unwrap_or_default()
        .iter()
        .map(|e| match *e {
            EpsilonSpec::Value(v) => v,
            EpsilonSpec::BestFinal { best_final_factor } => best_final_factor * best,
        })
        .collect();
    if let Some(&bad) = epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(LabError::ParameterDomain {
            name: "epsilon",
            value: bad,
            constraint: "epsilon > 0",
        });
    }
    let edge_p = plan.sweep.envelope_p.or(match base.data_spectrum {
        SpectrumSpec::LogDecay { p } => Some(p),
        _ => None,
    });

    for s in &report.series {
        let points = s.curve.points();
        for &eps in &epsilons {
            let envelope = if s.config.data_spectrum.two_block_split().is_some() {
                Some((
                    "two_block",
                    stopping_time_envelope(
                        &s.config,
                        eps,
                        plan.sweep.envelope_p.unwrap_or(1.0),
                        None,
                    ),
                ))
            } else {
                edge_p.map(|p| {
                    let sigma = &s.config.data_spectrum;
                    (
                        "edges",
                        stopping_time_envelope_edges(
                            sigma.lambda_max(),
                            sigma.lambda_min(),
                            s.config.beta_tr,
                            eps,
                            p,
                            &EnvelopeConstants::for_config(&s.config),
                        ),
                    )
                })
            };
            let (lo, hi, note) = match envelope {
                Some((name, Ok(e))) => (
                    Some(e.log_t_lower),
                    Some(e.log_t_upper),
                    Some(name.to_string()),
                ),
                Some((_, Err(e))) if e.is_config_error() => {
                    (None, None, Some(format!("error: {e}")))
                }
                Some((_, Err(e))) => return Err(e),
                None => (None, None, None),
            };
            report.stopping.push(StoppingRow {
                series: s.label.clone(),
                beta_tr: s.config.beta_tr,
                epsilon: eps,
                t_eps: empirical_stopping_time(&points, eps)?,
                t_eps_half: empirical_stopping_time(&points, eps / 2.0)?,
                final_mean_risk: s.curve.final_mean(),
                log_t_lower: lo,
                log_t_upper: hi,
                envelope: note,
            });
        }
        report.bounds.extend(bound_rows(
            &s.label,
            &s.config,
            &[s.config.t],
            plan.v2_form,
        )?);
    }
    Ok(report)
}

pub(super) fn single_setup(
    plan: &ExperimentPlan,
    options: &RunOptions<'_>,
) -> Result<Vec<SeriesSpec>> {
    let config = resolve(base(plan)?, plan, options)?;
    let cps = checkpoints(plan, config.t)?;
    Ok(vec![
        SeriesSpec {
            label: "meta".into(),
            config: config.clone(),
            checkpoints: cps.clone(),
            chain: Chain::Maml,
        },
        SeriesSpec {
            label: "single".into(),
            config: config.clone(),
            checkpoints: cps.clone(),
            chain: Chain::SingleTask,
        },
    ])
}

pub(super) fn single_vs_meta(
    plan: &ExperimentPlan,
    options: &RunOptions<'_>,
) -> Result<ExperimentReport> {
    let specs = single_setup(plan, options)?;
    let mut report = ExperimentReport::new(plan.kind);
    report.series = simulate(&specs, plan.replications, options)?;
    let meta = &specs[0];
    report.bounds = bound_rows(
        "meta",
        &meta.config,
        &horizons(plan, &meta.checkpoints),
        plan.v2_form,
    )?;
    Ok(report)
}

/// Configuration `index` of the randomised sandwich battery.
pub fn battery_config(
    seed: u64,
    index: usize,
    battery: &super::plan::BatterySpec,
) -> Result<(ProblemConfig, &'static str)> {
    let mut rng = rng::stream(seed, Domain::Battery, index as u64);
    let d = rng.random_range(5..=battery.d_max.max(5));
    let (data_spectrum, name) = match index % 3 {
        0 => (Spectrum::poly(d, 2.0)?, "poly2"),
        1 => (Spectrum::log_decay(d, 2.0)?, "log_decay2"),
        _ => (Spectrum::exp(d)?, "exp"),
    };
    let task_spectrum = TaskSpectrum::isotropic(d, rng.random_range(0.01..0.5))?;
    let inv = 1.0 / data_spectrum.lambda_max();
    let beta_tr = rng.random_range(-0.5..0.5) * inv;
    let beta_te = rng.random_range(-0.5..0.5) * inv;
    let n1 = rng.random_range(10..60);
    let n2 = rng.random_range(5..20);
    let m = rng.random_range(10..60);
    let noise_sigma = rng.random_range(0.1..1.0);
    let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let len = raw.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
    let theta_star: Vec<f64> = raw.iter().map(|x| x / len).collect();
    let omega0 = if battery.omega0_at_theta_star {
        theta_star.clone()
    } else {
        vec![0.0; d]
    };
    let mut config = ProblemConfig {
        d,
        t: battery.t_values[index % battery.t_values.len()],
        n1,
        n2,
        m,
        alpha: 1.0,
        beta_tr,
        beta_te,
        noise_sigma,
        theta_star,
        data_spectrum,
        task_spectrum,
        omega0,
        seed,
        constants: RateConstants::default(),
    };
    config.alpha = battery.alpha_fraction * config.alpha_threshold()?;
    Ok((config, name))
}

pub(super) fn sandwich_setup(
    plan: &ExperimentPlan,
) -> Result<(Vec<SeriesSpec>, Vec<&'static str>)> {
    let battery = plan.sweep.battery.clone().unwrap_or_default();
    let mut specs = Vec::with_capacity(battery.configs);
    let mut names = Vec::with_capacity(battery.configs);
    for i in 0..battery.configs {
        let (config, name) = battery_config(plan.seed, i, &battery)?;
        config.validate(!plan.allow_unstable)?;
        let cps = checkpoints(plan, config.t)?;
        specs.push(SeriesSpec {
            label: format!("config_{i}"),
            config,
            checkpoints: cps,
            chain: Chain::Maml,
        });
        names.push(name);
    }
    Ok((specs, names))
}

pub(super) fn bound_sandwich(
    plan: &ExperimentPlan,
    options: &RunOptions<'_>,
) -> Result<ExperimentReport> {
    let (specs, names) = sandwich_setup(plan)?;
    let mut report = ExperimentReport::new(plan.kind);
    report.series = simulate(&specs, plan.replications, options)?;
    for (s, name) in report.series.iter().zip(names) {
        let rows = bound_rows(&s.label, &s.config, &[s.config.t], plan.v2_form)?;
        let row = &rows[0];
        let k = s.curve.t.len() - 1;
        let mean = s.curve.mean[k];
        let lower = row.breakdown.as_ref().and_then(|b| b.lower);
        let upper = row.breakdown.as_ref().map(|b| b.upper);
        let passed = match (lower, upper) {
            (Some(lo), Some(hi)) => Some(lo <= mean && mean <= hi),
            _ => None,
        };
        report.sandwich.push(SandwichRow {
            series: s.label.clone(),
            d: s.config.d,
            t: s.config.t,
            spectrum: name.to_string(),
            lower,
            mean_risk: mean,
            std_error: s.curve.std[k] / (s.curve.n_reps as f64).sqrt(),
            upper,
            passed,
            error: row.error.clone(),
        });
        report.bounds.extend(rows);
    }
    Ok(report)
}
