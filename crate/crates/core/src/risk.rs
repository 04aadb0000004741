//! Excess risk of a learned initialization, the Bayes error, replication
//! statistics and the empirical stopping time.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::Array1;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure_dim, LabError, Result};
use crate::maml_sgd::{inner_adapt, sample_dataset, sample_task, ProblemConfig};
use crate::meta_model::MetaCovariance;
use crate::rng::{self, Domain};
use crate::spectra::{Spectrum, TaskSpectrum};

const MC_CHUNK: usize = 512;

/// Test loss of the optimal initialization `ω = θ*`:
/// `½ tr(Σθ H_{m,βte}) + σ²βte² tr(Σ²)/(2m) + σ²/2`.
///
/// The middle term is the adaptation noise `βte/m · x_outᵀ X_inᵀ z_in`, whose
/// second moment carries `E[x_outᵀ X_inᵀ X_in x_out] = m tr(Σ²)`.
pub fn bayes_error(
    task: &TaskSpectrum,
    sigma: &Spectrum,
    m: usize,
    beta_te: f64,
    noise_sigma: f64,
) -> Result<f64> {
    ensure_dim("bayes error", sigma.dim(), task.dim())?;
    let h = MetaCovariance::new(sigma, m, beta_te)?;
    let s2 = noise_sigma * noise_sigma;
    Ok(0.5 * task.weighted_trace(&h.mu)?
        + s2 * beta_te * beta_te * sigma.trace_sq() / (2.0 * m as f64)
        + 0.5 * s2)
}

/// `½ Σ μ_i(H_{m,βte}) (ω̄_i − θ*_i)²`.
pub fn excess_risk_closed(
    omega_bar: &[f64],
    theta_star: &[f64],
    sigma: &Spectrum,
    m: usize,
    beta_te: f64,
) -> Result<f64> {
    let h = MetaCovariance::new(sigma, m, beta_te)?;
    excess_risk_weighted(&h.mu, omega_bar, theta_star)
}

/// The closed-form risk for precomputed test meta-covariance eigenvalues.
pub fn excess_risk_weighted(mu_test: &[f64], omega_bar: &[f64], theta_star: &[f64]) -> Result<f64> {
    ensure_dim("excess risk", mu_test.len(), omega_bar.len())?;
    ensure_dim("excess risk", mu_test.len(), theta_star.len())?;
    Ok(0.5
        * mu_test
            .iter()
            .zip(omega_bar.iter().zip(theta_star))
            .map(|(mu, (w, t))| mu * (w - t) * (w - t))
            .sum::<f64>())
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Mean test loss after test-time adaptation, estimated over fresh tasks.
///
/// Each sample draws a task, an `m`-point adaptation set and one query
/// point, and records `½(⟨x, A(ω̄)⟩ − y)²`.
pub fn test_loss_mc(
    omega_bar: &[f64],
    config: &ProblemConfig,
    num_test_tasks: usize,
    seed: u64,
) -> Result<McEstimate> {
    ensure_dim("test loss", config.d, omega_bar.len())?;
    if num_test_tasks < 100 {
        return Err(LabError::ParameterDomain {
            name: "num_test_tasks",
            value: num_test_tasks as f64,
            constraint: "num_test_tasks >= 100",
        });
    }
    config.validate(false)?;
    let omega = Array1::from(omega_bar.to_vec());
    let chunks = num_test_tasks.div_ceil(MC_CHUNK);
    let losses: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| -> Result<Vec<f64>> {
            let mut rng = rng::stream(seed, Domain::TestTasks, chunk as u64);
            let count = MC_CHUNK.min(num_test_tasks - chunk * MC_CHUNK);
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let theta = sample_task(&config.theta_star, &config.task_spectrum, &mut rng)?;
                let (x, y, _) = sample_dataset(
                    theta.view(),
                    &config.data_spectrum,
                    config.m,
                    config.noise_sigma,
                    &mut rng,
                )?;
                let (xq, yq, _) = sample_dataset(
                    theta.view(),
                    &config.data_spectrum,
                    1,
                    config.noise_sigma,
                    &mut rng,
                )?;
                let adapted = inner_adapt(omega.view(), config.beta_te, x.view(), y.view());
                let r = xq.row(0).dot(&adapted) - yq[0];
                out.push(0.5 * r * r);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = losses.into_iter().flatten().collect();
    let (estimate, std_error) = jackknife_mean(&flat);
    Ok(McEstimate {
        estimate,
        std_error,
        samples: flat.len(),
    })
}

/// Monte-Carlo excess risk: [`test_loss_mc`] minus the analytic Bayes error.
pub fn excess_risk_mc(
    omega_bar: &[f64],
    config: &ProblemConfig,
    num_test_tasks: usize,
    seed: u64,
) -> Result<McEstimate> {
    let loss = test_loss_mc(omega_bar, config, num_test_tasks, seed)?;
    let floor = bayes_error(
        &config.task_spectrum,
        &config.data_spectrum,
        config.m,
        config.beta_te,
        config.noise_sigma,
    )?;
    Ok(McEstimate {
        estimate: loss.estimate - floor,
        ..loss
    })
}

/// Mean and leave-one-out jackknife standard error.
pub fn jackknife_mean(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let total: f64 = xs.iter().sum();
    let mean = total / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let nf = n as f64;
    let spread: f64 = xs
        .iter()
        .map(|x| {
            let loo = (total - x) / (nf - 1.0);
            (loo - mean) * (loo - mean)
        })
        .sum();
    (mean, ((nf - 1.0) / nf * spread).sqrt())
}

/// Smallest checkpoint whose risk is strictly below `epsilon`.
pub fn empirical_stopping_time(curve: &[(usize, f64)], epsilon: f64) -> Result<Option<usize>> {
    if curve.is_empty() {
        return Err(LabError::EmptyCurve);
    }
    if curve.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(LabError::InvalidPlan(
            "risk curve iterations must be strictly increasing".into(),
        ));
    }
    Ok(curve.iter().find(|(_, r)| *r < epsilon).map(|(t, _)| *t))
}

/// Mean and sample standard deviation across replications, per checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveStats {
    pub t: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_reps: usize,
}

impl CurveStats {
    /// `per_rep[r][k]` is replication `r` at checkpoint `k`.
    pub fn from_replications(t: &[usize], per_rep: &[Vec<f64>]) -> Result<Self> {
        if per_rep.is_empty() || t.is_empty() {
            return Err(LabError::EmptyCurve);
        }
        for row in per_rep {
            ensure_dim("replication curve", t.len(), row.len())?;
        }
        let n = per_rep.len() as f64;
        let mut mean = vec![0.0; t.len()];
        let mut std = vec![0.0; t.len()];
        for k in 0..t.len() {
            let m = per_rep.iter().map(|r| r[k]).sum::<f64>() / n;
            mean[k] = m;
            if per_rep.len() > 1 {
                let ss: f64 = per_rep.iter().map(|r| (r[k] - m) * (r[k] - m)).sum();
                std[k] = (ss / (n - 1.0)).sqrt();
            }
        }
        Ok(CurveStats {
            t: t.to_vec(),
            mean,
            std,
            n_reps: per_rep.len(),
        })
    }

    pub fn points(&self) -> Vec<(usize, f64)> {
        self.t
            .iter()
            .copied()
            .zip(self.mean.iter().copied())
            .collect()
    }

    pub fn final_mean(&self) -> f64 {
        *self.mean.last().expect("non-empty curve")
    }

    /// Mean at iteration `t`, if it is a checkpoint.
    pub fn at(&self, t: usize) -> Option<f64> {
        self.t.iter().position(|&x| x == t).map(|k| self.mean[k])
    }
}

/// Risk curve with its Bayes error and stopping times.
#[derive(Debug, Clone, Serialize)]
pub struct RiskReport {
    pub curve: CurveStats,
    pub bayes_error: f64,
    /// Keyed by the printed value of ε.
    pub stopping_times: BTreeMap<String, Option<usize>>,
}

impl RiskReport {
    pub fn new(curve: CurveStats, bayes_error: f64, epsilons: &[f64]) -> Result<Self> {
        let points = curve.points();
        let mut stopping_times = BTreeMap::new();
        for &eps in epsilons {
            stopping_times.insert(eps.to_string(), empirical_stopping_time(&points, eps)?);
        }
        Ok(RiskReport {
            curve,
            bayes_error,
            stopping_times,
        })
    }

    /// Columns: t, mean_risk, std_risk, n_reps.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| LabError::Parse {
            what: "risk csv".into(),
            message: e.to_string(),
        };
        w.write_record(["t", "mean_risk", "std_risk", "n_reps"])
            .map_err(err)?;
        for k in 0..self.curve.t.len() {
            w.write_record([
                self.curve.t[k].to_string(),
                self.curve.mean[k].to_string(),
                self.curve.std[k].to_string(),
                self.curve.n_reps.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| LabError::io("<risk csv>", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta_model::RateConstants;

    fn scalar() -> Spectrum {
        Spectrum::new(vec![1.0]).unwrap()
    }

    fn config(d: usize, noise: f64, task: TaskSpectrum) -> ProblemConfig {
        ProblemConfig {
            d,
            t: 10,
            n1: 10,
            n2: 5,
            m: 8,
            alpha: 0.01,
            beta_tr: 0.1,
            beta_te: 0.3,
            noise_sigma: noise,
            theta_star: (0..d).map(|i| 0.3 - 0.1 * i as f64).collect(),
            data_spectrum: Spectrum::poly(d, 1.5).unwrap(),
            task_spectrum: task,
            omega0: vec![0.0; d],
            seed: 17,
            constants: RateConstants::default(),
        }
    }

    #[test]
    fn bayes_error_values() {
        let zero = TaskSpectrum::zero(1).unwrap();
        assert!((bayes_error(&zero, &scalar(), 5, 0.0, 0.7).unwrap() - 0.245).abs() < 1e-15);
        let one = TaskSpectrum::new(vec![1.0]).unwrap();
        assert!((bayes_error(&one, &scalar(), 1, 0.5, 1.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bayes_noise_term_scales_with_trace_of_sigma_squared() {
        let zero = TaskSpectrum::zero(2).unwrap();
        let s = Spectrum::new(vec![2.0, 1.0]).unwrap();
        let b = bayes_error(&zero, &s, 4, 0.1, 1.0).unwrap();
        assert!((b - (0.01 * 5.0 / 8.0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn bayes_error_matches_monte_carlo_at_optimum() {
        let cfg = config(4, 0.5, TaskSpectrum::new(vec![0.2, 0.5, 0.1, 0.3]).unwrap());
        let floor = bayes_error(
            &cfg.task_spectrum,
            &cfg.data_spectrum,
            cfg.m,
            cfg.beta_te,
            cfg.noise_sigma,
        )
        .unwrap();
        let mc = test_loss_mc(&cfg.theta_star, &cfg, 10_000, 1).unwrap();
        assert!((mc.estimate - floor).abs() < 3.0 * mc.std_error);
    }

    #[test]
    fn closed_risk_cases() {
        let s = Spectrum::poly(3, 2.0).unwrap();
        let th = [0.1, 0.2, 0.3];
        assert_eq!(excess_risk_closed(&th, &th, &s, 10, 0.2).unwrap(), 0.0);
        let r = excess_risk_closed(&[2.0], &[0.0], &scalar(), 1_000_000, 0.5).unwrap();
        assert!((r - 0.5).abs() < 1e-5);
        assert!(excess_risk_closed(&[1.0], &[0.0, 1.0], &scalar(), 1, 0.0).is_err());
    }

    #[test]
    fn mc_risk_is_exact_in_the_noiseless_case() {
        let cfg = config(3, 0.0, TaskSpectrum::zero(3).unwrap());
        let mc = excess_risk_mc(&cfg.theta_star, &cfg, 200, 4).unwrap();
        assert_eq!(mc.estimate, 0.0);
        assert_eq!(mc.std_error, 0.0);
    }

    #[test]
    fn mc_risk_agrees_with_closed_form() {
        let cfg = config(5, 0.3, TaskSpectrum::isotropic(5, 0.05).unwrap());
        let omega = vec![0.8, -0.4, 0.5, 0.0, 1.0];
        let closed = excess_risk_closed(
            &omega,
            &cfg.theta_star,
            &cfg.data_spectrum,
            cfg.m,
            cfg.beta_te,
        )
        .unwrap();
        let mc = excess_risk_mc(&omega, &cfg, 10_000, 9).unwrap();
        assert!((mc.estimate - closed).abs() < 3.0 * mc.std_error);
    }

    #[test]
    fn mc_standard_error_shrinks_like_root_n() {
        let cfg = config(4, 0.5, TaskSpectrum::isotropic(4, 0.1).unwrap());
        let omega = vec![0.5; 4];
        let a = excess_risk_mc(&omega, &cfg, 20_000, 2).unwrap();
        let b = excess_risk_mc(&omega, &cfg, 40_000, 3).unwrap();
        let ratio = b.std_error / a.std_error;
        assert!((ratio * 2f64.sqrt() - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn jackknife_matches_classical_standard_error() {
        let xs = [1.0, 4.0, 2.0, 8.0, 5.0];
        let (mean, se) = jackknife_mean(&xs);
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert!((se - (var / 5.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn stopping_time_scan() {
        let curve = [(1, 0.5), (2, 0.3), (3, 0.05)];
        assert_eq!(empirical_stopping_time(&curve, 0.1).unwrap(), Some(3));
        assert_eq!(empirical_stopping_time(&curve, 1.0).unwrap(), Some(1));
        assert_eq!(empirical_stopping_time(&curve, 0.01).unwrap(), None);
        assert!(matches!(
            empirical_stopping_time(&[], 0.1),
            Err(LabError::EmptyCurve)
        ));
        assert!(empirical_stopping_time(&[(2, 0.1), (2, 0.0)], 0.1).is_err());
    }

    #[test]
    fn curve_stats_and_report() {
        let t = [1, 5, 9];
        let reps = vec![vec![1.0, 0.5, 0.2], vec![3.0, 0.5, 0.4]];
        let stats = CurveStats::from_replications(&t, &reps).unwrap();
        assert_eq!(stats.mean, vec![2.0, 0.5, 0.30000000000000004]);
        assert!((stats.std[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(stats.std[1], 0.0);
        assert_eq!(stats.at(5), Some(0.5));
        assert_eq!(stats.at(4), None);
        let report = RiskReport::new(stats, 0.1, &[0.4, 1.0]).unwrap();
        assert_eq!(report.stopping_times["0.4"], Some(9));
        assert_eq!(report.stopping_times["1"], Some(5));
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("t,mean_risk,std_risk,n_reps\n1,2,"));
    }
}
