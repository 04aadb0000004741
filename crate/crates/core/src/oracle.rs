//! Independent numerical checks of the closed forms.
//!
//! Each check compares a closed-form quantity against an estimate computed
//! by a different route: Monte-Carlo averaging, central finite differences,
//! or an explicit dense construction of the meta data `(B, γ)`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::maml_sgd::{meta_gradient, meta_loss, sample_task_batch, ProblemConfig, TaskBatch};
use crate::meta_model::{estimate_meta_covariance_mc, MetaCovariance, RateConstants};
use crate::risk::{bayes_error, excess_risk_closed, excess_risk_mc, test_loss_mc};
use crate::rng::{self, Domain, LabRng};
use crate::spectra::{Spectrum, TaskSpectrum};

/// Closed-form meta-covariance under test, so a deliberately broken formula
/// can be substituted.
pub type MetaCovarianceFn = dyn Fn(&Spectrum, usize, f64) -> Result<Vec<f64>> + Sync;

pub fn closed_meta_covariance(sigma: &Spectrum, n: usize, beta: f64) -> Result<Vec<f64>> {
    Ok(MetaCovariance::new(sigma, n, beta)?.mu)
}

/// Outcome of one check.
#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    pub name: String,
    pub passed: bool,
    pub observed: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl std::fmt::Display for OracleResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {}: observed {:.3e} (tolerance {:.3e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.observed,
            self.tolerance,
            self.detail
        )
    }
}

/// Entry-level agreement between the closed form and a Monte-Carlo estimate.
#[derive(Debug, Clone, Serialize)]
pub struct MetaCovarianceCheck {
    pub entries: usize,
    pub within_3se: usize,
    pub max_z: f64,
    pub exact: bool,
    pub offdiag_max_abs: f64,
}

impl MetaCovarianceCheck {
    pub fn fraction_within(&self) -> f64 {
        self.within_3se as f64 / self.entries as f64
    }
}

pub fn check_meta_covariance(
    sigma: &Spectrum,
    n: usize,
    beta: f64,
    reps: usize,
    seed: u64,
    closed: &MetaCovarianceFn,
) -> Result<MetaCovarianceCheck> {
    let mu = closed(sigma, n, beta)?;
    let est = estimate_meta_covariance_mc(sigma, n, beta, reps, seed)?;
    let mut within = 0;
    let mut max_z = 0.0f64;
    let mut exact = true;
    for i in 0..mu.len() {
        let diff = (est.mean[i] - mu[i]).abs();
        if diff != 0.0 {
            exact = false;
        }
        let z = if est.std_err[i] > 0.0 {
            diff / est.std_err[i]
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        max_z = max_z.max(z);
        if z <= 3.0 {
            within += 1;
        }
    }
    Ok(MetaCovarianceCheck {
        entries: mu.len(),
        within_3se: within,
        max_z,
        exact,
        offdiag_max_abs: est.offdiag_max_abs,
    })
}

/// Worst finite-difference discrepancy over `pairs` random `(ω, task)` draws,
/// as `max_i |g_i − ĝ_i| / max_i |g_i|`.
pub fn gradient_fd_error(
    config: &ProblemConfig,
    pairs: usize,
    step: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::stream(seed, Domain::MonteCarlo, 0);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let task = sample_task_batch(config, &mut rng)?;
        let omega = random_vector(config.d, &mut rng);
        let g = meta_gradient(omega.view(), config.beta_tr, &task);
        let mut fd = Array1::<f64>::zeros(config.d);
        for i in 0..config.d {
            let mut plus = omega.clone();
            let mut minus = omega.clone();
            plus[i] += step;
            minus[i] -= step;
            fd[i] = (meta_loss(plus.view(), config.beta_tr, &task)
                - meta_loss(minus.view(), config.beta_tr, &task))
                / (2.0 * step);
        }
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = g
            .iter()
            .zip(&fd)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if scale > 0.0 {
            worst = worst.max(err / scale);
        } else {
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Dense meta data: `B = X_out(I − β/n1 X_inᵀX_in)/√n2` and
/// `γ = (X_out(I − β/n1 X_inᵀX_in)θ + z_out − β/n1 X_out X_inᵀ z_in)/√n2`.
pub fn dense_meta_data(task: &TaskBatch, beta_tr: f64) -> (Array2<f64>, Array1<f64>) {
    let d = task.theta.len();
    let n1 = task.x_in.nrows() as f64;
    let n2 = task.x_out.nrows() as f64;
    let mut precond = task.x_in.t().dot(&task.x_in) * (-beta_tr / n1);
    for i in 0..d {
        precond[[i, i]] += 1.0;
    }
    let root = n2.sqrt();
    let b = task.x_out.dot(&precond) / root;
    let signal = b.dot(&task.theta);
    let inner_noise = task.x_out.dot(&task.x_in.t().dot(&task.z_in)) * (beta_tr / n1);
    let gamma = signal + (&task.z_out - &inner_noise) / root;
    (b, gamma)
}

/// Worst absolute difference between the matrix-free gradient and
/// `Bᵀ(Bω − γ)` over `pairs` random draws.
pub fn gradient_dense_error(config: &ProblemConfig, pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, Domain::MonteCarlo, 1);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let task = sample_task_batch(config, &mut rng)?;
        let omega = random_vector(config.d, &mut rng);
        let g = meta_gradient(omega.view(), config.beta_tr, &task);
        let (b, gamma) = dense_meta_data(&task, config.beta_tr);
        let dense = b.t().dot(&(b.dot(&omega) - gamma));
        let err = g
            .iter()
            .zip(&dense)
            .fold(0.0f64, |m, (a, c)| m.max((a - c).abs()));
        worst = worst.max(err);
    }
    Ok(worst)
}

fn random_vector(d: usize, rng: &mut LabRng) -> Array1<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect()
}

/// `|estimate − target|` in units of the estimate's standard error. A zero
/// standard error only passes on an exact match.
pub fn z_score(estimate: f64, target: f64, std_error: f64) -> f64 {
    let diff = (estimate - target).abs();
    if std_error > 0.0 {
        diff / std_error
    } else if diff <= 1e-12 * target.abs().max(1.0) {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Closed-form excess risk versus its Monte-Carlo estimate, in standard errors.
pub fn risk_z(omega_bar: &[f64], config: &ProblemConfig, tasks: usize, seed: u64) -> Result<f64> {
    let closed = excess_risk_closed(
        omega_bar,
        &config.theta_star,
        &config.data_spectrum,
        config.m,
        config.beta_te,
    )?;
    let mc = excess_risk_mc(omega_bar, config, tasks, seed)?;
    Ok(z_score(mc.estimate, closed, mc.std_error))
}

/// Bayes error versus the Monte-Carlo test loss at `θ*`, in standard errors.
pub fn bayes_z(config: &ProblemConfig, tasks: usize, seed: u64) -> Result<f64> {
    let formula = bayes_error(
        &config.task_spectrum,
        &config.data_spectrum,
        config.m,
        config.beta_te,
        config.noise_sigma,
    )?;
    let mc = test_loss_mc(&config.theta_star, config, tasks, seed)?;
    Ok(z_score(mc.estimate, formula, mc.std_error))
}

/// Settings for [`run_suite`].
#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub meta_reps: usize,
    pub test_tasks: usize,
    pub gradient_pairs: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            meta_reps: 100_000,
            test_tasks: 10_000,
            gradient_pairs: 50,
            seed: 0,
        }
    }
}

/// Runs every check against one configuration.
pub fn run_suite(
    config: &ProblemConfig,
    options: SuiteOptions,
    closed: &MetaCovarianceFn,
) -> Result<Vec<OracleResult>> {
    config.validate(false)?;
    let mut out = Vec::new();
    let seed = options.seed;

    for (label, n, beta) in [
        ("train", config.n1, config.beta_tr),
        ("test", config.m, config.beta_te),
    ] {
        let check = check_meta_covariance(
            &config.data_spectrum,
            n,
            beta,
            options.meta_reps,
            seed,
            closed,
        )?;
        let frac = check.fraction_within();
        let passed = frac >= 0.95 && (beta != 0.0 || check.exact);
        out.push(OracleResult {
            name: format!("meta_covariance_{label}"),
            passed,
            observed: 1.0 - frac,
            tolerance: 0.05,
            detail: format!(
                "{}/{} entries within 3 SE, max z {:.2}, off-diagonal max {:.2e}",
                check.within_3se, check.entries, check.max_z, check.offdiag_max_abs
            ),
        });
    }

    let fd = gradient_fd_error(config, options.gradient_pairs, 1e-5, seed)?;
    out.push(OracleResult {
        name: "gradient_finite_difference".into(),
        passed: fd < 1e-5,
        observed: fd,
        tolerance: 1e-5,
        detail: format!(
            "{} pairs, step 1e-5, max relative error",
            options.gradient_pairs
        ),
    });

    let dense = gradient_dense_error(config, options.gradient_pairs, seed)?;
    let dense_tol = 1e-12;
    out.push(OracleResult {
        name: "gradient_dense".into(),
        passed: dense < dense_tol,
        observed: dense,
        tolerance: dense_tol,
        detail: format!(
            "{} pairs, max abs difference to Bᵀ(Bω − γ)",
            options.gradient_pairs
        ),
    });

    let z = risk_z(&config.omega0, config, options.test_tasks, seed)?;
    out.push(OracleResult {
        name: "excess_risk".into(),
        passed: z <= 3.0,
        observed: z,
        tolerance: 3.0,
        detail: format!(
            "closed form vs {} test tasks at omega0, z-score",
            options.test_tasks
        ),
    });

    let z = bayes_z(config, options.test_tasks, seed)?;
    out.push(OracleResult {
        name: "bayes_error".into(),
        passed: z <= 3.0,
        observed: z,
        tolerance: 3.0,
        detail: format!(
            "formula vs {} test tasks at theta*, z-score",
            options.test_tasks
        ),
    });
    Ok(out)
}

/// A random small configuration for oracle batteries.
pub fn random_config(rng: &mut LabRng, d_max: usize, seed: u64) -> Result<ProblemConfig> {
    let d = rng.random_range(2..=d_max.max(2));
    random_config_dim(rng, d, seed)
}

/// As [`random_config`] with the dimension fixed.
pub fn random_config_dim(rng: &mut LabRng, d: usize, seed: u64) -> Result<ProblemConfig> {
    let data_spectrum = match rng.random_range(0..4) {
        0 => Spectrum::poly(d, rng.random_range(1.2..3.0))?,
        1 => Spectrum::log_decay(d, rng.random_range(1.0..3.0))?,
        2 => Spectrum::exp(d)?,
        _ if d >= 4 => Spectrum::two_block(d, rng.random_range(1..=d / 2))?,
        _ => Spectrum::poly(d, 2.0)?,
    };
    let task_spectrum = if rng.random_bool(0.5) {
        TaskSpectrum::isotropic(d, rng.random_range(0.01..0.5))?
    } else {
        TaskSpectrum::log_growth(d, rng.random_range(0.5..2.0), rng.random_range(0.01..0.2))?
    };
    let inv = 1.0 / data_spectrum.lambda_max();
    let theta_star: Vec<f64> = (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z / (d as f64).sqrt()
        })
        .collect();
    let mut config = ProblemConfig {
        d,
        t: 100,
        n1: rng.random_range(5..=50),
        n2: rng.random_range(5..=20),
        m: rng.random_range(5..=50),
        alpha: 1.0,
        beta_tr: rng.random_range(-0.5..0.5) * inv,
        beta_te: rng.random_range(-0.5..0.5) * inv,
        noise_sigma: rng.random_range(0.0..1.0),
        theta_star,
        data_spectrum,
        task_spectrum,
        omega0: vec![0.0; d],
        seed,
        constants: RateConstants::default(),
    };
    config.alpha = 0.5 * config.alpha_threshold()?;
    config.validate(true)?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ProblemConfig {
        let mut rng = rng::stream(99, Domain::Battery, 0);
        random_config(&mut rng, 8, 1).unwrap()
    }

    #[test]
    fn dense_meta_data_reproduces_the_loss() {
        let cfg = config();
        let mut rng = rng::stream(1, Domain::MonteCarlo, 0);
        let task = sample_task_batch(&cfg, &mut rng).unwrap();
        let (b, gamma) = dense_meta_data(&task, cfg.beta_tr);
        let omega = random_vector(cfg.d, &mut rng);
        let r = b.dot(&omega) - gamma;
        let dense_loss = 0.5 * r.dot(&r);
        let loss = meta_loss(omega.view(), cfg.beta_tr, &task);
        assert!((dense_loss - loss).abs() <= 1e-12 * loss.max(1.0));
    }

    #[test]
    fn gradient_checks_pass_on_a_small_config() {
        let cfg = config();
        assert!(gradient_fd_error(&cfg, 10, 1e-5, 0).unwrap() < 1e-5);
        assert!(gradient_dense_error(&cfg, 10, 0).unwrap() < 1e-12);
    }

    #[test]
    fn suite_passes_and_catches_a_sign_error() {
        let cfg = config();
        let opts = SuiteOptions {
            meta_reps: 20_000,
            test_tasks: 5_000,
            gradient_pairs: 10,
            seed: 4,
        };
        let results = run_suite(&cfg, opts, &closed_meta_covariance).unwrap();
        for r in &results {
            assert!(r.passed, "{r}");
        }

        // (1 + βλ)² in place of (1 − βλ)²
        let broken = |s: &Spectrum, n: usize, beta: f64| -> Result<Vec<f64>> {
            let tr2 = s.trace_sq();
            Ok(s.values()
                .iter()
                .map(|&l| {
                    (1.0 + beta * l).powi(2) * l + beta * beta / n as f64 * (l.powi(3) + l * tr2)
                })
                .collect())
        };
        let results = run_suite(&cfg, opts, &broken).unwrap();
        let meta: Vec<_> = results
            .iter()
            .filter(|r| r.name.starts_with("meta_covariance"))
            .collect();
        assert!(meta.iter().any(|r| !r.passed));
    }

    #[test]
    fn noiseless_risk_checks_have_zero_variance() {
        let mut cfg = config();
        cfg.noise_sigma = 0.0;
        cfg.task_spectrum = TaskSpectrum::zero(cfg.d).unwrap();
        assert_eq!(bayes_z(&cfg, 500, 0).unwrap(), 0.0);
        let mc = test_loss_mc(&cfg.theta_star, &cfg, 500, 0).unwrap();
        assert_eq!(mc.std_error, 0.0);
        cfg.omega0 = cfg.theta_star.clone();
        assert_eq!(risk_z(&cfg.omega0, &cfg, 500, 0).unwrap(), 0.0);
    }

    #[test]
    fn z_score_handles_zero_error() {
        assert_eq!(z_score(1.0, 1.0, 0.0), 0.0);
        assert_eq!(z_score(1.0, 2.0, 0.0), f64::INFINITY);
        assert_eq!(z_score(1.5, 1.0, 0.25), 2.0);
    }
}
