//! Mixed linear regression task sampling, one-step inner adaptation and the
//! averaged outer SGD loop.
//!
//! All products are matrix-vector: the `d × d` matrices `XᵀX` never appear.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_dim, LabError, Result};
use crate::meta_model::{self, check_beta, MetaCovariance, RateConstants};
use crate::rng::{self, Domain, LabRng};
use crate::spectra::{Spectrum, TaskSpectrum};

/// A fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub n1: usize,
    pub n2: usize,
    pub m: usize,
    pub alpha: f64,
    pub beta_tr: f64,
    pub beta_te: f64,
    pub noise_sigma: f64,
    pub theta_star: Vec<f64>,
    pub data_spectrum: Spectrum,
    pub task_spectrum: TaskSpectrum,
    pub omega0: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub constants: RateConstants,
}

/// Quantities derived from a configuration, reported by `validate`.
#[derive(Debug, Clone, Serialize)]
pub struct DerivedQuantities {
    pub trace_sigma: f64,
    pub trace_sigma_sq: f64,
    pub lambda_max: f64,
    pub c_beta_tr: f64,
    pub alpha_threshold: f64,
    pub mu_train_min: f64,
    pub mu_test_min: f64,
    pub theta_star_norm: f64,
}

impl ProblemConfig {
    /// Checks every structural invariant. The step-size condition is only
    /// enforced when `require_stable` is set.
    pub fn validate(&self, require_stable: bool) -> Result<()> {
        if self.d == 0 {
            return Err(LabError::ParameterDomain {
                name: "d",
                value: 0.0,
                constraint: "d >= 1",
            });
        }
        for (name, v) in [
            ("T", self.t),
            ("n1", self.n1),
            ("n2", self.n2),
            ("m", self.m),
        ] {
            if v == 0 {
                return Err(LabError::ParameterDomain {
                    name,
                    value: 0.0,
                    constraint: "must be >= 1",
                });
            }
        }
        ensure_dim("data spectrum", self.d, self.data_spectrum.dim())?;
        ensure_dim("task spectrum", self.d, self.task_spectrum.dim())?;
        ensure_dim("theta_star", self.d, self.theta_star.len())?;
        ensure_dim("omega0", self.d, self.omega0.len())?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(LabError::ParameterDomain {
                name: "alpha",
                value: self.alpha,
                constraint: "alpha > 0",
            });
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(LabError::ParameterDomain {
                name: "noise_sigma",
                value: self.noise_sigma,
                constraint: "noise_sigma >= 0",
            });
        }
        if self
            .theta_star
            .iter()
            .chain(&self.omega0)
            .any(|v| !v.is_finite())
        {
            return Err(LabError::InvalidPlan(
                "theta_star and omega0 must be finite".into(),
            ));
        }
        self.constants.validate()?;
        check_beta("|βtr| < 1/λ1", &self.data_spectrum, self.beta_tr)?;
        check_beta("|βte| < 1/λ1", &self.data_spectrum, self.beta_te)?;
        MetaCovariance::new(&self.data_spectrum, self.n1, self.beta_tr)?;
        MetaCovariance::new(&self.data_spectrum, self.m, self.beta_te)?;
        if require_stable {
            let threshold = self.alpha_threshold()?;
            if self.alpha >= threshold {
                return Err(LabError::precondition(
                    "α < 1/(c(βtr,Σ)·tr(Σ))",
                    format!("alpha = {}, threshold = {threshold}", self.alpha),
                ));
            }
        }
        Ok(())
    }

    /// `1/(c(β_tr,Σ)·tr(Σ))`.
    pub fn alpha_threshold(&self) -> Result<f64> {
        let c = meta_model::c_rate(&self.data_spectrum, self.beta_tr, &self.constants)?;
        Ok(1.0 / (c * self.data_spectrum.trace()))
    }

    pub fn is_stable(&self) -> bool {
        self.alpha_threshold()
            .map(|a| self.alpha < a)
            .unwrap_or(false)
    }

    pub fn derived(&self) -> Result<DerivedQuantities> {
        let sigma = &self.data_spectrum;
        Ok(DerivedQuantities {
            trace_sigma: sigma.trace(),
            trace_sigma_sq: sigma.trace_sq(),
            lambda_max: sigma.lambda_max(),
            c_beta_tr: meta_model::c_rate(sigma, self.beta_tr, &self.constants)?,
            alpha_threshold: self.alpha_threshold()?,
            mu_train_min: MetaCovariance::new(sigma, self.n1, self.beta_tr)?.min(),
            mu_test_min: MetaCovariance::new(sigma, self.m, self.beta_te)?.min(),
            theta_star_norm: norm(&self.theta_star),
        })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// `ω0 − θ*`.
    pub fn initial_gap(&self) -> Vec<f64> {
        self.omega0
            .iter()
            .zip(&self.theta_star)
            .map(|(w, t)| w - t)
            .collect()
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One task: its parameter and the inner/outer datasets with their noise.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub theta: Array1<f64>,
    pub x_in: Array2<f64>,
    pub y_in: Array1<f64>,
    pub z_in: Array1<f64>,
    pub x_out: Array2<f64>,
    pub y_out: Array1<f64>,
    pub z_out: Array1<f64>,
}

/// `θ = θ* + Σθ^{1/2} z`. Always consumes `d` normals, even when `Σθ = 0`.
pub fn sample_task<R: Rng + ?Sized>(
    task_mean: &[f64],
    task_spectrum: &TaskSpectrum,
    rng: &mut R,
) -> Result<Array1<f64>> {
    ensure_dim("sample_task", task_mean.len(), task_spectrum.dim())?;
    Ok(task_mean
        .iter()
        .zip(task_spectrum.values())
        .map(|(&mean, &nu)| {
            let z: f64 = StandardNormal.sample(rng);
            mean + nu.sqrt() * z
        })
        .collect())
}

/// Draws `n` rows `x = Λ^{1/2} z` and responses `y = Xθ + noise`.
/// Returns `(X, y, noise)`.
pub fn sample_dataset<R: Rng + ?Sized>(
    theta: ArrayView1<f64>,
    data_spectrum: &Spectrum,
    n: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<(Array2<f64>, Array1<f64>, Array1<f64>)> {
    ensure_dim("sample_dataset", data_spectrum.dim(), theta.len())?;
    if n == 0 {
        return Err(LabError::ParameterDomain {
            name: "n",
            value: 0.0,
            constraint: "n >= 1",
        });
    }
    let d = theta.len();
    let sqrt_l: Vec<f64> = data_spectrum.values().iter().map(|l| l.sqrt()).collect();
    let mut x = Array2::<f64>::zeros((n, d));
    for mut row in x.rows_mut() {
        for (v, s) in row.iter_mut().zip(&sqrt_l) {
            let z: f64 = StandardNormal.sample(rng);
            *v = s * z;
        }
    }
    let noise: Array1<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            noise_sigma * z
        })
        .collect();
    let y = x.dot(&theta) + &noise;
    Ok((x, y, noise))
}

pub fn sample_task_batch<R: Rng + ?Sized>(
    config: &ProblemConfig,
    rng: &mut R,
) -> Result<TaskBatch> {
    sample_task_batch_with(config, &config.task_spectrum, rng)
}

fn sample_task_batch_with<R: Rng + ?Sized>(
    config: &ProblemConfig,
    task_spectrum: &TaskSpectrum,
    rng: &mut R,
) -> Result<TaskBatch> {
    let theta = sample_task(&config.theta_star, task_spectrum, rng)?;
    let (x_in, y_in, z_in) = sample_dataset(
        theta.view(),
        &config.data_spectrum,
        config.n1,
        config.noise_sigma,
        rng,
    )?;
    let (x_out, y_out, z_out) = sample_dataset(
        theta.view(),
        &config.data_spectrum,
        config.n2,
        config.noise_sigma,
        rng,
    )?;
    Ok(TaskBatch {
        theta,
        x_in,
        y_in,
        z_in,
        x_out,
        y_out,
        z_out,
    })
}

/// `A(ω) = ω − (β/n) Xᵀ(Xω − y)`.
pub fn inner_adapt(
    omega: ArrayView1<f64>,
    beta: f64,
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
) -> Array1<f64> {
    if beta == 0.0 {
        return omega.to_owned();
    }
    let n = x.nrows() as f64;
    let residual = x.dot(&omega) - y;
    let step = x.t().dot(&residual);
    &omega - &(step * (beta / n))
}

/// Gradient of the outer loss and the loss itself at `ω`.
fn gradient_and_loss(omega: ArrayView1<f64>, beta_tr: f64, task: &TaskBatch) -> (Array1<f64>, f64) {
    let adapted = inner_adapt(omega, beta_tr, task.x_in.view(), task.y_in.view());
    let n2 = task.x_out.nrows() as f64;
    let residual = task.x_out.dot(&adapted) - &task.y_out;
    let loss = residual.dot(&residual) / (2.0 * n2);
    let outer = task.x_out.t().dot(&residual) / n2;
    if beta_tr == 0.0 {
        return (outer, loss);
    }
    let n1 = task.x_in.nrows() as f64;
    let back = task.x_in.t().dot(&task.x_in.dot(&outer));
    (outer - back * (beta_tr / n1), loss)
}

/// `∇ω ℓ(A(ω, β_tr; D_in); D_out) = (I − β_tr/n1 X_inᵀX_in)(1/n2) X_outᵀ(X_out A(ω) − y_out)`.
pub fn meta_gradient(omega: ArrayView1<f64>, beta_tr: f64, task: &TaskBatch) -> Array1<f64> {
    gradient_and_loss(omega, beta_tr, task).0
}

/// `ℓ(A(ω); D_out) = 1/(2n2) ‖X_out A(ω) − y_out‖²`.
pub fn meta_loss(omega: ArrayView1<f64>, beta_tr: f64, task: &TaskBatch) -> f64 {
    let adapted = inner_adapt(omega, beta_tr, task.x_in.view(), task.y_in.view());
    let residual = task.x_out.dot(&adapted) - &task.y_out;
    residual.dot(&residual) / (2.0 * task.x_out.nrows() as f64)
}

/// Where averaged iterates are recorded.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSchedule {
    /// `⌈1.3^k⌉` deduplicated, plus every `t ≤ 10`, plus `T`.
    #[default]
    Geometric,
    /// Every iteration.
    Dense,
    /// The listed iterations (those above `T` are dropped), plus `T`.
    Explicit(Vec<usize>),
}

impl CheckpointSchedule {
    pub fn resolve(&self, t_max: usize) -> Vec<usize> {
        let mut ts: Vec<usize> = match self {
            CheckpointSchedule::Dense => (1..=t_max).collect(),
            CheckpointSchedule::Explicit(list) => list.clone(),
            CheckpointSchedule::Geometric => {
                let mut ts: Vec<usize> = (1..=10).collect();
                let mut k = 0i32;
                loop {
                    let t = 1.3f64.powi(k).ceil() as usize;
                    if t > t_max {
                        break;
                    }
                    ts.push(t);
                    k += 1;
                }
                ts
            }
        };
        ts.push(t_max);
        ts.retain(|&t| t >= 1 && t <= t_max);
        ts.sort_unstable();
        ts.dedup();
        ts
    }
}

/// Averaged iterates of one SGD chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub checkpoints: Vec<usize>,
    /// `ω̄_t` for each checkpoint.
    pub omega_bar: Vec<Vec<f64>>,
    /// Mean online meta loss over the iterations since the previous checkpoint.
    pub train_loss: Vec<f64>,
    pub omega_final: Vec<f64>,
    pub fingerprint: String,
}

/// Runs the averaged SGD chain for replication `rep` of `config`.
pub fn run_maml_sgd(config: &ProblemConfig, checkpoints: &[usize], rep: u64) -> Result<Trajectory> {
    run_chain(
        config,
        &config.task_spectrum,
        config.beta_tr,
        checkpoints,
        rep,
    )
}

/// The same chain with every task equal to `θ*` and no inner adaptation.
pub fn run_single_task_sgd(
    config: &ProblemConfig,
    checkpoints: &[usize],
    rep: u64,
) -> Result<Trajectory> {
    let fixed = TaskSpectrum::zero(config.d)?;
    run_chain(config, &fixed, 0.0, checkpoints, rep)
}

fn check_checkpoints(checkpoints: &[usize], t_max: usize) -> Result<()> {
    if checkpoints.is_empty() {
        return Err(LabError::InvalidPlan("checkpoint list is empty".into()));
    }
    if checkpoints[0] == 0 || checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LabError::InvalidPlan(
            "checkpoints must be positive and strictly increasing".into(),
        ));
    }
    if *checkpoints.last().unwrap() != t_max {
        return Err(LabError::InvalidPlan(format!(
            "last checkpoint must equal T = {t_max}"
        )));
    }
    Ok(())
}

fn run_chain(
    config: &ProblemConfig,
    task_spectrum: &TaskSpectrum,
    beta_tr: f64,
    checkpoints: &[usize],
    rep: u64,
) -> Result<Trajectory> {
    config.validate(false)?;
    check_checkpoints(checkpoints, config.t)?;
    let mut rng: LabRng = rng::stream(config.seed, Domain::Replication, rep);
    let limit = 1e6 * (norm(&config.theta_star) + 1.0);

    let mut omega = Array1::from(config.omega0.clone());
    let mut sum = Array1::<f64>::zeros(config.d);
    let mut omega_bar = Vec::with_capacity(checkpoints.len());
    let mut train_loss = Vec::with_capacity(checkpoints.len());
    let mut window_loss = 0.0;
    let mut window_len = 0usize;
    let mut next = 0usize;

    for t in 1..=config.t {
        sum += &omega;
        let task = sample_task_batch_with(config, task_spectrum, &mut rng)?;
        let (grad, loss) = gradient_and_loss(omega.view(), beta_tr, &task);
        window_loss += loss;
        window_len += 1;
        omega.scaled_add(-config.alpha, &grad);

        let size = norm(omega.as_slice().expect("contiguous"));
        if !size.is_finite() || size > limit {
            return Err(LabError::Diverged {
                t,
                norm: size,
                limit,
            });
        }
        if t == checkpoints[next] {
            omega_bar.push((&sum / t as f64).to_vec());
            train_loss.push(window_loss / window_len as f64);
            window_loss = 0.0;
            window_len = 0;
            next += 1;
        }
    }

    Ok(Trajectory {
        checkpoints: checkpoints.to_vec(),
        omega_final: omega_bar.last().cloned().unwrap_or_default(),
        omega_bar,
        train_loss,
        fingerprint: config.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk;
    use ndarray::array;

    pub(crate) fn small_config(d: usize) -> ProblemConfig {
        let sigma = Spectrum::poly(d, 2.0).unwrap();
        ProblemConfig {
            d,
            t: 50,
            n1: 20,
            n2: 10,
            m: 20,
            alpha: 0.05,
            beta_tr: 0.2,
            beta_te: 0.2,
            noise_sigma: 0.5,
            theta_star: vec![1.0 / (d as f64).sqrt(); d],
            task_spectrum: TaskSpectrum::isotropic(d, 0.1).unwrap(),
            data_spectrum: sigma,
            omega0: vec![0.0; d],
            seed: 3,
            constants: RateConstants::default(),
        }
    }

    #[test]
    fn sample_task_without_diversity_is_the_mean() {
        let mut rng = rng::stream(1, Domain::Replication, 0);
        let zero = TaskSpectrum::zero(3).unwrap();
        let th = sample_task(&[1.0, -2.0, 0.5], &zero, &mut rng).unwrap();
        assert_eq!(th.to_vec(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn sample_task_moments() {
        let mut rng = rng::stream(2, Domain::Replication, 0);
        let iso = TaskSpectrum::isotropic(2, 1.0).unwrap();
        let n = 100_000;
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let th = sample_task(&[0.0, 0.0], &iso, &mut rng).unwrap();
            sq[0] += th[0] * th[0];
            sq[1] += th[1] * th[1];
        }
        for s in sq {
            let v = s / n as f64;
            assert!((0.98..=1.02).contains(&v), "{v}");
        }

        let d = 200;
        let task = TaskSpectrum::isotropic(d, 0.64 / d as f64).unwrap();
        let mean = vec![0.0; d];
        let draws = 2000;
        let total: f64 = (0..draws)
            .map(|_| {
                let th = sample_task(&mean, &task, &mut rng).unwrap();
                th.dot(&th)
            })
            .sum();
        assert!((total / draws as f64 - 0.64).abs() < 0.02);
    }

    #[test]
    fn sample_dataset_noiseless_projection_and_moments() {
        let mut rng = rng::stream(3, Domain::Replication, 0);
        let s = Spectrum::new(vec![1.0, 0.5, 0.25]).unwrap();
        let theta = array![1.0, 0.0, 0.0];
        let (x, y, _) = sample_dataset(theta.view(), &s, 50, 0.0, &mut rng).unwrap();
        for j in 0..50 {
            assert_eq!(y[j], x[[j, 0]]);
        }

        let n = 100_000;
        let (x, _, _) = sample_dataset(theta.view(), &s, n, 1.0, &mut rng).unwrap();
        for k in 0..3 {
            let col = x.column(k);
            let m2 = col.dot(&col) / n as f64;
            let fourth = col.iter().map(|v| v.powi(4)).sum::<f64>() / n as f64;
            let se = ((fourth - m2 * m2) / n as f64).sqrt();
            assert!((m2 - s.values()[k]).abs() < 3.0 * se, "coord {k}");
        }
        let col = x.column(0);
        assert!((col.dot(&col) / n as f64 - 1.0).abs() < 0.02);
    }

    #[test]
    fn task_batch_reproduces_noise() {
        let cfg = small_config(6);
        let mut rng = rng::stream(4, Domain::Replication, 0);
        let task = sample_task_batch(&cfg, &mut rng).unwrap();
        let resid = &task.y_in - &task.x_in.dot(&task.theta);
        for (r, z) in resid.iter().zip(&task.z_in) {
            assert!((r - z).abs() <= 1e-14 * (1.0 + z.abs()));
        }
        let resid = &task.y_out - &task.x_out.dot(&task.theta);
        for (r, z) in resid.iter().zip(&task.z_out) {
            assert!((r - z).abs() <= 1e-14 * (1.0 + z.abs()));
        }
    }

    #[test]
    fn inner_adapt_cases() {
        let x = array![[2.0]];
        let y = array![4.0];
        let w = array![0.0];
        assert_eq!(inner_adapt(w.view(), 0.25, x.view(), y.view()), array![2.0]);
        let w = array![3.0];
        assert_eq!(inner_adapt(w.view(), 0.0, x.view(), y.view()), w);
        // interpolation is a fixed point
        let x = array![[1.0, 2.0], [0.5, -1.0]];
        let w = array![0.3, -0.7];
        let y = x.dot(&w);
        let out = inner_adapt(w.view(), 0.9, x.view(), y.view());
        for (a, b) in out.iter().zip(&w) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn meta_gradient_without_adaptation_is_least_squares() {
        let mut cfg = small_config(4);
        cfg.n2 = 1;
        let mut rng = rng::stream(5, Domain::Replication, 0);
        let task = sample_task_batch(&cfg, &mut rng).unwrap();
        let w = array![0.1, 0.2, -0.3, 0.4];
        let g = meta_gradient(w.view(), 0.0, &task);
        let x = task.x_out.row(0);
        let expected = &x * (x.dot(&w) - task.y_out[0]);
        for (a, b) in g.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_schedules() {
        let geo = CheckpointSchedule::Geometric.resolve(30);
        assert_eq!(geo, vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 14, 18, 24, 30]);
        assert_eq!(CheckpointSchedule::Dense.resolve(4), vec![1, 2, 3, 4]);
        let ex = CheckpointSchedule::Explicit(vec![50, 10, 400, 10]).resolve(200);
        assert_eq!(ex, vec![10, 50, 200]);
        assert_eq!(CheckpointSchedule::Geometric.resolve(1), vec![1]);
    }

    #[test]
    fn one_step_average_is_initial_point() {
        let mut cfg = small_config(5);
        cfg.t = 1;
        cfg.omega0 = vec![0.3; 5];
        let tr = run_maml_sgd(&cfg, &[1], 0).unwrap();
        assert_eq!(tr.omega_final, vec![0.3; 5]);
    }

    #[test]
    fn optimum_is_a_fixed_point_without_noise() {
        let mut cfg = small_config(5);
        cfg.noise_sigma = 0.0;
        cfg.task_spectrum = TaskSpectrum::zero(5).unwrap();
        cfg.omega0 = cfg.theta_star.clone();
        let ts = CheckpointSchedule::Dense.resolve(cfg.t);
        let tr = run_maml_sgd(&cfg, &ts, 0).unwrap();
        for w in &tr.omega_bar {
            for (a, b) in w.iter().zip(&cfg.theta_star) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let single = run_single_task_sgd(&cfg, &ts, 0).unwrap();
        let r = risk::excess_risk_closed(
            &single.omega_final,
            &cfg.theta_star,
            &cfg.data_spectrum,
            cfg.m,
            cfg.beta_te,
        )
        .unwrap();
        assert!(r < 1e-28);
    }

    #[test]
    fn single_task_matches_meta_run_without_diversity() {
        let mut cfg = small_config(6);
        cfg.task_spectrum = TaskSpectrum::zero(6).unwrap();
        cfg.beta_tr = 0.0;
        let ts = CheckpointSchedule::Geometric.resolve(cfg.t);
        let a = run_maml_sgd(&cfg, &ts, 2).unwrap();
        let b = run_single_task_sgd(&cfg, &ts, 2).unwrap();
        assert_eq!(a.omega_bar, b.omega_bar);
    }

    #[test]
    fn running_average_matches_a_replay() {
        let mut cfg = small_config(4);
        cfg.t = 12;
        let ts = CheckpointSchedule::Dense.resolve(cfg.t);
        let tr = run_maml_sgd(&cfg, &ts, 0).unwrap();

        let mut rng = rng::stream(cfg.seed, Domain::Replication, 0);
        let mut omega = Array1::from(cfg.omega0.clone());
        let mut iterates = Vec::new();
        for _ in 0..cfg.t {
            iterates.push(omega.clone());
            let task = sample_task_batch(&cfg, &mut rng).unwrap();
            let g = meta_gradient(omega.view(), cfg.beta_tr, &task);
            omega = &omega - &(g * cfg.alpha);
        }
        for k in 0..ts.len() - 1 {
            let t = ts[k] as f64;
            for i in 0..cfg.d {
                let recovered = (t + 1.0) * tr.omega_bar[k + 1][i] - t * tr.omega_bar[k][i];
                assert!((recovered - iterates[k + 1][i]).abs() < 1e-12);
            }
        }
        assert_eq!(tr.omega_bar[0], cfg.omega0);
    }

    #[test]
    fn deterministic_and_schedule_independent() {
        let cfg = small_config(8);
        let dense = CheckpointSchedule::Dense.resolve(cfg.t);
        let a = run_maml_sgd(&cfg, &dense, 1).unwrap();
        let b = run_maml_sgd(&cfg, &dense, 1).unwrap();
        assert_eq!(a, b);
        let sparse = run_maml_sgd(&cfg, &[cfg.t], 1).unwrap();
        assert_eq!(sparse.omega_final, a.omega_final);
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = small_config(5);
        cfg.alpha = 50.0;
        cfg.t = 200;
        let err = run_maml_sgd(&cfg, &[cfg.t], 0).unwrap_err();
        assert!(matches!(err, LabError::Diverged { .. }), "{err}");
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = small_config(5);
        cfg.beta_tr = 2.0;
        let msg = cfg.validate(false).unwrap_err().to_string();
        assert!(msg.contains("|βtr| < 1/λ1"), "{msg}");
        let mut cfg = small_config(5);
        cfg.alpha = 1.0;
        assert!(cfg.validate(false).is_ok());
        let msg = cfg.validate(true).unwrap_err().to_string();
        assert!(msg.contains("α < 1/(c(βtr,Σ)·tr(Σ))"), "{msg}");
        let mut cfg = small_config(5);
        cfg.omega0 = vec![0.0; 4];
        assert!(matches!(
            cfg.validate(false),
            Err(LabError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn noiseless_population_risk_decreases_on_average() {
        let mut cfg = small_config(10);
        cfg.noise_sigma = 0.0;
        cfg.task_spectrum = TaskSpectrum::zero(10).unwrap();
        cfg.t = 200;
        cfg.alpha = 0.5 * cfg.alpha_threshold().unwrap();
        let ts = CheckpointSchedule::Dense.resolve(cfg.t);
        let mut mean = vec![0.0; ts.len()];
        for rep in 0..20 {
            let tr = run_maml_sgd(&cfg, &ts, rep).unwrap();
            for (k, w) in tr.omega_bar.iter().enumerate() {
                mean[k] += risk::excess_risk_closed(
                    w,
                    &cfg.theta_star,
                    &cfg.data_spectrum,
                    cfg.m,
                    cfg.beta_te,
                )
                .unwrap()
                    / 20.0;
            }
        }
        assert!(mean.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = small_config(4);
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed += 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
