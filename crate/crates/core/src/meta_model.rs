//! Meta-covariance `H_{n,β}`, the rate functions `c`, `C`, `f`, `g` and the
//! effective meta weights `Ξ_i`, all in the shared diagonal eigenbasis.
//!
//! Data are Gaussian throughout, so the fourth-moment operator is
//! `F = 2Σ³ + Σ tr(Σ²)` and the inner-loop preconditioned covariance has
//! eigenvalues
//!
//! ```text
//! μ_i = (1 − βλ_i)² λ_i + (β²/n)(λ_i³ + λ_i tr(Σ²)).
//! ```

use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, LabError, Result};
use crate::rng::{self, Domain};
use crate::spectra::{Spectrum, TaskSpectrum};

/// Off-diagonal accumulation is `O(d³)` per draw, so the diagnostic only
/// uses this many leading replications by default.
pub const DEFAULT_OFFDIAG_REPS: usize = 1000;

const MC_CHUNK: usize = 1024;

/// Rejects inner-loop rates outside `(−1/λ1, 1/λ1)`.
pub fn check_beta(condition: &'static str, sigma: &Spectrum, beta: f64) -> Result<()> {
    let limit = 1.0 / sigma.lambda_max();
    if !beta.is_finite() || beta.abs() >= limit {
        return Err(LabError::precondition(
            condition,
            format!("beta = {beta}, 1/lambda_1 = {limit}"),
        ));
    }
    Ok(())
}

/// Eigenvalues of `H_{n,β} = E[(I − β/n XᵀX) Σ (I − β/n XᵀX)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaCovariance {
    pub mu: Vec<f64>,
    pub n: usize,
    pub beta: f64,
}

impl MetaCovariance {
    pub fn new(sigma: &Spectrum, n: usize, beta: f64) -> Result<Self> {
        check_beta("|β| < 1/λ1", sigma, beta)?;
        if n == 0 {
            return Err(LabError::ParameterDomain {
                name: "n",
                value: 0.0,
                constraint: "n >= 1",
            });
        }
        let tr2 = sigma.trace_sq();
        let scale = beta * beta / n as f64;
        let mu: Vec<f64> = sigma
            .values()
            .iter()
            .map(|&l| {
                let shrink = 1.0 - beta * l;
                shrink * shrink * l + scale * (l * l * l + l * tr2)
            })
            .collect();
        if let Some((index, &value)) = mu
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(LabError::NonPositiveMetaCovariance { index, value });
        }
        Ok(MetaCovariance { mu, n, beta })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn min(&self) -> f64 {
        self.mu.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Shorthand for [`MetaCovariance::new`].
pub fn meta_covariance(sigma: &Spectrum, n: usize, beta: f64) -> Result<MetaCovariance> {
    MetaCovariance::new(sigma, n, beta)
}

/// Monte-Carlo estimate of the diagonal of `H_{n,β}`.
#[derive(Debug, Clone, Serialize)]
pub struct MetaCovarianceEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Largest absolute off-diagonal entry of the averaged matrix.
    pub offdiag_max_abs: f64,
    pub reps: usize,
    pub offdiag_reps: usize,
}

#[derive(Clone)]
struct ChunkSums {
    dev: Vec<f64>,
    dev_sq: Vec<f64>,
    offdiag: Option<Array2<f64>>,
    count: usize,
    offdiag_count: usize,
}

/// Averages the diagonal of `(I − β/n XᵀX) Σ (I − β/n XᵀX)` over `reps`
/// independent Gaussian design matrices.
pub fn estimate_meta_covariance_mc(
    sigma: &Spectrum,
    n: usize,
    beta: f64,
    reps: usize,
    seed: u64,
) -> Result<MetaCovarianceEstimate> {
    estimate_meta_covariance_mc_with(sigma, n, beta, reps, seed, DEFAULT_OFFDIAG_REPS)
}

pub fn estimate_meta_covariance_mc_with(
    sigma: &Spectrum,
    n: usize,
    beta: f64,
    reps: usize,
    seed: u64,
    offdiag_reps: usize,
) -> Result<MetaCovarianceEstimate> {
    check_beta("|β| < 1/λ1", sigma, beta)?;
    if n == 0 {
        return Err(LabError::ParameterDomain {
            name: "n",
            value: 0.0,
            constraint: "n >= 1",
        });
    }
    if reps < 100 {
        return Err(LabError::ParameterDomain {
            name: "reps",
            value: reps as f64,
            constraint: "reps >= 100",
        });
    }
    let offdiag_reps = offdiag_reps.min(reps);
    let d = sigma.dim();
    let lambda = Array1::from(sigma.values().to_vec());
    let sqrt_lambda = lambda.mapv(f64::sqrt);
    let b = beta / n as f64;
    let chunks = reps.div_ceil(MC_CHUNK);

    let partials: Vec<ChunkSums> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = rng::stream(seed, Domain::MonteCarlo, chunk as u64);
            let start = chunk * MC_CHUNK;
            let end = (start + MC_CHUNK).min(reps);
            let mut sums = ChunkSums {
                dev: vec![0.0; d],
                dev_sq: vec![0.0; d],
                offdiag: None,
                count: 0,
                offdiag_count: 0,
            };
            let mut x = Array2::<f64>::zeros((n, d));
            for rep in start..end {
                for mut row in x.rows_mut() {
                    for (k, v) in row.iter_mut().enumerate() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = sqrt_lambda[k] * z;
                    }
                }
                let g = x.t().dot(&x);
                for i in 0..d {
                    let gi = g.row(i);
                    let quad: f64 = gi.iter().zip(lambda.iter()).map(|(a, l)| a * a * l).sum();
                    // deviation of the i-th diagonal entry from λ_i
                    let dev = -2.0 * b * g[[i, i]] * lambda[i] + b * b * quad;
                    sums.dev[i] += dev;
                    sums.dev_sq[i] += dev * dev;
                }
                if rep < offdiag_reps {
                    let mut m = g.mapv(|v| -b * v);
                    for i in 0..d {
                        m[[i, i]] += 1.0;
                    }
                    let scaled = &m * &lambda.view().insert_axis(Axis(0));
                    let full = scaled.dot(&m);
                    match sums.offdiag.as_mut() {
                        Some(acc) => *acc += &full,
                        None => sums.offdiag = Some(full),
                    }
                    sums.offdiag_count += 1;
                }
                sums.count += 1;
            }
            sums
        })
        .collect();

    let mut dev = vec![0.0; d];
    let mut dev_sq = vec![0.0; d];
    let mut offdiag = Array2::<f64>::zeros((d, d));
    let mut offdiag_count = 0usize;
    for part in &partials {
        for i in 0..d {
            dev[i] += part.dev[i];
            dev_sq[i] += part.dev_sq[i];
        }
        if let Some(acc) = &part.offdiag {
            offdiag += acc;
        }
        offdiag_count += part.offdiag_count;
    }
    let nr = reps as f64;
    let mean = (0..d).map(|i| lambda[i] + dev[i] / nr).collect();
    let std_err = (0..d)
        .map(|i| {
            let var = ((dev_sq[i] - dev[i] * dev[i] / nr) / (nr - 1.0)).max(0.0);
            (var / nr).sqrt()
        })
        .collect();
    let mut offdiag_max_abs = 0.0f64;
    if offdiag_count > 0 {
        for ((i, j), v) in offdiag.indexed_iter() {
            if i != j {
                offdiag_max_abs = offdiag_max_abs.max((v / offdiag_count as f64).abs());
            }
        }
    }
    Ok(MetaCovarianceEstimate {
        mean,
        std_err,
        offdiag_max_abs,
        reps,
        offdiag_reps: offdiag_count,
    })
}

/// Distribution constants that enter the rates. The Gaussian values are the
/// defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateConstants {
    pub c1: f64,
    pub b1: f64,
    pub sigma_x: f64,
    /// Replaces the Gaussian closed form of `C(β,Σ)` for `β ≠ 0` when set.
    pub big_c: Option<f64>,
}

impl Default for RateConstants {
    fn default() -> Self {
        RateConstants {
            c1: 3.0,
            b1: 2.0,
            sigma_x: 1.0,
            big_c: None,
        }
    }
}

impl RateConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = |name, value: f64| {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(LabError::ParameterDomain {
                    name,
                    value,
                    constraint: "must be positive",
                })
            }
        };
        positive("c1", self.c1)?;
        positive("b1", self.b1)?;
        positive("sigma_x", self.sigma_x)?;
        if let Some(c) = self.big_c {
            if !(c >= 1.0 && c.is_finite()) {
                return Err(LabError::ParameterDomain {
                    name: "big_c",
                    value: c,
                    constraint: "big_c >= 1",
                });
            }
        }
        Ok(())
    }
}

/// `C(β,Σ)`: exactly 1 at `β = 0`, otherwise `210(1 + β⁴tr(Σ²)²/(1 − βλ1)⁴)`.
pub fn c_gauss(sigma: &Spectrum, beta: f64) -> Result<f64> {
    check_beta("|β| < 1/λ1", sigma, beta)?;
    if beta == 0.0 {
        return Ok(1.0);
    }
    let tr2 = sigma.trace_sq();
    let denom = (1.0 - beta * sigma.lambda_max()).powi(4);
    Ok(210.0 * (1.0 + beta.powi(4) * tr2 * tr2 / denom))
}

fn big_c(sigma: &Spectrum, beta: f64, consts: &RateConstants) -> Result<f64> {
    match consts.big_c {
        Some(c) if beta != 0.0 => {
            check_beta("|β| < 1/λ1", sigma, beta)?;
            Ok(c)
        }
        _ => c_gauss(sigma, beta),
    }
}

/// `c(β,Σ) = c1(1 + 8|β|λ1√C σx² + 64√C σx⁴ β² tr(Σ²))`.
pub fn c_rate(sigma: &Spectrum, beta: f64, consts: &RateConstants) -> Result<f64> {
    let root_c = big_c(sigma, beta, consts)?.sqrt();
    let sx2 = consts.sigma_x * consts.sigma_x;
    Ok(consts.c1
        * (1.0
            + 8.0 * beta.abs() * sigma.lambda_max() * root_c * sx2
            + 64.0 * root_c * sx2 * sx2 * beta * beta * sigma.trace_sq()))
}

/// `f(β,n,σ,Σ,Σθ) = c·tr(ΣθΣ) + 4c1σ²σx²β²√C tr(Σ²) + σ²/n`.
pub fn f_rate(
    sigma: &Spectrum,
    task: &TaskSpectrum,
    beta: f64,
    n: usize,
    noise_sigma: f64,
    consts: &RateConstants,
) -> Result<f64> {
    ensure_dim("f rate", sigma.dim(), task.dim())?;
    check_n(n)?;
    let c = c_rate(sigma, beta, consts)?;
    let root_c = big_c(sigma, beta, consts)?.sqrt();
    let s2 = noise_sigma * noise_sigma;
    let tr_task = task.weighted_trace(sigma.values())?;
    Ok(c * tr_task
        + 4.0
            * consts.c1
            * s2
            * consts.sigma_x
            * consts.sigma_x
            * beta
            * beta
            * root_c
            * sigma.trace_sq()
        + s2 / n as f64)
}

/// `g(β,n,σ,Σ,Σθ) = σ² + b1 tr(Σθ H_{n,β}) + β² 1{β ≤ 0} b1 tr(Σ²)/n`.
pub fn g_rate(
    sigma: &Spectrum,
    task: &TaskSpectrum,
    beta: f64,
    n: usize,
    noise_sigma: f64,
    consts: &RateConstants,
) -> Result<f64> {
    ensure_dim("g rate", sigma.dim(), task.dim())?;
    check_n(n)?;
    let h = MetaCovariance::new(sigma, n, beta)?;
    let indicator = if beta <= 0.0 {
        beta * beta * consts.b1 * sigma.trace_sq() / n as f64
    } else {
        0.0
    };
    Ok(noise_sigma * noise_sigma + consts.b1 * task.weighted_trace(&h.mu)? + indicator)
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(LabError::ParameterDomain {
            name: "n",
            value: 0.0,
            constraint: "n >= 1",
        });
    }
    Ok(())
}

/// All rates at one training step size, as consumed by the bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateBundle {
    pub c_val: f64,
    #[serde(rename = "C_val")]
    pub big_c_val: f64,
    /// `f(β_tr, n2, …)`.
    pub f_val: f64,
    /// `g(β_tr, n1, …)`.
    pub g_val: f64,
    pub c1: f64,
    pub b1: f64,
    pub sigma_x: f64,
}

impl RateBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        sigma: &Spectrum,
        task: &TaskSpectrum,
        beta_tr: f64,
        n1: usize,
        n2: usize,
        noise_sigma: f64,
        consts: &RateConstants,
    ) -> Result<Self> {
        consts.validate()?;
        Ok(RateBundle {
            c_val: c_rate(sigma, beta_tr, consts)?,
            big_c_val: big_c(sigma, beta_tr, consts)?,
            f_val: f_rate(sigma, task, beta_tr, n2, noise_sigma, consts)?,
            g_val: g_rate(sigma, task, beta_tr, n1, noise_sigma, consts)?,
            c1: consts.c1,
            b1: consts.b1,
            sigma_x: consts.sigma_x,
        })
    }
}

/// Effective meta weights with their leading/tail partition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveWeights {
    pub xi: Vec<f64>,
    pub leading: Vec<bool>,
    pub mu_train: Vec<f64>,
    pub mu_test: Vec<f64>,
    pub alpha: f64,
    pub t: usize,
}

impl EffectiveWeights {
    pub fn from_meta(
        train: &MetaCovariance,
        test: &MetaCovariance,
        alpha: f64,
        t: usize,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LabError::ParameterDomain {
                name: "alpha",
                value: alpha,
                constraint: "alpha > 0",
            });
        }
        if t == 0 {
            return Err(LabError::ParameterDomain {
                name: "T",
                value: 0.0,
                constraint: "T >= 1",
            });
        }
        ensure_dim("effective weights", train.dim(), test.dim())?;
        let tf = t as f64;
        let threshold = 1.0 / (alpha * tf);
        let mut xi = Vec::with_capacity(train.dim());
        let mut leading = Vec::with_capacity(train.dim());
        for (&mt, &me) in train.mu.iter().zip(&test.mu) {
            let lead = mt >= threshold;
            leading.push(lead);
            xi.push(if lead {
                me / (tf * mt)
            } else {
                tf * alpha * alpha * mt * me
            });
        }
        Ok(EffectiveWeights {
            xi,
            leading,
            mu_train: train.mu.clone(),
            mu_test: test.mu.clone(),
            alpha,
            t,
        })
    }

    pub fn sum(&self) -> f64 {
        self.xi.iter().sum()
    }

    pub fn leading_count(&self) -> usize {
        self.leading.iter().filter(|&&l| l).count()
    }

    /// One row per eigendirection: index, lambda, mu_train, mu_test, xi, leading.
    pub fn write_csv<W: Write>(&self, sigma: &Spectrum, writer: W) -> Result<()> {
        ensure_dim("effective weights csv", sigma.dim(), self.xi.len())?;
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| LabError::Parse {
            what: "weights csv".into(),
            message: e.to_string(),
        };
        w.write_record(["index", "lambda", "mu_train", "mu_test", "xi", "leading"])
            .map_err(err)?;
        for i in 0..self.xi.len() {
            w.write_record([
                (i + 1).to_string(),
                sigma.values()[i].to_string(),
                self.mu_train[i].to_string(),
                self.mu_test[i].to_string(),
                self.xi[i].to_string(),
                self.leading[i].to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| LabError::io("<weights csv>", e))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn effective_meta_weights(
    sigma: &Spectrum,
    alpha: f64,
    t: usize,
    n1: usize,
    beta_tr: f64,
    m: usize,
    beta_te: f64,
) -> Result<EffectiveWeights> {
    let train = MetaCovariance::new(sigma, n1, beta_tr)?;
    let test = MetaCovariance::new(sigma, m, beta_te)?;
    EffectiveWeights::from_meta(&train, &test, alpha, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one() -> Spectrum {
        Spectrum::new(vec![1.0]).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn meta_covariance_reduces_to_sigma_at_zero_beta() {
        let s = Spectrum::log_decay(30, 2.0).unwrap();
        let h = meta_covariance(&s, 7, 0.0).unwrap();
        assert_eq!(h.mu, s.values());
    }

    #[test]
    fn meta_covariance_scalar_case() {
        let h = meta_covariance(&one(), 1, 0.5).unwrap();
        assert!((h.mu[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn meta_covariance_large_n_limit() {
        let s = Spectrum::two_block(10, 2).unwrap();
        let h = meta_covariance(&s, 1_000_000, 0.2).unwrap();
        for (mu, &l) in h.mu.iter().zip(s.values()) {
            let limit = (1.0 - 0.2 * l).powi(2) * l;
            assert!(rel(*mu, limit) < 1e-5);
        }
    }

    #[test]
    fn meta_covariance_rejects_large_beta() {
        let s = Spectrum::poly(5, 2.0).unwrap();
        let err = meta_covariance(&s, 10, 1.0).unwrap_err();
        assert!(matches!(err, LabError::Precondition { .. }));
        assert!(meta_covariance(&s, 10, -1.5).is_err());
        assert!(meta_covariance(&s, 0, 0.1).is_err());
    }

    #[test]
    fn mc_estimate_is_exact_without_adaptation() {
        let s = Spectrum::new(vec![1.0, 0.5, 0.25]).unwrap();
        let est = estimate_meta_covariance_mc(&s, 5, 0.0, 200, 1).unwrap();
        assert_eq!(est.mean, s.values());
        assert!(est.std_err.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn mc_estimate_matches_closed_form() {
        let s = Spectrum::new(vec![1.0, 0.5]).unwrap();
        let h = meta_covariance(&s, 20, 0.3).unwrap();
        let est = estimate_meta_covariance_mc(&s, 20, 0.3, 100_000, 11).unwrap();
        for i in 0..2 {
            let z = (est.mean[i] - h.mu[i]).abs() / est.std_err[i];
            assert!(z < 3.0, "entry {i}: z = {z}");
        }
    }

    #[test]
    fn mc_offdiagonal_shrinks_with_reps() {
        let s = Spectrum::new(vec![1.0, 0.6, 0.3]).unwrap();
        let small = estimate_meta_covariance_mc_with(&s, 10, 0.4, 200, 5, 200).unwrap();
        let large = estimate_meta_covariance_mc_with(&s, 10, 0.4, 20_000, 5, 20_000).unwrap();
        assert!(large.offdiag_max_abs < small.offdiag_max_abs);
        assert!(large.offdiag_max_abs < 5e-3);
    }

    #[test]
    fn mc_rejects_few_reps() {
        let s = one();
        assert!(estimate_meta_covariance_mc(&s, 5, 0.1, 99, 0).is_err());
    }

    #[test]
    fn c_gauss_values() {
        let s = one();
        assert_eq!(c_gauss(&s, 0.0).unwrap(), 1.0);
        assert!((c_gauss(&s, 0.5).unwrap() - 420.0).abs() < 1e-9);
        // the formula's small-β limit is 210, not 1
        assert!((c_gauss(&s, 1e-9).unwrap() - 210.0).abs() < 1e-6);
        assert!(c_gauss(&s, 1.0).is_err());
    }

    #[test]
    fn c_rate_values() {
        let k = RateConstants::default();
        let s = one();
        assert_eq!(c_rate(&s, 0.0, &k).unwrap(), 3.0);
        let expected = 3.0 + 60.0 * 420f64.sqrt();
        assert!(rel(c_rate(&s, 0.5, &k).unwrap(), expected) < 1e-13);
        assert!((c_rate(&s, 0.5, &k).unwrap() - 1232.6).abs() < 0.1);

        let s = Spectrum::log_decay(50, 2.0).unwrap();
        let grid: Vec<f64> = (1..10).map(|i| i as f64 * 0.1 / s.lambda_max()).collect();
        let vals: Vec<f64> = grid.iter().map(|&b| c_rate(&s, b, &k).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[0] < w[1]));
        let neg: Vec<f64> = grid.iter().map(|&b| c_rate(&s, -b, &k).unwrap()).collect();
        assert!(neg.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn big_c_override() {
        let k = RateConstants {
            big_c: Some(4.0),
            ..RateConstants::default()
        };
        let s = one();
        assert_eq!(c_rate(&s, 0.0, &k).unwrap(), 3.0);
        let expected = 3.0 * (1.0 + 8.0 * 0.5 * 2.0 + 64.0 * 2.0 * 0.25);
        assert!(rel(c_rate(&s, 0.5, &k).unwrap(), expected) < 1e-14);
    }

    #[test]
    fn f_rate_values() {
        let k = RateConstants::default();
        let s = Spectrum::new(vec![1.0, 0.5]).unwrap();
        let zero = TaskSpectrum::zero(2).unwrap();
        assert!(rel(f_rate(&s, &zero, 0.0, 10, 1.0, &k).unwrap(), 0.1) < 1e-15);
        let nu = TaskSpectrum::new(vec![2.0, 2.0]).unwrap();
        assert!(rel(f_rate(&s, &nu, 0.0, 10, 1.0, &k).unwrap(), 9.1) < 1e-14);
        let short = TaskSpectrum::zero(3).unwrap();
        assert!(matches!(
            f_rate(&s, &short, 0.0, 10, 1.0, &k),
            Err(LabError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn f_rate_log_growth_exponent() {
        // For p = 2, r = 1.5 the leading term grows like log^{r-p+1} d = log^{0.5} d.
        let k = RateConstants::default();
        let ds = [100usize, 1000, 10_000, 100_000];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &d in &ds {
            let s = Spectrum::log_decay(d, 2.0).unwrap();
            let nu = TaskSpectrum::log_growth(d, 1.5, 0.25).unwrap();
            let f = f_rate(&s, &nu, 0.0, 10, 0.0, &k).unwrap();
            xs.push((d as f64).ln().ln());
            ys.push(f.ln());
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let slope = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!(slope > 0.2 && slope < 0.8, "slope {slope}");
    }

    #[test]
    fn g_rate_values() {
        let k = RateConstants::default();
        let s = one();
        let zero = TaskSpectrum::zero(1).unwrap();
        assert_eq!(g_rate(&s, &zero, 0.0, 10, 1.0, &k).unwrap(), 1.0);
        let nu = TaskSpectrum::new(vec![1.0]).unwrap();
        assert!(rel(g_rate(&s, &nu, -0.5, 10, 1.0, &k).unwrap(), 5.65) < 1e-14);

        let s = Spectrum::poly(4, 2.0).unwrap();
        let nu = TaskSpectrum::new(vec![0.3, 0.2, 0.5, 1.0]).unwrap();
        let nu2 = TaskSpectrum::new(vec![0.6, 0.4, 1.0, 2.0]).unwrap();
        let g1 = g_rate(&s, &nu, 0.4, 10, 0.5, &k).unwrap() - 0.25;
        let g2 = g_rate(&s, &nu2, 0.4, 10, 0.5, &k).unwrap() - 0.25;
        assert!(rel(g2, 2.0 * g1) < 1e-14);
    }

    #[test]
    fn effective_weights_scalar_and_threshold() {
        let w = effective_meta_weights(&one(), 0.1, 100, 1_000_000, 0.0, 1_000_000, 0.0).unwrap();
        assert!(w.leading[0]);
        assert!((w.xi[0] - 0.01).abs() < 1e-15);

        // μ_train = 1/(αT) exactly: both branches equal α·μ_test.
        let train = MetaCovariance {
            mu: vec![0.25],
            n: 1,
            beta: 0.0,
        };
        let test = MetaCovariance {
            mu: vec![0.7],
            n: 1,
            beta: 0.0,
        };
        let (alpha, t) = (0.04, 100);
        let w = EffectiveWeights::from_meta(&train, &test, alpha, t).unwrap();
        let tail = t as f64 * alpha * alpha * 0.25 * 0.7;
        assert!(w.leading[0]);
        assert!((w.xi[0] - alpha * 0.7).abs() < 1e-15);
        assert!((tail - alpha * 0.7).abs() < 1e-15);
    }

    #[test]
    fn effective_weights_block_partition() {
        let s = Spectrum::two_block(10, 2).unwrap();
        // 1/(αT) = 0.2 lies between 1/8 and 1/2.
        let w = effective_meta_weights(&s, 0.05, 100, 1_000_000, 0.0, 1_000_000, 0.0).unwrap();
        assert_eq!(w.leading_count(), 2);
        assert!(w.leading[..2].iter().all(|&l| l));
        let mut buf = Vec::new();
        w.write_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("index,lambda,mu_train,mu_test,xi,leading\n"));
        assert_eq!(text.lines().count(), 11);
    }

    #[test]
    fn meta_ratio_trends_in_beta_tr() {
        let s = Spectrum::log_decay(40, 2.0).unwrap();
        let n = 1_000_000;
        let test = meta_covariance(&s, n, 0.2).unwrap();
        let grid: Vec<f64> = (0..9).map(|i| i as f64 * 0.1 / s.lambda_max()).collect();
        let trains: Vec<MetaCovariance> = grid
            .iter()
            .map(|&b| meta_covariance(&s, n, b).unwrap())
            .collect();
        for i in 0..s.dim() {
            let ratio: Vec<f64> = trains.iter().map(|h| test.mu[i] / h.mu[i]).collect();
            let product: Vec<f64> = trains.iter().map(|h| test.mu[i] * h.mu[i]).collect();
            assert!(ratio.windows(2).all(|w| w[0] < w[1]));
            assert!(product.windows(2).all(|w| w[0] > w[1]));
        }
    }
}
