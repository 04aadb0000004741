//! Upper and lower bounds on the meta excess risk, the stopping-time
//! envelope and the `β_tr` tradeoff curve.
//!
//! With `ω_i = ⟨ω0 − θ*, v_i⟩`, `μ_i = μ_i(H_{n1,βtr})`, `D = 1 − αc·tr(Σ)` and
//! `S = Σ_i (1{lead}/(Tαμ_i) + 1{tail}) λ_i ω_i²`:
//!
//! ```text
//! upper = 2/(α²T) Σ Ξ_i ω_i²/μ_i + (2/D)(Σ Ξ_i)·[f(βtr, n2) + 2c·S]
//! lower = 1/(100α²T) Σ Ξ_i ω_i²/μ_i + (1/(n2·D))(Σ Ξ_i)·[g(βtr, n1)/100 + b1·S/1000]
//! ```

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::maml_sgd::ProblemConfig;
use crate::meta_model::{EffectiveWeights, MetaCovariance, RateBundle};

/// Which weight structure the SGD-noise cross term carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum V2Form {
    /// `V2 = 2c·S`, multiplied by `(2/D)ΣΞ` together with `V1`.
    #[default]
    Display,
    /// The cross term as it appears before being folded into the effective
    /// weights: `4c/(TαD) · Σ(1{lead}/T + Tα²μ²1{tail}) · Σ(1{lead}/μ + Tα·1{tail})λω²`.
    /// It is added to the variance on its own.
    Unfolded,
}

/// Every component of both bounds for one configuration.
#[derive(Debug, Clone, Serialize)]
pub struct BoundBreakdown {
    pub bias: f64,
    pub var_total: f64,
    pub v1: f64,
    /// Under [`V2Form::Display`] this is the bracketed term; under
    /// [`V2Form::Unfolded`] it is the standalone addend of `var_total`.
    pub v2: f64,
    pub v2_form: V2Form,
    pub xi_sum: f64,
    pub upper: f64,
    /// `None` when `T ≤ 10`.
    pub lower_bias: Option<f64>,
    pub lower_var: Option<f64>,
    pub lower: Option<f64>,
    /// `2/(α²T) · max_i μ_i(H_{m,βte})/μ_i(H_{n1,βtr}) · ‖ω0 − θ*‖²`.
    pub remainder: f64,
    pub rate_bundle: RateBundle,
    pub omega_sq: Vec<f64>,
    pub leading_count: usize,
}

struct Ingredients {
    weights: EffectiveWeights,
    bundle: RateBundle,
    omega_sq: Vec<f64>,
    denom: f64,
    s: f64,
    bias_sum: f64,
}

fn ingredients(config: &ProblemConfig) -> Result<Ingredients> {
    config.validate(true)?;
    let sigma = &config.data_spectrum;
    let train = MetaCovariance::new(sigma, config.n1, config.beta_tr)?;
    let test = MetaCovariance::new(sigma, config.m, config.beta_te)?;
    let weights = EffectiveWeights::from_meta(&train, &test, config.alpha, config.t)?;
    let bundle = RateBundle::evaluate(
        sigma,
        &config.task_spectrum,
        config.beta_tr,
        config.n1,
        config.n2,
        config.noise_sigma,
        &config.constants,
    )?;
    let denom = 1.0 - config.alpha * bundle.c_val * sigma.trace();
    if denom <= 0.0 {
        return Err(LabError::precondition(
            "α < 1/(c(βtr,Σ)·tr(Σ))",
            format!("1 - alpha*c*tr = {denom}"),
        ));
    }
    let omega_sq: Vec<f64> = config.initial_gap().iter().map(|w| w * w).collect();
    let ta = config.t as f64 * config.alpha;
    let mut s = 0.0;
    let mut bias_sum = 0.0;
    for i in 0..config.d {
        let lam = sigma.values()[i];
        let weight = if weights.leading[i] {
            1.0 / (ta * train.mu[i])
        } else {
            1.0
        };
        s += weight * lam * omega_sq[i];
        bias_sum += weights.xi[i] * omega_sq[i] / train.mu[i];
    }
    Ok(Ingredients {
        weights,
        bundle,
        omega_sq,
        denom,
        s,
        bias_sum,
    })
}

fn remainder(config: &ProblemConfig, w: &EffectiveWeights, omega_sq: &[f64]) -> f64 {
    let max_ratio = w
        .mu_test
        .iter()
        .zip(&w.mu_train)
        .map(|(e, t)| e / t)
        .fold(0.0, f64::max);
    2.0 / (config.alpha * config.alpha * config.t as f64) * max_ratio * omega_sq.iter().sum::<f64>()
}

fn unfolded_cross_term(config: &ProblemConfig, ing: &Ingredients) -> f64 {
    let t = config.t as f64;
    let a = config.alpha;
    let w = &ing.weights;
    let mut first = 0.0;
    let mut second = 0.0;
    for i in 0..config.d {
        let mu = w.mu_train[i];
        let lam = config.data_spectrum.values()[i];
        if w.leading[i] {
            first += 1.0 / t;
            second += lam * ing.omega_sq[i] / mu;
        } else {
            first += t * a * a * mu * mu;
            second += t * a * lam * ing.omega_sq[i];
        }
    }
    4.0 * ing.bundle.c_val / (t * a * ing.denom) * first * second
}

fn upper_parts(config: &ProblemConfig, ing: &Ingredients, form: V2Form) -> (f64, f64, f64, f64) {
    let t = config.t as f64;
    let a = config.alpha;
    let xi_sum = ing.weights.sum();
    let bias = 2.0 / (a * a * t) * ing.bias_sum;
    let v1 = ing.bundle.f_val;
    let prefactor = 2.0 / ing.denom * xi_sum;
    match form {
        V2Form::Display => {
            let v2 = 2.0 * ing.bundle.c_val * ing.s;
            (bias, v1, v2, prefactor * (v1 + v2))
        }
        V2Form::Unfolded => {
            let v2 = unfolded_cross_term(config, ing);
            (bias, v1, v2, prefactor * v1 + v2)
        }
    }
}

/// The upper bound alone. Lower-bound fields are left empty.
pub fn upper_bound(config: &ProblemConfig, form: V2Form) -> Result<BoundBreakdown> {
    let ing = ingredients(config)?;
    Ok(assemble(config, ing, form, None))
}

/// The lower bound as `(bias part, variance part)`. Requires `T > 10`.
pub fn lower_bound(config: &ProblemConfig) -> Result<(f64, f64)> {
    let ing = ingredients(config)?;
    lower_parts(config, &ing)
}

fn lower_parts(config: &ProblemConfig, ing: &Ingredients) -> Result<(f64, f64)> {
    if config.t <= 10 {
        return Err(LabError::precondition(
            "T > 10",
            format!("T = {}", config.t),
        ));
    }
    let t = config.t as f64;
    let a = config.alpha;
    let bias = ing.bias_sum / (100.0 * a * a * t);
    let var = ing.weights.sum() / (config.n2 as f64 * ing.denom)
        * (ing.bundle.g_val / 100.0 + ing.bundle.b1 / 1000.0 * ing.s);
    Ok((bias, var))
}

/// Both bounds. The lower bound is included when `T > 10`; when present it
/// is checked against the upper bound.
pub fn bounds(config: &ProblemConfig, form: V2Form) -> Result<BoundBreakdown> {
    let ing = ingredients(config)?;
    let lower = if config.t > 10 {
        Some(lower_parts(config, &ing)?)
    } else {
        None
    };
    let out = assemble(config, ing, form, lower);
    if let Some(lower) = out.lower {
        if lower > out.upper {
            return Err(LabError::precondition(
                "lower ≤ upper",
                format!("lower = {lower}, upper = {}", out.upper),
            ));
        }
    }
    Ok(out)
}

fn assemble(
    config: &ProblemConfig,
    ing: Ingredients,
    form: V2Form,
    lower: Option<(f64, f64)>,
) -> BoundBreakdown {
    let (bias, v1, v2, var_total) = upper_parts(config, &ing, form);
    BoundBreakdown {
        bias,
        var_total,
        v1,
        v2,
        v2_form: form,
        xi_sum: ing.weights.sum(),
        upper: bias + var_total,
        lower_bias: lower.map(|l| l.0),
        lower_var: lower.map(|l| l.1),
        lower: lower.map(|l| l.0 + l.1),
        remainder: remainder(config, &ing.weights, &ing.omega_sq),
        leading_count: ing.weights.leading_count(),
        rate_bundle: ing.bundle,
        omega_sq: ing.omega_sq,
    }
}

/// Leading and tail factors of the stopping-time envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeConstants {
    pub u_l: f64,
    pub u_t: f64,
    pub l_l: f64,
    pub l_t: f64,
}

impl EnvelopeConstants {
    /// All order-one prefactors set to 1:
    /// `U = (2c1ν² + σ²/n2)(1 − βte λ)²`, `L = (2b1ν²/n2 + σ²/n2)(1 − βte λ)²`
    /// with `λ = λ1` for the leading and `λ = λd` for the tail factor.
    #[allow(clippy::too_many_arguments)]
    pub fn defaults(
        nu_sq: f64,
        noise_sigma: f64,
        n2: usize,
        beta_te: f64,
        lambda_1: f64,
        lambda_d: f64,
        c1: f64,
        b1: f64,
    ) -> Self {
        let n2 = n2 as f64;
        let s2 = noise_sigma * noise_sigma / n2;
        let upper = 2.0 * c1 * nu_sq + s2;
        let lower = 2.0 * b1 * nu_sq / n2 + s2;
        let lead = (1.0 - beta_te * lambda_1).powi(2);
        let tail = (1.0 - beta_te * lambda_d).powi(2);
        EnvelopeConstants {
            u_l: upper * lead,
            u_t: upper * tail,
            l_l: lower * lead,
            l_t: lower * tail,
        }
    }

    /// Defaults for a configuration, taking `ν²` as the mean task eigenvalue.
    pub fn for_config(config: &ProblemConfig) -> Self {
        EnvelopeConstants::defaults(
            config.task_spectrum.mean(),
            config.noise_sigma,
            config.n2,
            config.beta_te,
            config.data_spectrum.lambda_max(),
            config.data_spectrum.lambda_min(),
            config.constants.c1,
            config.constants.b1,
        )
    }
}

/// Lower and upper stopping-time envelopes, with their logarithms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Envelope {
    pub log_t_lower: f64,
    pub log_t_upper: f64,
    pub t_lower: f64,
    pub t_upper: f64,
}

/// `log t = ε^{-1/p} [K_l/(1 − βtr λ1)² + K_t (1 − βtr λd)²]^{1/p}`.
fn log_envelope(
    k_l: f64,
    k_t: f64,
    beta_tr: f64,
    lambda_1: f64,
    lambda_d: f64,
    eps: f64,
    p: f64,
) -> f64 {
    let bracket =
        k_l / (1.0 - beta_tr * lambda_1).powi(2) + k_t * (1.0 - beta_tr * lambda_d).powi(2);
    eps.powf(-1.0 / p) * bracket.powf(1.0 / p)
}

/// Envelope from the spectrum edges. Used directly when the data spectrum is
/// not a two-block spectrum.
pub fn stopping_time_envelope_edges(
    lambda_1: f64,
    lambda_d: f64,
    beta_tr: f64,
    epsilon: f64,
    p: f64,
    constants: &EnvelopeConstants,
) -> Result<Envelope> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(LabError::ParameterDomain {
            name: "epsilon",
            value: epsilon,
            constraint: "epsilon > 0",
        });
    }
    if !(p > 0.0 && p.is_finite()) {
        return Err(LabError::ParameterDomain {
            name: "p",
            value: p,
            constraint: "p > 0",
        });
    }
    if beta_tr.abs() >= 1.0 / lambda_1 {
        return Err(LabError::precondition(
            "|βtr| < 1/λ1",
            format!("beta_tr = {beta_tr}, 1/lambda_1 = {}", 1.0 / lambda_1),
        ));
    }
    let c = constants;
    if [c.u_l, c.u_t, c.l_l, c.l_t].iter().any(|v| !(*v > 0.0)) {
        return Err(LabError::InvalidPlan(
            "envelope constants must be positive".into(),
        ));
    }
    let lo = log_envelope(c.l_l, c.l_t, beta_tr, lambda_1, lambda_d, epsilon, p);
    let hi = log_envelope(c.u_l, c.u_t, beta_tr, lambda_1, lambda_d, epsilon, p);
    Ok(Envelope {
        log_t_lower: lo,
        log_t_upper: hi,
        t_lower: lo.exp(),
        t_upper: hi.exp(),
    })
}

/// Envelope for a configuration whose data spectrum is two-block.
pub fn stopping_time_envelope(
    config: &ProblemConfig,
    epsilon: f64,
    p: f64,
    constants: Option<EnvelopeConstants>,
) -> Result<Envelope> {
    if config.data_spectrum.two_block_split().is_none() {
        return Err(LabError::InvalidSpectrum(
            "the stopping-time envelope needs a two-block data spectrum".into(),
        ));
    }
    let constants = constants.unwrap_or_else(|| EnvelopeConstants::for_config(config));
    stopping_time_envelope_edges(
        config.data_spectrum.lambda_max(),
        config.data_spectrum.lambda_min(),
        config.beta_tr,
        epsilon,
        p,
        &constants,
    )
}

/// `1/logᵖT · 1/(1 − βλ1)² + 1/logᵠT · (1 − βλd)²` with unit prefactors.
pub fn tradeoff_shape(beta_tr: f64, lambda_1: f64, lambda_d: f64, p: f64, q: f64, t: usize) -> f64 {
    let lt = (t as f64).ln();
    lt.powf(-p) / (1.0 - beta_tr * lambda_1).powi(2)
        + lt.powf(-q) * (1.0 - beta_tr * lambda_d).powi(2)
}

/// One grid point of a tradeoff curve. Bound fields are empty when the
/// point's configuration fails a bound precondition; the reason is kept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffPoint {
    pub beta_tr: f64,
    pub bias: Option<f64>,
    pub v1: Option<f64>,
    pub v2: Option<f64>,
    pub upper: Option<f64>,
    pub lower: Option<f64>,
    pub remainder: Option<f64>,
    pub empirical_mean: Option<f64>,
    pub empirical_std: Option<f64>,
    pub error: Option<String>,
}

/// Simulated `(mean, std)` risk for a configuration.
pub type Simulator<'a> = dyn Fn(&ProblemConfig) -> Result<(f64, f64)> + Sync + 'a;

/// Evaluates the bounds, and optionally a simulation, at every grid point.
/// Failures are recorded per point.
pub fn tradeoff_curve(
    make_config: &(dyn Fn(f64) -> Result<ProblemConfig> + Sync),
    beta_tr_grid: &[f64],
    form: V2Form,
    simulate: Option<&Simulator<'_>>,
) -> Result<Vec<TradeoffPoint>> {
    use rayon::prelude::*;
    if beta_tr_grid.is_empty() {
        return Err(LabError::InvalidPlan("beta_tr grid is empty".into()));
    }
    beta_tr_grid
        .par_iter()
        .map(|&beta| -> Result<TradeoffPoint> {
            let mut point = TradeoffPoint {
                beta_tr: beta,
                bias: None,
                v1: None,
                v2: None,
                upper: None,
                lower: None,
                remainder: None,
                empirical_mean: None,
                empirical_std: None,
                error: None,
            };
            let config = match make_config(beta) {
                Ok(c) => c,
                Err(e) if e.is_config_error() => {
                    point.error = Some(e.to_string());
                    return Ok(point);
                }
                Err(e) => return Err(e),
            };
            match bounds(&config, form) {
                Ok(b) => {
                    point.bias = Some(b.bias);
                    point.v1 = Some(b.v1);
                    point.v2 = Some(b.v2);
                    point.upper = Some(b.upper);
                    point.lower = b.lower;
                    point.remainder = Some(b.remainder);
                }
                Err(e) if e.is_config_error() => point.error = Some(e.to_string()),
                Err(e) => return Err(e),
            }
            if let Some(sim) = simulate {
                let (mean, std) = sim(&config)?;
                point.empirical_mean = Some(mean);
                point.empirical_std = Some(std);
            }
            Ok(point)
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Columns: beta_tr, bias, v1, v2, upper, lower, empirical_mean, empirical_std.
pub fn write_tradeoff_csv<W: Write>(points: &[TradeoffPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| LabError::Parse {
        what: "tradeoff csv".into(),
        message: e.to_string(),
    };
    w.write_record([
        "beta_tr",
        "bias",
        "v1",
        "v2",
        "upper",
        "lower",
        "empirical_mean",
        "empirical_std",
    ])
    .map_err(err)?;
    for p in points {
        w.write_record([
            p.beta_tr.to_string(),
            opt(p.bias),
            opt(p.v1),
            opt(p.v2),
            opt(p.upper),
            opt(p.lower),
            opt(p.empirical_mean),
            opt(p.empirical_std),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| LabError::io("<tradeoff csv>", e))
}
