//! Experiment plans: JSON documents (schema 1) that describe a base problem
//! configuration, sweep axes and replication settings.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bounds::V2Form;
use crate::error::{LabError, Result};
use crate::maml_sgd::{CheckpointSchedule, ProblemConfig};
use crate::meta_model::{c_rate, check_beta, RateConstants};
use crate::rng::{self, Domain};
use crate::spectra::{Spectrum, TaskSpectrum};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PhaseTransition,
    RateCheck,
    LrTradeoff,
    StoppingTime,
    SingleVsMeta,
    BoundSandwich,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::PhaseTransition => "phase_transition",
            ExperimentKind::RateCheck => "rate_check",
            ExperimentKind::LrTradeoff => "lr_tradeoff",
            ExperimentKind::StoppingTime => "stopping_time",
            ExperimentKind::SingleVsMeta => "single_vs_meta",
            ExperimentKind::BoundSandwich => "bound_sandwich",
        }
    }
}

fn default_replications() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub schema: u32,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub checkpoints: CheckpointSchedule,
    /// Run simulations even when `α` is above the stability threshold.
    #[serde(default)]
    pub allow_unstable: bool,
    #[serde(default)]
    pub v2_form: V2Form,
    #[serde(default)]
    pub base: Option<ConfigSpec>,
    #[serde(default)]
    pub sweep: Sweep,
}

fn default_n1() -> usize {
    40
}
fn default_n2() -> usize {
    10
}
fn default_m() -> usize {
    40
}
fn default_noise() -> f64 {
    0.5
}

/// A problem configuration whose derived fields are given as rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigSpec {
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(default = "default_n1")]
    pub n1: usize,
    #[serde(default = "default_n2")]
    pub n2: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    pub alpha: AlphaSpec,
    #[serde(default)]
    pub beta_tr: BetaSpec,
    #[serde(default)]
    pub beta_te: BetaSpec,
    pub data_spectrum: SpectrumSpec,
    pub task_spectrum: TaskSpectrumSpec,
    #[serde(default)]
    pub theta_star: ThetaSpec,
    #[serde(default)]
    pub omega0: Option<Vec<f64>>,
    #[serde(default)]
    pub constants: RateConstants,
}

/// Outer step size: a number, or a fraction of a stability threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Value(f64),
    Rule(AlphaRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaRule {
    /// `f / (c(β_tr,Σ)·tr(Σ))` at the configuration's own `β_tr`.
    ThresholdFraction(f64),
    /// `f / (c1·tr(Σ))`, the threshold at `β_tr = 0`; independent of `β_tr`.
    StableFraction(f64),
}

/// An inner-loop rate: a number, or `{"scaled": x}` meaning `x / λ1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSpec {
    Value(f64),
    Scaled { scaled: f64 },
}

impl Default for BetaSpec {
    fn default() -> Self {
        BetaSpec::Value(0.0)
    }
}

impl BetaSpec {
    pub fn resolve(&self, sigma: &Spectrum) -> f64 {
        match *self {
            BetaSpec::Value(v) => v,
            BetaSpec::Scaled { scaled } => scaled / sigma.lambda_max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectrumSpec {
    LogDecay {
        p: f64,
    },
    Poly {
        q: f64,
    },
    Exp,
    TwoBlock {
        s: usize,
    },
    Values(Vec<f64>),
    /// A one-column CSV (header `lambda`), relative to the plan file.
    Csv(PathBuf),
}

impl SpectrumSpec {
    pub fn resolve(&self, d: usize, base_dir: &Path) -> Result<Spectrum> {
        let s = match self {
            SpectrumSpec::LogDecay { p } => Spectrum::log_decay(d, *p)?,
            SpectrumSpec::Poly { q } => Spectrum::poly(d, *q)?,
            SpectrumSpec::Exp => Spectrum::exp(d)?,
            SpectrumSpec::TwoBlock { s } => Spectrum::two_block(d, *s)?,
            SpectrumSpec::Values(v) => Spectrum::new(v.clone())?,
            SpectrumSpec::Csv(path) => {
                let path = base_dir.join(path);
                let file = std::fs::File::open(&path).map_err(|e| LabError::io(&path, e))?;
                Spectrum::read_csv(file)?
            }
        };
        crate::error::ensure_dim("data_spectrum", d, s.dim())?;
        Ok(s)
    }

    /// The decay exponent predicted for the fitted risk rate, where known.
    pub fn predicted_rate(&self) -> Option<f64> {
        match self {
            SpectrumSpec::Poly { q } => Some((q - 1.0) / q),
            SpectrumSpec::Exp => Some(1.0),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpectrumSpec {
    Zero,
    Isotropic {
        eta_sq: f64,
    },
    /// `Σθ = (trace/d)·I`.
    IsotropicTrace {
        trace: f64,
    },
    LogGrowth {
        r: f64,
        scale: f64,
    },
    Values(Vec<f64>),
    Csv(PathBuf),
}

impl TaskSpectrumSpec {
    pub fn resolve(&self, d: usize, base_dir: &Path) -> Result<TaskSpectrum> {
        let s = match self {
            TaskSpectrumSpec::Zero => TaskSpectrum::zero(d)?,
            TaskSpectrumSpec::Isotropic { eta_sq } => TaskSpectrum::isotropic(d, *eta_sq)?,
            TaskSpectrumSpec::IsotropicTrace { trace } => {
                TaskSpectrum::isotropic(d, trace / d as f64)?
            }
            TaskSpectrumSpec::LogGrowth { r, scale } => TaskSpectrum::log_growth(d, *r, *scale)?,
            TaskSpectrumSpec::Values(v) => TaskSpectrum::new(v.clone())?,
            TaskSpectrumSpec::Csv(path) => {
                let path = base_dir.join(path);
                let file = std::fs::File::open(&path).map_err(|e| LabError::io(&path, e))?;
                TaskSpectrum::read_csv(file)?
            }
        };
        crate::error::ensure_dim("task_spectrum", d, s.dim())?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThetaSpec {
    Rule(ThetaRule),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ThetaRule {
    /// A seeded draw, uniform on the unit sphere.
    RandomUnit,
    /// A seeded draw, uniform on the sphere of the given radius.
    Random { norm: f64 },
    /// Every coordinate equal to the given value.
    Constant(f64),
}

impl Default for ThetaSpec {
    fn default() -> Self {
        ThetaSpec::Rule(ThetaRule::RandomUnit)
    }
}

impl ThetaSpec {
    pub fn resolve(&self, d: usize, seed: u64) -> Result<Vec<f64>> {
        let random = |radius: f64| -> Vec<f64> {
            let mut rng = rng::stream(seed, Domain::TaskMean, 0);
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| radius * x / n).collect()
        };
        match self {
            ThetaSpec::Rule(ThetaRule::RandomUnit) => Ok(random(1.0)),
            ThetaSpec::Rule(ThetaRule::Random { norm }) => {
                if !(*norm >= 0.0 && norm.is_finite()) {
                    return Err(LabError::ParameterDomain {
                        name: "theta_star.random.norm",
                        value: *norm,
                        constraint: "norm >= 0",
                    });
                }
                Ok(random(*norm))
            }
            ThetaSpec::Rule(ThetaRule::Constant(c)) => Ok(vec![*c; d]),
            ThetaSpec::Vector(v) => {
                crate::error::ensure_dim("theta_star", d, v.len())?;
                Ok(v.clone())
            }
        }
    }
}

impl ConfigSpec {
    /// Materialises a [`ProblemConfig`]. The result is not validated against
    /// the step-size condition; callers decide whether to enforce it.
    pub fn resolve(&self, seed: u64, base_dir: &Path) -> Result<ProblemConfig> {
        let d = self.d;
        if d == 0 {
            return Err(LabError::ParameterDomain {
                name: "d",
                value: 0.0,
                constraint: "d >= 1",
            });
        }
        let data_spectrum = self.data_spectrum.resolve(d, base_dir)?;
        let task_spectrum = self.task_spectrum.resolve(d, base_dir)?;
        let beta_tr = self.beta_tr.resolve(&data_spectrum);
        let beta_te = self.beta_te.resolve(&data_spectrum);
        check_beta("|βtr| < 1/λ1", &data_spectrum, beta_tr)?;
        check_beta("|βte| < 1/λ1", &data_spectrum, beta_te)?;
        self.constants.validate()?;
        let alpha = match self.alpha {
            AlphaSpec::Value(a) => a,
            AlphaSpec::Rule(AlphaRule::ThresholdFraction(f)) => {
                f / (c_rate(&data_spectrum, beta_tr, &self.constants)? * data_spectrum.trace())
            }
            AlphaSpec::Rule(AlphaRule::StableFraction(f)) => {
                f / (c_rate(&data_spectrum, 0.0, &self.constants)? * data_spectrum.trace())
            }
        };
        let config = ProblemConfig {
            d,
            t: self.t,
            n1: self.n1,
            n2: self.n2,
            m: self.m,
            alpha,
            beta_tr,
            beta_te,
            noise_sigma: self.noise_sigma,
            theta_star: self.theta_star.resolve(d, seed)?,
            data_spectrum,
            task_spectrum,
            omega0: match &self.omega0 {
                Some(v) => v.clone(),
                None => vec![0.0; d],
            },
            seed,
            constants: self.constants,
        };
        config.validate(false)?;
        Ok(config)
    }
}

/// `ε` for stopping times: absolute, or a multiple of the best final mean
/// risk across the swept curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsilonSpec {
    Value(f64),
    BestFinal { best_final_factor: f64 },
}

/// A data spectrum with a label, for experiments that compare spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelledSpectrum {
    pub label: String,
    pub data_spectrum: SpectrumSpec,
}

fn default_battery_configs() -> usize {
    20
}
fn default_battery_dmax() -> usize {
    50
}
fn default_battery_t() -> Vec<usize> {
    vec![50, 200]
}
fn default_battery_alpha() -> f64 {
    0.5
}

/// A randomised battery of small configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatterySpec {
    #[serde(default = "default_battery_configs")]
    pub configs: usize,
    #[serde(default = "default_battery_dmax")]
    pub d_max: usize,
    /// Horizons assigned to configurations in rotation.
    #[serde(default = "default_battery_t")]
    pub t_values: Vec<usize>,
    /// `α` as a fraction of each configuration's threshold.
    #[serde(default = "default_battery_alpha")]
    pub alpha_fraction: f64,
    /// Start every chain at `θ*`, removing the bias term.
    #[serde(default)]
    pub omega0_at_theta_star: bool,
}

impl Default for BatterySpec {
    fn default() -> Self {
        BatterySpec {
            configs: default_battery_configs(),
            d_max: default_battery_dmax(),
            t_values: default_battery_t(),
            alpha_fraction: default_battery_alpha(),
            omega0_at_theta_star: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    /// Horizons at which bounds are evaluated and risks reported.
    #[serde(default)]
    pub t_grid: Option<Vec<usize>>,
    /// Task-spectrum growth exponents; replaces `r` of a `log_growth` base.
    #[serde(default)]
    pub r: Option<Vec<f64>>,
    #[serde(default)]
    pub beta_tr: Option<Vec<BetaSpec>>,
    #[serde(default)]
    pub epsilon: Option<Vec<EpsilonSpec>>,
    #[serde(default)]
    pub spectra: Option<Vec<LabelledSpectrum>>,
    #[serde(default)]
    pub battery: Option<BatterySpec>,
    /// Also run the single-task control chain (rate checks).
    #[serde(default)]
    pub single_task: bool,
    /// Decay exponent used by stopping-time envelopes on non-block spectra.
    #[serde(default)]
    pub envelope_p: Option<f64>,
}

fn non_empty<T>(axis: &'static str, v: &Option<Vec<T>>) -> Result<()> {
    match v {
        Some(list) if !list.is_empty() => Ok(()),
        _ => Err(LabError::InvalidPlan(format!(
            "sweep axis `{axis}` must be non-empty"
        ))),
    }
}

impl ExperimentPlan {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| LabError::Parse {
            what: "plan".into(),
            message: e.to_string(),
        })?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let plan: ExperimentPlan = serde_json::from_value(value).map_err(|e| LabError::Parse {
            what: "plan".into(),
            message: e.to_string(),
        })?;
        plan.check()?;
        Ok(plan)
    }

    /// Structural checks that need no spectra.
    pub fn check(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(LabError::InvalidPlan(format!(
                "unsupported schema {}; expected {SCHEMA_VERSION}",
                self.schema
            )));
        }
        if self.replications == 0 {
            return Err(LabError::InvalidPlan("replications must be >= 1".into()));
        }
        if let Some(grid) = &self.sweep.t_grid {
            if grid.contains(&0) {
                return Err(LabError::InvalidPlan("t_grid entries must be >= 1".into()));
            }
        }
        let needs_base = self.kind != ExperimentKind::BoundSandwich;
        if needs_base && self.base.is_none() {
            return Err(LabError::InvalidPlan(format!(
                "missing field `base` (required for {})",
                self.kind.as_str()
            )));
        }
        match self.kind {
            ExperimentKind::PhaseTransition => {
                non_empty("r", &self.sweep.r)?;
                match self.base.as_ref().map(|b| &b.task_spectrum) {
                    Some(TaskSpectrumSpec::LogGrowth { .. }) => {}
                    _ => {
                        return Err(LabError::InvalidPlan(
                            "phase_transition needs a log_growth task spectrum".into(),
                        ))
                    }
                }
                match self.base.as_ref().map(|b| &b.data_spectrum) {
                    Some(SpectrumSpec::LogDecay { .. }) => {}
                    _ => {
                        return Err(LabError::InvalidPlan(
                            "phase_transition needs a log_decay data spectrum".into(),
                        ))
                    }
                }
            }
            ExperimentKind::RateCheck => {
                non_empty("t_grid", &self.sweep.t_grid)?;
                if let Some(spectra) = &self.sweep.spectra {
                    if spectra.is_empty() {
                        return Err(LabError::InvalidPlan(
                            "sweep axis `spectra` must be non-empty".into(),
                        ));
                    }
                }
            }
            ExperimentKind::LrTradeoff => non_empty("beta_tr", &self.sweep.beta_tr)?,
            ExperimentKind::StoppingTime => {
                non_empty("beta_tr", &self.sweep.beta_tr)?;
                non_empty("epsilon", &self.sweep.epsilon)?;
            }
            ExperimentKind::SingleVsMeta => {}
            ExperimentKind::BoundSandwich => {
                if let Some(b) = &self.sweep.battery {
                    if b.configs == 0 || b.t_values.is_empty() || b.d_max < 2 {
                        return Err(LabError::InvalidPlan(
                            "battery needs configs >= 1, d_max >= 2 and a non-empty t_values"
                                .into(),
                        ));
                    }
                    if b.t_values.iter().any(|&t| t <= 10) {
                        return Err(LabError::InvalidPlan(
                            "battery horizons must satisfy T > 10".into(),
                        ));
                    }
                }
            }
        }
        if let Some(spectra) = &self.sweep.spectra {
            let mut labels: Vec<&str> = spectra.iter().map(|s| s.label.as_str()).collect();
            labels.sort_unstable();
            if labels.windows(2).any(|w| w[0] == w[1]) {
                return Err(LabError::InvalidPlan(
                    "spectrum labels must be unique".into(),
                ));
            }
            if spectra.iter().any(|s| {
                s.label.is_empty()
                    || !s
                        .label
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            }) {
                return Err(LabError::InvalidPlan(
                    "spectrum labels may only contain ASCII letters, digits, '_' and '-'".into(),
                ));
            }
        }
        Ok(())
    }

    /// Resolves the base configuration at the plan seed.
    pub fn base_config(&self, base_dir: &Path) -> Result<ProblemConfig> {
        self.base
            .as_ref()
            .ok_or_else(|| LabError::InvalidPlan("missing field `base`".into()))?
            .resolve(self.seed, base_dir)
    }
}

/// Applies `a.b.c=value` overrides to a plan document. The value is parsed
/// as JSON when possible and taken as a string otherwise.
pub fn apply_overrides(plan: &mut Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| LabError::InvalidPlan(format!("override `{item}` is not key=value")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(LabError::InvalidPlan(format!(
                "override `{item}` has an empty key"
            )));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut *plan;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node.as_object_mut().ok_or_else(|| {
                LabError::InvalidPlan(format!(
                    "override `{key}`: `{}` is not an object",
                    parts[..i].join(".")
                ))
            })?;
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}
