//! Eigenvalue spectra for the data covariance Σ and the task covariance Σθ.
//!
//! Everything in this crate lives in the shared eigenbasis of Σ, so a
//! covariance is just its list of eigenvalues. Data spectra are strictly
//! positive and non-increasing; task spectra only need to be non-negative
//! and may grow with the index.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Column header used for one-column spectrum CSV files.
pub const CSV_HEADER: &str = "lambda";

/// Eigenvalues of a data covariance, ordered `λ1 ≥ λ2 ≥ … ≥ λd > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Spectrum {
    values: Vec<f64>,
}

/// Eigenvalues `ν_i ≥ 0` of the task covariance, in the data eigenbasis.
///
/// No ordering is imposed: the task spectra of the log-growth family
/// increase with the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TaskSpectrum {
    values: Vec<f64>,
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 {
        return Err(LabError::ParameterDomain {
            name: "d",
            value: 0.0,
            constraint: "d >= 1",
        });
    }
    Ok(())
}

impl Spectrum {
    /// Validates positivity, finiteness and monotonicity.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(LabError::InvalidSpectrum("spectrum is empty".into()));
        }
        for (i, &v) in values.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(LabError::InvalidSpectrum(format!(
                    "eigenvalue {i} = {v} is not a finite positive number"
                )));
            }
        }
        if let Some(i) = values.windows(2).position(|w| w[0] < w[1]) {
            return Err(LabError::InvalidSpectrum(format!(
                "eigenvalues must be non-increasing, but lambda[{}] = {} < lambda[{}] = {}",
                i,
                values[i],
                i + 1,
                values[i + 1]
            )));
        }
        Ok(Spectrum { values })
    }

    /// `λ_k = k⁻¹ · ln⁻ᵖ(k + 1)`.
    pub fn log_decay(d: usize, p: f64) -> Result<Self> {
        check_dim(d)?;
        if !(p > 0.0 && p.is_finite()) {
            return Err(LabError::ParameterDomain {
                name: "p",
                value: p,
                constraint: "p > 0",
            });
        }
        let values = (1..=d)
            .map(|k| {
                let k = k as f64;
                1.0 / (k * (k + 1.0).ln().powf(p))
            })
            .collect();
        Spectrum::new(values)
    }

    /// `λ_k = k⁻ᵠ` for `q > 1`.
    pub fn poly(d: usize, q: f64) -> Result<Self> {
        check_dim(d)?;
        if !(q > 1.0 && q.is_finite()) {
            return Err(LabError::ParameterDomain {
                name: "q",
                value: q,
                constraint: "q > 1",
            });
        }
        Spectrum::new((1..=d).map(|k| (k as f64).powf(-q)).collect())
    }

    /// `λ_k = e⁻ᵏ`.
    pub fn exp(d: usize) -> Result<Self> {
        check_dim(d)?;
        let values: Vec<f64> = (1..=d).map(|k| (-(k as f64)).exp()).collect();
        if values.iter().any(|&v| v <= 0.0) {
            return Err(LabError::ParameterDomain {
                name: "d",
                value: d as f64,
                constraint: "e^-d representable as a positive f64 (d <= 745)",
            });
        }
        Spectrum::new(values)
    }

    /// `s` eigenvalues equal to `1/s` followed by `d - s` equal to `1/(d - s)`.
    pub fn two_block(d: usize, s: usize) -> Result<Self> {
        check_dim(d)?;
        if s == 0 || s >= d {
            return Err(LabError::ParameterDomain {
                name: "s",
                value: s as f64,
                constraint: "1 <= s < d",
            });
        }
        if d < 2 * s {
            return Err(LabError::ParameterDomain {
                name: "s",
                value: s as f64,
                constraint: "d >= 2s so the blocks are non-increasing",
            });
        }
        let head = 1.0 / s as f64;
        let tail = 1.0 / (d - s) as f64;
        let values = (0..d).map(|k| if k < s { head } else { tail }).collect();
        Spectrum::new(values)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Largest eigenvalue `λ1`.
    pub fn lambda_max(&self) -> f64 {
        self.values[0]
    }

    /// Smallest eigenvalue `λd`.
    pub fn lambda_min(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn trace(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `tr(Σ²)`.
    pub fn trace_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Recognises a two-block spectrum and returns the size of its head block.
    pub fn two_block_split(&self) -> Option<usize> {
        let first = self.values[0];
        let s = self.values.iter().take_while(|&&v| v == first).count();
        if s == self.values.len() {
            return None;
        }
        let rest = self.values[s];
        if self.values[s..].iter().all(|&v| v == rest) {
            Some(s)
        } else {
            None
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_column(writer, &self.values)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        Spectrum::new(read_column(reader)?)
    }
}

impl TaskSpectrum {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(LabError::InvalidSpectrum("task spectrum is empty".into()));
        }
        for (i, &v) in values.iter().enumerate() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LabError::InvalidSpectrum(format!(
                    "task eigenvalue {i} = {v} is not a finite non-negative number"
                )));
            }
        }
        Ok(TaskSpectrum { values })
    }

    /// `ν_k = scale · lnʳ(k + 1)`; increasing in `k`.
    pub fn log_growth(d: usize, r: f64, scale: f64) -> Result<Self> {
        check_dim(d)?;
        if !(r > 0.0 && r.is_finite()) {
            return Err(LabError::ParameterDomain {
                name: "r",
                value: r,
                constraint: "r > 0",
            });
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(LabError::ParameterDomain {
                name: "scale",
                value: scale,
                constraint: "scale > 0",
            });
        }
        TaskSpectrum::new(
            (1..=d)
                .map(|k| scale * ((k + 1) as f64).ln().powf(r))
                .collect(),
        )
    }

    /// `Σθ = η² I`.
    pub fn isotropic(d: usize, eta_sq: f64) -> Result<Self> {
        check_dim(d)?;
        if !(eta_sq > 0.0 && eta_sq.is_finite()) {
            return Err(LabError::ParameterDomain {
                name: "eta_sq",
                value: eta_sq,
                constraint: "eta_sq > 0",
            });
        }
        TaskSpectrum::new(vec![eta_sq; d])
    }

    /// `Σθ = 0`: every task parameter equals the task mean.
    pub fn zero(d: usize) -> Result<Self> {
        check_dim(d)?;
        TaskSpectrum::new(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `tr(Σθ A)` for a diagonal `A` given by its entries.
    pub fn weighted_trace(&self, diag: &[f64]) -> Result<f64> {
        crate::error::ensure_dim("task spectrum trace", self.dim(), diag.len())?;
        Ok(self.values.iter().zip(diag).map(|(n, a)| n * a).sum())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_column(writer, &self.values)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        TaskSpectrum::new(read_column(reader)?)
    }
}

impl TryFrom<Vec<f64>> for Spectrum {
    type Error = LabError;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Spectrum::new(values)
    }
}

impl From<Spectrum> for Vec<f64> {
    fn from(s: Spectrum) -> Self {
        s.values
    }
}

impl TryFrom<Vec<f64>> for TaskSpectrum {
    type Error = LabError;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        TaskSpectrum::new(values)
    }
}

impl From<TaskSpectrum> for Vec<f64> {
    fn from(s: TaskSpectrum) -> Self {
        s.values
    }
}

fn write_column<W: Write>(writer: W, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| LabError::Parse {
        what: "spectrum csv".into(),
        message: e.to_string(),
    };
    w.write_record([CSV_HEADER]).map_err(to_err)?;
    for v in values {
        w.write_record([v.to_string()]).map_err(to_err)?;
    }
    w.flush().map_err(|e| LabError::io("<spectrum csv>", e))
}

fn read_column<R: Read>(reader: R) -> Result<Vec<f64>> {
    let parse_err = |message: String| LabError::Parse {
        what: "spectrum csv".into(),
        message,
    };
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(e.to_string()))?;
    if headers.len() != 1 || &headers[0] != CSV_HEADER {
        return Err(parse_err(format!(
            "expected a single `{CSV_HEADER}` column, found {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut values = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        let v: f64 = record[0].trim().parse().map_err(|_| {
            parse_err(format!(
                "row {}: `{}` is not a number",
                line + 2,
                &record[0]
            ))
        })?;
        values.push(v);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn log_decay_matches_high_precision_values() {
        // Reference values from a 30-digit evaluation of 1/(k ln^2(k+1)).
        let s = Spectrum::log_decay(3, 2.0).unwrap();
        let expected = [
            2.081_368_981_005_607_8,
            0.414_267_724_845_111_5,
            0.173_447_415_083_800_65,
        ];
        for (v, e) in s.values().iter().zip(expected) {
            assert!(close(*v, e, 1e-14), "{v} vs {e}");
        }
        let single = Spectrum::log_decay(1, 2.0).unwrap();
        assert_eq!(single.values(), &[1.0 / 2f64.ln().powi(2)]);
    }

    #[test]
    fn log_decay_trace_converges() {
        let t = |d| Spectrum::log_decay(d, 2.0).unwrap().trace();
        let (t2, t3, t4) = (t(100), t(1000), t(10_000));
        assert!(close(t2, 3.170_951_654_705_898_8, 1e-12));
        assert!(close(t3, 3.242_985_523_043_032_5, 1e-12));
        assert!(t4 - t3 < t3 - t2);
    }

    #[test]
    fn log_decay_rejects_bad_parameters() {
        assert!(matches!(
            Spectrum::log_decay(0, 2.0),
            Err(LabError::ParameterDomain { name: "d", .. })
        ));
        assert!(matches!(
            Spectrum::log_decay(5, 0.0),
            Err(LabError::ParameterDomain { name: "p", .. })
        ));
    }

    #[test]
    fn poly_spectrum_values() {
        let s = Spectrum::poly(4, 2.0).unwrap();
        assert_eq!(s.values(), &[1.0, 0.25, 1.0 / 9.0, 0.0625]);
        assert_eq!(Spectrum::poly(1, 2.0).unwrap().values(), &[1.0]);
        assert!(Spectrum::poly(3, 1.0).is_err());
        let s = Spectrum::poly(200, 1.5).unwrap();
        // partial sum of k^-1.5, k <= 200
        assert!(close(s.trace(), 2.471_130_548_173_412, 1e-12));
        assert!(s.trace() < 2.612_375_348_685_488);
    }

    #[test]
    fn exp_spectrum_values() {
        let s = Spectrum::exp(2).unwrap();
        assert_eq!(s.values(), &[(-1f64).exp(), (-2f64).exp()]);
        let s = Spectrum::exp(50).unwrap();
        assert!(close(s.trace(), 0.581_976_706_869_326_4, 1e-13));
        assert!(Spectrum::exp(0).is_err());
    }

    #[test]
    fn two_block_spectrum() {
        let s = Spectrum::two_block(4, 1).unwrap();
        assert_eq!(s.values(), &[1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let s = Spectrum::two_block(10, 2).unwrap();
        assert_eq!(&s.values()[..2], &[0.5, 0.5]);
        assert!(s.values()[2..].iter().all(|&v| v == 0.125));
        assert!(close(s.trace(), 2.0, 1e-12));
        assert_eq!(s.two_block_split(), Some(2));
        assert!(Spectrum::two_block(4, 4).is_err());
        assert!(Spectrum::two_block(5, 3).is_err());
        assert!(Spectrum::two_block(5, 0).is_err());
        assert_eq!(Spectrum::poly(5, 2.0).unwrap().two_block_split(), None);
    }

    #[test]
    fn two_block_from_tradeoff_scaling() {
        // T = 100, p = q = 1: s = T / ln T, d = T ln T, rounded.
        let t = 100f64;
        let s = (t / t.ln()).round() as usize;
        let d = (t * t.ln()).round() as usize;
        assert_eq!((s, d), (22, 461));
        let spec = Spectrum::two_block(d, s).unwrap();
        assert!(close(spec.trace(), 2.0, 1e-12));
    }

    #[test]
    fn task_spectra() {
        let t = TaskSpectrum::log_growth(2, 1.0, 1.0).unwrap();
        assert_eq!(t.values(), &[2f64.ln(), 3f64.ln()]);
        assert!(TaskSpectrum::log_growth(3, 0.0, 1.0).is_err());
        let steep = TaskSpectrum::log_growth(500, 8.0, 0.25).unwrap();
        assert!(steep.values().windows(2).all(|w| w[0] < w[1]));
        let iso = TaskSpectrum::isotropic(3, 1.0).unwrap();
        assert_eq!(iso.values(), &[1.0, 1.0, 1.0]);
        let tradeoff_tasks = TaskSpectrum::isotropic(200, 0.8 * 0.8 / 200.0).unwrap();
        assert!(close(
            tradeoff_tasks.values().iter().sum::<f64>(),
            0.64,
            1e-12
        ));
        assert!(TaskSpectrum::zero(4).unwrap().is_zero());
        assert!(TaskSpectrum::new(vec![1.0, -1.0]).is_err());
    }

    #[test]
    fn spectrum_rejects_increasing_values() {
        assert!(Spectrum::new(vec![1.0, 2.0]).is_err());
        assert!(Spectrum::new(vec![1.0, 0.0]).is_err());
        assert!(Spectrum::new(vec![]).is_err());
        assert!(Spectrum::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn csv_and_json_forms() {
        let s = Spectrum::log_decay(7, 2.0).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("lambda\n"));
        assert_eq!(Spectrum::read_csv(buf.as_slice()).unwrap(), s);

        let json = serde_json::to_string(&s).unwrap();
        assert!(json.starts_with('['));
        let back: Spectrum = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<Spectrum>("[0.1, 0.5]").is_err());

        let bad = "nu\n1.0\n";
        assert!(Spectrum::read_csv(bad.as_bytes()).is_err());
    }
}
