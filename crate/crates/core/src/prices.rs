//! Price forecasting support: seasonal baseline forecasts, forecast-error
//! covariance estimation, and the conditioning step that turns a raw sample
//! covariance into a numerically safe risk matrix.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{sym_eigen, DenseMatrix};

/// Coarse day classification used by the seasonal baseline. The mapping
/// from calendar dates lives with the callers; the core only distinguishes
/// the two demand regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DayClass {
    Weekday,
    Weekend,
}

/// One historical day of prices, oldest-first in a history slice.
#[derive(Debug, Clone)]
pub struct DaySample {
    pub class: DayClass,
    pub values: Vec<f64>,
}

/// A (forecast, actual) pair for one day; the error vector actual-forecast
/// feeds the covariance estimator.
#[derive(Debug, Clone)]
pub struct ForecastErrorSample {
    pub forecast: Vec<f64>,
    pub actual: Vec<f64>,
}

impl ForecastErrorSample {
    pub fn error(&self) -> Vec<f64> {
        self.forecast.iter().zip(&self.actual).map(|(f, a)| a - f).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForecastError {
    /// Fewer than the minimum seven days of history.
    InsufficientHistory { days: usize },
    /// History long enough but contains no day of the requested class.
    NoMatchingDays,
    /// Days in the history disagree on length.
    MismatchedLengths,
    /// Averaging window must be at least one day.
    EmptyWindow,
}

/// Minimum history length before the seasonal baseline is considered
/// meaningful at all.
pub const MIN_HISTORY_DAYS: usize = 7;

/// Baseline forecast for the next day: the slot-wise mean of the `k` most
/// recent days in `history` sharing `class`. Requires at least
/// [`MIN_HISTORY_DAYS`] days overall and at least one matching day.
pub fn seasonal_baseline_forecast(
    history: &[DaySample],
    class: DayClass,
    k: usize,
) -> Result<Vec<f64>, ForecastError> {
    if k == 0 {
        return Err(ForecastError::EmptyWindow);
    }
    if history.len() < MIN_HISTORY_DAYS {
        return Err(ForecastError::InsufficientHistory { days: history.len() });
    }
    let len = history[0].values.len();
    if history.iter().any(|d| d.values.len() != len) {
        return Err(ForecastError::MismatchedLengths);
    }
    let recent: Vec<&DaySample> =
        history.iter().rev().filter(|d| d.class == class).take(k).collect();
    if recent.is_empty() {
        return Err(ForecastError::NoMatchingDays);
    }
    let mut out = vec![0.0f64; len];
    for day in &recent {
        for (o, v) in out.iter_mut().zip(&day.values) {
            *o += v;
        }
    }
    let inv = 1.0 / recent.len() as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceError {
    /// Need at least two error samples for a usable estimate.
    TooFewSamples { got: usize },
    /// Samples disagree on dimension, or a pair disagrees internally.
    DimensionMismatch,
    /// Zero-dimensional samples carry no information.
    EmptySample,
}

/// Sample second moment (1/N) sum e e' of the forecast errors. The errors
/// are modelled as zero-mean, so the moment is deliberately uncentered: a
/// systematic forecast bias shows up as extra risk instead of vanishing
/// into a mean estimate.
pub fn estimate_covariance(samples: &[ForecastErrorSample]) -> Result<DenseMatrix, CovarianceError> {
    if samples.len() < 2 {
        return Err(CovarianceError::TooFewSamples { got: samples.len() });
    }
    let d = samples[0].forecast.len();
    if d == 0 {
        return Err(CovarianceError::EmptySample);
    }
    for s in samples {
        if s.forecast.len() != d || s.actual.len() != d {
            return Err(CovarianceError::DimensionMismatch);
        }
    }
    let mut cov = DenseMatrix::zeros(d, d);
    for s in samples {
        let e = s.error();
        for i in 0..d {
            if e[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                cov.add_to(i, j, e[i] * e[j]);
            }
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for v in cov.data_mut() {
        *v *= inv;
    }
    Ok(cov)
}

/// Relative ridge added after eigenvalue clipping, as a fraction of the
/// average clipped eigenvalue.
pub const PSD_RIDGE_REL: f64 = 1e-8;

/// Projects a nearly-PSD matrix onto the PSD cone: symmetrize, clip
/// negative eigenvalues to zero, and add a small relative ridge so
/// downstream factorizations never sit exactly on the boundary. An
/// all-zero input stays exactly zero (risk-neutral configurations must not
/// acquire phantom risk).
pub fn condition_psd(m: &DenseMatrix) -> DenseMatrix {
    let d = m.nrows();
    assert_eq!(d, m.ncols(), "condition_psd needs a square matrix");
    if m.max_abs() == 0.0 {
        return DenseMatrix::zeros(d, d);
    }
    let mut sym = DenseMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            sym.set(i, j, 0.5 * (m.get(i, j) + m.get(j, i)));
        }
    }
    let eig = sym_eigen(&sym);
    let clipped: Vec<f64> = eig.values.iter().map(|&v| v.max(0.0)).collect();
    let trace: f64 = clipped.iter().sum();
    let ridge = PSD_RIDGE_REL * trace / d as f64;
    let mut out = DenseMatrix::zeros(d, d);
    for k in 0..d {
        let lam = clipped[k];
        if lam == 0.0 {
            continue;
        }
        for i in 0..d {
            let vik = eig.vectors.get(i, k);
            if vik == 0.0 {
                continue;
            }
            for j in 0..d {
                out.add_to(i, j, lam * vik * eig.vectors.get(j, k));
            }
        }
    }
    for i in 0..d {
        out.add_to(i, i, ridge);
    }
    // Exact symmetry by construction beats "symmetric up to rounding".
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (out.get(i, j) + out.get(j, i));
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    out
}

/// Risk matrix for a receding-horizon window: the leading principal
/// submatrix of the full-horizon template. Truncated end-of-day windows
/// keep the near-lag structure, which is where the error mass sits.
pub fn rt_window_covariance(template: &DenseMatrix, len: usize) -> DenseMatrix {
    assert!(
        len <= template.nrows(),
        "window length {} exceeds template dimension {}",
        len,
        template.nrows()
    );
    template.leading_principal(len)
}
