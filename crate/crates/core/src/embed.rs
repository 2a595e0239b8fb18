//! Regression design matrices: FIR delay embedding for slow responses and
//! single-lag shifts for fast responses. Delays and lags are in samples.
//! Out-of-range rows are zero-filled so design and response stay on one clock.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Samples × features at a stated rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: DMatrix<f64>,
    pub rate_hz: f64,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>, rate_hz: f64) -> Result<Self> {
        if !(rate_hz > 0.0) {
            return Err(Error::param(format!("feature rate must be positive, got {rate_hz}")));
        }
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::shape("feature matrix must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("feature matrix has non-finite values"));
        }
        Ok(Self { values, rate_hz })
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayedDesign {
    pub values: DMatrix<f64>,
    pub delays: Vec<usize>,
}

/// Row `t`, block `k` holds source row `t - delays[k]`.
pub fn delay_embed(feats: &FeatureMatrix, delays: &[usize]) -> Result<DelayedDesign> {
    if delays.is_empty() {
        return Err(Error::param("delay list is empty"));
    }
    if delays.contains(&0) {
        return Err(Error::param("delays must be strictly positive"));
    }
    let mut sorted = delays.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != delays.len() {
        return Err(Error::param("delays must be distinct"));
    }
    let n = feats.n_samples();
    let f = feats.feature_dim();
    let mut out = DMatrix::zeros(n, f * delays.len());
    for (k, &d) in delays.iter().enumerate() {
        if d >= n {
            continue;
        }
        out.view_mut((d, k * f), (n - d, f)).copy_from(&feats.values.rows(0, n - d));
    }
    Ok(DelayedDesign { values: out, delays: delays.to_vec() })
}

/// Shift rows by `tau` samples: row `t` becomes source row `t - tau`.
/// Negative `tau` moves features earlier (response leads stimulus).
pub fn lag_shift(feats: &FeatureMatrix, tau: i64) -> Result<FeatureMatrix> {
    Ok(FeatureMatrix { values: shift_rows(&feats.values, tau)?, rate_hz: feats.rate_hz })
}

pub fn shift_rows(m: &DMatrix<f64>, tau: i64) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mag = tau.unsigned_abs() as usize;
    if mag >= n {
        return Err(Error::param(format!("shift {tau} too large for {n} samples")));
    }
    let mut out = DMatrix::zeros(n, m.ncols());
    if tau >= 0 {
        out.rows_mut(mag, n - mag).copy_from(&m.rows(0, n - mag));
    } else {
        out.rows_mut(0, n - mag).copy_from(&m.rows(mag, n - mag));
    }
    Ok(out)
}

/// Evenly spaced integer sample lags from `lo_s` to `hi_s` seconds.
pub fn lag_grid(lo_s: f64, hi_s: f64, count: usize, rate_hz: f64) -> Result<Vec<i64>> {
    if count == 0 {
        return Err(Error::param("lag count must be positive"));
    }
    let lo = lo_s * rate_hz;
    let hi = hi_s * rate_hz;
    let near_int = |x: f64| (x - x.round()).abs() < 1e-9;
    if !near_int(lo) || !near_int(hi) {
        return Err(Error::param(format!("lag endpoints {lo_s}s, {hi_s}s are not whole samples at {rate_hz} Hz")));
    }
    if count == 1 {
        if lo.round() != hi.round() {
            return Err(Error::param("a single lag needs lo == hi"));
        }
        return Ok(vec![lo.round() as i64]);
    }
    if hi < lo {
        return Err(Error::param("lag grid upper end below lower end"));
    }
    let step = (hi - lo) / (count - 1) as f64;
    if !near_int(step) {
        return Err(Error::param(format!("lag step {step} samples is not an integer")));
    }
    let (lo, step) = (lo.round() as i64, step.round() as i64);
    Ok((0..count as i64).map(|i| lo + i * step).collect())
}
