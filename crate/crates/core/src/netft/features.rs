//! Sliding-window feature extraction and alignment to response samples.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::net::FeatureNet;
use crate::embed::FeatureMatrix;
use crate::error::{Error, Result};
use crate::series::TimeSeries;
use crate::signal::{ResampleKernel, LANCZOS_A};

/// Exclusive end sample of each window, one per stride step.
pub fn window_ends(n_samples: usize, rate_hz: f64, stride_s: f64) -> Result<Vec<usize>> {
    let step = stride_s * rate_hz;
    if !(step >= 1.0 - 1e-9) {
        return Err(Error::param(format!("stride {stride_s}s is shorter than one sample at {rate_hz} Hz")));
    }
    let n_rows = (n_samples as f64 / step + 1e-9).floor() as usize;
    Ok((1..=n_rows).map(|i| ((i as f64 * step).round() as usize).min(n_samples)).collect())
}

/// `len` samples ending (exclusive) at `end`, zero-filled before the start.
pub fn window_at(x: &[f64], end: usize, len: usize) -> Vec<f64> {
    let mut w = vec![0.0; len];
    let start = end as isize - len as isize;
    for (i, v) in w.iter_mut().enumerate() {
        let t = start + i as isize;
        if t >= 0 {
            *v = x[t as usize];
        }
    }
    w
}

fn check_stimulus(net: &FeatureNet, stimulus: &TimeSeries) -> Result<()> {
    let cfg = net.config();
    if stimulus.n_channels() != 1 {
        return Err(Error::shape(format!("stimulus must be one waveform channel, got {}", stimulus.n_channels())));
    }
    if (stimulus.rate_hz - cfg.sample_rate_hz).abs() > 1e-9 * cfg.sample_rate_hz {
        return Err(Error::shape(format!("stimulus rate {} but the net expects {}", stimulus.rate_hz, cfg.sample_rate_hz)));
    }
    if stimulus.duration_s() <= cfg.window_s {
        return Err(Error::param("stimulus is not longer than one window"));
    }
    Ok(())
}

/// One feature row per stride step; row `i` summarizes the window ending at
/// `(i + 1) · stride_s`. Output rate is `1 / stride_s`.
pub fn extract_features(net: &FeatureNet, stimulus: &TimeSeries, stride_s: f64) -> Result<FeatureMatrix> {
    check_stimulus(net, stimulus)?;
    let ends = window_ends(stimulus.n_samples(), stimulus.rate_hz, stride_s)?;
    let len = net.config().window_len();
    let x = stimulus.channel(0);
    let rows: Vec<Vec<f64>> = ends.par_iter().map(|&e| net.forward_window(&window_at(x, e, len))).collect::<Result<_>>()?;
    let d = net.feature_dim();
    FeatureMatrix::new(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]), 1.0 / stride_s)
}

/// Lanczos map from stride-rate feature rows to the first `n_out` response
/// samples.
pub fn alignment_kernel(n_rows: usize, feature_rate_hz: f64, response_rate_hz: f64, n_out: usize) -> Result<ResampleKernel> {
    let k = ResampleKernel::new(n_rows, feature_rate_hz, response_rate_hz, LANCZOS_A)?;
    if k.n_out() < n_out {
        return Err(Error::shape(format!(
            "features cover {} response samples but {} are required",
            k.n_out(),
            n_out
        )));
    }
    Ok(k)
}

pub fn apply_kernel_rows(k: &ResampleKernel, feats: &DMatrix<f64>, n_out: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n_out, feats.ncols());
    for j in 0..n_out {
        let (s, _) = k.support(j);
        for (o, w) in k.weights(j).iter().enumerate() {
            for c in 0..feats.ncols() {
                out[(j, c)] += w * feats[(s + o, c)];
            }
        }
    }
    out
}

/// Features extracted at `stride_s` and resampled onto `n_out` samples at
/// `response_rate_hz`.
pub fn aligned_features(net: &FeatureNet, stimulus: &TimeSeries, stride_s: f64, response_rate_hz: f64, n_out: usize) -> Result<FeatureMatrix> {
    let f = extract_features(net, stimulus, stride_s)?;
    let k = alignment_kernel(f.n_samples(), f.rate_hz, response_rate_hz, n_out)?;
    FeatureMatrix::new(apply_kernel_rows(&k, &f.values, n_out), response_rate_hz)
}
