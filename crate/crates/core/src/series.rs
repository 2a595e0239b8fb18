use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A multichannel signal sampled at a fixed rate.
///
/// Stored channel-major: `channels[c][t]`. Responses (voxels, electrodes) and
/// raw waveforms share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub rate_hz: f64,
    pub channels: Vec<Vec<f64>>,
}

impl TimeSeries {
    pub fn new(rate_hz: f64, channels: Vec<Vec<f64>>) -> Result<Self> {
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::param(format!("sampling rate must be positive, got {rate_hz}")));
        }
        if let Some(first) = channels.first() {
            let n = first.len();
            if channels.iter().any(|c| c.len() != n) {
                return Err(Error::shape("channels have unequal lengths"));
            }
        }
        Ok(Self { rate_hz, channels })
    }

    pub fn single(rate_hz: f64, samples: Vec<f64>) -> Result<Self> {
        Self::new(rate_hz, vec![samples])
    }

    pub fn zeros(rate_hz: f64, n_channels: usize, n_samples: usize) -> Result<Self> {
        Self::new(rate_hz, vec![vec![0.0; n_samples]; n_channels])
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.rate_hz
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    /// Samples × channels matrix, the layout regression code works in.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_samples(), self.n_channels(), |t, c| self.channels[c][t])
    }

    pub fn from_matrix(rate_hz: f64, m: &DMatrix<f64>) -> Result<Self> {
        let channels = (0..m.ncols()).map(|c| m.column(c).iter().copied().collect()).collect();
        Self::new(rate_hz, channels)
    }

    /// Apply `f` to every channel independently, keeping the rate.
    pub fn map_channels<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        Self::new(self.rate_hz, self.channels.iter().map(|c| f(c)).collect())
    }

    /// Samples `[start, end)` of every channel.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.n_samples() {
            return Err(Error::shape(format!(
                "slice {start}..{end} out of range for {} samples",
                self.n_samples()
            )));
        }
        Self::new(self.rate_hz, self.channels.iter().map(|c| c[start..end].to_vec()).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.channels.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    /// Concatenate along time. All parts must share rate and channel count.
    pub fn concat(parts: &[TimeSeries]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::param("nothing to concatenate"))?;
        let mut channels = vec![Vec::new(); first.n_channels()];
        for p in parts {
            if p.n_channels() != first.n_channels() || p.rate_hz != first.rate_hz {
                return Err(Error::shape("concatenated series differ in rate or channel count"));
            }
            for (dst, src) in channels.iter_mut().zip(&p.channels) {
                dst.extend_from_slice(src);
            }
        }
        Self::new(first.rate_hz, channels)
    }
}
