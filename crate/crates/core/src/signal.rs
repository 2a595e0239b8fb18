//! Resampling, FIR band-pass filtering, analytic envelopes and Welch PSDs.
//!
//! Edge handling: filters and the resampler use zero-padded context (the
//! resampler and the response low-pass renormalize the truncated kernel).
//! The first/last `a` output samples of a resampling and `taps / 2` samples
//! of a filtering are edge-affected; analyses trim them.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

/// Default Lanczos window parameter.
pub const LANCZOS_A: usize = 3;

/// Normalized sinc, `sin(pi x) / (pi x)`.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Lanczos kernel with window parameter `a`.
pub fn lanczos(x: f64, a: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else if x.abs() >= a {
        0.0
    } else {
        sinc(x) * sinc(x / a)
    }
}

/// Sparse linear map from `n_in` samples at `src_hz` to `n_out` samples at
/// `dst_hz` with a Lanczos kernel scaled to the coarser of the two rates.
///
/// Kept as an explicit operator so gradients can flow through it
/// ([`ResampleKernel::apply_transpose`]).
#[derive(Debug, Clone)]
pub struct ResampleKernel {
    n_in: usize,
    rows: Vec<(usize, Vec<f64>)>,
}

impl ResampleKernel {
    pub fn new(n_in: usize, src_hz: f64, dst_hz: f64, a: usize) -> Result<Self> {
        if !(src_hz > 0.0 && dst_hz > 0.0) {
            return Err(Error::param(format!("rates must be positive, got {src_hz} -> {dst_hz}")));
        }
        if a == 0 {
            return Err(Error::param("lanczos window parameter must be >= 1"));
        }
        if n_in < 2 * a {
            return Err(Error::param(format!("need at least {} input samples, got {n_in}", 2 * a)));
        }
        let n_out = output_len(n_in, src_hz, dst_hz);
        let ratio = src_hz / dst_hz;
        // kernel coordinate per input sample
        let scale = src_hz.min(dst_hz) / src_hz;
        let af = a as f64;
        let half_width = af / scale;
        let rows = (0..n_out)
            .map(|j| {
                let pos = j as f64 * ratio;
                let lo = ((pos - half_width).ceil().max(0.0)) as usize;
                let hi = ((pos + half_width).floor() as isize).min(n_in as isize - 1);
                let mut w: Vec<f64> = if hi < lo as isize {
                    Vec::new()
                } else {
                    (lo..=hi as usize).map(|i| lanczos((pos - i as f64) * scale, af)).collect()
                };
                let sum: f64 = w.iter().sum();
                if sum.abs() > 1e-12 {
                    w.iter_mut().for_each(|v| *v /= sum);
                }
                (lo, w)
            })
            .collect();
        Ok(Self { n_in, rows })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.rows.len()
    }

    /// Input index range `[start, end)` feeding output `j`.
    pub fn support(&self, j: usize) -> (usize, usize) {
        let (s, w) = &self.rows[j];
        (*s, s + w.len())
    }

    pub fn weights(&self, j: usize) -> &[f64] {
        &self.rows[j].1
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_in);
        self.rows.iter().map(|(s, w)| w.iter().zip(&x[*s..]).map(|(a, b)| a * b).sum()).collect()
    }

    /// Adjoint map, `K^T y`.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_in];
        for ((s, w), &yj) in self.rows.iter().zip(y) {
            for (o, wi) in out[*s..].iter_mut().zip(w) {
                *o += wi * yj;
            }
        }
        out
    }
}

/// Number of output samples spanning the same duration.
pub fn output_len(n_in: usize, src_hz: f64, dst_hz: f64) -> usize {
    ((n_in as f64 * dst_hz / src_hz) + 1e-9).floor().max(1.0) as usize
}

pub fn resample_lanczos(ts: &TimeSeries, target_rate_hz: f64, a: usize) -> Result<TimeSeries> {
    if !(target_rate_hz > 0.0) {
        return Err(Error::param(format!("target rate must be positive, got {target_rate_hz}")));
    }
    let kernel = ResampleKernel::new(ts.n_samples(), ts.rate_hz, target_rate_hz, a)?;
    let channels = ts.channels.par_iter().map(|c| kernel.apply(c)).collect();
    TimeSeries::new(target_rate_hz, channels)
}

fn hamming(n: usize, len: usize) -> f64 {
    if len == 1 {
        1.0
    } else {
        0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos()
    }
}

/// Hamming-windowed sinc band-pass, normalized to unit gain at band center.
pub fn design_bandpass(lo_hz: f64, hi_hz: f64, rate_hz: f64, taps: usize) -> Result<Vec<f64>> {
    if taps % 2 == 0 {
        return Err(Error::param(format!("tap count must be odd, got {taps}")));
    }
    let nyq = rate_hz / 2.0;
    if !(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < nyq) {
        return Err(Error::param(format!("band {lo_hz}-{hi_hz} Hz invalid for Nyquist {nyq} Hz")));
    }
    let (f1, f2) = (lo_hz / rate_hz, hi_hz / rate_hz);
    let mid = (taps - 1) / 2;
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let m = n as f64 - mid as f64;
            (2.0 * f2 * sinc(2.0 * f2 * m) - 2.0 * f1 * sinc(2.0 * f1 * m)) * hamming(n, taps)
        })
        .collect();
    let fc = 0.5 * (f1 + f2);
    let gain: f64 = h.iter().enumerate().map(|(n, v)| v * (2.0 * PI * fc * (n as f64 - mid as f64)).cos()).sum();
    h.iter_mut().for_each(|v| *v /= gain);
    Ok(h)
}

/// Hamming-windowed sinc low-pass with unit DC gain; `cutoff` in cycles/sample.
pub fn design_lowpass(cutoff: f64, taps: usize) -> Result<Vec<f64>> {
    if taps % 2 == 0 {
        return Err(Error::param(format!("tap count must be odd, got {taps}")));
    }
    if !(cutoff > 0.0 && cutoff < 0.5) {
        return Err(Error::param(format!("cutoff {cutoff} cycles/sample outside (0, 0.5)")));
    }
    let mid = (taps - 1) / 2;
    let mut h: Vec<f64> =
        (0..taps).map(|n| 2.0 * cutoff * sinc(2.0 * cutoff * (n as f64 - mid as f64)) * hamming(n, taps)).collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    /// Samples outside the series count as zero.
    Zero,
    /// Zero context, but the kernel is rescaled by the weight that fell
    /// inside the series so constants pass unchanged.
    Renormalize,
}

/// Centered (zero-phase) convolution of `x` with an odd-length kernel `h`.
pub fn convolve_centered(x: &[f64], h: &[f64], edge: Edge) -> Vec<f64> {
    let n = x.len() as isize;
    let mid = (h.len() / 2) as isize;
    let total: f64 = h.iter().sum();
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (k, hk) in h.iter().enumerate() {
                let i = t + mid - k as isize;
                if (0..n).contains(&i) {
                    acc += hk * x[i as usize];
                    wsum += hk;
                }
            }
            match edge {
                Edge::Renormalize if wsum.abs() > 1e-12 => acc * total / wsum,
                _ => acc,
            }
        })
        .collect()
}

/// Linear-phase FIR band-pass with group-delay compensation.
pub fn bandpass_fir(ts: &TimeSeries, lo_hz: f64, hi_hz: f64, taps: usize) -> Result<TimeSeries> {
    let h = design_bandpass(lo_hz, hi_hz, ts.rate_hz, taps)?;
    let channels = ts.channels.par_iter().map(|c| convolve_centered(c, &h, Edge::Zero)).collect();
    TimeSeries::new(ts.rate_hz, channels)
}

/// Analytic signal of a real sequence via the FFT.
pub fn analytic_signal(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.process(&mut buf);
    let half = n / 2;
    for (k, v) in buf.iter_mut().enumerate() {
        let gain = if k == 0 || (n % 2 == 0 && k == half) {
            1.0
        } else if k < n.div_ceil(2) {
            2.0
        } else {
            0.0
        };
        *v *= gain;
    }
    ifft.process(&mut buf);
    let inv = 1.0 / n as f64;
    buf.iter_mut().for_each(|v| *v *= inv);
    buf
}

/// Instantaneous amplitude `|x + i H{x}|` per channel.
pub fn hilbert_envelope(ts: &TimeSeries) -> Result<TimeSeries> {
    if ts.n_channels() == 0 || ts.n_samples() == 0 {
        return Err(Error::param("empty input"));
    }
    if ts.n_samples() < 8 {
        return Err(Error::param(format!("need at least 8 samples, got {}", ts.n_samples())));
    }
    if !ts.is_finite() {
        return Err(Error::param("non-finite samples"));
    }
    let channels = ts.channels.par_iter().map(|c| analytic_signal(c).iter().map(|z| z.norm()).collect()).collect();
    TimeSeries::new(ts.rate_hz, channels)
}

pub const HIGH_GAMMA_LO_HZ: f64 = 70.0;
pub const HIGH_GAMMA_HI_HZ: f64 = 200.0;

/// Band-pass 70-200 Hz, analytic amplitude, Lanczos resample to `out_rate_hz`.
///
/// At raw rates where 200 Hz reaches Nyquist the upper edge is pulled in to
/// 0.475 × rate.
pub fn high_gamma(raw: &TimeSeries, out_rate_hz: f64) -> Result<TimeSeries> {
    if raw.rate_hz < 400.0 {
        return Err(Error::param(format!("high-gamma needs a raw rate of at least 400 Hz, got {}", raw.rate_hz)));
    }
    let hi = HIGH_GAMMA_HI_HZ.min(0.475 * raw.rate_hz);
    let mut taps = (raw.rate_hz * 0.25).round() as usize;
    if taps % 2 == 0 {
        taps += 1;
    }
    let band = bandpass_fir(raw, HIGH_GAMMA_LO_HZ, hi, taps)?;
    let env = hilbert_envelope(&band)?;
    resample_lanczos(&env, out_rate_hz, LANCZOS_A)
}

/// One-sided power spectral density per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    pub rate_hz: f64,
    pub freqs_hz: Vec<f64>,
    /// `power[channel][bin]`, units²/Hz.
    pub power: Vec<Vec<f64>>,
    pub segment_length: usize,
    pub overlap_fraction: f64,
    pub n_segments: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchConfig {
    pub segment_length: usize,
    pub overlap_fraction: f64,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self { segment_length: 64, overlap_fraction: 0.5 }
    }
}

impl PsdEstimate {
    pub fn df(&self) -> f64 {
        self.rate_hz / self.segment_length as f64
    }

    /// Trapezoidal integral of channel `c` over `[lo_hz, hi_hz]`, treating the
    /// PSD as piecewise linear between bins.
    pub fn band_power(&self, c: usize, lo_hz: f64, hi_hz: f64) -> f64 {
        integrate_piecewise_linear(&self.freqs_hz, &self.power[c], lo_hz, hi_hz)
    }

    pub fn total_power(&self, c: usize) -> f64 {
        let nyq = self.rate_hz / 2.0;
        self.band_power(c, 0.0, nyq)
    }
}

/// Exact integral of the linear interpolant through `(x, y)` over `[lo, hi]`.
pub fn integrate_piecewise_linear(x: &[f64], y: &[f64], lo: f64, hi: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..x.len().saturating_sub(1) {
        let (x0, x1) = (x[i], x[i + 1]);
        let a = x0.max(lo);
        let b = x1.min(hi);
        if b <= a {
            continue;
        }
        let slope = (y[i + 1] - y[i]) / (x1 - x0);
        let ya = y[i] + slope * (a - x0);
        let yb = y[i] + slope * (b - x0);
        total += 0.5 * (ya + yb) * (b - a);
    }
    total
}

/// Welch PSD with a periodic Hann window and per-segment mean removal.
///
/// Density scaling: summing the one-sided PSD times the bin width recovers
/// the mean-removed signal variance.
pub fn welch_psd(ts: &TimeSeries, cfg: WelchConfig) -> Result<PsdEstimate> {
    let seg = cfg.segment_length;
    if seg < 2 || !seg.is_power_of_two() {
        return Err(Error::param(format!("segment length must be a power of two >= 2, got {seg}")));
    }
    if !(0.0..1.0).contains(&cfg.overlap_fraction) {
        return Err(Error::param(format!("overlap {} outside [0, 1)", cfg.overlap_fraction)));
    }
    let n = ts.n_samples();
    if seg > n {
        return Err(Error::param(format!("segment length {seg} exceeds series length {n}")));
    }
    let step = ((seg as f64 * (1.0 - cfg.overlap_fraction)).round() as usize).max(1);
    let n_segments = (n - seg) / step + 1;
    let window: Vec<f64> = (0..seg).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / seg as f64).cos()).collect();
    let wss: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(seg);
    let n_bins = seg / 2 + 1;
    let rate = ts.rate_hz;

    let power = ts
        .channels
        .par_iter()
        .map(|x| {
            let mut acc = vec![0.0; n_bins];
            let mut buf = vec![Complex64::new(0.0, 0.0); seg];
            for s in 0..n_segments {
                let chunk = &x[s * step..s * step + seg];
                let mean = chunk.iter().sum::<f64>() / seg as f64;
                for ((b, v), w) in buf.iter_mut().zip(chunk).zip(&window) {
                    *b = Complex64::new((v - mean) * w, 0.0);
                }
                fft.process(&mut buf);
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += buf[k].norm_sqr();
                }
            }
            let norm = 1.0 / (rate * wss * n_segments as f64);
            acc.iter()
                .enumerate()
                .map(|(k, p)| {
                    let one_sided = if k == 0 || k == seg / 2 { 1.0 } else { 2.0 };
                    one_sided * p * norm
                })
                .collect()
        })
        .collect();
    let freqs_hz = (0..n_bins).map(|k| k as f64 * rate / seg as f64).collect();
    Ok(PsdEstimate { rate_hz: rate, freqs_hz, power, segment_length: seg, overlap_fraction: cfg.overlap_fraction, n_segments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn tone(rate: f64, n: usize, f: f64, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * f * i as f64 / rate).sin()).collect()
    }

    fn white(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    fn max_abs(x: &[f64]) -> f64 {
        x.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn lanczos_preserves_constants() {
        let ts = TimeSeries::single(4.0, vec![5.0; 200]).unwrap();
        for target in [0.5, 1.3, 4.0, 11.0] {
            let out = resample_lanczos(&ts, target, 3).unwrap();
            assert_eq!(out.rate_hz, target);
            assert!(out.channels[0].iter().all(|v| (v - 5.0).abs() < 1e-9), "target {target}");
        }
    }

    #[test]
    fn lanczos_same_rate_is_identity() {
        let x = white(64, 1);
        let ts = TimeSeries::single(20.0, x.clone()).unwrap();
        let out = resample_lanczos(&ts, 20.0, 3).unwrap();
        for (a, b) in out.channels[0].iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn lanczos_downsampled_sine_matches_closed_form() {
        let n = 2 * 600;
        let ts = TimeSeries::single(2.0, (0..n).map(|i| (2.0 * PI * 0.05 * i as f64 / 2.0).sin()).collect()).unwrap();
        let out = resample_lanczos(&ts, 0.5, 3).unwrap();
        assert_eq!(out.n_samples(), 300);
        let err = out.channels[0][3..297]
            .iter()
            .enumerate()
            .map(|(j, v)| (v - (2.0 * PI * 0.05 * (j + 3) as f64 / 0.5).sin()).abs())
            .fold(0.0, f64::max);
        // Lanczos-3 scaled to the output rate has passband ripple; its gain at
        // 0.1 cycles/output-sample is 1.00166, which bounds the error.
        let k: Vec<f64> = (-12i32..=12).map(|i| lanczos(i as f64 / 4.0, 3.0)).collect();
        let sum: f64 = k.iter().sum();
        let gain = (-12i32..=12)
            .zip(&k)
            .map(|(i, w)| Complex64::from_polar(w / sum, -2.0 * PI * 0.025 * i as f64))
            .sum::<Complex64>()
            .norm();
        assert!((err - (gain - 1.0).abs()).abs() < 2e-4, "max error {err}, gain {gain}");
        assert!(err < 2e-3, "max error {err}");
    }

    #[test]
    fn lanczos_duration_and_errors() {
        let ts = TimeSeries::single(4.0, vec![0.0; 240]).unwrap();
        let out = resample_lanczos(&ts, 0.5, 3).unwrap();
        assert!((out.duration_s() - ts.duration_s()).abs() <= 1.0 / 0.5);
        assert!(resample_lanczos(&ts, 0.0, 3).is_err());
        let short = TimeSeries::single(4.0, vec![0.0; 5]).unwrap();
        assert!(resample_lanczos(&short, 2.0, 3).is_err());
    }

    #[test]
    fn resample_transpose_is_adjoint() {
        let k = ResampleKernel::new(97, 4.0, 0.5, 3).unwrap();
        let x = white(97, 2);
        let y = white(k.n_out(), 3);
        let lhs: f64 = k.apply(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = k.apply_transpose(&y).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn trimmed_amplitude(x: &[f64], trim: usize) -> f64 {
        max_abs(&x[trim..x.len() - trim])
    }

    #[test]
    fn bandpass_passes_in_band_and_rejects_out_of_band() {
        let rate = 1000.0;
        let n = 4000;
        let taps = 251;
        let pass = bandpass_fir(&TimeSeries::single(rate, tone(rate, n, 135.0, 1.0)).unwrap(), 70.0, 200.0, taps).unwrap();
        let a = trimmed_amplitude(&pass.channels[0], taps);
        assert!((a - 1.0).abs() < 0.1, "in-band amplitude {a}");
        let stop = bandpass_fir(&TimeSeries::single(rate, tone(rate, n, 10.0, 1.0)).unwrap(), 70.0, 200.0, taps).unwrap();
        let s = trimmed_amplitude(&stop.channels[0], taps);
        assert!(s < 0.01, "stopband amplitude {s}");
        let zero = bandpass_fir(&TimeSeries::zeros(rate, 1, 500).unwrap(), 70.0, 200.0, taps).unwrap();
        assert!(zero.channels[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bandpass_frequency_response_spec() {
        let rate = 1000.0;
        let h = design_bandpass(70.0, 200.0, rate, 251).unwrap();
        let gain = |f: f64| {
            let (re, im) = h.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, v)| {
                let w = 2.0 * PI * f / rate * n as f64;
                (re + v * w.cos(), im - v * w.sin())
            });
            (re * re + im * im).sqrt()
        };
        let center_db = 20.0 * gain(135.0).log10();
        assert!(center_db.abs() < 1.0);
        assert!(20.0 * gain(35.0).log10() < -40.0);
        assert!(20.0 * gain(400.0).log10() < -40.0);
    }

    #[test]
    fn bandpass_rejects_bad_arguments() {
        let ts = TimeSeries::single(1000.0, vec![0.0; 100]).unwrap();
        assert!(bandpass_fir(&ts, 70.0, 600.0, 51).is_err());
        assert!(bandpass_fir(&ts, 70.0, 200.0, 50).is_err());
        assert!(bandpass_fir(&ts, 200.0, 70.0, 51).is_err());
    }

    #[test]
    fn envelope_of_cosine_is_constant() {
        let rate = 1000.0;
        let x: Vec<f64> = (0..2000).map(|i| 2.0 * (2.0 * PI * 50.0 * i as f64 / rate).cos()).collect();
        let env = hilbert_envelope(&TimeSeries::single(rate, x).unwrap()).unwrap();
        assert!(env.channels[0][100..1900].iter().all(|v| (v - 2.0).abs() < 1e-2));
        let zero = hilbert_envelope(&TimeSeries::zeros(rate, 1, 64).unwrap()).unwrap();
        assert!(zero.channels[0].iter().all(|v| *v == 0.0));
        assert!(hilbert_envelope(&TimeSeries::zeros(rate, 1, 0).unwrap()).is_err());
    }

    #[test]
    fn envelope_tracks_amplitude_modulation() {
        let rate = 1000.0;
        let n = 10_000;
        let modulator = |t: f64| 1.0 + 0.5 * (2.0 * PI * t).cos();
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / rate;
                modulator(t) * (2.0 * PI * 100.0 * t).cos()
            })
            .collect();
        let env = hilbert_envelope(&TimeSeries::single(rate, x).unwrap()).unwrap();
        for i in 500..n - 500 {
            let m = modulator(i as f64 / rate);
            assert!((env.channels[0][i] - m).abs() / m < 0.02);
        }
    }

    fn am_carrier(rate: f64, n: usize, extra_5hz: f64) -> (TimeSeries, Vec<f64>) {
        let modulator = |t: f64| 1.0 + 0.5 * (2.0 * PI * 0.5 * t).sin();
        let x = (0..n)
            .map(|i| {
                let t = i as f64 / rate;
                modulator(t) * (2.0 * PI * 135.0 * t).cos() + extra_5hz * (2.0 * PI * 5.0 * t).sin()
            })
            .collect();
        let out_n = output_len(n, rate, 20.0);
        let m = (0..out_n).map(|j| modulator(j as f64 / 20.0)).collect();
        (TimeSeries::single(rate, x).unwrap(), m)
    }

    #[test]
    fn high_gamma_tracks_modulator() {
        let (raw, m) = am_carrier(1000.0, 20_000, 0.0);
        let hg = high_gamma(&raw, 20.0).unwrap();
        assert_eq!(hg.rate_hz, 20.0);
        let trim = 10;
        let r = corr(&hg.channels[0][trim..m.len() - trim], &m[trim..m.len() - trim]);
        assert!(r > 0.99, "r = {r}");
    }

    #[test]
    fn high_gamma_ignores_low_frequencies() {
        let rate = 1000.0;
        let n = 10_000;
        let hg = high_gamma(&TimeSeries::single(rate, tone(rate, n, 10.0, 1.0)).unwrap(), 20.0).unwrap();
        assert!(max_abs(&hg.channels[0][10..hg.n_samples() - 10]) < 0.02);
        let zero = high_gamma(&TimeSeries::zeros(rate, 1, n).unwrap(), 20.0).unwrap();
        assert!(zero.channels[0].iter().all(|v| *v == 0.0));
        assert!(high_gamma(&TimeSeries::zeros(300.0, 1, n).unwrap(), 20.0).is_err());
    }

    #[test]
    fn high_gamma_invariant_to_added_5hz_component() {
        let (clean, _) = am_carrier(1000.0, 12_000, 0.0);
        let (noisy, _) = am_carrier(1000.0, 12_000, 1.0);
        let a = high_gamma(&clean, 20.0).unwrap();
        let b = high_gamma(&noisy, 20.0).unwrap();
        for (x, y) in a.channels[0][10..230].iter().zip(&b.channels[0][10..230]) {
            assert!((x - y).abs() / x.abs() < 0.05);
        }
    }

    #[test]
    fn welch_parseval_on_white_noise() {
        let x = white(1 << 14, 5);
        let ts = TimeSeries::single(100.0, x).unwrap();
        let psd = welch_psd(&ts, WelchConfig { segment_length: 256, overlap_fraction: 0.5 }).unwrap();
        assert_eq!(psd.freqs_hz.len(), 129);
        assert_eq!(psd.freqs_hz[0], 0.0);
        assert_eq!(*psd.freqs_hz.last().unwrap(), 50.0);
        assert!(psd.power[0].iter().all(|p| *p >= 0.0));
        let total = psd.total_power(0);
        assert!((total - 1.0).abs() < 0.05, "integral {total}");
    }

    #[test]
    fn welch_sine_power() {
        let rate = 64.0;
        let seg = 256;
        let f = 8.0; // exactly on bin 32
        let amp = 3.0;
        let ts = TimeSeries::single(rate, tone(rate, 8192, f, amp)).unwrap();
        let psd = welch_psd(&ts, WelchConfig { segment_length: seg, overlap_fraction: 0.5 }).unwrap();
        let peak = psd.power[0].iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(psd.freqs_hz[peak], f);
        let total = psd.total_power(0);
        assert!((total - amp * amp / 2.0).abs() / (amp * amp / 2.0) < 0.05, "total {total}");
        let near = psd.band_power(0, f - 2.0 * psd.df(), f + 2.0 * psd.df());
        assert!(near / total > 0.95);
    }

    #[test]
    fn welch_zero_and_errors() {
        let ts = TimeSeries::zeros(10.0, 2, 128).unwrap();
        let psd = welch_psd(&ts, WelchConfig { segment_length: 32, overlap_fraction: 0.5 }).unwrap();
        assert!(psd.power.iter().flatten().all(|p| *p == 0.0));
        assert!(welch_psd(&ts, WelchConfig { segment_length: 256, overlap_fraction: 0.5 }).is_err());
        assert!(welch_psd(&ts, WelchConfig { segment_length: 48, overlap_fraction: 0.5 }).is_err());
    }

    #[test]
    fn lanczos_preserves_mean_of_bandlimited_signal() {
        let rate = 20.0;
        let n = 20_000;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / rate;
                3.0 + (2.0 * PI * 0.01 * t).sin() + 0.5 * (2.0 * PI * 0.037 * t).cos()
            })
            .collect();
        let out = resample_lanczos(&TimeSeries::single(rate, x.clone()).unwrap(), 2.0, 3).unwrap();
        let m_in = x.iter().sum::<f64>() / n as f64;
        let y = &out.channels[0];
        let m_out = y.iter().sum::<f64>() / y.len() as f64;
        assert!((m_in - m_out).abs() / m_in < 1e-6, "{m_in} vs {m_out}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn envelope_positive_homogeneity(seed in any::<u64>(), c in 0.01f64..100.0) {
            let x = white(128, seed);
            let a = hilbert_envelope(&TimeSeries::single(1.0, x.clone()).unwrap()).unwrap();
            let b = hilbert_envelope(&TimeSeries::single(1.0, x.iter().map(|v| v * c).collect()).unwrap()).unwrap();
            for (u, v) in a.channels[0].iter().zip(&b.channels[0]) {
                prop_assert!((u * c - v).abs() <= 1e-9 * (1.0 + v.abs()));
            }
        }

        #[test]
        fn welch_parseval_property(seed in any::<u64>(), log_seg in 6u32..10, scale in 0.1f64..10.0) {
            let seg = 1usize << log_seg;
            let x: Vec<f64> = white(seg * 64, seed).iter().map(|v| v * scale).collect();
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let psd = welch_psd(&TimeSeries::single(10.0, x).unwrap(), WelchConfig { segment_length: seg, overlap_fraction: 0.5 }).unwrap();
            let total = psd.total_power(0);
            prop_assert!((total - var).abs() / var < 0.05, "total {} var {}", total, var);
        }
    }
}
