//! Evaluation maths: repeat-based SNR spectra, residual PSD changes,
//! response downsampling, scaling fits and the statistics used on them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::series::TimeSeries;
use crate::signal::{convolve_centered, design_lowpass, welch_psd, Edge, PsdEstimate, WelchConfig};

/// Stand-in for an infinite SNR when a bin has no noise power.
pub const SNR_CAP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrSpectrum {
    pub freqs_hz: Vec<f64>,
    /// `snr[channel][bin]`.
    pub snr: Vec<Vec<f64>>,
    pub n_repeats: usize,
    pub bias_corrected: bool,
    /// Bins whose SNR hit `SNR_CAP`.
    pub n_capped: usize,
}

impl SnrSpectrum {
    /// Mean SNR over channels and over bins with `lo < f <= hi`.
    pub fn band_mean(&self, lo_hz: f64, hi_hz: f64) -> f64 {
        let bins: Vec<usize> = (0..self.freqs_hz.len()).filter(|&k| self.freqs_hz[k] > lo_hz && self.freqs_hz[k] <= hi_hz).collect();
        if bins.is_empty() || self.snr.is_empty() {
            return f64::NAN;
        }
        let total: f64 = self.snr.iter().map(|c| bins.iter().map(|&k| c[k]).sum::<f64>()).sum();
        total / (bins.len() * self.snr.len()) as f64
    }

    /// Per-channel band mean.
    pub fn channel_band_mean(&self, c: usize, lo_hz: f64, hi_hz: f64) -> f64 {
        let v: Vec<f64> = (0..self.freqs_hz.len()).filter(|&k| self.freqs_hz[k] > lo_hz && self.freqs_hz[k] <= hi_hz).map(|k| self.snr[c][k]).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// SNR per frequency from repeated presentations.
///
/// Noise is each repeat minus the repeat mean; its PSD is scaled by
/// n/(n-1) because the deviations from the sample mean shrink the noise
/// variance by that factor. With `bias_correct`, the signal PSD is reduced
/// by the noise left in the mean, 1/n of the noise PSD, and clamped at zero.
pub fn snr_spectrum(repeats: &[TimeSeries], cfg: WelchConfig, bias_correct: bool) -> Result<SnrSpectrum> {
    let n = repeats.len();
    if n < 2 {
        return Err(Error::param(format!("SNR needs at least two repeats, got {n}")));
    }
    let first = &repeats[0];
    if repeats.iter().any(|r| r.n_channels() != first.n_channels() || r.n_samples() != first.n_samples() || r.rate_hz != first.rate_hz) {
        return Err(Error::shape("repeats differ in shape or rate"));
    }
    let mean = crate::tensor_io::mean_of(repeats)?;
    let sig = welch_psd(&mean, cfg)?;
    let mut noise: Vec<Vec<f64>> = vec![vec![0.0; sig.freqs_hz.len()]; first.n_channels()];
    for r in repeats {
        let dev = TimeSeries::new(
            r.rate_hz,
            r.channels.iter().zip(&mean.channels).map(|(a, m)| a.iter().zip(m).map(|(x, y)| x - y).collect()).collect(),
        )?;
        let p = welch_psd(&dev, cfg)?;
        for (acc, pc) in noise.iter_mut().zip(&p.power) {
            acc.iter_mut().zip(pc).for_each(|(a, v)| *a += v);
        }
    }
    let scale = 1.0 / (n as f64 - 1.0);
    let mut n_capped = 0;
    let snr = sig
        .power
        .iter()
        .zip(&noise)
        .map(|(s, nz)| {
            s.iter()
                .zip(nz)
                .map(|(&ps, &pn_sum)| {
                    let pn = pn_sum * scale;
                    let ps = if bias_correct { (ps - pn / n as f64).max(0.0) } else { ps };
                    if pn <= ps * 1e-12 || pn == 0.0 {
                        if ps > 0.0 || pn == 0.0 {
                            n_capped += 1;
                            return SNR_CAP;
                        }
                    }
                    (ps / pn).min(SNR_CAP)
                })
                .collect()
        })
        .collect();
    Ok(SnrSpectrum { freqs_hz: sig.freqs_hz, snr, n_repeats: n, bias_corrected: bias_correct, n_capped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdDelta {
    pub freqs_hz: Vec<f64>,
    /// `delta[channel][bin]` = PSD_b − PSD_a.
    pub delta: Vec<Vec<f64>>,
    pub threshold_hz: f64,
    /// Per-channel percentage change of integrated power below the threshold.
    pub pct_below: Vec<f64>,
    pub pct_above: Vec<f64>,
    /// Percentage change of channel-summed power in each band.
    pub total_pct_below: f64,
    pub total_pct_above: f64,
    pub psd_a: PsdEstimate,
    pub psd_b: PsdEstimate,
}

fn pct(a: f64, b: f64) -> f64 {
    if a > 0.0 { 100.0 * (b - a) / a } else { 0.0 }
}

/// Change in residual PSD from model a to model b.
pub fn residual_psd_delta(resid_a: &TimeSeries, resid_b: &TimeSeries, cfg: WelchConfig, threshold_hz: f64) -> Result<PsdDelta> {
    if resid_a.n_channels() != resid_b.n_channels() || resid_a.n_samples() != resid_b.n_samples() || resid_a.rate_hz != resid_b.rate_hz {
        return Err(Error::shape("residual series differ in shape or rate"));
    }
    let pa = welch_psd(resid_a, cfg)?;
    let pb = welch_psd(resid_b, cfg)?;
    let nyq = pa.rate_hz / 2.0;
    if !(threshold_hz > 0.0 && threshold_hz < nyq) {
        return Err(Error::param(format!("threshold {threshold_hz} Hz outside (0, {nyq})")));
    }
    let delta = pa.power.iter().zip(&pb.power).map(|(a, b)| a.iter().zip(b).map(|(x, y)| y - x).collect()).collect();
    let c = pa.power.len();
    let band = |p: &PsdEstimate, ch: usize, lo: f64, hi: f64| p.band_power(ch, lo, hi);
    let pct_below: Vec<f64> = (0..c).map(|ch| pct(band(&pa, ch, 0.0, threshold_hz), band(&pb, ch, 0.0, threshold_hz))).collect();
    let pct_above: Vec<f64> = (0..c).map(|ch| pct(band(&pa, ch, threshold_hz, nyq), band(&pb, ch, threshold_hz, nyq))).collect();
    let sum = |p: &PsdEstimate, lo: f64, hi: f64| (0..c).map(|ch| band(p, ch, lo, hi)).sum::<f64>();
    Ok(PsdDelta {
        freqs_hz: pa.freqs_hz.clone(),
        delta,
        threshold_hz,
        pct_below,
        pct_above,
        total_pct_below: pct(sum(&pa, 0.0, threshold_hz), sum(&pb, 0.0, threshold_hz)),
        total_pct_above: pct(sum(&pa, threshold_hz, nyq), sum(&pb, threshold_hz, nyq)),
        psd_a: pa,
        psd_b: pb,
    })
}

/// Anti-alias low-pass at 0.8 of the new Nyquist, then keep every
/// `factor`-th sample starting at the first.
pub fn downsample_responses(resp: &TimeSeries, factor: usize) -> Result<TimeSeries> {
    if factor < 2 {
        return Err(Error::param(format!("downsampling factor must be >= 2, got {factor}")));
    }
    let taps = 10 * factor + 1;
    if resp.n_samples() < taps {
        return Err(Error::param(format!("series of {} samples shorter than the {taps}-tap filter", resp.n_samples())));
    }
    let h = design_lowpass(0.8 * 0.5 / factor as f64, taps)?;
    let channels = resp
        .channels
        .iter()
        .map(|x| convolve_centered(x, &h, Edge::Renormalize).into_iter().step_by(factor).collect())
        .collect();
    TimeSeries::new(resp.rate_hz / factor as f64, channels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub story_counts: Vec<usize>,
    /// Per channel: Δscore per doubling of the story count.
    pub slope: Vec<f64>,
    pub intercept: Vec<f64>,
    pub r2: Vec<f64>,
    /// Standard error of the mean score at each story count, when known.
    #[serde(default)]
    pub bootstrap_se: Vec<f64>,
}

impl ScalingFit {
    pub fn mean_slope(&self) -> f64 {
        self.slope.iter().sum::<f64>() / self.slope.len().max(1) as f64
    }
}

/// Per-channel least squares of `score(N) − baseline` on log2 N.
pub fn fit_scaling(scores: &BTreeMap<usize, Vec<f64>>, baseline: &[f64]) -> Result<ScalingFit> {
    if scores.len() < 2 {
        return Err(Error::param("scaling fit needs at least two story counts"));
    }
    if scores.keys().any(|&n| n == 0) {
        return Err(Error::param("story counts must be positive"));
    }
    if scores.values().any(|v| v.len() != baseline.len()) {
        return Err(Error::shape("score vectors and baseline differ in length"));
    }
    let counts: Vec<usize> = scores.keys().copied().collect();
    let x: Vec<f64> = counts.iter().map(|&n| (n as f64).log2()).collect();
    let m = x.len() as f64;
    let xm = x.iter().sum::<f64>() / m;
    let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    let mut slope = Vec::with_capacity(baseline.len());
    let mut intercept = Vec::with_capacity(baseline.len());
    let mut r2 = Vec::with_capacity(baseline.len());
    for (c, b) in baseline.iter().enumerate() {
        let y: Vec<f64> = scores.values().map(|v| v[c] - b).collect();
        let ym = y.iter().sum::<f64>() / m;
        let sxy: f64 = x.iter().zip(&y).map(|(a, v)| (a - xm) * (v - ym)).sum();
        let s = sxy / sxx;
        let i = ym - s * xm;
        let ss_tot: f64 = y.iter().map(|v| (v - ym).powi(2)).sum();
        let ss_res: f64 = x.iter().zip(&y).map(|(a, v)| (v - i - s * a).powi(2)).sum();
        slope.push(s);
        intercept.push(i);
        r2.push(if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 });
    }
    Ok(ScalingFit { story_counts: counts, slope, intercept, r2, bootstrap_se: Vec::new() })
}

/// Ordinary least-squares standard error of the slope of `y` on `x`.
pub fn ols_slope_se(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return Err(Error::param("slope SE needs at least three paired points"));
    }
    let xm = x.iter().sum::<f64>() / n as f64;
    let ym = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Numerical("all x values equal".into()));
    }
    let s = x.iter().zip(y).map(|(a, b)| (a - xm) * (b - ym)).sum::<f64>() / sxx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - ym - s * (a - xm)).powi(2)).sum();
    Ok((rss / (n as f64 - 2.0) / sxx).sqrt())
}

/// Indices of channels whose score is strictly above `rho_min`.
pub fn threshold_channels(scores: &[f64], rho_min: f64) -> Vec<usize> {
    let out: Vec<usize> = scores.iter().enumerate().filter(|(_, s)| **s > rho_min).map(|(i, _)| i).collect();
    if out.is_empty() {
        log::warn!("no channel scores above {rho_min}");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub dof: usize,
    pub mean_diff: f64,
    /// Set when every difference is identical.
    pub degenerate: bool,
}

/// Paired t-test on `b − a`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 3 {
        return Err(Error::param(format!("paired t-test needs at least three pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let dof = n - 1;
    if var == 0.0 || d.iter().all(|v| *v == d[0]) {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(TTest { t, p, dof, mean_diff: mean, degenerate: true });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest { t, p, dof, mean_diff: mean, degenerate: false })
}

/// Bootstrap standard error of a vector statistic over `n_items`
/// resampled with replacement; one SE per statistic component.
pub fn bootstrap_se<F>(n_items: usize, n_boot: usize, seed: u64, statistic: F) -> Result<Vec<f64>>
where
    F: Fn(&[usize]) -> Vec<f64>,
{
    if n_boot < 2 {
        return Err(Error::param(format!("bootstrap needs at least two resamples, got {n_boot}")));
    }
    if n_items < 2 {
        return Err(Error::param("bootstrap needs at least two items"));
    }
    let mut rng = rng_for(seed, "bootstrap", 0);
    let mut idx = vec![0usize; n_items];
    let mut draws: Vec<Vec<f64>> = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..n_items));
        draws.push(statistic(&idx));
    }
    let k = draws[0].len();
    if draws.iter().any(|d| d.len() != k) {
        return Err(Error::shape("bootstrap statistic changed length"));
    }
    Ok((0..k)
        .map(|j| {
            let m = draws.iter().map(|d| d[j]).sum::<f64>() / n_boot as f64;
            (draws.iter().map(|d| (d[j] - m).powi(2)).sum::<f64>() / (n_boot as f64 - 1.0)).sqrt()
        })
        .collect())
}

/// Bootstrap SE of the mean of `values`.
pub fn bootstrap_mean_se(values: &[f64], n_boot: usize, seed: u64) -> Result<f64> {
    let se = bootstrap_se(values.len(), n_boot, seed, |idx| vec![idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64])?;
    Ok(se[0])
}

/// Write a CSV table with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Mean SNR per band, one row per band: `lo_hz,hi_hz,mean_snr`.
pub fn snr_band_rows(s: &SnrSpectrum, edges_hz: &[f64]) -> Vec<Vec<String>> {
    edges_hz
        .windows(2)
        .map(|w| vec![fmt(w[0]), fmt(w[1]), fmt(s.band_mean(w[0], w[1]))])
        .collect()
}

/// Per-bin channel-mean ΔPSD with its standard error across channels.
pub fn psd_delta_rows(d: &PsdDelta) -> Vec<Vec<String>> {
    let c = d.delta.len() as f64;
    (0..d.freqs_hz.len())
        .map(|k| {
            let v: Vec<f64> = d.delta.iter().map(|ch| ch[k]).collect();
            let m = v.iter().sum::<f64>() / c;
            let se = if c > 1.0 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (c - 1.0) / c).sqrt() } else { 0.0 };
            vec![fmt(d.freqs_hz[k]), fmt(m), fmt(se)]
        })
        .collect()
}

pub fn fmt(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v:.9e}").expect("write to string");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{add_noise, make_latent, make_repeats, render_slow, HrfParams, NoiseSpec};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::PI;

    fn white(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    fn var(x: &[f64]) -> f64 {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
    }

    const WELCH: WelchConfig = WelchConfig { segment_length: 64, overlap_fraction: 0.5 };

    #[test]
    fn identical_repeats_hit_the_cap() {
        let ts = TimeSeries::single(0.5, white(600, 1)).unwrap();
        let s = snr_spectrum(&[ts.clone(), ts.clone(), ts], WELCH, true).unwrap();
        assert!(s.snr[0].iter().all(|v| *v == SNR_CAP));
        assert_eq!(s.n_capped, s.freqs_hz.len());
        assert!(snr_spectrum(&[TimeSeries::single(0.5, white(600, 1)).unwrap()], WELCH, true).is_err());
    }

    #[test]
    fn pure_noise_snr_is_near_zero_only_with_correction() {
        let reps: Vec<TimeSeries> = (0..10).map(|i| TimeSeries::new(0.5, (0..4).map(|c| white(2000, 100 * i + c)).collect()).unwrap()).collect();
        let on = snr_spectrum(&reps, WELCH, true).unwrap();
        let off = snr_spectrum(&reps, WELCH, false).unwrap();
        let m_on = on.band_mean(0.0, 0.25);
        let m_off = off.band_mean(0.0, 0.25);
        assert!(m_on < 0.05, "corrected {m_on}");
        assert!((m_off - 1.0 / 9.0).abs() < 0.03, "uncorrected {m_off}");
        assert!(on.snr.iter().flatten().all(|v| *v >= 0.0));
    }

    #[test]
    fn injected_band_snrs_are_recovered() {
        let latent = make_latent(4000.0, 1, 20.0, 3).unwrap();
        let mix = DMatrix::from_fn(1, 8, |_, j| 1.0 + 0.1 * j as f64);
        let clean = render_slow(&latent, &mix, &HrfParams::default(), 0.5).unwrap();
        let spec = NoiseSpec::two_band(0.125, 0.155, 0.114);
        let seeds: Vec<u64> = (0..10).collect();
        let reps = make_repeats(&clean, &spec, &seeds).unwrap();
        let s = snr_spectrum(&reps, WelchConfig { segment_length: 128, overlap_fraction: 0.5 }, true).unwrap();
        let below = s.band_mean(0.0, 0.125);
        let above = s.band_mean(0.125, 0.25);
        assert!((below - 0.155).abs() / 0.155 < 0.1, "below {below}");
        assert!((above - 0.114).abs() / 0.114 < 0.1, "above {above}");
    }

    #[test]
    fn residual_delta_scaling_and_identity() {
        let a = TimeSeries::new(20.0, vec![white(4096, 2), white(4096, 3)]).unwrap();
        let same = residual_psd_delta(&a, &a, WELCH, 0.25).unwrap();
        assert!(same.delta.iter().flatten().all(|v| *v == 0.0));
        let b = TimeSeries::new(20.0, a.channels.iter().map(|c| c.iter().map(|v| 0.99 * v).collect()).collect()).unwrap();
        let d = residual_psd_delta(&a, &b, WELCH, 0.25).unwrap();
        let expect = (0.99f64.powi(2) - 1.0) * 100.0;
        for v in d.pct_below.iter().chain(&d.pct_above) {
            assert!((v - expect).abs() < 1e-9, "{v}");
        }
        let short = TimeSeries::single(20.0, white(4096, 4)).unwrap();
        assert!(residual_psd_delta(&a, &short, WELCH, 0.25).is_err());
    }

    #[test]
    fn removed_component_shows_up_at_its_frequency() {
        let rate = 20.0;
        let n = 8192;
        let base = white(n, 5);
        let a: Vec<f64> = base.iter().enumerate().map(|(i, v)| v + 2.0 * (2.0 * PI * 0.3 * i as f64 / rate).sin()).collect();
        let d = residual_psd_delta(
            &TimeSeries::single(rate, a).unwrap(),
            &TimeSeries::single(rate, base).unwrap(),
            WelchConfig { segment_length: 1024, overlap_fraction: 0.5 },
            0.25,
        )
        .unwrap();
        let (kmin, vmin) = d.delta[0].iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1)).unwrap();
        assert!((d.freqs_hz[kmin] - 0.3).abs() < 0.05);
        let far: f64 = d.freqs_hz.iter().zip(&d.delta[0]).filter(|(f, _)| (**f - 0.3).abs() > 0.2).map(|(_, v)| v.abs()).fold(0.0, f64::max);
        assert!(far < 1e-3 * vmin.abs(), "far {far} vs {vmin}");
    }

    #[test]
    fn residual_delta_integrates_to_variance_difference() {
        let rate = 20.0;
        let a = white(8192, 6);
        let b: Vec<f64> = a.iter().zip(white(8192, 7)).map(|(x, y)| 0.9 * x + 0.2 * y).collect();
        let d = residual_psd_delta(&TimeSeries::single(rate, a.clone()).unwrap(), &TimeSeries::single(rate, b.clone()).unwrap(), WELCH, 0.25).unwrap();
        let integral = crate::signal::integrate_piecewise_linear(&d.freqs_hz, &d.delta[0], 0.0, rate / 2.0);
        let dv = var(&b) - var(&a);
        assert!((integral - dv).abs() / dv.abs() < 0.05, "{integral} vs {dv}");
    }

    fn sine(rate: f64, n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / rate).sin()).collect()
    }

    #[test]
    fn downsampling_examples() {
        let ts = TimeSeries::single(0.5, white(300, 8)).unwrap();
        let d = downsample_responses(&ts, 2).unwrap();
        assert_eq!((d.n_samples(), d.rate_hz), (150, 0.25));
        let c = downsample_responses(&TimeSeries::single(0.5, vec![3.0; 300]).unwrap(), 2).unwrap();
        assert!(c.channels[0].iter().all(|v| (v - 3.0).abs() < 1e-12));
        let amp = |f: f64| {
            let y = downsample_responses(&TimeSeries::single(0.5, sine(0.5, 2000, f)).unwrap(), 2).unwrap();
            (2.0 * var(&y.channels[0][20..980])).sqrt()
        };
        assert!((amp(0.02) - 1.0).abs() < 0.02, "{}", amp(0.02));
        assert!(amp(0.2) < 0.1, "{}", amp(0.2));
        assert!(downsample_responses(&TimeSeries::single(0.5, vec![0.0; 15]).unwrap(), 2).is_err());
        assert!(downsample_responses(&ts, 1).is_err());
    }

    fn planted(counts: &[usize], slopes: &[f64]) -> BTreeMap<usize, Vec<f64>> {
        counts.iter().map(|&n| (n, slopes.iter().map(|m| m * (n as f64).log2()).collect())).collect()
    }

    #[test]
    fn scaling_fit_examples() {
        let f = fit_scaling(&planted(&[1, 2, 4, 8, 16], &[0.01, 0.0, -0.02]), &[0.0; 3]).unwrap();
        assert!((f.slope[0] - 0.01).abs() < 1e-12 && f.slope[1] == 0.0 && (f.slope[2] + 0.02).abs() < 1e-12);
        assert!((f.r2[0] - 1.0).abs() < 1e-12);
        let two: BTreeMap<usize, Vec<f64>> = [(1, vec![0.5]), (4, vec![0.52])].into_iter().collect();
        let f2 = fit_scaling(&two, &[0.5]).unwrap();
        assert!((f2.slope[0] - 0.01).abs() < 1e-15);
        let one: BTreeMap<usize, Vec<f64>> = [(4, vec![0.5])].into_iter().collect();
        assert!(fit_scaling(&one, &[0.5]).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(threshold_channels(&[0.05, 0.1, 0.15], 0.1), vec![2]);
        assert!(threshold_channels(&[0.0, 0.05], 0.1).is_empty());
    }

    #[test]
    fn ttest_examples() {
        let a = [0.1, 0.2, 0.3];
        let same = paired_ttest(&a, &a).unwrap();
        assert_eq!((same.t, same.p, same.degenerate), (0.0, 1.0, true));
        let t = paired_ttest(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((t.t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert!((t.p - 0.0742).abs() < 1e-4, "p = {}", t.p);
        let x = white(50, 9);
        let y: Vec<f64> = x.iter().zip(white(50, 10)).map(|(a, e)| a + 2.0 + 0.1 * e).collect();
        assert!(paired_ttest(&x, &y).unwrap().p < 1e-6);
        assert!(paired_ttest(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bootstrap_examples() {
        let c = bootstrap_se(10, 200, 1, |_| vec![4.0]).unwrap();
        assert_eq!(c, vec![0.0]);
        let x = white(200, 11);
        let se = bootstrap_mean_se(&x, 1000, 2).unwrap();
        let analytic = (var(&x) * 200.0 / 199.0).sqrt() / (200f64).sqrt();
        assert!((se - analytic).abs() / analytic < 0.2, "{se} vs {analytic}");
        assert_eq!(se, bootstrap_mean_se(&x, 1000, 2).unwrap());
        assert!(bootstrap_se(10, 1, 1, |_| vec![0.0]).is_err());
    }

    #[test]
    fn noise_spec_and_snr_agree_on_flat_series() {
        let clean = TimeSeries::new(0.5, (0..4).map(|c| white(4000, 200 + c)).collect()).unwrap();
        let spec = NoiseSpec::flat(0.5);
        let reps: Vec<TimeSeries> = (0..10).map(|i| add_noise(&clean, &spec, 300 + i).unwrap()).collect();
        let s = snr_spectrum(&reps, WELCH, true).unwrap();
        let m = s.band_mean(0.0, 0.25);
        assert!((m - 0.5).abs() / 0.5 < 0.1, "{m}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn snr_is_scale_invariant(scale in 0.01f64..100.0, seed in 0u64..1000) {
            let clean = white(512, seed);
            let reps: Vec<TimeSeries> = (0..4).map(|i| {
                let e = white(512, seed + 1 + i);
                TimeSeries::single(0.5, clean.iter().zip(&e).map(|(a, b)| a + 2.0 * b).collect()).unwrap()
            }).collect();
            let scaled: Vec<TimeSeries> = reps.iter().map(|r| TimeSeries::single(0.5, r.channels[0].iter().map(|v| v * scale).collect()).unwrap()).collect();
            let a = snr_spectrum(&reps, WELCH, true).unwrap();
            let b = snr_spectrum(&scaled, WELCH, true).unwrap();
            for (x, y) in a.snr[0].iter().zip(&b.snr[0]) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-12));
            }
        }

        #[test]
        fn planted_scaling_law_is_exact(m in -0.05f64..0.05, b in -0.5f64..0.5, base in 0.0f64..0.5) {
            let scores: BTreeMap<usize, Vec<f64>> = [1usize, 2, 4, 8, 16].iter().map(|&n| (n, vec![base + b + m * (n as f64).log2()])).collect();
            let f = fit_scaling(&scores, &[base]).unwrap();
            prop_assert!((f.slope[0] - m).abs() < 1e-9);
            prop_assert!((f.intercept[0] - b).abs() < 1e-9);
        }

        #[test]
        fn threshold_matches_filter(scores in proptest::collection::vec(-1.0f64..1.0, 0..40), t in -1.0f64..1.0) {
            let brute: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > t).collect();
            prop_assert_eq!(threshold_channels(&scores, t), brute);
        }
    }
}
