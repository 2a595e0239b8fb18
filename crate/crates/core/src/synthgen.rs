//! Synthetic cross-modality data: one latent drive per story, rendered as a
//! stimulus waveform, as slow HRF-convolved responses and as fast delayed
//! envelope responses, with band-wise noise at prescribed SNRs.

use std::collections::HashSet;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::netft::Story;
use crate::rng::{derive_seed, rng_for};
use crate::series::TimeSeries;
use crate::signal::{convolve_centered, resample_lanczos, Edge, LANCZOS_A};

/// Samples × K latent channels at `rate_hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDrive {
    pub values: DMatrix<f64>,
    pub rate_hz: f64,
    pub seed: u64,
}

impl LatentDrive {
    pub fn n_latents(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn impulse(n_samples: usize, rate_hz: f64, at: usize) -> Self {
        let mut values = DMatrix::zeros(n_samples, 1);
        values[(at, 0)] = 1.0;
        Self { values, rate_hz, seed: 0 }
    }
}

/// Latent-to-channel maps shared by every story of one synthetic subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixing {
    /// K × C_slow.
    pub slow: DMatrix<f64>,
    /// K × C_fast.
    pub fast: DMatrix<f64>,
}

impl Mixing {
    pub fn random(k: usize, c_slow: usize, c_fast: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "mixing", 0);
        let sd = 1.0 / (k as f64).sqrt();
        let d = Normal::new(0.0, sd).expect("finite sd");
        let slow = DMatrix::from_fn(k, c_slow, |_, _| d.sample(&mut rng));
        let fast = DMatrix::from_fn(k, c_fast, |_, _| d.sample(&mut rng));
        Self { slow, fast }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrfParams {
    /// Time of the positive peak.
    pub peak_s: f64,
    /// Time of the undershoot trough.
    pub undershoot_s: f64,
    /// Undershoot amplitude relative to the peak lobe.
    pub undershoot_ratio: f64,
    pub length_s: f64,
}

impl Default for HrfParams {
    fn default() -> Self {
        Self { peak_s: 4.0, undershoot_s: 10.0, undershoot_ratio: 1.0 / 6.0, length_s: 32.0 }
    }
}

fn gamma_pdf(t: f64, shape: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        ((shape - 1.0) * t.ln() - t - ln_gamma(shape)).exp()
    }
}

impl HrfParams {
    pub fn validate(&self) -> Result<()> {
        if !(3.0..=4.0).contains(&self.peak_s) {
            return Err(Error::Config(format!("HRF peak {}s outside 3-4 s", self.peak_s)));
        }
        let ret = self.undershoot_s - self.peak_s;
        if !(4.0..=6.0 + 1e-9).contains(&ret) {
            return Err(Error::Config(format!("HRF return {ret}s after the peak outside 4-6 s")));
        }
        if !(0.0..1.0).contains(&self.undershoot_ratio) {
            return Err(Error::Config("HRF undershoot ratio must be in [0, 1)".into()));
        }
        if self.length_s < self.undershoot_s * 2.0 {
            return Err(Error::Config("HRF length does not cover the undershoot".into()));
        }
        Ok(())
    }

    /// Double-gamma kernel sampled at `rate_hz`, normalized to unit sum.
    pub fn kernel(&self, rate_hz: f64) -> Result<Vec<f64>> {
        self.validate()?;
        let n = (self.length_s * rate_hz).round() as usize;
        let (a1, a2) = (self.peak_s + 1.0, self.undershoot_s + 1.0);
        let h: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / rate_hz;
                gamma_pdf(t, a1) - self.undershoot_ratio * gamma_pdf(t, a2)
            })
            .collect();
        let s: f64 = h.iter().sum();
        Ok(h.iter().map(|v| v / s).collect())
    }
}

/// Magnitude of a kernel's transfer function at `f_hz`.
pub fn transfer_magnitude(kernel: &[f64], rate_hz: f64, f_hz: f64) -> f64 {
    let w = 2.0 * PI * f_hz / rate_hz;
    let (re, im) = kernel.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, h)| (re + h * (w * n as f64).cos(), im - h * (w * n as f64).sin()));
    (re * re + im * im).sqrt()
}

mod open_edges {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| x.is_finite().then_some(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

/// Frequency bands with target SNRs (signal power / noise power).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Upper band edges in Hz, increasing; the last should be Nyquist or
    /// infinity (`null` in JSON).
    #[serde(with = "open_edges")]
    pub edges_hz: Vec<f64>,
    /// One SNR per band; `None` means no noise in that band.
    pub snr: Vec<Option<f64>>,
}

impl NoiseSpec {
    pub fn flat(snr: f64) -> Self {
        Self { edges_hz: vec![f64::INFINITY], snr: vec![Some(snr)] }
    }

    pub fn two_band(split_hz: f64, below: f64, above: f64) -> Self {
        Self { edges_hz: vec![split_hz, f64::INFINITY], snr: vec![Some(below), Some(above)] }
    }

    fn validate(&self) -> Result<()> {
        if self.edges_hz.is_empty() || self.edges_hz.len() != self.snr.len() {
            return Err(Error::param("noise spec needs one SNR per band and at least one band"));
        }
        if self.edges_hz.windows(2).any(|w| w[1] <= w[0]) || self.edges_hz[0] <= 0.0 {
            return Err(Error::param("noise band edges must be positive and increasing"));
        }
        if self.snr.iter().flatten().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::param("SNR targets must be positive"));
        }
        Ok(())
    }

    fn band_of(&self, f: f64) -> usize {
        self.edges_hz.iter().position(|&e| f <= e).unwrap_or(self.edges_hz.len() - 1)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 { x } else { x.exp().ln_1p() }
}

fn fft_real(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

fn ifft_real(mut buf: Vec<Complex64>) -> Vec<f64> {
    let n = buf.len();
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Frequency of FFT bin `k` folded to [0, rate/2].
fn bin_freq(k: usize, n: usize, rate_hz: f64) -> f64 {
    let kk = if k <= n / 2 { k } else { n - k };
    kk as f64 * rate_hz / n as f64
}

/// Gaussian noise with power spectrum proportional to 1/f inside
/// `[lo_hz, hi_hz]` and zero elsewhere, scaled to unit expected variance.
fn pink_band_noise(n: usize, rate_hz: f64, lo_hz: f64, hi_hz: f64, rng: &mut impl Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut spec = fft_real(&white);
    let gains: Vec<f64> = (0..n)
        .map(|k| {
            let f = bin_freq(k, n, rate_hz);
            if f >= lo_hz && f <= hi_hz && f > 0.0 { 1.0 / f.sqrt() } else { 0.0 }
        })
        .collect();
    let power: f64 = gains.iter().map(|g| g * g).sum::<f64>() / n as f64;
    let norm = if power > 0.0 { 1.0 / power.sqrt() } else { 0.0 };
    for (s, g) in spec.iter_mut().zip(&gains) {
        *s *= g * norm;
    }
    ifft_real(spec)
}

pub const LATENT_BAND_HZ: (f64, f64) = (0.01, 5.0);

/// K independent 1/f noise channels band-limited to 0.01-5 Hz.
pub fn make_latent(duration_s: f64, k: usize, rate_hz: f64, seed: u64) -> Result<LatentDrive> {
    if !(duration_s > 0.0) || k == 0 {
        return Err(Error::param("latent needs a positive duration and at least one channel"));
    }
    if rate_hz < 2.0 * LATENT_BAND_HZ.1 {
        return Err(Error::param(format!("latent rate {rate_hz} Hz cannot hold a 5 Hz band")));
    }
    let n = (duration_s * rate_hz).round() as usize;
    let cols: Vec<Vec<f64>> =
        (0..k).map(|j| pink_band_noise(n, rate_hz, LATENT_BAND_HZ.0, LATENT_BAND_HZ.1, &mut rng_for(seed, "latent", j as u64))).collect();
    Ok(LatentDrive { values: DMatrix::from_fn(n, k, |i, j| cols[j][i]), rate_hz, seed })
}

/// Linear convolution `y[t] = sum_k h[k] x[t - k]`, truncated to `x.len()`.
fn causal_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = (n + h.len()).next_power_of_two();
    let mut a: Vec<f64> = x.to_vec();
    a.resize(m, 0.0);
    let mut b: Vec<f64> = h.to_vec();
    b.resize(m, 0.0);
    let fa = fft_real(&a);
    let fb = fft_real(&b);
    let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(p, q)| p * q).collect();
    let mut y = ifft_real(prod);
    y.truncate(n);
    y
}

/// HRF-convolve each latent, resample to `out_rate_hz`, then mix.
pub fn render_slow(latent: &LatentDrive, mixing: &DMatrix<f64>, hrf: &HrfParams, out_rate_hz: f64) -> Result<TimeSeries> {
    if mixing.nrows() != latent.n_latents() {
        return Err(Error::shape(format!("mixing has {} rows for {} latents", mixing.nrows(), latent.n_latents())));
    }
    let h = hrf.kernel(latent.rate_hz)?;
    if latent.n_samples() < 2 {
        return Err(Error::param("latent too short"));
    }
    let convolved: Vec<Vec<f64>> = latent.values.column_iter().map(|c| causal_convolve(c.as_slice(), &h)).collect();
    let slow = resample_lanczos(&TimeSeries::new(latent.rate_hz, convolved)?, out_rate_hz, LANCZOS_A)?;
    let mixed = slow.to_matrix() * mixing;
    TimeSeries::from_matrix(out_rate_hz, &mixed)
}

/// Fast-response options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastParams {
    pub delay_s: f64,
    /// Standard deviation of the Gaussian smoothing kernel.
    pub smoothing_s: f64,
}

impl Default for FastParams {
    fn default() -> Self {
        Self { delay_s: 0.3, smoothing_s: 0.025 }
    }
}

/// Mix, delay, smooth, rectify with a baseline-subtracted softplus, and
/// resample to `out_rate_hz`.
pub fn render_fast(latent: &LatentDrive, mixing: &DMatrix<f64>, params: &FastParams, out_rate_hz: f64) -> Result<TimeSeries> {
    if mixing.nrows() != latent.n_latents() {
        return Err(Error::shape(format!("mixing has {} rows for {} latents", mixing.nrows(), latent.n_latents())));
    }
    if !(0.2..=0.8).contains(&params.delay_s) {
        return Err(Error::param(format!("fast delay {}s outside 0.2-0.8 s", params.delay_s)));
    }
    let rate = latent.rate_hz;
    let n = latent.n_samples();
    let shift = (params.delay_s * rate).round() as usize;
    if shift >= n {
        return Err(Error::param("delay exceeds the latent duration"));
    }
    let sigma = params.smoothing_s * rate;
    let half = (4.0 * sigma).ceil().max(0.0) as isize;
    let kernel: Vec<f64> = (-half..=half).map(|i| if sigma > 0.0 { (-0.5 * (i as f64 / sigma).powi(2)).exp() } else { 1.0 }).collect();
    let ks: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / ks).collect();
    let mixed = &latent.values * mixing;
    let ln2 = std::f64::consts::LN_2;
    let channels: Vec<Vec<f64>> = mixed
        .column_iter()
        .map(|c| {
            let mut delayed = vec![0.0; n];
            delayed[shift..].copy_from_slice(&c.as_slice()[..n - shift]);
            convolve_centered(&delayed, &kernel, Edge::Renormalize).iter().map(|&u| softplus(u) - ln2).collect()
        })
        .collect();
    resample_lanczos(&TimeSeries::new(rate, channels)?, out_rate_hz, LANCZOS_A)
}

fn moving_average(x: &[f64], half: usize) -> Vec<f64> {
    let n = x.len() as isize;
    let h = half as isize;
    (0..n)
        .map(|i| {
            let lo = (i - h).max(0);
            let hi = (i + h).min(n - 1);
            x[lo as usize..=hi as usize].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Add Gaussian noise whose spectrum follows the smoothed signal spectrum,
/// scaled per band so that signal power / noise power equals the target.
pub fn add_noise(ts: &TimeSeries, spec: &NoiseSpec, seed: u64) -> Result<TimeSeries> {
    spec.validate()?;
    let n = ts.n_samples();
    if n < 4 {
        return Err(Error::param("series too short for noise shaping"));
    }
    let half = (n / 400).max(2);
    let channels = ts
        .channels
        .iter()
        .enumerate()
        .map(|(c, x)| {
            let mean = x.iter().sum::<f64>() / n as f64;
            let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
            let sx = fft_real(&centered);
            let n_half = n / 2 + 1;
            let p_half: Vec<f64> = sx[..n_half].iter().map(|z| z.norm_sqr()).collect();
            let shape: Vec<f64> = moving_average(&p_half, half).iter().map(|p| p.sqrt()).collect();
            let mut rng = rng_for(seed, "noise", c as u64);
            let white: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let mut sn = fft_real(&white);
            let mut sig_band = vec![0.0; spec.snr.len()];
            let mut noise_band = vec![0.0; spec.snr.len()];
            for k in 0..n {
                let kk = if k < n_half { k } else { n - k };
                let f = kk as f64 * ts.rate_hz / n as f64;
                sn[k] *= shape[kk];
                let b = spec.band_of(f);
                sig_band[b] += sx[k].norm_sqr();
                noise_band[b] += sn[k].norm_sqr();
            }
            let gains: Vec<f64> = spec
                .snr
                .iter()
                .enumerate()
                .map(|(b, s)| match s {
                    Some(snr) if noise_band[b] > 0.0 => (sig_band[b] / snr / noise_band[b]).sqrt(),
                    _ => 0.0,
                })
                .collect();
            for k in 0..n {
                let kk = if k < n_half { k } else { n - k };
                sn[k] *= gains[spec.band_of(kk as f64 * ts.rate_hz / n as f64)];
            }
            let noise = ifft_real(sn);
            x.iter().zip(&noise).map(|(a, b)| a + b).collect()
        })
        .collect();
    TimeSeries::new(ts.rate_hz, channels)
}

/// `seeds.len()` noisy renditions of `clean`, independent noise per seed.
pub fn make_repeats(clean: &TimeSeries, spec: &NoiseSpec, seeds: &[u64]) -> Result<Vec<TimeSeries>> {
    if seeds.len() < 2 {
        return Err(Error::param("need at least two repeats"));
    }
    let unique: HashSet<u64> = seeds.iter().copied().collect();
    if unique.len() != seeds.len() {
        return Err(Error::param("duplicate repeat seeds"));
    }
    seeds.iter().map(|&s| add_noise(clean, spec, s)).collect()
}

/// Zero-mean patterns of period `period` samples, orthonormal over one
/// period and scaled to unit RMS.
pub fn carrier_patterns(period: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count + 1 > period {
        return Err(Error::param(format!("{count} carriers do not fit in a {period}-sample period")));
    }
    let mut rng = rng_for(seed, "carriers", 0);
    let mut basis: Vec<Vec<f64>> = vec![vec![1.0 / (period as f64).sqrt(); period]];
    while basis.len() < count + 1 {
        let mut v: Vec<f64> = (0..period).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.iter().map(|x| x / norm).collect());
        }
    }
    let scale = (period as f64).sqrt();
    Ok(basis[1..].iter().map(|b| b.iter().map(|x| x * scale).collect()).collect())
}

/// Sinusoids with unit RMS and random phase, frequencies evenly spread over
/// `[lo_hz, hi_hz]` and rounded to whole cycles per `cycle_s`, returned as one
/// `cycle_s`-long period each.
pub fn tone_carriers(rate_hz: f64, count: usize, lo_hz: f64, hi_hz: f64, cycle_s: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(0.0 < lo_hz && lo_hz < hi_hz && hi_hz < rate_hz / 2.0) || count == 0 {
        return Err(Error::param(format!("tone band {lo_hz}-{hi_hz} Hz invalid at {rate_hz} Hz")));
    }
    let len = (cycle_s * rate_hz).round() as usize;
    let mut rng = rng_for(seed, "carriers", 1);
    let mut cycles: Vec<usize> = Vec::with_capacity(count);
    for j in 0..count {
        let f = if count == 1 { lo_hz } else { lo_hz + (hi_hz - lo_hz) * j as f64 / (count - 1) as f64 };
        let k = (f * cycle_s).round() as usize;
        if cycles.contains(&k) {
            return Err(Error::param("tone carriers collide; widen the band or lengthen the cycle"));
        }
        cycles.push(k);
    }
    Ok(cycles
        .iter()
        .map(|&k| {
            let phase = rng.random::<f64>() * 2.0 * PI;
            (0..len).map(|t| 2f64.sqrt() * (2.0 * PI * k as f64 * t as f64 / len as f64 + phase).sin()).collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CarrierSpec {
    /// Orthonormal patterns repeating every `period` samples. A period that
    /// divides the net's frame length puts every frame at the same carrier
    /// phase, which makes the envelope linearly readable from the frontend.
    Periodic { period: usize },
    /// Tones spread over a band.
    Tones { lo_hz: f64, hi_hz: f64 },
}

impl CarrierSpec {
    pub fn build(&self, rate_hz: f64, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        match *self {
            CarrierSpec::Periodic { period } => carrier_patterns(period, count, seed),
            CarrierSpec::Tones { lo_hz, hi_hz } => tone_carriers(rate_hz, count, lo_hz, hi_hz, 10.0, seed),
        }
    }
}

/// Map from a latent value to its carrier amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeKind {
    /// `softplus(gain · z)`: close to linear in z at unit gain.
    #[default]
    Softplus,
    /// `exp(gain · z − gain²/2)`: log-normal, unit mean; linear readouts of
    /// the amplitude recover z poorly.
    Exp,
}

impl EnvelopeKind {
    pub fn apply(self, gain: f64, z: f64) -> f64 {
        match self {
            EnvelopeKind::Softplus => softplus(gain * z),
            EnvelopeKind::Exp => (gain * z - 0.5 * gain * gain).exp(),
        }
    }
}

/// Sum of carriers, each scaled by `amplitude · envelope(gain · latent)`.
pub fn render_stimulus(
    latent: &LatentDrive,
    carriers: &[Vec<f64>],
    amplitudes: &[f64],
    envelope: EnvelopeKind,
    gain: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<TimeSeries> {
    if carriers.len() != latent.n_latents() || amplitudes.len() != carriers.len() {
        return Err(Error::shape(format!("{} carriers and {} amplitudes for {} latents", carriers.len(), amplitudes.len(), latent.n_latents())));
    }
    let mut rng = rng_for(seed, "stimulus-noise", 0);
    let noise = Normal::new(0.0, noise_sd.max(0.0)).map_err(|e| Error::param(e.to_string()))?;
    let w: Vec<f64> = (0..latent.n_samples())
        .map(|t| {
            let s: f64 = carriers.iter().enumerate().map(|(j, c)| amplitudes[j] * envelope.apply(gain, latent.values[(t, j)]) * c[t % c.len()]).sum();
            s + if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 }
        })
        .collect();
    TimeSeries::single(latent.rate_hz, w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub internal_rate_hz: f64,
    /// Latents that drive responses.
    pub n_relevant: usize,
    /// Latents that only modulate the stimulus.
    pub n_distractors: usize,
    pub carriers: CarrierSpec,
    #[serde(default)]
    pub envelope: EnvelopeKind,
    pub envelope_gain: f64,
    /// Carrier amplitude of the distractor latents relative to the relevant ones.
    pub distractor_amplitude: f64,
    pub stimulus_noise_sd: f64,
    pub slow_channels: usize,
    pub fast_channels: usize,
    pub slow_rate_hz: f64,
    pub fast_rate_hz: f64,
    pub story_s: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test_repeats: usize,
    pub podcast_s: f64,
    pub hrf: HrfParams,
    pub fast: FastParams,
    pub slow_noise: NoiseSpec,
    pub fast_noise: NoiseSpec,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            internal_rate_hz: 200.0,
            n_relevant: 3,
            n_distractors: 4,
            carriers: CarrierSpec::Periodic { period: 10 },
            envelope: EnvelopeKind::Exp,
            envelope_gain: 1.5,
            distractor_amplitude: 1.0,
            stimulus_noise_sd: 0.05,
            slow_channels: 32,
            fast_channels: 24,
            slow_rate_hz: 0.5,
            fast_rate_hz: 20.0,
            story_s: 120.0,
            n_train: 16,
            n_val: 2,
            n_test_repeats: 10,
            podcast_s: 300.0,
            hrf: HrfParams::default(),
            fast: FastParams::default(),
            slow_noise: NoiseSpec::two_band(0.125, 0.155, 0.114),
            fast_noise: NoiseSpec::flat(1.0),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_relevant == 0 || self.slow_channels == 0 || self.fast_channels == 0 {
            return bad("latent and channel counts must be positive");
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test_repeats < 2 {
            return bad("need training and validation stories and at least two test repeats");
        }
        if !(self.story_s > 0.0 && self.podcast_s > 0.0) {
            return bad("story and podcast durations must be positive");
        }
        if self.internal_rate_hz < 4.0 * self.fast_rate_hz.max(LATENT_BAND_HZ.1) {
            return bad("internal rate too low for the fast responses");
        }
        self.hrf.validate()?;
        self.slow_noise.validate()?;
        self.fast_noise.validate()?;
        Ok(())
    }

    pub fn n_latents(&self) -> usize {
        self.n_relevant + self.n_distractors
    }
}

/// Stimulus plus clean and noisy renders for one latent drive.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub stimulus: TimeSeries,
    pub slow_clean: TimeSeries,
    pub fast_clean: TimeSeries,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: GeneratorConfig,
    pub train: Vec<Story>,
    pub val: Vec<Story>,
    /// Test story with the repeat-averaged responses.
    pub test: Story,
    pub test_repeats: Vec<TimeSeries>,
    pub test_clean: TimeSeries,
    /// Long stimulus with fast responses.
    pub podcast_stimulus: TimeSeries,
    pub podcast_responses: TimeSeries,
    pub podcast_clean: TimeSeries,
    pub mixing: Mixing,
}

/// Renders one latent drive; relevant latents are the first columns.
pub fn render_story(cfg: &GeneratorConfig, mixing: &Mixing, carriers: &[Vec<f64>], duration_s: f64, seed: u64) -> Result<Rendered> {
    let latent = make_latent(duration_s, cfg.n_latents(), cfg.internal_rate_hz, seed)?;
    let relevant = LatentDrive { values: latent.values.columns(0, cfg.n_relevant).clone_owned(), rate_hz: latent.rate_hz, seed };
    let amplitudes: Vec<f64> = (0..cfg.n_latents()).map(|j| if j < cfg.n_relevant { 1.0 } else { cfg.distractor_amplitude }).collect();
    let stimulus = render_stimulus(&latent, carriers, &amplitudes, cfg.envelope, cfg.envelope_gain, cfg.stimulus_noise_sd, seed)?;
    let slow_clean = render_slow(&relevant, &mixing.slow, &cfg.hrf, cfg.slow_rate_hz)?;
    let fast_clean = render_fast(&relevant, &mixing.fast, &cfg.fast, cfg.fast_rate_hz)?;
    Ok(Rendered { stimulus, slow_clean, fast_clean })
}

/// The full dataset described by `cfg`.
pub fn generate(cfg: &GeneratorConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mixing = Mixing::random(cfg.n_relevant, cfg.slow_channels, cfg.fast_channels, cfg.seed);
    let carriers = cfg.carriers.build(cfg.internal_rate_hz, cfg.n_latents(), cfg.seed)?;
    let story = |split: &str, i: usize| -> Result<Story> {
        let seed = derive_seed(cfg.seed, split, i as u64);
        let r = render_story(cfg, &mixing, &carriers, cfg.story_s, seed)?;
        let responses = add_noise(&r.slow_clean, &cfg.slow_noise, derive_seed(seed, "slow-noise", 0))?;
        Ok(Story { name: format!("{split}{i:02}"), stimulus: r.stimulus, responses })
    };
    let train = (0..cfg.n_train).map(|i| story("train", i)).collect::<Result<Vec<_>>>()?;
    let val = (0..cfg.n_val).map(|i| story("val", i)).collect::<Result<Vec<_>>>()?;

    let test_seed = derive_seed(cfg.seed, "test", 0);
    let t = render_story(cfg, &mixing, &carriers, cfg.story_s, test_seed)?;
    let seeds: Vec<u64> = (0..cfg.n_test_repeats as u64).map(|i| derive_seed(test_seed, "repeat", i)).collect();
    let test_repeats = make_repeats(&t.slow_clean, &cfg.slow_noise, &seeds)?;
    let averaged = crate::tensor_io::mean_of(&test_repeats)?;
    let test = Story { name: "test00".into(), stimulus: t.stimulus, responses: averaged };

    let pod_seed = derive_seed(cfg.seed, "podcast", 0);
    let p = render_story(cfg, &mixing, &carriers, cfg.podcast_s, pod_seed)?;
    let podcast_responses = add_noise(&p.fast_clean, &cfg.fast_noise, derive_seed(pod_seed, "fast-noise", 0))?;
    Ok(SynthDataset {
        config: cfg.clone(),
        train,
        val,
        test,
        test_repeats,
        test_clean: t.slow_clean,
        podcast_stimulus: p.stimulus,
        podcast_responses,
        podcast_clean: p.fast_clean,
        mixing,
    })
}
