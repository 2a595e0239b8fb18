//! The feature network: strided linear frontend, sinusoidal positions and
//! pre-LN attention layers with low-rank adapters on Q, K and V.
//!
//! Row-vector convention throughout: tokens are rows, `q = ln(x) · W_q`.
//! Only layers up to the tap are evaluated, and the tap layer itself is
//! evaluated for the final token only.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::rng_for;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetConfig {
    /// Waveform sampling rate.
    pub sample_rate_hz: f64,
    /// Frontend stride and frame width in samples; one token per frame.
    pub frame_len: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_width: usize,
    /// 1-based index of the layer whose final-token state is the feature.
    pub tap_layer: usize,
    pub window_s: f64,
    pub lora_rank: usize,
    pub seed: u64,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 200.0,
            frame_len: 40,
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            mlp_width: 256,
            tap_layer: 3,
            window_s: 4.0,
            lora_rank: 4,
            seed: 0,
        }
    }
}

impl FeatureNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.sample_rate_hz > 0.0) || !(self.window_s > 0.0) {
            return bad("sample rate and window length must be positive".into());
        }
        if self.frame_len == 0 || self.d_model == 0 || self.n_heads == 0 || self.mlp_width == 0 || self.lora_rank == 0 {
            return bad("frame_len, d_model, n_heads, mlp_width and lora_rank must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.tap_layer == 0 || self.tap_layer > self.n_layers {
            return bad(format!("tap_layer {} outside 1..={}", self.tap_layer, self.n_layers));
        }
        let w = self.window_s * self.sample_rate_hz;
        if (w - w.round()).abs() > 1e-6 || w.round() as usize % self.frame_len != 0 {
            return bad(format!("window of {w} samples is not a whole number of {}-sample frames", self.frame_len));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        (self.window_s * self.sample_rate_hz).round() as usize
    }

    pub fn n_tokens(&self) -> usize {
        self.window_len() / self.frame_len
    }

    pub fn lora_scaling(&self) -> f64 {
        1.0 / self.lora_rank as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: DMatrix<f64>,
    pub b1: Vec<f64>,
    pub w2: DMatrix<f64>,
    pub b2: Vec<f64>,
}

/// Frozen weights. Regenerated from the config seed, never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub w_in: DMatrix<f64>,
    pub b_in: Vec<f64>,
    pub layers: Vec<LayerWeights>,
}

fn gaussian(rows: usize, cols: usize, sd: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let d = Normal::new(0.0, sd).expect("finite sd");
    DMatrix::from_fn(rows, cols, |_, _| d.sample(rng))
}

fn gaussian_vec(n: usize, mean: f64, sd: f64, rng: &mut impl Rng) -> Vec<f64> {
    let d = Normal::new(mean, sd).expect("finite sd");
    (0..n).map(|_| d.sample(rng)).collect()
}

impl BaseWeights {
    pub fn random(cfg: &FeatureNetConfig) -> Self {
        let mut rng = rng_for(cfg.seed, "base-weights", 0);
        let (d, m, l) = (cfg.d_model, cfg.mlp_width, cfg.frame_len);
        let w_in = gaussian(l, d, 1.0 / (l as f64).sqrt(), &mut rng);
        let b_in = gaussian_vec(d, 0.0, 0.1, &mut rng);
        let sd = 1.0 / (d as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                ln1_g: gaussian_vec(d, 1.0, 0.1, &mut rng),
                ln1_b: gaussian_vec(d, 0.0, 0.1, &mut rng),
                wq: gaussian(d, d, sd, &mut rng),
                wk: gaussian(d, d, sd, &mut rng),
                wv: gaussian(d, d, sd, &mut rng),
                wo: gaussian(d, d, sd, &mut rng),
                ln2_g: gaussian_vec(d, 1.0, 0.1, &mut rng),
                ln2_b: gaussian_vec(d, 0.0, 0.1, &mut rng),
                w1: gaussian(d, m, sd, &mut rng),
                b1: gaussian_vec(m, 0.0, 0.1, &mut rng),
                w2: gaussian(m, d, 1.0 / (m as f64).sqrt(), &mut rng),
                b2: gaussian_vec(d, 0.0, 0.1, &mut rng),
            })
            .collect();
        Self { w_in, b_in, layers }
    }

    /// SHA-256 over every base weight in a fixed order, little-endian.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |xs: &[f64]| {
            for x in xs {
                h.update(x.to_le_bytes());
            }
        };
        put(self.w_in.as_slice());
        put(&self.b_in);
        for lw in &self.layers {
            for m in [&lw.wq, &lw.wk, &lw.wv, &lw.wo, &lw.w1, &lw.w2] {
                put(m.as_slice());
            }
            for v in [&lw.ln1_g, &lw.ln1_b, &lw.ln2_g, &lw.ln2_b, &lw.b1, &lw.b2] {
                put(v);
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `W + scaling · A · B` with `A`: d × r and `B`: r × d.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLora {
    pub q: LoraPair,
    pub k: LoraPair,
    pub v: LoraPair,
}

impl LayerLora {
    pub fn pairs(&self) -> [&LoraPair; 3] {
        [&self.q, &self.k, &self.v]
    }

    pub fn pairs_mut(&mut self) -> [&mut LoraPair; 3] {
        [&mut self.q, &mut self.k, &mut self.v]
    }
}

/// Adapters for the first `n` layers: A zero, B ~ N(0, 0.02).
pub fn init_lora(cfg: &FeatureNetConfig, n: usize) -> Vec<LayerLora> {
    let mut rng = rng_for(cfg.seed, "lora-init", 0);
    let (d, r) = (cfg.d_model, cfg.lora_rank);
    let mut pair = || LoraPair { a: DMatrix::zeros(d, r), b: gaussian(r, d, 0.02, &mut rng) };
    (0..n).map(|_| LayerLora { q: pair(), k: pair(), v: pair() }).collect()
}

fn check_lora(cfg: &FeatureNetConfig, lora: &[LayerLora]) -> Result<()> {
    if lora.len() != cfg.tap_layer {
        return Err(Error::shape(format!("{} adapter layers, expected {}", lora.len(), cfg.tap_layer)));
    }
    let (d, r) = (cfg.d_model, cfg.lora_rank);
    for p in lora.iter().flat_map(|l| l.pairs()) {
        if p.a.shape() != (d, r) || p.b.shape() != (r, d) {
            return Err(Error::shape(format!("adapter shapes {:?}/{:?}, expected ({d},{r})/({r},{d})", p.a.shape(), p.b.shape())));
        }
    }
    Ok(())
}

pub fn sinusoidal_positions(n_tokens: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_tokens, d, |t, j| {
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let angle = t as f64 * freq;
        if j % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone)]
struct LnCache {
    nhat: DMatrix<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &DMatrix<f64>, g: &[f64], b: &[f64]) -> (DMatrix<f64>, LnCache) {
    let (n, d) = x.shape();
    let mut nhat = DMatrix::zeros(n, d);
    let mut out = DMatrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for t in 0..n {
        let row = x.row(t);
        let mu = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let z = (x[(t, j)] - mu) * is;
            nhat[(t, j)] = z;
            out[(t, j)] = z * g[j] + b[j];
        }
    }
    (out, LnCache { nhat, inv_std })
}

fn layer_norm_backward(dout: &DMatrix<f64>, cache: &LnCache, g: &[f64]) -> DMatrix<f64> {
    let (n, d) = dout.shape();
    let mut dx = DMatrix::zeros(n, d);
    let df = d as f64;
    for t in 0..n {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let dn = dout[(t, j)] * g[j];
            m1 += dn;
            m2 += dn * cache.nhat[(t, j)];
        }
        m1 /= df;
        m2 /= df;
        for j in 0..d {
            let dn = dout[(t, j)] * g[j];
            dx[(t, j)] = cache.inv_std[t] * (dn - m1 - cache.nhat[(t, j)] * m2);
        }
    }
    dx
}

fn add_row_vector(m: &mut DMatrix<f64>, v: &[f64]) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(v[j]);
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    /// First query row; 0 for full layers, `T - 1` for the tap layer.
    q0: usize,
    ln1: LnCache,
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    probs: Vec<DMatrix<f64>>,
    ln2: LnCache,
    h: DMatrix<f64>,
}

/// Everything one window's backward pass needs.
#[derive(Debug, Clone)]
pub struct WindowCache {
    layers: Vec<LayerCache>,
}

/// Gradient accumulators for the effective Q, K, V weights of each layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveGrads {
    pub layers: Vec<[DMatrix<f64>; 3]>,
}

impl EffectiveGrads {
    pub fn zeros(n_layers: usize, d: usize) -> Self {
        Self { layers: (0..n_layers).map(|_| std::array::from_fn(|_| DMatrix::zeros(d, d))).collect() }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureNet {
    cfg: FeatureNetConfig,
    base: BaseWeights,
    lora: Vec<LayerLora>,
    pos: DMatrix<f64>,
    /// `W + scaling · A · B` for Q, K, V of each evaluated layer.
    eff: Vec<[DMatrix<f64>; 3]>,
}

impl FeatureNet {
    /// Base weights from the config seed, zero-delta adapters.
    pub fn new(cfg: FeatureNetConfig) -> Result<Self> {
        cfg.validate()?;
        let base = BaseWeights::random(&cfg);
        let lora = init_lora(&cfg, cfg.tap_layer);
        Self::from_parts(cfg, base, lora)
    }

    pub fn from_parts(cfg: FeatureNetConfig, base: BaseWeights, lora: Vec<LayerLora>) -> Result<Self> {
        cfg.validate()?;
        if base.layers.len() != cfg.n_layers {
            return Err(Error::shape("layer count does not match the config"));
        }
        check_lora(&cfg, &lora)?;
        let d = cfg.d_model;
        let pos = sinusoidal_positions(cfg.n_tokens(), d);
        let mut net = Self { cfg, base, lora, pos, eff: Vec::new() };
        net.refresh();
        Ok(net)
    }

    pub fn config(&self) -> &FeatureNetConfig {
        &self.cfg
    }

    pub fn base(&self) -> &BaseWeights {
        &self.base
    }

    pub fn lora(&self) -> &[LayerLora] {
        &self.lora
    }

    /// Replace the adapters and rebuild the effective weights.
    pub fn set_lora(&mut self, lora: Vec<LayerLora>) -> Result<()> {
        check_lora(&self.cfg, &lora)?;
        self.lora = lora;
        self.refresh();
        Ok(())
    }

    /// Edit the adapters in place (shapes must be kept).
    pub fn update_lora(&mut self, f: impl FnOnce(&mut [LayerLora])) {
        f(&mut self.lora);
        self.refresh();
    }

    fn refresh(&mut self) {
        let s = self.cfg.lora_scaling();
        self.eff = self
            .lora
            .iter()
            .zip(&self.base.layers)
            .map(|(l, w)| {
                let one = |base: &DMatrix<f64>, p: &LoraPair| base + (&p.a * &p.b) * s;
                [one(&w.wq, &l.q), one(&w.wk, &l.k), one(&w.wv, &l.v)]
            })
            .collect();
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.d_model
    }

    fn embed(&self, window: &[f64]) -> DMatrix<f64> {
        let (t, l) = (self.cfg.n_tokens(), self.cfg.frame_len);
        let frames = DMatrix::from_fn(t, l, |i, j| window[i * l + j]);
        let mut x = frames * &self.base.w_in + &self.pos;
        add_row_vector(&mut x, &self.base.b_in);
        x
    }

    fn layer_forward(&self, li: usize, x: &DMatrix<f64>, last_only: bool) -> (DMatrix<f64>, LayerCache) {
        let w = &self.base.layers[li];
        let [wq, wk, wv] = &self.eff[li];
        let t = x.nrows();
        let q0 = if last_only { t - 1 } else { 0 };
        let tq = t - q0;
        let (a, ln1) = layer_norm(x, &w.ln1_g, &w.ln1_b);
        let q = a.rows(q0, tq) * wq;
        let k = &a * wk;
        let v = &a * wv;
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut o = DMatrix::zeros(tq, self.cfg.d_model);
        let mut probs = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = q.columns(h * dh, dh);
            let kh = k.columns(h * dh, dh);
            let mut s = (qh * kh.transpose()) * scale;
            for mut row in s.row_iter_mut() {
                let mx = row.max();
                row.iter_mut().for_each(|v| *v = (*v - mx).exp());
                let sum = row.sum();
                row /= sum;
            }
            o.columns_mut(h * dh, dh).copy_from(&(&s * v.columns(h * dh, dh)));
            probs.push(s);
        }
        let y = x.rows(q0, tq) + &o * &w.wo;
        let (c, ln2) = layer_norm(&y, &w.ln2_g, &w.ln2_b);
        let mut hpre = &c * &w.w1;
        add_row_vector(&mut hpre, &w.b1);
        let g = hpre.map(gelu);
        let mut z = &y + &g * &w.w2;
        add_row_vector(&mut z, &w.b2);
        let cache = LayerCache { q0, ln1, a, q, k, v, probs, ln2, h: hpre };
        (z, cache)
    }

    fn check_window(&self, window: &[f64]) -> Result<()> {
        if window.len() != self.cfg.window_len() {
            return Err(Error::shape(format!("window has {} samples, expected {}", window.len(), self.cfg.window_len())));
        }
        Ok(())
    }

    /// Final-token hidden state of the tap layer.
    pub fn forward_window(&self, window: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_window_cached(window)?.0)
    }

    pub fn forward_window_cached(&self, window: &[f64]) -> Result<(Vec<f64>, WindowCache)> {
        self.check_window(window)?;
        let mut x = self.embed(window);
        let tap = self.cfg.tap_layer;
        let mut layers = Vec::with_capacity(tap);
        for li in 0..tap {
            let (z, cache) = self.layer_forward(li, &x, li + 1 == tap);
            layers.push(cache);
            x = z;
        }
        Ok((x.row(0).iter().copied().collect(), WindowCache { layers }))
    }

    fn layer_backward(&self, li: usize, cache: &LayerCache, dz: &DMatrix<f64>, grads: &mut [DMatrix<f64>; 3]) -> DMatrix<f64> {
        let w = &self.base.layers[li];
        let [wq, wk, wv] = &self.eff[li];
        let t = cache.k.nrows();
        let tq = t - cache.q0;
        let d = self.cfg.d_model;

        let dg = dz * w.w2.transpose();
        let dh_pre = dg.zip_map(&cache.h, |g, h| g * gelu_grad(h));
        let dc = &dh_pre * w.w1.transpose();
        let dy = dz + layer_norm_backward(&dc, &cache.ln2, &w.ln2_g);

        let d_o = &dy * w.wo.transpose();
        let dhd = d / self.cfg.n_heads;
        let scale = 1.0 / (dhd as f64).sqrt();
        let mut dq = DMatrix::zeros(tq, d);
        let mut dk = DMatrix::zeros(t, d);
        let mut dv = DMatrix::zeros(t, d);
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = h * dhd;
            let doh = d_o.columns(cols, dhd);
            dv.columns_mut(cols, dhd).copy_from(&(p.transpose() * doh));
            let mut ds = doh * cache.v.columns(cols, dhd).transpose();
            for i in 0..tq {
                let dot: f64 = (0..t).map(|j| ds[(i, j)] * p[(i, j)]).sum();
                for j in 0..t {
                    ds[(i, j)] = p[(i, j)] * (ds[(i, j)] - dot) * scale;
                }
            }
            dq.columns_mut(cols, dhd).copy_from(&(&ds * cache.k.columns(cols, dhd)));
            dk.columns_mut(cols, dhd).copy_from(&(ds.transpose() * cache.q.columns(cols, dhd)));
        }
        let aq = cache.a.rows(cache.q0, tq);
        grads[0] += aq.transpose() * &dq;
        grads[1] += cache.a.transpose() * &dk;
        grads[2] += cache.a.transpose() * &dv;
        let mut da = &dk * wk.transpose() + &dv * wv.transpose();
        {
            let dqa = &dq * wq.transpose();
            let mut rows = da.rows_mut(cache.q0, tq);
            rows += dqa;
        }
        let mut dx = layer_norm_backward(&da, &cache.ln1, &w.ln1_g);
        {
            let mut rows = dx.rows_mut(cache.q0, tq);
            rows += dy;
        }
        dx
    }

    /// Accumulate d(feature · dfeat)/d(effective Q, K, V) for one window.
    pub fn backward_window(&self, cache: &WindowCache, dfeat: &[f64], grads: &mut EffectiveGrads) -> Result<()> {
        if dfeat.len() != self.cfg.d_model {
            return Err(Error::shape("feature gradient has the wrong length"));
        }
        if grads.layers.len() != cache.layers.len() {
            return Err(Error::shape("gradient accumulator layer count mismatch"));
        }
        let mut dz = DMatrix::from_row_slice(1, self.cfg.d_model, dfeat);
        for li in (0..cache.layers.len()).rev() {
            dz = self.layer_backward(li, &cache.layers[li], &dz, &mut grads.layers[li]);
        }
        Ok(())
    }

    /// Chain rule from effective-weight gradients to adapter gradients.
    pub fn lora_grads(&self, eff: &EffectiveGrads) -> Vec<LayerLora> {
        let s = self.cfg.lora_scaling();
        let one = |g: &DMatrix<f64>, p: &LoraPair| LoraPair { a: (g * p.b.transpose()) * s, b: (p.a.transpose() * g) * s };
        self.lora
            .iter()
            .zip(&eff.layers)
            .map(|(l, g)| LayerLora { q: one(&g[0], &l.q), k: one(&g[1], &l.k), v: one(&g[2], &l.v) })
            .collect()
    }
}
