//! Fine-tuning the adapters and a low-rank response projection against slow
//! responses, checkpointing, and validation-based epoch selection.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::features::{aligned_features, alignment_kernel, window_at, window_ends};
use super::loss::{corr_loss, LossKind};
use super::net::{EffectiveGrads, FeatureNet, FeatureNetConfig, LayerLora, LoraPair, WindowCache};
use crate::embed::delay_embed;
use crate::error::{Error, Result};
use crate::ridge::{cv_scores_fixed_alpha, fit_ridge_cv, RidgeConfig, RidgeSolution};
use crate::rng::rng_for;
use crate::series::TimeSeries;
use crate::signal::ResampleKernel;
use crate::tensor_io::{read_matrix, write_matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_trs: usize,
    pub adam: AdamConfig,
    /// Inner width of the feature-to-channel projection.
    pub projection_rank: usize,
    pub loss: LossKind,
    /// Feature stride before alignment to the response clock.
    pub feature_stride_s: f64,
    /// Response-sample delays concatenated in front of the projection;
    /// empty means the undelayed features alone.
    pub delays: Vec<usize>,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_trs: 10,
            adam: AdamConfig::default(),
            projection_rank: 100,
            loss: LossKind::Spatial,
            feature_stride_s: 0.25,
            delays: vec![1, 2, 3, 4],
            seed: 0,
        }
    }
}

/// Feature-to-channel map `U · V` with `U`: F × P and `V`: P × C.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl Projection {
    pub fn init(features: usize, rank: usize, channels: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "projection-init", 0);
        let mut g = |r: usize, c: usize, sd: f64| {
            let d = Normal::new(0.0, sd).expect("finite sd");
            DMatrix::from_fn(r, c, |_, _| d.sample(&mut rng))
        };
        let u = g(features, rank, 1.0 / (features as f64).sqrt());
        let v = g(rank, channels, 1.0 / (rank as f64).sqrt());
        Self { u, v }
    }
}

/// Fixed per-feature standardization, measured once on the initial net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], scale: vec![1.0; d] }
    }

    pub fn fit(rows: &DMatrix<f64>) -> Self {
        let n = rows.nrows() as f64;
        let (mean, scale) = rows
            .column_iter()
            .map(|c| {
                let m = c.sum() / n;
                let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                (m, if sd > 1e-12 { sd } else { 1.0 })
            })
            .unzip();
        Self { mean, scale }
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - self.mean[j]) / self.scale[j])
    }
}

/// One story: a stimulus waveform and its slow responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Story {
    pub name: String,
    pub stimulus: TimeSeries,
    pub responses: TimeSeries,
}

/// Per-story data prepared once for training.
struct Prepared {
    wave: Vec<f64>,
    ends: Vec<usize>,
    kernel: ResampleKernel,
    /// Responses z-scored per channel, samples × channels.
    target: DMatrix<f64>,
}

fn zscore_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = FeatureNorm::fit(m);
    norm.apply(m)
}

fn prepare(net: &FeatureNet, story: &Story, stride_s: f64) -> Result<Prepared> {
    let cfg = net.config();
    if story.stimulus.n_channels() != 1 || (story.stimulus.rate_hz - cfg.sample_rate_hz).abs() > 1e-9 * cfg.sample_rate_hz {
        return Err(Error::shape(format!("story {}: stimulus must be one channel at {} Hz", story.name, cfg.sample_rate_hz)));
    }
    let ends = window_ends(story.stimulus.n_samples(), story.stimulus.rate_hz, stride_s)?;
    let n_tr = story.responses.n_samples();
    let kernel = alignment_kernel(ends.len(), 1.0 / stride_s, story.responses.rate_hz, n_tr)
        .map_err(|e| Error::shape(format!("story {}: {e}", story.name)))?;
    Ok(Prepared { wave: story.stimulus.channel(0).to_vec(), ends, kernel, target: zscore_columns(&story.responses.to_matrix()) })
}

/// Trainable parameters, or gradients shaped like them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub lora: Vec<LayerLora>,
    pub projection: Projection,
}

impl Trainable {
    pub fn tensors(&self) -> Vec<&DMatrix<f64>> {
        let mut out: Vec<&DMatrix<f64>> = self.lora.iter().flat_map(|l| l.pairs()).flat_map(|p| [&p.a, &p.b]).collect();
        out.push(&self.projection.u);
        out.push(&self.projection.v);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut out: Vec<&mut DMatrix<f64>> =
            self.lora.iter_mut().flat_map(|l| l.pairs_mut()).flat_map(|p| [&mut p.a, &mut p.b]).collect();
        out.push(&mut self.projection.u);
        out.push(&mut self.projection.v);
        out
    }

    /// Parameter names in `tensors()` order.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.lora.len() {
            for w in ["q", "k", "v"] {
                for ab in ["a", "b"] {
                    out.push(format!("lora_l{l}_{w}_{ab}"));
                }
            }
        }
        out.push("proj_u".into());
        out.push("proj_v".into());
        out
    }
}

/// Response rows `[start, end)` of one story.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub story: usize,
    pub start: usize,
    pub end: usize,
}

/// Loss and gradients for one batch of consecutive response samples.
pub struct BatchEval {
    pub loss: f64,
    pub grads: Trainable,
    pub degenerate: usize,
}

fn effective_delays(delays: &[usize]) -> Vec<usize> {
    if delays.is_empty() { vec![0] } else { delays.to_vec() }
}

#[allow(clippy::too_many_arguments)]
fn batch_eval(
    net: &FeatureNet,
    proj: &Projection,
    norm: &FeatureNorm,
    kind: LossKind,
    delays: &[usize],
    p: &Prepared,
    start: usize,
    end: usize,
    want_grad: bool,
) -> Result<BatchEval> {
    let delays = effective_delays(delays);
    let (dmin, dmax) = (*delays.iter().min().unwrap(), *delays.iter().max().unwrap());
    let d = net.feature_dim();
    let n = end - start;
    // Aligned feature rows reachable from this batch through the delays.
    let a_lo = start.saturating_sub(dmax);
    let a_hi = end.saturating_sub(dmin).max(a_lo);
    let na = a_hi - a_lo;
    let len = net.config().window_len();
    let (lo, hi) = if na == 0 {
        (0, 0)
    } else {
        let lo = p.kernel.support(a_lo).0;
        (lo, (a_lo..a_hi).map(|j| p.kernel.support(j).1).max().unwrap_or(lo))
    };
    let mut feats = Vec::with_capacity(hi - lo);
    let mut caches: Vec<WindowCache> = Vec::with_capacity(hi - lo);
    for i in lo..hi {
        let w = window_at(&p.wave, p.ends[i], len);
        if want_grad {
            let (f, c) = net.forward_window_cached(&w)?;
            feats.push(f);
            caches.push(c);
        } else {
            feats.push(net.forward_window(&w)?);
        }
    }
    let mut f_tr = DMatrix::zeros(na, d);
    for j in a_lo..a_hi {
        let (s, _) = p.kernel.support(j);
        for (o, w) in p.kernel.weights(j).iter().enumerate() {
            for k in 0..d {
                f_tr[(j - a_lo, k)] += w * feats[s + o - lo][k];
            }
        }
    }
    let fa = norm.apply(&f_tr);
    let mut x = DMatrix::zeros(n, delays.len() * d);
    for j in start..end {
        for (di, &dl) in delays.iter().enumerate() {
            if j >= dl {
                let r = j - dl - a_lo;
                for k in 0..d {
                    x[(j - start, di * d + k)] = fa[(r, k)];
                }
            }
        }
    }
    let hidden = &x * &proj.u;
    let pred = &hidden * &proj.v;
    let target = p.target.rows(start, n).clone_owned();
    let out = corr_loss(kind, &pred, &target)?;
    let mut grads = Trainable {
        lora: net.lora().to_vec(),
        projection: Projection { u: DMatrix::zeros(0, 0), v: DMatrix::zeros(0, 0) },
    };
    if want_grad {
        let g = &out.grad;
        let gv = hidden.transpose() * g;
        let dhidden = g * proj.v.transpose();
        let gu = x.transpose() * &dhidden;
        let dx = &dhidden * proj.u.transpose();
        let mut dfa = DMatrix::<f64>::zeros(na, d);
        for j in start..end {
            for (di, &dl) in delays.iter().enumerate() {
                if j >= dl {
                    let r = j - dl - a_lo;
                    for k in 0..d {
                        dfa[(r, k)] += dx[(j - start, di * d + k)];
                    }
                }
            }
        }
        let mut eff = EffectiveGrads::zeros(net.lora().len(), d);
        let mut dwin = vec![vec![0.0; d]; hi - lo];
        for j in a_lo..a_hi {
            let (s, _) = p.kernel.support(j);
            for (o, w) in p.kernel.weights(j).iter().enumerate() {
                for k in 0..d {
                    dwin[s + o - lo][k] += w * dfa[(j - a_lo, k)] / norm.scale[k];
                }
            }
        }
        for (c, dw) in caches.iter().zip(&dwin) {
            if dw.iter().any(|v| *v != 0.0) {
                net.backward_window(c, dw, &mut eff)?;
            }
        }
        grads.lora = net.lora_grads(&eff);
        grads.projection = Projection { u: gu, v: gv };
    }
    Ok(BatchEval { loss: out.loss, grads, degenerate: out.degenerate.len() })
}

/// Loss and exact gradients for one span, exposed for gradient checks.
#[allow(clippy::too_many_arguments)]
pub fn span_loss_and_grads(
    net: &FeatureNet,
    proj: &Projection,
    norm: &FeatureNorm,
    kind: LossKind,
    delays: &[usize],
    story: &Story,
    stride_s: f64,
    start: usize,
    end: usize,
) -> Result<BatchEval> {
    let p = prepare(net, story, stride_s)?;
    if !(start < end && end <= p.target.nrows()) {
        return Err(Error::param(format!("span {start}..{end} outside the story")));
    }
    batch_eval(net, proj, norm, kind, delays, &p, start, end, true)
}

/// Adapters and projection after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub lora: Vec<LayerLora>,
    pub projection: Projection,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub net: FeatureNetConfig,
    pub finetune: FineTuneConfig,
    pub base_hash: String,
    pub feature_norm: FeatureNorm,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub feature_norm: FeatureNorm,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub base_hash: String,
}

/// Contiguous batches of `batch` response samples, never crossing stories.
pub fn make_spans(lengths: &[usize], batch: usize) -> Vec<Span> {
    let mut out = Vec::new();
    for (story, &n) in lengths.iter().enumerate() {
        let mut s = 0;
        while s < n {
            let e = (s + batch).min(n);
            out.push(Span { story, start: s, end: e });
            s = e;
        }
    }
    out
}

fn mean_loss(net: &FeatureNet, proj: &Projection, norm: &FeatureNorm, cfg: &FineTuneConfig, prepared: &[Prepared]) -> Result<f64> {
    let lengths: Vec<usize> = prepared.iter().map(|p| p.target.nrows()).collect();
    let spans = make_spans(&lengths, cfg.batch_trs);
    let mut total = 0.0;
    for s in &spans {
        total += batch_eval(net, proj, norm, cfg.loss, &cfg.delays, &prepared[s.story], s.start, s.end, false)?.loss;
    }
    Ok(total / spans.len().max(1) as f64)
}

/// Train adapters and projection; one checkpoint per epoch.
///
/// The base weights are checked against their hash after training.
pub fn finetune(net: &mut FeatureNet, train: &[Story], val: &[Story], cfg: &FineTuneConfig) -> Result<FineTuneOutcome> {
    if train.is_empty() {
        return Err(Error::param("no training stories"));
    }
    if cfg.batch_trs == 0 || cfg.projection_rank == 0 {
        return Err(Error::Config("batch_trs and projection_rank must be positive".into()));
    }
    let channels = train[0].responses.n_channels();
    if train.iter().chain(val).any(|s| s.responses.n_channels() != channels) {
        return Err(Error::shape("stories disagree on the channel count"));
    }
    let base_hash = net.base().hash();
    let prepared: Vec<Prepared> = train.iter().map(|s| prepare(net, s, cfg.feature_stride_s)).collect::<Result<_>>()?;
    let val_prepared: Vec<Prepared> = val.iter().map(|s| prepare(net, s, cfg.feature_stride_s)).collect::<Result<_>>()?;

    let initial: Vec<DMatrix<f64>> = train
        .iter()
        .map(|s| aligned_features(net, &s.stimulus, cfg.feature_stride_s, s.responses.rate_hz, s.responses.n_samples()).map(|f| f.values))
        .collect::<Result<_>>()?;
    let stacked = stack_rows(&initial);
    let norm = FeatureNorm::fit(&stacked);

    let mut params = Trainable {
        lora: net.lora().to_vec(),
        projection: Projection::init(net.feature_dim() * effective_delays(&cfg.delays).len(), cfg.projection_rank, channels, cfg.seed),
    };
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|m| m.shape()).collect();
    let mut adam = AdamState::new(cfg.adam, &shapes);
    let lengths: Vec<usize> = prepared.iter().map(|p| p.target.nrows()).collect();
    let mut spans = make_spans(&lengths, cfg.batch_trs);

    let mut checkpoints = Vec::with_capacity(cfg.epochs);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut batch_index = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut rng = rng_for(cfg.seed, "batch-order", epoch as u64);
        spans.shuffle(&mut rng);
        let mut total = 0.0;
        for s in &spans {
            let ev = batch_eval(net, &params.projection, &norm, cfg.loss, &cfg.delays, &prepared[s.story], s.start, s.end, true)?;
            if !ev.loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at batch {batch_index} (epoch {epoch})")));
            }
            total += ev.loss;
            let grads = ev.grads.tensors();
            adam.step(&mut params.tensors_mut(), &grads)
                .map_err(|e| Error::Numerical(format!("batch {batch_index} (epoch {epoch}): {e}")))?;
            net.set_lora(params.lora.clone())?;
            batch_index += 1;
        }
        let train_loss = total / spans.len() as f64;
        loss_curve.push(train_loss);
        let val_loss = if val_prepared.is_empty() { None } else { Some(mean_loss(net, &params.projection, &norm, cfg, &val_prepared)?) };
        log::info!("epoch {epoch}: train loss {train_loss:.6}{}", val_loss.map(|v| format!(", val loss {v:.6}")).unwrap_or_default());
        checkpoints.push(Checkpoint { epoch, lora: params.lora.clone(), projection: params.projection.clone(), train_loss, val_loss });
    }
    if net.base().hash() != base_hash {
        return Err(Error::Numerical("base weights changed during fine-tuning".into()));
    }
    Ok(FineTuneOutcome { checkpoints, feature_norm: norm, loss_curve, base_hash })
}

fn stack_rows(parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = parts.iter().map(|m| m.nrows()).sum();
    let c = parts.first().map(|m| m.ncols()).unwrap_or(0);
    let mut out = DMatrix::zeros(n, c);
    let mut r = 0;
    for m in parts {
        out.rows_mut(r, m.nrows()).copy_from(m);
        r += m.nrows();
    }
    out
}

pub fn checkpoint_dir(root: &Path, epoch: usize) -> PathBuf {
    root.join(format!("epoch_{epoch:03}"))
}

/// One TensorFile per parameter plus `meta.json`.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let t = Trainable { lora: ckpt.lora.clone(), projection: ckpt.projection.clone() };
    for (name, m) in t.names().iter().zip(t.tensors()) {
        write_matrix(&dir.join(format!("{name}.nst")), m)?;
    }
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(Checkpoint, CheckpointMeta)> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;
    let read = |name: &str| read_matrix(&dir.join(format!("{name}.nst")));
    let lora = (0..meta.net.tap_layer)
        .map(|l| {
            let pair = |w: &str| -> Result<LoraPair> { Ok(LoraPair { a: read(&format!("lora_l{l}_{w}_a"))?, b: read(&format!("lora_l{l}_{w}_b"))? }) };
            Ok(LayerLora { q: pair("q")?, k: pair("k")?, v: pair("v")? })
        })
        .collect::<Result<Vec<_>>>()?;
    let projection = Projection { u: read("proj_u")?, v: read("proj_v")? };
    let ckpt = Checkpoint { epoch: meta.epoch, lora, projection, train_loss: meta.train_loss, val_loss: meta.val_loss };
    Ok((ckpt, meta))
}

/// Write every checkpoint of a run under `root/epoch_NNN`.
pub fn save_outcome(root: &Path, net_cfg: &FeatureNetConfig, cfg: &FineTuneConfig, outcome: &FineTuneOutcome) -> Result<()> {
    for c in &outcome.checkpoints {
        let meta = CheckpointMeta {
            epoch: c.epoch,
            train_loss: c.train_loss,
            val_loss: c.val_loss,
            net: net_cfg.clone(),
            finetune: cfg.clone(),
            base_hash: outcome.base_hash.clone(),
            feature_norm: outcome.feature_norm.clone(),
            loss_curve: outcome.loss_curve.clone(),
        };
        save_checkpoint(&checkpoint_dir(root, c.epoch), c, &meta)?;
    }
    Ok(())
}

/// Slow-response design: per story, features aligned to the response clock
/// and FIR-delayed, then stacked.
pub fn slow_design(net: &FeatureNet, stories: &[Story], stride_s: f64, delays: &[usize]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut xs = Vec::with_capacity(stories.len());
    let mut ys = Vec::with_capacity(stories.len());
    for s in stories {
        let f = aligned_features(net, &s.stimulus, stride_s, s.responses.rate_hz, s.responses.n_samples())?;
        let x = if delays.is_empty() { f.values } else { delay_embed(&f, delays)?.values };
        xs.push(x);
        ys.push(s.responses.to_matrix());
    }
    Ok((stack_rows(&xs), stack_rows(&ys)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSelection {
    pub epoch: usize,
    /// Mean validation score per checkpoint, in checkpoint order.
    pub scores: Vec<f64>,
    /// Validation score of the unadapted net with its own alphas.
    pub pretrained_score: f64,
    /// Alphas from the unadapted net, used to compare epochs.
    pub pretrained_alphas: Vec<f64>,
    /// Full cross-validated refit for the chosen epoch.
    pub solution: RidgeSolution,
}

/// Score each checkpoint on the validation stories with the unadapted net's
/// per-channel alphas, pick the best (earliest on ties), then rerun the
/// alpha search for the winner.
pub fn select_epoch(
    net: &FeatureNet,
    checkpoints: &[Checkpoint],
    val: &[Story],
    stride_s: f64,
    delays: &[usize],
    ridge: &RidgeConfig,
) -> Result<EpochSelection> {
    if checkpoints.is_empty() {
        return Err(Error::param("no checkpoints to select from"));
    }
    if val.is_empty() {
        return Err(Error::param("no validation stories"));
    }
    let mut work = net.clone();
    let zero: Vec<LayerLora> = net
        .lora()
        .iter()
        .map(|l| {
            let z = |p: &LoraPair| LoraPair { a: DMatrix::zeros(p.a.nrows(), p.a.ncols()), b: p.b.clone() };
            LayerLora { q: z(&l.q), k: z(&l.k), v: z(&l.v) }
        })
        .collect();
    work.set_lora(zero)?;
    let (x0, y) = slow_design(&work, val, stride_s, delays)?;
    let pre = fit_ridge_cv(&x0, &y, ridge)?;
    let mut scores = Vec::with_capacity(checkpoints.len());
    for c in checkpoints {
        work.set_lora(c.lora.clone())?;
        let (x, _) = slow_design(&work, val, stride_s, delays)?;
        let s = cv_scores_fixed_alpha(&x, &y, ridge.n_folds, ridge.solver, &pre.alpha_per_channel)?;
        scores.push(s.iter().sum::<f64>() / s.len() as f64);
    }
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    work.set_lora(checkpoints[best].lora.clone())?;
    let (x, _) = slow_design(&work, val, stride_s, delays)?;
    let solution = fit_ridge_cv(&x, &y, ridge)?;
    Ok(EpochSelection {
        epoch: checkpoints[best].epoch,
        scores,
        pretrained_score: pre.mean_cv_score(),
        pretrained_alphas: pre.alpha_per_channel,
        solution,
    })
}

/// Net with the adapters of `ckpt` applied.
pub fn apply_checkpoint(net: &FeatureNet, ckpt: &Checkpoint) -> Result<FeatureNet> {
    let mut out = net.clone();
    out.set_lora(ckpt.lora.clone())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ridge::Solver;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net(seed: u64) -> FeatureNet {
        FeatureNet::new(FeatureNetConfig {
            sample_rate_hz: 20.0,
            frame_len: 4,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            mlp_width: 16,
            tap_layer: 2,
            window_s: 1.0,
            lora_rank: 2,
            seed,
        })
        .unwrap()
    }

    fn randn(r: usize, c: usize, sd: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let d = Normal::new(0.0, sd).unwrap();
        DMatrix::from_fn(r, c, |_, _| d.sample(rng))
    }

    fn waveform(seconds: usize, seed: u64) -> TimeSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(seconds * 20, 1, 1.0, &mut rng);
        TimeSeries::single(20.0, x.as_slice().to_vec()).unwrap()
    }

    /// Responses are a fixed linear map of `teacher`'s aligned features,
    /// optionally delayed by one sample.
    fn stories(teacher: &FeatureNet, map: &DMatrix<f64>, n: usize, seconds: usize, seed: u64, delay: usize) -> Vec<Story> {
        (0..n)
            .map(|i| {
                let stimulus = waveform(seconds, seed + i as u64);
                let n_tr = seconds / 2;
                let f = aligned_features(teacher, &stimulus, 0.25, 0.5, n_tr).unwrap();
                let mut y = &f.values * map;
                if delay > 0 {
                    y = crate::embed::shift_rows(&y, delay as i64).unwrap();
                }
                Story { name: format!("s{i}"), stimulus, responses: TimeSeries::from_matrix(0.5, &y).unwrap() }
            })
            .collect()
    }

    fn perturbed(net: &FeatureNet, seed: u64, sd: f64) -> Vec<LayerLora> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.lora()
            .iter()
            .map(|l| {
                let mut l = l.clone();
                for p in l.pairs_mut() {
                    p.a = randn(p.a.nrows(), p.a.ncols(), sd, &mut rng);
                }
                l
            })
            .collect()
    }

    fn small_cfg(epochs: usize) -> FineTuneConfig {
        FineTuneConfig { epochs, projection_rank: 5, adam: AdamConfig { lr: 5e-3, ..AdamConfig::default() }, ..FineTuneConfig::default() }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let teacher = tiny_net(1);
        let data = stories(&teacher, &randn(8, 4, 1.0, &mut rng), 1, 60, 2, 0);
        let mut net = tiny_net(1);
        net.set_lora(perturbed(&net, 3, 0.3)).unwrap();
        let proj = Projection::init(16, 5, 4, 4);
        let norm = FeatureNorm { mean: vec![0.1; 8], scale: vec![1.7; 8] };
        for kind in [LossKind::Spatial, LossKind::Temporal] {
            let ev = span_loss_and_grads(&net, &proj, &norm, kind, &[1, 2], &data[0], 0.25, 1, 12).unwrap();
            let params = Trainable { lora: net.lora().to_vec(), projection: proj.clone() };
            let eval = |t: &Trainable| {
                let mut n = net.clone();
                n.set_lora(t.lora.clone()).unwrap();
                span_loss_and_grads(&n, &t.projection, &norm, kind, &[1, 2], &data[0], 0.25, 1, 12).unwrap().loss
            };
            let eps = 1e-4;
            let an = ev.grads.tensors();
            for (ti, g) in an.iter().enumerate() {
                let mut fd = DMatrix::zeros(g.nrows(), g.ncols());
                for k in 0..g.len() {
                    let mut hi = params.clone();
                    hi.tensors_mut()[ti][k] += eps;
                    let mut lo = params.clone();
                    lo.tensors_mut()[ti][k] -= eps;
                    fd[k] = (eval(&hi) - eval(&lo)) / (2.0 * eps);
                }
                let err = (&fd - *g).amax() / fd.amax().max(1e-12);
                assert!(err < 1e-4, "{kind:?} {}: relative error {err}", params.names()[ti]);
            }
        }
    }

    #[test]
    fn zero_lora_a_gives_nonzero_a_gradient_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let teacher = tiny_net(5);
        let data = stories(&teacher, &randn(8, 4, 1.0, &mut rng), 1, 40, 6, 0);
        let net = tiny_net(5);
        let proj = Projection::init(8, 5, 4, 7);
        let ev = span_loss_and_grads(&net, &proj, &FeatureNorm::identity(8), LossKind::Spatial, &[], &data[0], 0.25, 0, 10).unwrap();
        for l in &ev.grads.lora {
            for p in l.pairs() {
                assert!(p.a.amax() > 0.0);
                assert_eq!(p.b.amax(), 0.0);
            }
        }
    }

    #[test]
    fn zero_epochs_leave_the_net_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let teacher = tiny_net(8);
        let data = stories(&teacher, &randn(8, 4, 1.0, &mut rng), 2, 40, 9, 0);
        let mut net = tiny_net(8);
        let before = net.clone();
        let out = finetune(&mut net, &data, &[], &small_cfg(0)).unwrap();
        assert!(out.checkpoints.is_empty());
        assert_eq!(net.lora(), before.lora());
    }

    #[test]
    fn training_is_deterministic_and_keeps_base_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let teacher = tiny_net(10);
        let data = stories(&teacher, &randn(8, 4, 1.0, &mut rng), 2, 40, 11, 0);
        let run = || {
            let mut net = tiny_net(10);
            let hash = net.base().hash();
            let out = finetune(&mut net, &data, &data[..1], &small_cfg(2)).unwrap();
            assert_eq!(net.base().hash(), hash);
            out
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.checkpoints.len(), 2);
        assert_ne!(a.checkpoints[0].lora, a.checkpoints[1].lora);
    }

    #[test]
    fn loss_falls_on_a_linear_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let teacher = tiny_net(12);
        let data = stories(&teacher, &randn(8, 6, 1.0, &mut rng), 3, 60, 13, 0);
        let mut net = tiny_net(12);
        let out = finetune(&mut net, &data, &[], &small_cfg(5)).unwrap();
        for w in out.loss_curve.windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "{:?}", out.loss_curve);
        }
        assert!(out.loss_curve[4] < out.loss_curve[0]);
    }

    #[test]
    fn checkpoints_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let teacher = tiny_net(14);
        let data = stories(&teacher, &randn(8, 4, 1.0, &mut rng), 1, 40, 15, 0);
        let mut net = tiny_net(14);
        let cfg = small_cfg(1);
        let out = finetune(&mut net, &data, &[], &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_outcome(dir.path(), net.config(), &cfg, &out).unwrap();
        let (ckpt, meta) = load_checkpoint(&checkpoint_dir(dir.path(), 1)).unwrap();
        assert_eq!(ckpt, out.checkpoints[0]);
        assert_eq!(meta.base_hash, net.base().hash());
        assert_eq!(meta.feature_norm, out.feature_norm);
    }

    fn ckpt(epoch: usize, lora: Vec<LayerLora>) -> Checkpoint {
        Checkpoint { epoch, lora, projection: Projection::init(8, 2, 3, 0), train_loss: 0.0, val_loss: None }
    }

    #[test]
    fn selection_finds_the_planted_epoch_and_breaks_ties_early() {
        let base = tiny_net(16);
        let planted = perturbed(&base, 17, 1.5);
        let mut teacher = base.clone();
        teacher.set_lora(planted.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let val = stories(&teacher, &randn(8, 3, 1.0, &mut rng), 2, 120, 19, 1);
        let ridge = RidgeConfig { alphas: vec![1e-3, 1e-1, 10.0], n_folds: 4, solver: Solver::Eigen };
        let cands = vec![ckpt(1, perturbed(&base, 20, 1.5)), ckpt(2, planted.clone()), ckpt(3, perturbed(&base, 21, 1.5))];
        let sel = select_epoch(&base, &cands, &val, 0.25, &[1, 2], &ridge).unwrap();
        assert_eq!(sel.epoch, 2, "scores {:?}", sel.scores);
        assert!(sel.scores[1] > 0.99);

        let same = vec![ckpt(1, planted.clone()), ckpt(2, planted.clone())];
        assert_eq!(select_epoch(&base, &same, &val, 0.25, &[1, 2], &ridge).unwrap().epoch, 1);
        let one = vec![ckpt(7, planted)];
        assert_eq!(select_epoch(&base, &one, &val, 0.25, &[1, 2], &ridge).unwrap().epoch, 7);
        assert!(select_epoch(&base, &[], &val, 0.25, &[1], &ridge).is_err());
    }
}
