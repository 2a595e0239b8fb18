//! End-to-end experiments: dataset layout on disk, run directories, and the
//! commands behind the CLI.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    bootstrap_mean_se, downsample_responses, fit_scaling, fmt, paired_ttest, psd_delta_rows, residual_psd_delta, snr_band_rows,
    snr_spectrum, threshold_channels, write_csv, PsdDelta, ScalingFit, SnrSpectrum, TTest,
};
use crate::embed::lag_grid;
use crate::error::{Error, Result};
use crate::netft::finetune::{
    apply_checkpoint, checkpoint_dir, finetune, load_checkpoint, save_outcome, select_epoch, slow_design, EpochSelection, FineTuneConfig,
    FineTuneOutcome, Story,
};
use crate::netft::{extract_features, AdamConfig, FeatureNet, FeatureNetConfig};
use crate::ridge::{fit_ridge_cv, lag_sweep, lag_sweep_residuals, pearson_scores, LagSweepResult, RidgeConfig, RidgeSolution, Solver};
use crate::series::TimeSeries;
use crate::signal::WelchConfig;
use crate::synthgen::{generate, GeneratorConfig, SynthDataset};
use crate::tensor_io::{read_tensor, write_series, DatasetManifest, Role};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagSpec {
    pub lo_s: f64,
    pub hi_s: f64,
    pub count: usize,
}

impl Default for LagSpec {
    fn default() -> Self {
        Self { lo_s: -2.0, hi_s: 2.0, count: 81 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub slow_welch: WelchConfig,
    pub fast_welch: WelchConfig,
    /// Split for residual-spectrum band summaries: the slow-data Nyquist.
    pub spectrum_threshold_hz: f64,
    /// Band edges for SNR tables.
    pub snr_band_edges_hz: Vec<f64>,
    pub snr_bias_correct: bool,
    pub rho_min: f64,
    pub n_boot: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            slow_welch: WelchConfig { segment_length: 32, overlap_fraction: 0.5 },
            fast_welch: WelchConfig { segment_length: 256, overlap_fraction: 0.5 },
            spectrum_threshold_hz: 0.25,
            snr_band_edges_hz: vec![0.0, 0.125, 0.25],
            snr_bias_correct: true,
            rho_min: 0.1,
            n_boot: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Master seed; copied into the generator, net and fine-tuning seeds.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub net: FeatureNetConfig,
    pub finetune: FineTuneConfig,
    pub slow_ridge: RidgeConfig,
    pub fast_ridge: RidgeConfig,
    /// FIR delays in slow-response samples.
    pub slow_delays: Vec<usize>,
    pub slow_feature_stride_s: f64,
    pub fast_feature_stride_s: f64,
    pub fast_lags: LagSpec,
    pub analysis: AnalysisConfig,
    pub scaling_counts: Vec<usize>,
    /// Slow responses are downsampled by this factor before fine-tuning; 1 keeps them.
    pub downsample_factor: usize,
}

impl ExperimentConfig {
    /// Desk-scale defaults.
    pub fn desk(seed: u64) -> Self {
        let net = FeatureNetConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            mlp_width: 32,
            tap_layer: 2,
            window_s: 1.0,
            frame_len: 20,
            ..FeatureNetConfig::default()
        };
        let finetune = FineTuneConfig {
            epochs: 40,
            projection_rank: 4,
            adam: AdamConfig { lr: 5e-3, ..AdamConfig::default() },
            ..FineTuneConfig::default()
        };
        Self {
            seed,
            generator: GeneratorConfig::default(),
            net,
            finetune,
            slow_ridge: RidgeConfig::default(),
            fast_ridge: RidgeConfig { solver: Solver::Cholesky, ..RidgeConfig::default() },
            slow_delays: vec![1, 2, 3, 4],
            slow_feature_stride_s: 0.25,
            fast_feature_stride_s: 0.05,
            fast_lags: LagSpec::default(),
            analysis: AnalysisConfig::default(),
            scaling_counts: vec![1, 2, 4, 8, 16],
            downsample_factor: 1,
        }
        .with_seed(seed)
    }

    /// Smallest sizes that still exercise every command; for tests.
    pub fn smoke(seed: u64) -> Self {
        let mut cfg = Self::desk(seed);
        let g = &mut cfg.generator;
        g.story_s = 60.0;
        g.n_train = 2;
        g.podcast_s = 60.0;
        g.slow_channels = 6;
        g.fast_channels = 4;
        cfg.finetune.epochs = 2;
        cfg.fast_lags = LagSpec { lo_s: -0.5, hi_s: 0.5, count: 11 };
        cfg.scaling_counts = vec![1, 2];
        cfg.analysis.n_boot = 50;
        cfg.analysis.slow_welch.segment_length = 16;
        cfg
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.generator.seed = seed;
        self.net.seed = seed;
        self.finetune.seed = seed;
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.net.validate()?;
        if self.downsample_factor == 0 {
            return Err(Error::Config("downsample_factor must be at least 1".into()));
        }
        if self.fast_lags.count == 0 || self.fast_lags.lo_s > self.fast_lags.hi_s {
            return Err(Error::Config("fast lag grid is empty".into()));
        }
        if self.scaling_counts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("scaling story counts must be strictly increasing".into()));
        }
        if (self.net.sample_rate_hz - self.generator.internal_rate_hz).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "net expects {} Hz waveforms but the generator renders {} Hz",
                self.net.sample_rate_hz, self.generator.internal_rate_hz
            )));
        }
        Ok(())
    }

    fn fast_lag_grid(&self) -> Result<Vec<i64>> {
        lag_grid(self.fast_lags.lo_s, self.fast_lags.hi_s, self.fast_lags.count, 1.0 / self.fast_feature_stride_s)
    }
}

/// Slow stories, repeated test presentations and the fast recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Story>,
    pub val: Vec<Story>,
    /// Test story with repeat-averaged responses.
    pub test: Story,
    pub test_repeats: Vec<TimeSeries>,
    pub fast_stimulus: TimeSeries,
    pub fast_responses: TimeSeries,
}

impl From<SynthDataset> for Dataset {
    fn from(s: SynthDataset) -> Self {
        Self {
            train: s.train,
            val: s.val,
            test: s.test,
            test_repeats: s.test_repeats,
            fast_stimulus: s.podcast_stimulus,
            fast_responses: s.podcast_responses,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: String,
    pub fast: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
}

pub const DATASET_INDEX: &str = "dataset.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

impl Dataset {
    pub fn save(&self, dir: &Path, generator: Option<&GeneratorConfig>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in self.train.iter().chain(&self.val) {
            write_series(dir, &format!("{}_stimulus", s.name), &s.stimulus, Role::StimulusWaveform, None)?;
            write_series(dir, &format!("{}_responses", s.name), &s.responses, Role::Responses, None)?;
        }
        let t = &self.test;
        write_series(dir, &format!("{}_stimulus", t.name), &t.stimulus, Role::StimulusWaveform, None)?;
        let mut reps = Vec::with_capacity(self.test_repeats.len());
        for (i, r) in self.test_repeats.iter().enumerate() {
            let name = format!("{}_rep{i:02}", t.name);
            write_series(dir, &name, r, Role::Responses, None)?;
            reps.push(format!("{name}.nst"));
        }
        write_series(dir, &format!("{}_responses", t.name), &t.responses, Role::Responses, Some(reps))?;
        write_series(dir, "fast_stimulus", &self.fast_stimulus, Role::StimulusWaveform, None)?;
        write_series(dir, "fast_responses", &self.fast_responses, Role::Responses, None)?;
        let index = DatasetIndex {
            train: self.train.iter().map(|s| s.name.clone()).collect(),
            val: self.val.iter().map(|s| s.name.clone()).collect(),
            test: t.name.clone(),
            fast: "fast".into(),
            generator: generator.cloned(),
        };
        write_json(&dir.join(DATASET_INDEX), &index)
    }

    fn load_story(dir: &Path, name: &str) -> Result<Story> {
        let stim = DatasetManifest::load(&dir.join(format!("{name}_stimulus.json")))?;
        let resp = DatasetManifest::load(&dir.join(format!("{name}_responses.json")))?;
        Ok(Story { name: name.to_string(), stimulus: stim.load_series()?, responses: resp.load_series()? })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: DatasetIndex = read_json(&dir.join(DATASET_INDEX))?;
        let train = index.train.iter().map(|n| Self::load_story(dir, n)).collect::<Result<Vec<_>>>()?;
        let val = index.val.iter().map(|n| Self::load_story(dir, n)).collect::<Result<Vec<_>>>()?;
        let test = Self::load_story(dir, &index.test)?;
        let manifest = DatasetManifest::load(&dir.join(format!("{}_responses.json", index.test)))?;
        let test_repeats = manifest
            .repeats
            .clone()
            .unwrap_or_default()
            .iter()
            .map(|r| read_tensor(&manifest.resolve(r)).and_then(|(t, _)| t.to_series(manifest.rate_hz)))
            .collect::<Result<Vec<_>>>()?;
        let fast_stimulus = DatasetManifest::load(&dir.join(format!("{}_stimulus.json", index.fast)))?.load_series()?;
        let fast_responses = DatasetManifest::load(&dir.join(format!("{}_responses.json", index.fast)))?.load_series()?;
        let ds = Self { train, val, test, test_repeats, fast_stimulus, fast_responses };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        if self.train.is_empty() || self.val.is_empty() {
            return Err(Error::Config("dataset needs training and validation stories".into()));
        }
        let c = self.train[0].responses.n_channels();
        if self.train.iter().chain(&self.val).chain([&self.test]).any(|s| s.responses.n_channels() != c) {
            return Err(Error::shape("slow stories disagree on the channel count"));
        }
        Ok(())
    }

    /// Copy with the slow train and validation responses downsampled.
    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        if factor <= 1 {
            return Ok(self.clone());
        }
        let ds = |s: &Story| -> Result<Story> { Ok(Story { responses: downsample_responses(&s.responses, factor)?, ..s.clone() }) };
        Ok(Self {
            train: self.train.iter().map(ds).collect::<Result<_>>()?,
            val: self.val.iter().map(ds).collect::<Result<_>>()?,
            ..self.clone()
        })
    }

    pub fn with_train_count(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.train.len() {
            return Err(Error::Config(format!("cannot take {n} of {} training stories", self.train.len())));
        }
        Ok(Self { train: self.train[..n].to_vec(), ..self.clone() })
    }
}

/// Checks every manifest and tensor of a dataset directory.
pub fn validate_dataset(dir: &Path) -> Result<DatasetIndex> {
    let index: DatasetIndex = read_json(&dir.join(DATASET_INDEX))?;
    let names: Vec<&String> = index.train.iter().chain(&index.val).chain([&index.test, &index.fast]).collect();
    for n in names {
        for part in ["stimulus", "responses"] {
            DatasetManifest::load(&dir.join(format!("{n}_{part}.json")))?.validate()?;
        }
    }
    let test = DatasetManifest::load(&dir.join(format!("{}_responses.json", index.test)))?;
    if test.repeats.as_ref().is_none_or(|r| r.len() < 2) {
        return Err(Error::Manifest { path: dir.join(format!("{}_responses.json", index.test)), reason: "test story needs at least two repeats".into() });
    }
    Dataset::load(dir)?;
    Ok(index)
}

/// Run-directory log without timestamps, so reruns are byte-identical.
#[derive(Debug, Default)]
pub struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    pub fn line(&mut self, s: impl Into<String>) {
        let s = s.into();
        log::info!("{s}");
        self.lines.push(s);
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("run.log");
        let mut text = self.lines.join("\n");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::Config(format!("output directory {} exists; pass --force to overwrite", dir.display())));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn snapshot(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).map_err(|e| Error::io(&path, e))
}

pub fn pretrained_net(cfg: &ExperimentConfig) -> Result<FeatureNet> {
    FeatureNet::new(cfg.net.clone())
}

/// FIR delays in samples of a response series downsampled by `factor`.
pub fn delays_for_factor(delays: &[usize], factor: usize) -> Vec<usize> {
    let mut out: Vec<usize> = delays.iter().map(|d| d.div_ceil(factor.max(1))).collect();
    out.dedup();
    out
}

/// A finished fine-tuning run with its selected epoch.
#[derive(Debug, Clone)]
pub struct FineTuneRun {
    pub outcome: FineTuneOutcome,
    pub selection: EpochSelection,
    pub tuned: FeatureNet,
}

pub fn run_finetune(cfg: &ExperimentConfig, data: &Dataset, log: &mut RunLog) -> Result<FineTuneRun> {
    let data = data.downsampled(cfg.downsample_factor)?;
    let mut ft = cfg.finetune.clone();
    ft.delays = delays_for_factor(&ft.delays, cfg.downsample_factor);
    let slow_delays = delays_for_factor(&cfg.slow_delays, cfg.downsample_factor);
    let mut net = pretrained_net(cfg)?;
    let base = net.clone();
    log.line(format!(
        "fine-tuning on {} stories ({} Hz responses), {} epochs",
        data.train.len(),
        data.train[0].responses.rate_hz,
        ft.epochs
    ));
    let outcome = finetune(&mut net, &data.train, &data.val, &ft)?;
    for c in &outcome.checkpoints {
        log.line(format!("epoch {:03} train_loss {} val_loss {}", c.epoch, fmt(c.train_loss), c.val_loss.map(fmt).unwrap_or_else(|| "none".into())));
    }
    let selection = select_epoch(&base, &outcome.checkpoints, &data.val, cfg.slow_feature_stride_s, &slow_delays, &cfg.slow_ridge)?;
    log.line(format!("selected epoch {} (validation score {}, pretrained {})", selection.epoch, fmt(selection.scores[selection.epoch - 1]), fmt(selection.pretrained_score)));
    let ckpt = outcome.checkpoints.iter().find(|c| c.epoch == selection.epoch).expect("selected epoch exists");
    let tuned = apply_checkpoint(&base, ckpt)?;
    Ok(FineTuneRun { outcome, selection, tuned })
}

/// Lag-sweep encoding of the fast responses.
#[derive(Debug, Clone)]
pub struct FastEncoding {
    pub sweep: LagSweepResult,
    /// Residuals at each channel's best lag over the scored rows.
    pub residuals: TimeSeries,
}

pub fn encode_fast(cfg: &ExperimentConfig, net: &FeatureNet, data: &Dataset) -> Result<FastEncoding> {
    let feats = extract_features(net, &data.fast_stimulus, cfg.fast_feature_stride_s)?;
    let resp = &data.fast_responses;
    if (feats.rate_hz - resp.rate_hz).abs() > 1e-9 * resp.rate_hz {
        return Err(Error::shape(format!("features at {} Hz but fast responses at {} Hz", feats.rate_hz, resp.rate_hz)));
    }
    let n = feats.n_samples().min(resp.n_samples());
    let feats = crate::embed::FeatureMatrix::new(feats.values.rows(0, n).clone_owned(), feats.rate_hz)?;
    let resp = resp.slice(0, n)?;
    let lags = cfg.fast_lag_grid()?;
    let sweep = lag_sweep(&feats, &resp, &lags, &cfg.fast_ridge)?;
    let residuals = lag_sweep_residuals(&feats, &resp, &sweep, &cfg.fast_ridge)?;
    Ok(FastEncoding { sweep, residuals })
}

/// Slow encoding model fit on the training stories, scored on the test story.
#[derive(Debug, Clone)]
pub struct SlowEncoding {
    pub solution: RidgeSolution,
    pub test_scores: Vec<f64>,
}

pub fn encode_slow(cfg: &ExperimentConfig, net: &FeatureNet, data: &Dataset) -> Result<SlowEncoding> {
    let (x, y) = slow_design(net, &data.train, cfg.slow_feature_stride_s, &cfg.slow_delays)?;
    let solution = fit_ridge_cv(&x, &y, &cfg.slow_ridge)?;
    let (xt, yt) = slow_design(net, std::slice::from_ref(&data.test), cfg.slow_feature_stride_s, &cfg.slow_delays)?;
    let pred = solution.predict_responses(&xt)?;
    let test_scores = pearson_scores(&pred, &yt)?.r;
    Ok(SlowEncoding { solution, test_scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub pretrained_mean: f64,
    pub tuned_mean: f64,
    pub ttest: TTest,
    /// Bootstrap SE over channels of the mean tuned score.
    pub tuned_se: f64,
}

pub fn compare_scores(pre: &[f64], tuned: &[f64], n_boot: usize, seed: u64) -> Result<Comparison> {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(Comparison {
        pretrained_mean: mean(pre),
        tuned_mean: mean(tuned),
        ttest: paired_ttest(pre, tuned)?,
        tuned_se: bootstrap_mean_se(tuned, n_boot, seed)?,
    })
}

fn save_fast(dir: &Path, cfg: &ExperimentConfig, enc: &FastEncoding) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    enc.sweep.save(dir, "fast_sweep")?;
    write_series(dir, "fast_residuals", &enc.residuals, Role::Responses, None)?;
    let rate = 1.0 / cfg.fast_feature_stride_s;
    let rows: Vec<Vec<String>> = (0..enc.sweep.best_score_per_channel.len())
        .map(|c| {
            let lag = enc.sweep.best_lag_per_channel[c];
            vec![c.to_string(), lag.to_string(), fmt(lag as f64 / rate), fmt(enc.sweep.best_score_per_channel[c]), fmt(enc.sweep.best_alpha_per_channel[c])]
        })
        .collect();
    write_csv(&dir.join("fast_scores.csv"), &["channel", "best_lag", "best_lag_s", "score", "alpha"], &rows)
}

fn save_checkpoints(dir: &Path, cfg: &ExperimentConfig, run: &FineTuneRun) -> Result<()> {
    let mut ft = cfg.finetune.clone();
    ft.delays = delays_for_factor(&ft.delays, cfg.downsample_factor);
    save_outcome(&dir.join("checkpoints"), &cfg.net, &ft, &run.outcome)?;
    #[derive(Serialize)]
    struct Selection<'a> {
        epoch: usize,
        scores: &'a [f64],
        pretrained_score: f64,
        pretrained_alphas: &'a [f64],
        downsample_factor: usize,
    }
    write_json(
        &dir.join("selection.json"),
        &Selection {
            epoch: run.selection.epoch,
            scores: &run.selection.scores,
            pretrained_score: run.selection.pretrained_score,
            pretrained_alphas: &run.selection.pretrained_alphas,
            downsample_factor: cfg.downsample_factor,
        },
    )?;
    run.selection.solution.save(dir, "selected_ridge")?;
    let rows: Vec<Vec<String>> = run
        .outcome
        .checkpoints
        .iter()
        .zip(&run.selection.scores)
        .map(|(c, s)| vec![c.epoch.to_string(), fmt(c.train_loss), c.val_loss.map(fmt).unwrap_or_default(), fmt(*s)])
        .collect();
    write_csv(&dir.join("epochs.csv"), &["epoch", "train_loss", "val_loss", "val_score"], &rows)
}

#[derive(Deserialize)]
struct SelectionFile {
    epoch: usize,
}

/// The tuned net recorded in a fine-tuning run directory.
pub fn load_tuned(run_dir: &Path) -> Result<(FeatureNet, usize)> {
    let sel: SelectionFile = read_json(&run_dir.join("selection.json"))?;
    let (ckpt, meta) = load_checkpoint(&checkpoint_dir(&run_dir.join("checkpoints"), sel.epoch))?;
    let base = FeatureNet::new(meta.net.clone())?;
    if base.base().hash() != meta.base_hash {
        return Err(Error::Manifest { path: run_dir.to_path_buf(), reason: "checkpoint base hash does not match the regenerated net".into() });
    }
    Ok((apply_checkpoint(&base, &ckpt)?, sel.epoch))
}

/// Last path component; logs avoid absolute paths so that reruns elsewhere
/// are byte-identical.
fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

fn file_sha256(p: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn load_data(cfg: &ExperimentConfig, data_dir: Option<&Path>, log: &mut RunLog) -> Result<Dataset> {
    match data_dir {
        Some(d) => {
            let ds = Dataset::load(d)?;
            log.line(format!("dataset {} (index sha256 {})", dir_name(d), file_sha256(&d.join(DATASET_INDEX))?));
            Ok(ds)
        }
        None => {
            log.line(format!("dataset generated in memory from seed {}", cfg.generator.seed));
            Ok(generate(&cfg.generator)?.into())
        }
    }
}

pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    prepare_output(out, force)?;
    let ds: Dataset = generate(&cfg.generator)?.into();
    ds.save(out, Some(&cfg.generator))?;
    validate_dataset(out)?;
    Ok(())
}

pub fn cmd_finetune(cfg: &ExperimentConfig, data_dir: Option<&Path>, out: &Path, force: bool) -> Result<FineTuneRun> {
    cfg.validate()?;
    prepare_output(out, force)?;
    snapshot(cfg, out)?;
    let mut log = RunLog::default();
    let data = load_data(cfg, data_dir, &mut log)?;
    let run = run_finetune(cfg, &data, &mut log)?;
    save_checkpoints(out, cfg, &run)?;
    log.write(out)?;
    Ok(run)
}

fn net_for(cfg: &ExperimentConfig, checkpoint: Option<&Path>, log: &mut RunLog) -> Result<FeatureNet> {
    match checkpoint {
        Some(dir) => {
            let (net, epoch) = load_tuned(dir)?;
            log.line(format!("tuned net from {} (epoch {epoch}, base {})", dir_name(dir), net.base().hash()));
            Ok(net)
        }
        None => pretrained_net(cfg),
    }
}

pub fn cmd_encode_slow(cfg: &ExperimentConfig, data_dir: Option<&Path>, out: &Path, checkpoint: Option<&Path>, force: bool) -> Result<SlowEncoding> {
    cfg.validate()?;
    prepare_output(out, force)?;
    snapshot(cfg, out)?;
    let mut log = RunLog::default();
    let data = load_data(cfg, data_dir, &mut log)?;
    let net = net_for(cfg, checkpoint, &mut log)?;
    let enc = encode_slow(cfg, &net, &data)?;
    enc.solution.save(out, "slow_ridge")?;
    let rows: Vec<Vec<String>> = enc
        .test_scores
        .iter()
        .enumerate()
        .map(|(c, s)| vec![c.to_string(), fmt(*s), fmt(enc.solution.cv_score_per_channel[c]), fmt(enc.solution.alpha_per_channel[c])])
        .collect();
    write_csv(&out.join("slow_scores.csv"), &["channel", "test_score", "cv_score", "alpha"], &rows)?;
    let mean = enc.test_scores.iter().sum::<f64>() / enc.test_scores.len() as f64;
    write_json(&out.join("slow_encoding.json"), &serde_json::json!({ "mean_test_score": mean, "test_scores": enc.test_scores }))?;
    log.line(format!("slow test score {}", fmt(mean)));
    log.write(out)?;
    Ok(enc)
}

/// Pretrained encoding, plus the tuned one and a paired comparison when a
/// checkpoint run is given. Outputs go to `pretrained/` and `tuned/`.
pub fn cmd_encode_fast(cfg: &ExperimentConfig, data_dir: Option<&Path>, out: &Path, checkpoint: Option<&Path>, force: bool) -> Result<Option<Comparison>> {
    cfg.validate()?;
    prepare_output(out, force)?;
    snapshot(cfg, out)?;
    let mut log = RunLog::default();
    let data = load_data(cfg, data_dir, &mut log)?;
    let pre = encode_fast(cfg, &pretrained_net(cfg)?, &data)?;
    save_fast(&out.join("pretrained"), cfg, &pre)?;
    log.line(format!("pretrained fast score {}", fmt(pre.sweep.mean_best_score())));
    let mut cmp = None;
    if let Some(dir) = checkpoint {
        let net = net_for(cfg, Some(dir), &mut log)?;
        let tuned = encode_fast(cfg, &net, &data)?;
        save_fast(&out.join("tuned"), cfg, &tuned)?;
        log.line(format!("tuned fast score {}", fmt(tuned.sweep.mean_best_score())));
        let c = compare_scores(&pre.sweep.best_score_per_channel, &tuned.sweep.best_score_per_channel, cfg.analysis.n_boot, cfg.seed)?;
        write_comparison(out, &pre.sweep.best_score_per_channel, &tuned.sweep.best_score_per_channel, &c)?;
        log.line(format!("paired t {} p {}", fmt(c.ttest.t), fmt(c.ttest.p)));
        cmp = Some(c);
    }
    log.write(out)?;
    Ok(cmp)
}

fn write_comparison(out: &Path, pre: &[f64], tuned: &[f64], c: &Comparison) -> Result<()> {
    let rows: Vec<Vec<String>> =
        pre.iter().zip(tuned).enumerate().map(|(i, (a, b))| vec![i.to_string(), fmt(*a), fmt(*b), fmt(b - a)]).collect();
    write_csv(&out.join("comparison.csv"), &["channel", "pretrained", "tuned", "difference"], &rows)?;
    write_json(&out.join("comparison.json"), c)
}

pub fn spectrum(cfg: &ExperimentConfig, resid_a: &TimeSeries, resid_b: &TimeSeries) -> Result<PsdDelta> {
    let n = resid_a.n_samples().min(resid_b.n_samples());
    residual_psd_delta(&resid_a.slice(0, n)?, &resid_b.slice(0, n)?, cfg.analysis.fast_welch, cfg.analysis.spectrum_threshold_hz)
}

/// Residual PSD change from the encoding in `run_a` to the one in `run_b`.
pub fn cmd_spectrum(cfg: &ExperimentConfig, run_a: &Path, run_b: &Path, out: &Path, force: bool) -> Result<PsdDelta> {
    cfg.validate()?;
    let load = |d: &Path| DatasetManifest::load(&d.join("fast_residuals.json")).and_then(|m| m.load_series());
    let (a, b) = (load(run_a)?, load(run_b)?);
    prepare_output(out, force)?;
    snapshot(cfg, out)?;
    let d = spectrum(cfg, &a, &b)?;
    write_csv(&out.join("spectrum.csv"), &["freq_hz", "mean_delta_psd", "se_delta_psd"], &psd_delta_rows(&d))?;
    let band_rows = vec![
        vec!["below".into(), fmt(0.0), fmt(d.threshold_hz), fmt(d.total_pct_below)],
        vec!["above".into(), fmt(d.threshold_hz), fmt(a.rate_hz / 2.0), fmt(d.total_pct_above)],
    ];
    write_csv(&out.join("spectrum_bands.csv"), &["band", "lo_hz", "hi_hz", "pct_change"], &band_rows)?;
    write_json(
        &out.join("spectrum.json"),
        &serde_json::json!({
            "threshold_hz": d.threshold_hz,
            "total_pct_below": d.total_pct_below,
            "total_pct_above": d.total_pct_above,
            "pct_below": d.pct_below,
            "pct_above": d.pct_above,
        }),
    )?;
    let mut log = RunLog::default();
    log.line(format!("residual power change below {} Hz: {}%", d.threshold_hz, fmt(d.total_pct_below)));
    log.line(format!("residual power change above {} Hz: {}%", d.threshold_hz, fmt(d.total_pct_above)));
    log.write(out)?;
    Ok(d)
}

pub fn cmd_snr(cfg: &ExperimentConfig, data_dir: Option<&Path>, out: &Path, force: bool) -> Result<SnrSpectrum> {
    cfg.validate()?;
    prepare_output(out, force)?;
    snapshot(cfg, out)?;
    let mut log = RunLog::default();
    let data = load_data(cfg, data_dir, &mut log)?;
    let s = snr_spectrum(&data.test_repeats, cfg.analysis.slow_welch, cfg.analysis.snr_bias_correct)?;
    let rows: Vec<Vec<String>> = s
        .freqs_hz
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let m = s.snr.iter().map(|c| c[k]).sum::<f64>() / s.snr.len() as f64;
            vec![fmt(*f), fmt(m)]
        })
        .collect();
    write_csv(&out.join("snr.csv"), &["freq_hz", "mean_snr"], &rows)?;
    write_csv(&out.join("snr_bands.csv"), &["lo_hz", "hi_hz", "mean_snr"], &snr_band_rows(&s, &cfg.analysis.snr_band_edges_hz))?;
    write_json(&out.join("snr.json"), &s)?;
    for w in cfg.analysis.snr_band_edges_hz.windows(2) {
        log.line(format!("SNR {}-{} Hz: {}", w[0], w[1], fmt(s.band_mean(w[0], w[1]))));
    }
    log.write(out)?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub fit: ScalingFit,
    pub baseline: Vec<f64>,
    pub scores: BTreeMap<usize, Vec<f64>>,
    pub mean_scores: Vec<f64>,
    /// Channels above the pretrained-score threshold.
    pub selected_channels: Vec<usize>,
    pub selected_mean_slope: f64,
}

/// Fine-tune on the first N training stories for each N and fit the
/// per-channel log-linear scaling of fast scores.
pub fn run_scaling(cfg: &ExperimentConfig, data: &Dataset, counts: &[usize], log: &mut RunLog) -> Result<ScalingReport> {
    if counts.len() < 2 {
        return Err(Error::Config("scaling needs at least two story counts".into()));
    }
    let baseline = encode_fast(cfg, &pretrained_net(cfg)?, data)?.sweep.best_score_per_channel;
    let mut scores = BTreeMap::new();
    let mut mean_scores = Vec::with_capacity(counts.len());
    let mut ses = Vec::with_capacity(counts.len());
    for &n in counts {
        let sub = data.with_train_count(n)?;
        let run = run_finetune(cfg, &sub, log)?;
        let s = encode_fast(cfg, &run.tuned, data)?.sweep.best_score_per_channel;
        let m = s.iter().sum::<f64>() / s.len() as f64;
        ses.push(bootstrap_mean_se(&s, cfg.analysis.n_boot, cfg.seed ^ n as u64)?);
        log.line(format!("{n} stories: fast score {}", fmt(m)));
        mean_scores.push(m);
        scores.insert(n, s);
    }
    let mut fit = fit_scaling(&scores, &baseline)?;
    fit.bootstrap_se = ses;
    let selected_channels = threshold_channels(&baseline, cfg.analysis.rho_min);
    let selected_mean_slope = if selected_channels.is_empty() {
        f64::NAN
    } else {
        selected_channels.iter().map(|&c| fit.slope[c]).sum::<f64>() / selected_channels.len() as f64
    };
    Ok(ScalingReport { fit, baseline, scores, mean_scores, selected_channels, selected_mean_slope })
}

pub fn cmd_scaling(cfg: &ExperimentConfig, data_dir: Option<&Path>, out: &Path, counts: &[usize], force: bool) -> Result<ScalingReport> {
    cfg.validate()?;
    prepare_output(out, force)?;
    snapshot(cfg, out)?;
    let mut log = RunLog::default();
    let data = load_data(cfg, data_dir, &mut log)?;
    let rep = run_scaling(cfg, &data, counts, &mut log)?;
    let points: Vec<Vec<String>> =
        rep.fit.story_counts.iter().enumerate().map(|(i, n)| vec![n.to_string(), fmt(rep.mean_scores[i]), fmt(rep.fit.bootstrap_se[i])]).collect();
    write_csv(&out.join("scaling_points.csv"), &["stories", "mean_score", "bootstrap_se"], &points)?;
    let fits: Vec<Vec<String>> = (0..rep.baseline.len())
        .map(|c| vec![c.to_string(), fmt(rep.baseline[c]), fmt(rep.fit.slope[c]), fmt(rep.fit.intercept[c]), fmt(rep.fit.r2[c])])
        .collect();
    write_csv(&out.join("scaling_fits.csv"), &["channel", "pretrained_score", "slope", "intercept", "r2"], &fits)?;
    write_json(&out.join("scaling.json"), &rep)?;
    log.line(format!("mean slope {} per doubling", fmt(rep.fit.mean_slope())));
    log.write(out)?;
    Ok(rep)
}

const REPORT_SOURCES: [&str; 6] = ["selection.json", "slow_encoding.json", "comparison.json", "spectrum.json", "snr.json", "scaling.json"];

/// Gather the JSON results under `run` into `report.json` and a flat
/// `report.csv` of scalar entries.
pub fn cmd_report(run: &Path) -> Result<PathBuf> {
    if !run.is_dir() {
        return Err(Error::Config(format!("{} is not a run directory", run.display())));
    }
    let mut found = BTreeMap::new();
    let mut stack = vec![run.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                if p.file_name().is_some_and(|n| n != "checkpoints") {
                    stack.push(p);
                }
            } else if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| REPORT_SOURCES.contains(&n)) {
                let v: serde_json::Value = read_json(&p)?;
                let rel = p.strip_prefix(run).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                found.insert(rel, v);
            }
        }
    }
    let mut rows = Vec::new();
    for (file, v) in &found {
        if let Some(obj) = v.as_object() {
            for (k, x) in obj {
                if let Some(f) = x.as_f64() {
                    rows.push(vec![file.clone(), k.clone(), fmt(f)]);
                } else if let Some(o) = x.as_object() {
                    for (k2, x2) in o {
                        if let Some(f) = x2.as_f64() {
                            rows.push(vec![file.clone(), format!("{k}.{k2}"), fmt(f)]);
                        }
                    }
                }
            }
        }
    }
    write_csv(&run.join("report.csv"), &["source", "key", "value"], &rows)?;
    let path = run.join("report.json");
    write_json(&path, &found)?;
    Ok(path)
}

/// Parse every JSON file and read every tensor under `dir`; a dataset
/// directory additionally gets full manifest validation.
pub fn cmd_validate(dir: &Path) -> Result<usize> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dir.display())));
    }
    if dir.join(DATASET_INDEX).exists() {
        validate_dataset(dir)?;
    }
    let mut checked = 0;
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&d).map_err(|e| Error::io(&d, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            match p.extension().and_then(|e| e.to_str()) {
                Some("json") => {
                    let _: serde_json::Value = read_json(&p)?;
                    checked += 1;
                }
                Some("nst") => {
                    read_tensor(&p)?;
                    checked += 1;
                }
                Some("csv") => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    let mut lines = text.lines();
                    let width = lines.next().map(|h| h.split(',').count()).unwrap_or(0);
                    if width == 0 || lines.any(|l| l.split(',').count() != width) {
                        return Err(Error::Manifest { path: p.clone(), reason: "ragged CSV".into() });
                    }
                    checked += 1;
                }
                _ => {}
            }
        }
    }
    Ok(checked)
}
