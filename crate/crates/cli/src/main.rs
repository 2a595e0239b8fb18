use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xmodal_core::error::{Error, ErrorKind};
use xmodal_core::pipeline::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Slow-to-fast encoding experiments on synthetic or recorded data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults to the built-in desk-scale config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Dataset directory written by `synth`. Without it the dataset is generated in memory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the built-in experiment config as JSON.
    InitConfig {
        /// Destination file.
        out: PathBuf,
        /// Write the small config used by the smoke tests instead.
        #[arg(long)]
        smoke: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Check manifests, tensors, JSON and CSV files under a directory.
    Validate {
        dir: PathBuf,
    },
    /// Fine-tune the feature net on slow responses and select an epoch.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Downsample slow responses by this factor before fine-tuning.
        #[arg(long)]
        downsample_factor: Option<usize>,
    },
    /// Slow encoding model (train stories to test story).
    EncodeSlow {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Fine-tuning run directory; the pretrained net is used without it.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fast lag-sweep encoding, pretrained and optionally fine-tuned.
    EncodeFast {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Residual power change between two fast encodings.
    Spectrum {
        #[command(flatten)]
        common: Common,
        /// An `encode-fast` run with both `pretrained/` and `tuned/`.
        #[arg(long, conflicts_with_all = ["a", "b"])]
        run: Option<PathBuf>,
        /// Reference encoding directory.
        #[arg(long, requires = "b")]
        a: Option<PathBuf>,
        /// Compared encoding directory.
        #[arg(long, requires = "a")]
        b: Option<PathBuf>,
    },
    /// Per-frequency SNR of the repeated test story.
    Snr {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Fast score as a function of the number of fine-tuning stories.
    Scaling {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Story counts, e.g. 1,2,4,8. Defaults to the config ladder.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// Collect the tables of a run directory into report.json and report.csv.
    Report {
        dir: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let cfg = match &c.config {
        Some(p) => {
            check_exists(Some(p))?;
            ExperimentConfig::load(p)?
        }
        None => ExperimentConfig::desk(0),
    };
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn set_threads(c: &Common) -> Result<(), Error> {
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn check_exists(p: Option<&Path>) -> Result<(), Error> {
    match p {
        Some(p) if !p.exists() => Err(Error::Config(format!("{} does not exist", p.display()))),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::InitConfig { out, smoke, seed, force } => {
            if out.exists() && !force {
                return Err(Error::Config(format!("{} exists; pass --force to overwrite", out.display())));
            }
            let cfg = if smoke { ExperimentConfig::smoke(seed) } else { ExperimentConfig::desk(seed) };
            std::fs::write(&out, cfg.to_json()).map_err(|e| Error::io(&out, e))?;
            println!("{}", out.display());
        }
        Command::Synth { common } => {
            set_threads(&common)?;
            let cfg = load_config(&common)?;
            pipeline::cmd_synth(&cfg, &common.out, common.force)?;
            println!("dataset written to {}", common.out.display());
        }
        Command::Validate { dir } => {
            let n = pipeline::cmd_validate(&dir)?;
            println!("{n} files valid");
        }
        Command::Finetune { common, data, downsample_factor } => {
            set_threads(&common)?;
            check_exists(data.data.as_deref())?;
            let mut cfg = load_config(&common)?;
            if let Some(k) = downsample_factor {
                cfg.downsample_factor = k;
            }
            let r = pipeline::cmd_finetune(&cfg, data.data.as_deref(), &common.out, common.force)?;
            println!("selected epoch {}", r.selection.epoch);
        }
        Command::EncodeSlow { common, data, checkpoint } => {
            set_threads(&common)?;
            check_exists(data.data.as_deref())?;
            check_exists(checkpoint.as_deref())?;
            let cfg = load_config(&common)?;
            let enc = pipeline::cmd_encode_slow(&cfg, data.data.as_deref(), &common.out, checkpoint.as_deref(), common.force)?;
            let mean = enc.test_scores.iter().sum::<f64>() / enc.test_scores.len() as f64;
            println!("mean test score {mean:.4}");
        }
        Command::EncodeFast { common, data, checkpoint } => {
            set_threads(&common)?;
            check_exists(data.data.as_deref())?;
            check_exists(checkpoint.as_deref())?;
            let cfg = load_config(&common)?;
            match pipeline::cmd_encode_fast(&cfg, data.data.as_deref(), &common.out, checkpoint.as_deref(), common.force)? {
                Some(c) => println!(
                    "pretrained {:.4} tuned {:.4} t {:.3} p {:.3e}",
                    c.pretrained_mean, c.tuned_mean, c.ttest.t, c.ttest.p
                ),
                None => println!("pretrained encoding written to {}", common.out.join("pretrained").display()),
            }
        }
        Command::Spectrum { common, run, a, b } => {
            let cfg = load_config(&common)?;
            let (a, b) = match (run, a, b) {
                (Some(r), _, _) => (r.join("pretrained"), r.join("tuned")),
                (None, Some(a), Some(b)) => (a, b),
                _ => return Err(Error::Config("spectrum needs --run or both --a and --b".into())),
            };
            check_exists(Some(&a))?;
            check_exists(Some(&b))?;
            let d = pipeline::cmd_spectrum(&cfg, &a, &b, &common.out, common.force)?;
            println!(
                "residual power change: {:+.3}% below {} Hz, {:+.3}% above",
                d.total_pct_below, d.threshold_hz, d.total_pct_above
            );
        }
        Command::Snr { common, data } => {
            set_threads(&common)?;
            check_exists(data.data.as_deref())?;
            let cfg = load_config(&common)?;
            let s = pipeline::cmd_snr(&cfg, data.data.as_deref(), &common.out, common.force)?;
            for w in cfg.analysis.snr_band_edges_hz.windows(2) {
                println!("SNR {}-{} Hz: {:.4}", w[0], w[1], s.band_mean(w[0], w[1]));
            }
        }
        Command::Scaling { common, data, counts } => {
            set_threads(&common)?;
            check_exists(data.data.as_deref())?;
            let cfg = load_config(&common)?;
            let counts = counts.unwrap_or_else(|| cfg.scaling_counts.clone());
            let r = pipeline::cmd_scaling(&cfg, data.data.as_deref(), &common.out, &counts, common.force)?;
            println!("mean slope {:.5} per doubling", r.fit.mean_slope());
        }
        Command::Report { dir } => {
            let p = pipeline::cmd_report(&dir)?;
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}
