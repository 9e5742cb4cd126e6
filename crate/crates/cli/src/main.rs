//! `sift`: command-line front end for the training and evaluation pipeline.
//!
//! Every stage reads the merged JSON config (`--config`, defaulting to the
//! built-in desk preset), honors `--seed` overrides, and writes its artifacts
//! plus a `provenance.json` under the chosen output location.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sift_core::config::{load_config, RunConfig};
use sift_core::finetune::FinetuneMode;
use sift_core::pipeline;

#[derive(Parser)]
#[command(
    name = "sift",
    version,
    about = "Contrastive pre-training and multi-patch fine-tuning for imbalanced volumetric image classification"
)]
struct Cli {
    /// JSON config file; defaults to the built-in desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Preset used when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Pretrained,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    LinearProbe,
    Full,
    Discriminative,
}

impl From<ModeArg> for FinetuneMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::LinearProbe => FinetuneMode::LinearProbe,
            ModeArg::Full => FinetuneMode::Full,
            ModeArg::Discriminative => FinetuneMode::Discriminative,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted lesions.
    Generate {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Resize to a fixed short side and crop background volume-wide.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        short_side: Option<usize>,
        #[arg(long)]
        pad: Option<usize>,
    },
    /// Subject-wise train/val/test split.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated ratios, e.g. 0.7,0.1,0.2
        #[arg(long)]
        ratios: Option<String>,
    },
    /// Contrastive pre-training of the encoder.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised multi-patch fine-tuning from a checkpoint or from scratch.
    Finetune {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum, default_value_t = InitArg::Pretrained)]
        init: InitArg,
    },
    /// Score every slice and volume of a manifest.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        n_patches: Option<usize>,
        /// Output scores CSV path; volumes.csv is written alongside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate once and report metrics for several patch counts.
    SweepPatches {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated patch counts, e.g. 1,2,4,8,16,20
        #[arg(long, default_value = "1,2,4,8,16,20")]
        n: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Metric report + ROC exports from score tables.
    Report {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        volumes: PathBuf,
        #[arg(long)]
        val_scores: Option<PathBuf>,
        #[arg(long)]
        val_volumes: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render a ROC CSV as SVG.
    PlotRoc {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "")]
        title: String,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, sift_core::Error> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => match cli.preset {
            Preset::Desk => RunConfig::desk_preset(),
            Preset::Paper => RunConfig::paper_preset(),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn init_thread_pool(cfg: &RunConfig) {
    let workers = std::env::var("SIFT_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .or(cfg.workers);
    if let Some(n) = workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            log::warn!("could not cap worker threads: {e}");
        }
    }
}

fn parse_counts(text: &str) -> Result<Vec<usize>, sift_core::Error> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| sift_core::Error::InvalidInput(format!("bad patch count {s:?}: {e}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), sift_core::Error> {
    let mut cfg = resolve_config(&cli)?;
    init_thread_pool(&cfg);
    match cli.command {
        Command::Generate { out_dir } => {
            let manifest = pipeline::run_generate(&cfg, &out_dir)?;
            println!("wrote {}", manifest.display());
        }
        Command::Preprocess {
            manifest,
            out_dir,
            short_side,
            pad,
        } => {
            if let Some(s) = short_side {
                cfg.preprocess.short_side = s;
            }
            if let Some(p) = pad {
                cfg.preprocess.pad = p;
            }
            let out = pipeline::run_preprocess(&cfg, &manifest, &out_dir)?;
            println!("wrote {}", out.display());
        }
        Command::Split {
            manifest,
            out_dir,
            ratios,
        } => {
            if let Some(text) = ratios {
                let parts: Vec<f64> = text
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<f64>().map_err(|e| {
                            sift_core::Error::InvalidInput(format!("bad ratio {s:?}: {e}"))
                        })
                    })
                    .collect::<Result<_, _>>()?;
                if parts.len() != 3 {
                    return Err(sift_core::Error::InvalidInput(
                        "--ratios needs exactly three values".into(),
                    ));
                }
                cfg.split.train = parts[0];
                cfg.split.val = parts[1];
                cfg.split.test = parts[2];
            }
            let paths = pipeline::run_split(&cfg, &manifest, &out_dir)?;
            println!(
                "wrote {}, {}, {}",
                paths.train.display(),
                paths.val.display(),
                paths.test.display()
            );
        }
        Command::Pretrain { manifest, out } => {
            let dir = pipeline::run_pretrain(&cfg, &manifest, &out)?;
            println!("checkpoint at {}", dir.display());
        }
        Command::Finetune {
            ckpt,
            manifest,
            val,
            out,
            mode,
            init,
        } => {
            let ckpt_dir = match init {
                InitArg::Pretrained => {
                    let dir = ckpt.ok_or_else(|| {
                        sift_core::Error::InvalidInput(
                            "--ckpt is required unless --init random".into(),
                        )
                    })?;
                    Some(dir)
                }
                InitArg::Random => None,
            };
            let dir = pipeline::run_finetune(
                &cfg,
                ckpt_dir.as_deref(),
                &manifest,
                &val,
                mode.map(FinetuneMode::from),
                &out,
            )?;
            println!("checkpoint at {}", dir.display());
        }
        Command::Evaluate {
            ckpt,
            manifest,
            n_patches,
            out,
        } => {
            let n = n_patches.unwrap_or(cfg.eval.n_patches);
            pipeline::run_evaluate(&cfg, &ckpt, &manifest, n, &out)?;
            println!("wrote {}", out.display());
        }
        Command::SweepPatches {
            ckpt,
            manifest,
            n,
            out_dir,
        } => {
            let counts = parse_counts(&n)?;
            let rows = pipeline::run_sweep(&cfg, &ckpt, &manifest, &counts, &out_dir)?;
            println!("n_patches,slice_auc,volume_auc");
            for (n, s, v) in rows {
                println!("{n},{s:.4},{v:.4}");
            }
        }
        Command::Report {
            scores,
            volumes,
            val_scores,
            val_volumes,
            out_dir,
        } => {
            let report = pipeline::run_report(
                &cfg,
                &scores,
                &volumes,
                val_scores.as_deref(),
                val_volumes.as_deref(),
                &out_dir,
            )?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
        }
        Command::PlotRoc { input, out, title } => {
            pipeline::run_plot_roc(&input, &out, &title)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
