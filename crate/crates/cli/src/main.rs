//! `wnet`: synthetic data, training, segmentation and evaluation.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wnet_core::config::PipelineConfig;
use wnet_core::pipeline::{self, Stage};
use wnet_core::Error;

#[derive(Parser)]
#[command(name = "wnet", version, about = "Unsupervised image segmentation with a W-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file; unset keys keep their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set crf.iterations=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print every configuration key with its default value.
    Config {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic corpus with exact ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of images (overrides `synth.count`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on every PNM image in a directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory of training images.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for the checkpoint, trace and manifest
        /// (defaults to `paths.run_dir`).
        #[arg(long)]
        run: Option<PathBuf>,
        /// Total iterations (overrides `train.iterations`).
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Rewrite the checkpoint every N iterations.
        #[arg(long, default_value_t = 100)]
        save_every: usize,
    },
    /// Run the post-processing chain on images or directories of images.
    Segment {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Last stage: encode, crf, cues or ucm.
        #[arg(long, default_value = "ucm")]
        stage: String,
        /// Comma-separated UCM thresholds (overrides `segment.thresholds`).
        #[arg(long)]
        thresholds: Option<String>,
        /// Input images or directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score hierarchies or flat segmentations against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Output of `segment`, or a directory of label-map PGMs.
        #[arg(long)]
        pred: PathBuf,
        /// Ground truth: `<id>.gt.pgm`, `<id>.pgm`, `<id>.seg` or `<id>/`.
        #[arg(long)]
        gt: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common, extra: &[(&str, String)]) -> wnet_core::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    for (k, v) in extra {
        cfg.set(k, v)?;
    }
    cfg.finish()?;
    Ok(cfg)
}

fn run(cli: Cli) -> wnet_core::Result<()> {
    match cli.command {
        Command::Config { common } => {
            print!("{}", load_config(&common, &[])?.to_text());
        }
        Command::Synth { common, out, count } => {
            let extra: Vec<_> = count.map(|c| ("synth.count", c.to_string())).into_iter().collect();
            let cfg = load_config(&common, &extra)?;
            let files = pipeline::cmd_synth(&cfg, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Train {
            common,
            data,
            run,
            iterations,
            resume,
            save_every,
        } => {
            let extra: Vec<_> = iterations
                .map(|n| ("train.iterations", n.to_string()))
                .into_iter()
                .collect();
            let cfg = load_config(&common, &extra)?;
            let run_dir = run.unwrap_or_else(|| cfg.run_dir.clone());
            let ck = pipeline::cmd_train(&cfg, &data, &run_dir, resume, save_every)?;
            println!(
                "trained to iteration {}; checkpoint in {}",
                ck.iteration,
                run_dir.join(pipeline::CHECKPOINT_FILE).display()
            );
        }
        Command::Segment {
            common,
            checkpoint,
            out,
            stage,
            thresholds,
            inputs,
        } => {
            let extra: Vec<_> = thresholds
                .map(|t| ("segment.thresholds", t))
                .into_iter()
                .collect();
            let cfg = load_config(&common, &extra)?;
            let stage: Stage = stage.parse()?;
            let files = pipeline::cmd_segment(&cfg, &checkpoint, &inputs, &out, stage)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Eval {
            common,
            pred,
            gt,
            out,
        } => {
            let cfg = load_config(&common, &[])?;
            let (_, table) = pipeline::cmd_eval(&cfg, &pred, &gt, &out)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
