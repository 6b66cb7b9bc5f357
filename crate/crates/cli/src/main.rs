//! Single pipeline executable: phantom generation, pretext training,
//! fine-tuning, inference, evaluation, and the ablation matrix.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use config::Config;

#[derive(Parser)]
#[command(
    name = "bapm",
    version,
    about = "Volumetric pretext training (reconstruction + tissue segmentation) with encoder transfer to a classifier"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file with `key = value` lines (# comments allowed)
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.pretext.epochs=5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// RNG seed (overrides the config `seed` key)
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        for spec in &self.set {
            cfg.apply_set(spec)?;
        }
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalTask {
    Recon,
    Seg,
    Classify,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a balanced phantom dataset as paired NIfTI files + manifest
    PhantomGen {
        #[command(flatten)]
        common: Common,
        /// Total number of phantoms (balanced over the two classes)
        #[arg(long)]
        count: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pretext model (encoder + decoders) on a dataset directory
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset directory with manifest.csv
        #[arg(long)]
        data: PathBuf,
        /// Output directory (checkpoint + loss trace)
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the downstream classifier, optionally from a pretext encoder
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Pretext checkpoint whose encoder transfers (frozen); omit to train
        /// from scratch
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the reconstruction decoder on one volume
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Pretext checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the segmentation decoder on one volume (argmax label map)
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the four per-class probability volumes into this directory
        #[arg(long)]
        probs: Option<PathBuf>,
    },
    /// Evaluate reconstructions, segmentations, or the classifier protocol
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: EvalTask,
        /// Prediction volume or dataset directory (recon/seg)
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Reference volume or dataset directory (recon/seg)
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Labeled dataset directory (classify)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pretext checkpoint providing the frozen encoder (classify)
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Output directory for metrics.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the four-variant training matrix and the pretrain-fraction sweep
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn keys_help() -> &'static str {
    let mut text = String::from("Config keys (defaults shown):\n");
    for line in Config::default().resolved_lines() {
        text.push_str("  ");
        text.push_str(&line);
        text.push('\n');
    }
    Box::leak(text.into_boxed_str())
}

fn main() {
    let help = keys_help();
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd
        .get_subcommands()
        .map(|s| s.get_name().to_string())
        .collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| s.after_help(help));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    if let Err(e) = commands::dispatch(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
