//! `fundus`: synthesize degraded fixtures, train the restorer and segmenter,
//! run them on folders of images, score the outputs and ablate attention.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 runtime
//! error. Failures print one line to stderr:
//! `fundus: error kind=<config|data|runtime> msg=<json string>`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use fundus::config::{help_table, Config};
use fundus::{Error, ErrorKind};

/// Environment variable naming the root under which default output
/// directories are created.
pub const OUT_ROOT_ENV: &str = "FUNDUS_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(
    name = "fundus",
    version,
    about = "Fundus image restoration and vessel segmentation"
)]
pub struct Cli {
    /// JSON config file with flat dotted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set restore.epochs=2` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Subcommand, Debug)]
pub enum Verb {
    /// Write a paired dataset (high/, low/, masks/, manifest.json) from clean
    /// images or synthetic phantoms.
    Degrade(DegradeArgs),
    /// Train the restoration networks on a dataset directory.
    TrainRestore(TrainArgs),
    /// Train the vessel segmenter on a dataset directory.
    TrainSegment(TrainArgs),
    /// Restore every image in a folder with a trained restorer.
    Restore(RunArgs),
    /// Write binary vessel masks for every image in a folder.
    Segment(RunArgs),
    /// Score restored images against references, or masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the restorer with and without attention.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    /// Folder of clean images (masks, if any, in `<in>/masks/`).
    #[arg(long = "in", conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    /// Generate this many synthetic phantoms instead of reading `--in`.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Degradation kinds, comma separated, or `all` (overrides `data.kinds`).
    #[arg(long)]
    pub kinds: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory as written by `degrade`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint of this task.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Trained checkpoint; `segment` falls back to untrained weights without one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Restored images, or predicted masks with `--gt-masks`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Clean reference images.
    #[arg(long, required_unless_present = "gt_masks", conflicts_with = "gt_masks")]
    pub reference: Option<PathBuf>,
    /// Ground-truth vessel masks.
    #[arg(long)]
    pub gt_masks: Option<PathBuf>,
    /// Dataset manifest linking degraded ids to their clean sources.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Verb {
    pub fn name(&self) -> &'static str {
        match self {
            Verb::Degrade(_) => "degrade",
            Verb::TrainRestore(_) => "train-restore",
            Verb::TrainSegment(_) => "train-segment",
            Verb::Restore(_) => "restore",
            Verb::Segment(_) => "segment",
            Verb::Evaluate(_) => "evaluate",
            Verb::Ablate(_) => "ablate",
        }
    }
}

/// Default output directory for a verb: `$FUNDUS_OUT_ROOT/<verb>`, or
/// `runs/<verb>` when the variable is unset.
pub fn default_out(verb: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(verb)
}

fn build_config(cli: &Cli) -> fundus::Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    for kv in &cli.overrides {
        cfg.set_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_value("seed", seed.into())?;
    }
    Ok(cfg)
}

fn fail(kind: ErrorKind, msg: &str) -> ExitCode {
    let (name, code) = match kind {
        ErrorKind::Config => ("config", 1),
        ErrorKind::Data => ("data", 2),
        ErrorKind::Runtime => ("runtime", 3),
    };
    let msg = serde_json::to_string(msg).unwrap_or_default();
    eprintln!("fundus: error kind={name} msg={msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let command = Cli::command().after_help(format!(
        "Config keys (JSON file via --config, or --set KEY=VALUE; default shown):\n{}",
        help_table()
    ));
    let matches = match command.try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail(ErrorKind::Config, first.trim_start_matches("error: "));
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return fail(ErrorKind::Config, &e.to_string()),
    };
    let result = build_config(&cli).and_then(|cfg| commands::run(&cli.verb, &cfg));
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> ExitCode {
    fail(e.kind(), &e.to_string())
}
