//! Command-line front end for the `omnic` encoder.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use clap::error::ErrorKind;

/// Exit code for usage or configuration errors.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for failures while running a command.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "omnic", version, about = "Unified multimodal encoder: data, pretraining, adaptation and evaluation")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// `key = value` configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set epochs=5`; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory
    #[arg(long, global = true, default_value = "omnic-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic per-modality and paired corpora
    GenData,
    /// Contrastive pretraining; writes model.omnc and loss_log.csv
    Pretrain,
    /// Weighted kNN accuracy on frozen CLS features
    Knn,
    /// Linear probe on frozen CLS features
    Probe,
    /// Sparse standard-basis adapter fine-tuning
    Sbora,
    /// Train a cross-modal alignment head on cached features
    Align,
    /// Zero-shot classification through a trained alignment head
    Zeroshot,
    /// Alignment, uniformity and modality purity
    Metrics,
    /// Average attention maps per modality
    Attn,
    /// 2D embedding export
    ExportEmb,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
        }
    };
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match commands::run(cli.command, &cfg, &cli.out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(cli: &Cli) -> omnic::Result<config::RunConfig> {
    let file = match &cli.config {
        Some(p) => config::parse_document(&std::fs::read_to_string(p)?)?,
        None => Default::default(),
    };
    let overrides = cli.set.iter().map(|s| config::parse_assignment(s)).collect::<omnic::Result<Vec<_>>>()?;
    let env_seed = std::env::var(config::SEED_ENV).ok();
    config::resolve(env_seed.as_deref(), &file, &overrides)
}
