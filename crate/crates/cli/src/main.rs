//! `dabn` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal
//! invariant violation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dabn::eval::ExperimentKind;

use crate::config::Order;

/// A usage error detected after argument parsing (bad flag combination,
/// bad config file).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug, Parser)]
#[command(name = "dabn", version, about = "Online domain-adaptive batch normalization for activity recognition")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Raw accelerometer CSV to a windowed dataset cache.
    Preprocess(PreprocessArgs),
    /// Train the general model on a dataset cache.
    Train(TrainArgs),
    /// Stream one user's windows through an adapter.
    Stream(StreamArgs),
    /// Leave-one-person-out evaluation of one experiment kind.
    Eval(EvalArgs),
    /// Online evaluation over several momenta.
    Sweep(SweepArgs),
    /// Generate a synthetic dataset cache.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Raw CSV: subject,activity,timestamp_ns,x,y,z
    pub input: PathBuf,
    #[arg(long)]
    pub window_len: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub filter_width: Option<usize>,
    /// Lower end of the min-max range.
    #[arg(long, allow_hyphen_values = true)]
    pub lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub hi: Option<f64>,
    /// `balanced`, `none` or a sample count.
    #[arg(long)]
    pub truncate: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Standard,
    Tiny,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Architecture preset the other arch flags refine.
    #[arg(long, value_enum)]
    pub arch: Option<Preset>,
    #[arg(long)]
    pub conv_layers: Option<usize>,
    #[arg(long)]
    pub feature_maps: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub dense_width: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset cache.
    #[arg(long)]
    pub data: PathBuf,
    /// Users left out of training (typically the later stream target).
    #[arg(long = "holdout")]
    pub holdout: Vec<u32>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset cache holding the target windows.
    #[arg(long)]
    pub data: PathBuf,
    /// Target user.
    #[arg(long)]
    pub target: Option<u32>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long, value_enum)]
    pub order: Option<Order>,
    #[arg(long, value_enum)]
    pub adaptation: Option<Switch>,
    /// Also write per-window class probabilities.
    #[arg(long)]
    pub diagnostics: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SpecArgs {
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub pre_fraction: Option<f64>,
    #[arg(long)]
    pub fine_tune_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, value_enum)]
    pub adaptation: Option<Switch>,
    /// Write per-window stream records.
    #[arg(long)]
    pub keep_records: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub kind: Option<ExperimentKind>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `online-randomized` (default) or `online-unrandomized`.
    #[arg(long)]
    pub kind: Option<ExperimentKind>,
    /// Comma-separated momenta.
    #[arg(long, value_delimiter = ',')]
    pub momenta: Vec<f64>,
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML generator spec; the built-in suite when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Use the built-in drift variant of the suite.
    #[arg(long, conflicts_with = "spec")]
    pub drift: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use dabn::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument(_) => 1,
                E::ShapeMismatch { .. } | E::Data(_) | E::Format { .. } | E::Poisoned(_) | E::Io { .. } => 2,
                E::Contract(_) => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let run = std::panic::catch_unwind(|| commands::run(&cli.global, &cli.command));
    match run {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(3),
    }
}
