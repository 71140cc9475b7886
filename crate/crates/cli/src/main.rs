use std::path::PathBuf;
use std::process::ExitCode;

use amskv_cli::commands;
use amskv_cli::presets;
use amskv_cli::{CliError, ExperimentConfig, ReportFormat};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "amskv",
    version,
    about = "Multi-scale KV cache experiments on a toy next-scale model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this single seed instead of the config's seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Table format, overriding the config.
    #[arg(long, value_enum)]
    format: Option<ReportFormat>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut c = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            c.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            c.seeds = vec![seed];
        }
        if let Some(f) = self.format {
            c.formats = vec![f];
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every policy and seed of a config.
    Run(Common),
    /// Adaptive vs sliding-window vs sink-window at one token budget.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Per-layer token budget shared by the three policies
        #[arg(long)]
        budget: usize,
    },
    /// Attention density and inter-scale similarity of a full-cache run.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Scale whose attention is analyzed (default: the last).
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Per-step cached and working-set memory for every policy.
    Timeline(Common),
    /// Check a stored trace, and optionally that it reproduces a report.
    ValidateTrace {
        /// Trace in JSON lines
        #[arg(long)]
        trace: PathBuf,
        /// Report the trace must reproduce
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a built-in experiment: ablations, allocation, cds-sweep,
    /// budget-sweep or all.
    Preset {
        /// Preset name, or `all`
        name: String,
        #[arg(long, default_value = "out/presets")]
        out: PathBuf,
        /// Print the preset's config instead of running it.
        #[arg(long)]
        print: bool,
    },
}

fn dispatch(cmd: Command) -> Result<String, CliError> {
    match cmd {
        Command::Run(c) => commands::run(&c.load()?),
        Command::Compare { common, budget } => commands::compare(&common.load()?, budget),
        Command::Analyze { common, scale } => commands::analyze(&common.load()?, scale),
        Command::Timeline(c) => commands::timeline(&c.load()?),
        Command::ValidateTrace { trace, report } => {
            commands::validate_trace(&trace, report.as_deref())
        }
        Command::Preset {
            name, print: true, ..
        } => Ok(presets::preset_text(&name)?.to_string()),
        Command::Preset { name, out, .. } => presets::run_preset(&name, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(msg) => {
            print!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
