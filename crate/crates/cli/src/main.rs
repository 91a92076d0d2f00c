//! `mixcycle` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime or
//! numeric error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mixcycle", version, about = "Train and evaluate two-source speech separation models")]
struct Cli {
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, env = "MIXCYCLE_RUN_ROOT", default_value = ".")]
    run_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    pub config: Option<PathBuf>,

    /// Dotted-key override applied on top of the config file, e.g.
    /// `train.mixpit_warmstart_epochs=0`. Repeatable.
    #[arg(short = 's', long = "set", visible_alias = "overrides", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic toy corpus, its manifests and a generation report.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for the corpus.
        #[arg(short, long, default_value = "toy")]
        out: PathBuf,
    },
    /// Train a model and write a run directory with logs and checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training method; overrides `train.method`.
        #[arg(short, long, value_parser = ["pit", "pit_dm", "mixit", "mixpit", "mixcycle"])]
        method: Option<String>,
        /// Run directory (default: runs/<method>-seed<seed>).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Continue the run stored in this run directory.
        #[arg(long, conflicts_with = "out")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against reference sources.
    Eval {
        /// Model checkpoint (not needed for the IRM oracle).
        #[arg(long, required_unless_present = "irm")]
        checkpoint: Option<PathBuf>,
        /// JSON-Lines manifest with reference sources.
        #[arg(long)]
        manifest: PathBuf,
        /// Score a 4-output model with the best output-to-reference mixing matrix.
        #[arg(long, conflicts_with = "irm")]
        mixit_oracle: bool,
        /// Score ideal ratio masks instead of a model.
        #[arg(long)]
        irm: bool,
        /// Report path (JSON; a CSV row is written next to it).
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8000)]
        sample_rate: u32,
    },
    /// Estimate SI-SNRi without reference sources by remixing the model's own estimates.
    SelfEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest; only mixture paths are read.
        #[arg(long)]
        manifest: PathBuf,
        /// Number of random re-pairings of the mixtures.
        #[arg(long, default_value_t = 100)]
        repetitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8000)]
        sample_rate: u32,
    },
    /// Tabulate report JSON files by method and protocol.
    Report {
        /// Report files to combine.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = TableFormat::Markdown)]
        format: TableFormat,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<mixcycle::Error>() {
        Some(e) if e.is_config_error() => 2,
        Some(e) if e.is_data_error() => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let root = cli.run_root;
    let result = match cli.command {
        Command::Synth { config, out } => commands::synth(&root, &config, &out),
        Command::Train {
            config,
            method,
            out,
            resume,
        } => commands::train(&root, &config, method.as_deref(), out.as_deref(), resume.as_deref()),
        Command::Eval {
            checkpoint,
            manifest,
            mixit_oracle,
            irm,
            out,
            sample_rate,
        } => commands::eval(
            &root,
            commands::EvalRequest {
                checkpoint: checkpoint.as_deref(),
                manifest: &manifest,
                mixit_oracle,
                irm,
                out: out.as_deref(),
                sample_rate,
            },
        ),
        Command::SelfEval {
            checkpoint,
            manifest,
            repetitions,
            seed,
            out,
            sample_rate,
        } => commands::self_eval(&root, &checkpoint, &manifest, repetitions, seed, out.as_deref(), sample_rate),
        Command::Report { reports, out, format } => commands::report(&root, &reports, out.as_deref(), format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
