//! Experiment driver for residual bi-fusion feature pyramids.
//!
//! Configuration is layered: built-in defaults, then `--config` file, then
//! `--set key=value` overrides. Every run writes its resolved configuration
//! to a manifest next to the reports, so any output can be reproduced from
//! its manifest alone.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rebif::cli::{dispatch, CliError, Command, CommandOutput};
use rebif::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "rebif",
    about = "Residual bi-fusion feature pyramid experiments",
    version,
    after_help = "Configuration keys are dotted, e.g. --set pyramid.num_scales=4; \
                  the REBIF_OUT environment variable sets the default output directory."
)]
struct Args {
    /// Config file of `key = value` lines (# comments allowed).
    #[arg(short, long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config key (repeatable); wins over the config file.
    #[arg(short, long, global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Write a synthetic detection dataset (PGM images + label files).
    GenData,
    /// Measure how pooling and fusion outputs move under a one-pixel shift.
    ShiftReport,
    /// Train one detector and write its loss trace and checkpoint.
    Train,
    /// Evaluate a checkpoint: detections and AP metrics.
    Eval,
    /// Train both fusion variants across scale counts 2..=5.
    Sweep,
    /// Train every fusion variant at one scale count.
    Ablation,
    /// Static parameter and multiply-accumulate counts per scale count.
    Flops,
    /// Compare analytic gradients against central differences.
    GradCheck,
    /// Run the embedded worked-example fixtures.
    Selftest,
}

impl From<Cmd> for Command {
    fn from(cmd: Cmd) -> Command {
        match cmd {
            Cmd::GenData => Command::GenData,
            Cmd::ShiftReport => Command::ShiftReport,
            Cmd::Train => Command::Train,
            Cmd::Eval => Command::Eval,
            Cmd::Sweep => Command::Sweep,
            Cmd::Ablation => Command::Ablation,
            Cmd::Flops => Command::Flops,
            Cmd::GradCheck => Command::GradCheck,
            Cmd::Selftest => Command::Selftest,
        }
    }
}

fn run(args: &Args) -> Result<CommandOutput, CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    dispatch(args.command.into(), &cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(out) => {
            print!("{}", out.stdout);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
