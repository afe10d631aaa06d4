//! `rnf` command-line interface.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "rnf", version, about = "Fair classification heads via representation neutralization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the vanilla teacher with cross entropy.
    TrainTeacher(Common),
    /// Train the bias-amplified model with generalized cross entropy.
    TrainBiasAmplified(Common),
    /// Annotate the training split with proxy sensitive attributes.
    GenProxy(Common),
    /// Retrain the teacher's head on neutralized representations.
    TrainRnf(Common),
    /// Train the adversarial or equalized-odds-regularized baseline.
    TrainBaseline(Common),
    /// Print the test metrics of a checkpoint.
    Evaluate(Common),
    /// Sweep one method over a parameter grid and several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Also render curve.svg.
        #[arg(long)]
        svg: bool,
    },
    /// KPCA projection and linear probes of a checkpoint's representation.
    Probe(Common),
    /// Check the group loss-gap bound on test pairs.
    VerifyBound(Common),
    /// Write a planted-bias synthetic dataset and its schema.
    SynthData(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let load = |c: &Common| RunConfig::load(c.config.as_deref(), &c.set);
    match &cli.command {
        Command::TrainTeacher(c) => commands::train_teacher(&load(c)?),
        Command::TrainBiasAmplified(c) => commands::train_bias_amplified(&load(c)?),
        Command::GenProxy(c) => commands::gen_proxy(&load(c)?),
        Command::TrainRnf(c) => commands::train_rnf(&load(c)?),
        Command::TrainBaseline(c) => commands::train_baseline_cmd(&load(c)?),
        Command::Evaluate(c) => commands::evaluate_cmd(&load(c)?),
        Command::Sweep { common, svg } => commands::sweep_cmd(&load(common)?, *svg),
        Command::Probe(c) => commands::probe(&load(c)?),
        Command::VerifyBound(c) => commands::verify_bound(&load(c)?),
        Command::SynthData(c) => commands::synth_data(&load(c)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
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
