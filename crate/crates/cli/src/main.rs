//! `causaldpo`: simulate datasets, train, evaluate, and run the ground-truth checks.

mod checks;
mod config;
mod eval;
mod failure;
mod io;
mod simulate;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "causaldpo", version, about = "Preference optimization with environment-invariance penalties")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply to every key it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lambda=0` or `--set split.shift=mixed`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sweep points run concurrently, each in its own output directory.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate and split a dataset into `<output_dir>/data`.
    Simulate(Common),
    /// Train one run per sweep seed into `<output_dir>/train/seed-<s>`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Write per-step environment memberships to `envs.jsonl`.
        #[arg(long)]
        dump_envs: bool,
        /// Continue the run that wrote this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write ranking metrics for trained policies into `<output_dir>/eval`.
    Eval(Common),
    /// Spurious-weight amplification and the generalization bound, into `<output_dir>/prop1`.
    Prop1(Common),
    /// Backdoor adjustment against enumeration on `data.scm`, into `<output_dir>/backdoor`.
    BackdoorCheck(Common),
}

fn load(common: &Common, extra: &[String]) -> anyhow::Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    ExperimentConfig::load(common.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(c) => simulate::run(&load(&c, &[])?),
        Command::Train {
            common,
            dump_envs,
            resume,
        } => {
            let extra = if dump_envs { vec!["train.dump_envs=true".to_string()] } else { Vec::new() };
            let cfg = load(&common, &extra)?;
            match resume {
                Some(ckpt) => train::resume(&cfg, &ckpt),
                None => train::run(&cfg, common.jobs),
            }
        }
        Command::Eval(c) => eval::run(&load(&c, &[])?, c.jobs),
        Command::Prop1(c) => checks::prop1(&load(&c, &[])?),
        Command::BackdoorCheck(c) => checks::backdoor(&load(&c, &[])?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", failure::render(&e));
            ExitCode::from(failure::classify(&e).exit_code() as u8)
        }
    }
}
