//! `ri generate|train|evaluate|analyze|ablate [--config PATH] [--key value ...]`
//!
//! Exit status: 0 on success, 1 when a run's own checks fail, 2 for
//! configuration, file and other environment errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ri::commands::{self, Outcome};
use ri::config::SEED_ENV;
use ri::{Error, RunConfig};

#[derive(Parser)]
#[command(name = "ri", version, about = "Rapid-intensification model: data generation, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate(RunArgs),
    /// Train one model variant.
    Train(RunArgs),
    /// Score a checkpoint on the validation split.
    Evaluate(RunArgs),
    /// Peak span, peak delay, reliability and mask export for a checkpoint.
    Analyze(RunArgs),
    /// Train and compare all four attention variants.
    Ablate(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
    /// Setting overrides as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(Error::Config(format!("expected `--key`, got `{arg}`")));
        };
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("`--{key}` has no value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn run(command: &Command) -> Result<Outcome, Error> {
    let (Command::Generate(args)
    | Command::Train(args)
    | Command::Evaluate(args)
    | Command::Analyze(args)
    | Command::Ablate(args)) = command;
    let overrides = parse_overrides(&args.overrides)?;
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::resolve(args.config.as_deref(), &overrides, env_seed.as_deref())?;
    let outcome = match command {
        Command::Generate(_) => return commands::generate(&cfg),
        Command::Train(_) => commands::train(&cfg, args.quiet)?,
        Command::Evaluate(_) => commands::evaluate(&cfg)?,
        Command::Analyze(_) => commands::analyze(&cfg)?,
        Command::Ablate(_) => commands::ablate(&cfg, args.quiet)?,
    };
    outcome.report.write(&cfg.report)?;
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(outcome) => {
            print!("{}", outcome.report.render());
            match outcome.failure {
                Some(msg) => {
                    eprintln!("ri: check failed: {msg}");
                    ExitCode::from(1)
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("ri: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
