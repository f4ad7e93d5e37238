use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use glab::config::{parse_seeds, ExperimentConfig};
use glab::experiments::{run_verb, Verb};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Tradeoff,
    Ablation,
    Timing,
    ValidateWeights,
    AttackDemo,
    TrainEvalnet,
}

impl From<Cmd> for Verb {
    fn from(c: Cmd) -> Verb {
        match c {
            Cmd::Tradeoff => Verb::Tradeoff,
            Cmd::Ablation => Verb::Ablation,
            Cmd::Timing => Verb::Timing,
            Cmd::ValidateWeights => Verb::ValidateWeights,
            Cmd::AttackDemo => Verb::AttackDemo,
            Cmd::TrainEvalnet => Verb::TrainEvalnet,
        }
    }
}

/// Gradient-leakage benchmark experiments.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    verb: Cmd,
    /// Experiment config (TOML, `section.key = value`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value = "0,1,2,3,4")]
    seeds: String,
    /// Ablation knob, overriding `ablation.knob`.
    #[arg(long)]
    knob: Option<String>,
}

fn run(args: Args) -> glab::Result<PathBuf> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(k) = args.knob {
        cfg.ablation.knob = k;
    }
    let seeds = parse_seeds(&args.seeds)?;
    run_verb(args.verb.into(), &cfg, &args.out, &seeds)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(csv) => {
            println!("{}", csv.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
