use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pss_cli::commands;
use pss_cli::config::RunConfig;
use pss_cli::error::CliError;

#[derive(Parser)]
#[command(name = "pss", about = "Masked pseudo source separation pre-training and probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `KEY=VALUE` overrides applied after the file.
    #[arg(allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic tone corpus and its manifest.
    SynthCorpus(Common),
    /// Cluster features into pseudo-labels.
    BuildLabels(Common),
    /// Materialise training mixtures with provenance.
    Simulate(Common),
    Pretrain(Common),
    /// PIT-CTC fine-tuning on fully overlapped mixtures.
    Finetune(Common),
    /// Train a diarization probe on a frozen encoder.
    ProbeSd(Common),
    Eval(Common),
    /// Finite-difference check of the three losses.
    Gradcheck(Common),
    /// Collect eval summaries into one row per (K, p_mix) cell.
    Grid(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common, f): (&str, Common, fn(&RunConfig) -> Result<(), CliError>) = match cli.command {
        Command::SynthCorpus(c) => ("synth-corpus", c, commands::synth_corpus),
        Command::BuildLabels(c) => ("build-labels", c, commands::build_labels),
        Command::Simulate(c) => ("simulate", c, commands::simulate),
        Command::Pretrain(c) => ("pretrain", c, commands::pretrain_cmd),
        Command::Finetune(c) => ("finetune", c, commands::finetune_cmd),
        Command::ProbeSd(c) => ("probe-sd", c, commands::probe_sd),
        Command::Eval(c) => ("eval", c, commands::eval),
        Command::Gradcheck(c) => ("gradcheck", c, commands::gradcheck),
        Command::Grid(c) => ("grid", c, commands::grid),
    };
    let cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
    if !cfg.stage.is_empty() && cfg.stage != name {
        return Err(CliError::Config(format!("config is for `{}`, not `{name}`", cfg.stage)));
    }
    f(&cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
