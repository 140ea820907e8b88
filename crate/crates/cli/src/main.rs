use anyhow::Result;
use clap::{Parser, Subcommand};
use evasion_cli::config::{GeneratorKind, VictimKind};
use evasion_cli::{run_pipeline, run_stage, Overrides, RunConfig, Stage, Workspace};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "evasion",
    version,
    about = "Dead-code evasion campaigns against vulnerability detectors"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sets every named seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    snippet_size: Option<usize>,
    #[arg(long, global = true, value_enum)]
    victim: Option<VictimKind>,
    #[arg(long, global = true, value_enum)]
    generator: Option<GeneratorKind>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize and split the dataset, build the vocabulary.
    Ingest,
    /// Train the attention surrogate.
    TrainSurrogate,
    /// Select important samples with the SVM and rank their tokens.
    ExtractFeatures,
    /// Prompt the generator for candidate snippets.
    GenSnippets,
    /// Validate candidates into the attack pool.
    BuildPool,
    /// Search snippet combinations against the victim.
    RunFga,
    /// Insert the best combination into the test cases and score them.
    Attack,
    /// Aggregate the campaign into one JSON document.
    Report,
    /// Write a 2-D projection of clean and adversarial representations.
    Project,
    /// Every stage in order.
    Run,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn stage_of(c: &Command) -> Option<Stage> {
    Some(match c {
        Command::Ingest => Stage::Ingest,
        Command::TrainSurrogate => Stage::TrainSurrogate,
        Command::ExtractFeatures => Stage::ExtractFeatures,
        Command::GenSnippets => Stage::GenSnippets,
        Command::BuildPool => Stage::BuildPool,
        Command::RunFga => Stage::RunFga,
        Command::Attack => Stage::Attack,
        Command::Report => Stage::Report,
        Command::Project => Stage::Project,
        Command::Run | Command::ShowConfig => return None,
    })
}

fn run(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        snippet_size: cli.snippet_size,
        victim: cli.victim,
        generator: cli.generator,
    };
    let config = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let mut ws = Workspace::open(&cli.out)?;
    match stage_of(&cli.command) {
        Some(stage) => println!("{stage}: {}", run_stage(stage, &config, &mut ws)?),
        None => {
            for (stage, line) in Stage::ALL.iter().zip(run_pipeline(&config, &mut ws)?) {
                println!("{stage}: {line}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
