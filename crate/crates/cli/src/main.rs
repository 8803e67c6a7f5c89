use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use peifg_cli::commands::{self, DatagenStage};
use peifg_cli::config;
use peifg_core::generator::GenerationMode;

#[derive(Parser)]
#[command(name = "peifg", version, about = "Feedback and distractor generation pipeline")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides as dotted.path=value (JSON values), repeatable.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    /// Sets every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Exact run directory instead of an auto-numbered one.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Feedback,
    Distractor,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Detection pretraining of the region branch.
    Stage1Train,
    /// Instruction tuning of adapters, projections, pooler queries and prompt pool.
    Train,
    /// Preference refinement against a judge.
    Refine,
    /// Generate feedback or distractors for the test samples.
    Generate {
        #[arg(long, value_enum, default_value = "feedback")]
        mode: Mode,
    },
    /// Score a generations file.
    Evaluate {
        #[arg(long)]
        input: PathBuf,
    },
    /// LLM-assisted dataset construction.
    Datagen {
        #[arg(long, value_enum)]
        stage: DatagenStage,
    },
    /// Run the review service.
    ServeReview {
        /// JSONL samples to enqueue at start.
        #[arg(long)]
        load: Option<PathBuf>,
    },
    /// Train once per value of one parameter.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        parallel: bool,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> peifg_cli::CliResult<()> {
    let cfg = config::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let dir = cli.run_dir.as_deref();
    let out = match cli.command {
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            return Ok(());
        }
        Command::Stage1Train => commands::stage1_train(&cfg, dir)?,
        Command::Train => commands::train_cmd(&cfg, dir)?,
        Command::Refine => commands::refine_cmd(&cfg, dir)?,
        Command::Generate { mode } => {
            let mode = match mode {
                Mode::Feedback => GenerationMode::Feedback,
                Mode::Distractor => GenerationMode::Distractor,
            };
            commands::generate_cmd(&cfg, mode, dir)?
        }
        Command::Evaluate { input } => commands::evaluate_cmd(&cfg, &input, dir)?,
        Command::Datagen { stage } => commands::datagen_cmd(&cfg, stage, dir)?,
        Command::ServeReview { load } => return commands::serve_review(&cfg, load.as_deref()),
        Command::Sweep { param, values, parallel } => commands::sweep_cmd(&cfg, &param, &values, parallel)?,
    };
    println!("{}", out.display());
    Ok(())
}
