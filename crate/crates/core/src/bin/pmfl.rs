//! Command-line front end: run a scheme comparison, a client-count ablation,
//! or generate a synthetic task family.
//!
//! Exit codes: 0 success, 1 config/data error, 2 IO error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use pmfl::data::{generate_task_family, write_csv, TaskFamilySpec};
use pmfl::experiment::{
    emit_outputs, run_client_count_ablation, run_experiment, ExperimentConfig, ExperimentError,
};

#[derive(Parser)]
#[command(name = "pmfl", about = "Federated training scheme comparison harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured scheme comparison and write summary/curve files.
    Run {
        /// Experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "pmfl-out")]
        out: PathBuf,
    },
    /// Compare PMFL pretraining across client counts, plus a direct baseline.
    AblateClients {
        /// Comma-separated client counts, e.g. 3,5.
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "pmfl-out")]
        out: PathBuf,
    },
    /// Generate a synthetic task family as one CSV per task.
    GenData {
        /// Family spec (JSON): {"family": {...}, "tasks": K}.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Deserialize)]
struct GenDataSpec {
    family: TaskFamilySpec,
    tasks: usize,
}

fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
    config.apply_seed_override(std::env::var("PMFL_SEED").ok().as_deref())?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run { config, out } => {
            let config = load_config(&config)?;
            let resolved = config.resolved()?;
            let table = run_experiment(&resolved)?;
            let files = emit_outputs(&table, &resolved, &out)?;
            for row in table.rows.iter().filter(|r| r.metric == "auc") {
                match row.std {
                    Some(std) => eprintln!("{:>8}  auc {:.4} ± {:.4}", row.scheme, row.mean, std),
                    None => eprintln!("{:>8}  auc {:.4}", row.scheme, row.mean),
                }
            }
            for file in files {
                eprintln!("wrote {}", file.display());
            }
            Ok(())
        }
        Command::AblateClients { counts, config, out } => {
            let config = load_config(&config)?;
            let resolved = config.resolved()?;
            let table = run_client_count_ablation(&resolved, &counts)?;
            let files = emit_outputs(&table, &resolved, &out)?;
            for row in table.rows.iter().filter(|r| r.metric == "auc") {
                match row.std {
                    Some(std) => eprintln!("{:>10}  auc {:.4} ± {:.4}", row.scheme, row.mean, std),
                    None => eprintln!("{:>10}  auc {:.4}", row.scheme, row.mean),
                }
            }
            for file in files {
                eprintln!("wrote {}", file.display());
            }
            Ok(())
        }
        Command::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| {
                ExperimentError::Config(format!("cannot read {}: {e}", spec.display()))
            })?;
            let gen: GenDataSpec = serde_json::from_str(&text)
                .map_err(|e| ExperimentError::Config(format!("{}: {e}", spec.display())))?;
            let tasks = generate_task_family(&gen.family, gen.tasks)
                .map_err(ExperimentError::Data)?;
            std::fs::create_dir_all(&out)?;
            for (k, task) in tasks.iter().enumerate() {
                let path = out.join(format!("task_{k:02}.csv"));
                write_csv(task, &path).map_err(ExperimentError::Data)?;
                eprintln!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
