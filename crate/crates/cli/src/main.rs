//! `learn` — train and evaluate an occlusion-robust classification pipeline.
//!
//! Subcommands compose into the full workflow:
//! `generate-data` -> `train-backbone` -> `train-learn` -> `evaluate`.
//! Exit codes: 0 success, 2 invariant violation, 1 operational error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use learn_core::config::RunConfig;
use learn_core::eval::TableMeta;
use learn_core::pipeline::{
    cmd_evaluate, cmd_generate_data, cmd_train_backbone, cmd_train_learn, PipelineError, RunPaths,
};
use learn_core::report;

#[derive(Parser)]
#[command(name = "learn", version, about = "Occlusion-robust classification via feature reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus flag overrides; precedence: flags > file > defaults.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Path to a TOML run configuration (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Exclude this occluder type from training and report it separately
    /// (white | noise | texture | object).
    #[arg(long)]
    heldout_type: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        if let Some(heldout) = &self.heldout_type {
            config.occlusion.heldout_type = Some(heldout.clone());
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset manifest and frozen occluded test sets.
    GenerateData(ConfigArgs),
    /// Finetune the backbone on clean images and fit the feature normalizer.
    TrainBackbone(ConfigArgs),
    /// Train the reconstruction autoencoder over the frozen backbone.
    TrainLearn(ConfigArgs),
    /// Evaluate baseline and proposed pipelines over all frozen test cells.
    Evaluate(ConfigArgs),
    /// Re-render report files from the stored results tables.
    Report(ConfigArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::GenerateData(args) => {
            let config = args.resolve()?;
            let outcome = cmd_generate_data(&config)?;
            println!(
                "dataset: {} train / {} test images, {} frozen cells -> {}",
                outcome.manifest.train_records().count(),
                outcome.manifest.test_records().count(),
                outcome.suite.sets.len(),
                config.out_dir.display()
            );
        }
        Command::TrainBackbone(args) => {
            let config = args.resolve()?;
            let outcome = cmd_train_backbone(&config)?;
            println!(
                "backbone: best epoch {} (val {:.4}), clean test accuracy {:.4}",
                outcome.history.best_epoch,
                outcome.history.best_val_accuracy,
                outcome.clean_test_accuracy
            );
        }
        Command::TrainLearn(args) => {
            let config = args.resolve()?;
            let outcome = cmd_train_learn(&config)?;
            let last = outcome.history.epochs.last().expect("at least one epoch");
            println!(
                "autoencoder: {} epochs (best {}), final val clean {:.4} / occluded {:.4}",
                outcome.history.epochs.len(),
                outcome.history.best_epoch,
                last.val_clean_accuracy,
                last.val_occluded_accuracy
            );
            println!("backbone hash unchanged: {}", outcome.backbone_hash_after);
        }
        Command::Evaluate(args) => {
            let config = args.resolve()?;
            let outcome = cmd_evaluate(&config)?;
            print!("{}", report::results_text(&outcome.table));
            if let Some(heldout) = &outcome.heldout_table {
                println!("held-out occluder type:");
                print!("{}", report::results_text(heldout));
            }
        }
        Command::Report(args) => {
            let config = args.resolve()?;
            let paths = RunPaths::new(&config.out_dir);
            let results_dir = paths.results_dir();
            let mut rendered = 0;
            for name in ["results", "results_heldout"] {
                let csv_path = results_dir.join(format!("{name}.csv"));
                if !csv_path.exists() {
                    continue;
                }
                let csv = std::fs::read_to_string(&csv_path)?;
                let meta = TableMeta {
                    seed: config.seed,
                    manifest_hash: String::new(),
                    config_hash: config.content_hash(),
                };
                let table = report::parse_results_csv(&csv, meta)?;
                std::fs::write(results_dir.join(format!("{name}.txt")), report::results_text(&table))?;
                print!("{}", report::results_text(&table));
                rendered += 1;
            }
            if rendered == 0 {
                return Err(PipelineError::Missing {
                    what: "results tables",
                    path: results_dir,
                    hint: "evaluate",
                });
            }
        }
    }
    Ok(())
}
