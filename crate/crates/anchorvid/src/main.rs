//! Command-line entry point. Every verb prints one JSON summary line on
//! success; failures print one machine-readable JSON error line on stderr
//! and exit nonzero.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use anchorvid::config::RunConfig;
use anchorvid::flow::Stage;
use anchorvid::harness;
use anchorvid::Result;

#[derive(Parser)]
#[command(
    name = "anchorvid",
    about = "Anchor-conditioned video diffusion at desk scale",
    version
)]
struct Cli {
    /// Run configuration file (TOML). Required by every verb except
    /// export-plots.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory (export-plots: the run directory to
    /// read).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic episode corpus and its manifest.
    Synth,
    /// Build anchor indices for every episode in the manifest.
    Pipeline,
    /// Run one training stage; optionally resume from a checkpoint.
    Train {
        /// Stage to run: 1, 2, 3-mixed, or 3-joint (default: the config's).
        #[arg(long)]
        stage: Option<String>,
        /// Checkpoint to resume from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate a long video chunk by chunk.
    Generate {
        /// Checkpoint holding the trained weights (fresh weights when
        /// omitted).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Requested length in minutes.
        #[arg(long)]
        minutes: f64,
    },
    /// Train a baseline and one modified arm, writing paired metrics.
    Ablate {
        /// Arm: no_global, no_view_expr, no_superset, or no_rwc.
        #[arg(long)]
        arm: String,
    },
    /// Export plot tables from a generation run directory (--out).
    ExportPlots,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| {
        anchorvid::Error::InvalidConfig("--config is required for this command".into())
    })?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let summary = match &cli.command {
        Cmd::Synth => {
            let manifest = harness::cmd_synth(&load_config(cli)?)?;
            serde_json::json!({
                "command": "synth",
                "episodes": manifest.entries.len(),
                "ids": manifest.entries.iter().map(|e| e.id.clone()).collect::<Vec<_>>(),
            })
        }
        Cmd::Pipeline => {
            let indices = harness::cmd_pipeline(&load_config(cli)?)?;
            serde_json::json!({
                "command": "pipeline",
                "indices": indices.len(),
                "sources": indices.iter().map(|i| i.source_id.clone()).collect::<Vec<_>>(),
            })
        }
        Cmd::Train { stage, checkpoint } => {
            let stage = stage.as_deref().map(Stage::from_str).transpose()?;
            let out = harness::cmd_train(&load_config(cli)?, stage, checkpoint.as_deref())?;
            serde_json::to_value(&out).map_err(|e| anchorvid::Error::Format {
                path: "command summary".into(),
                detail: e.to_string(),
            })?
        }
        Cmd::Generate {
            checkpoint,
            minutes,
        } => {
            let out =
                harness::cmd_generate(&load_config(cli)?, checkpoint.as_deref(), *minutes)?;
            serde_json::to_value(&out).map_err(|e| anchorvid::Error::Format {
                path: "command summary".into(),
                detail: e.to_string(),
            })?
        }
        Cmd::Ablate { arm } => {
            let out = harness::cmd_ablate(&load_config(cli)?, arm)?;
            serde_json::to_value(&out).map_err(|e| anchorvid::Error::Format {
                path: "command summary".into(),
                detail: e.to_string(),
            })?
        }
        Cmd::ExportPlots => {
            let run_dir = cli.out.as_ref().ok_or_else(|| {
                anchorvid::Error::InvalidConfig("--out must name the run directory to export".into())
            })?;
            let out = harness::cmd_export_plots(run_dir)?;
            serde_json::to_value(&out).map_err(|e| anchorvid::Error::Format {
                path: "command summary".into(),
                detail: e.to_string(),
            })?
        }
    };
    Ok(summary)
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => println!("{}", summary),
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            std::process::exit(1);
        }
    }
}
