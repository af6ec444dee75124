use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fairtrain_core::registry::{Category, Registry};
use fairtrain_core::{evaluate_checkpoint, load_config, run_experiment, RunOptions};

#[derive(Parser)]
#[command(name = "fairtrain", version, about = "Train and evaluate bias-mitigation methods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configured run.
    Run {
        #[arg(long)]
        cfg: PathBuf,
        /// Dotted-path overrides, e.g. `train.lr=0.01`.
        #[arg(long, num_args = 1..)]
        opts: Vec<String>,
        /// Continue from `ckpt_latest` in the run directory.
        #[arg(long)]
        resume: bool,
        /// Load checkpoints even if the config fingerprint differs.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on every configured split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cfg: PathBuf,
        #[arg(long, num_args = 1..)]
        opts: Vec<String>,
        #[arg(long)]
        force: bool,
    },
    /// List registered names.
    List {
        /// methods, datasets, models or metrics
        category: String,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { cfg, opts, resume, force } => {
            let config = load_config(&cfg, &opts).with_context(|| format!("loading {}", cfg.display()))?;
            let outcome = run_experiment(&config, RunOptions { resume, force, stop_after: None })?;
            println!("run directory: {}", outcome.run_dir.display());
            if let (Some(e), Some(v)) = (outcome.best_epoch, outcome.best_value) {
                println!("best epoch {e}: {} {v:.4}", config.eval.primary_metric);
            }
        }
        Command::Eval { ckpt, cfg, opts, force } => {
            let config = load_config(&cfg, &opts).with_context(|| format!("loading {}", cfg.display()))?;
            let reports = evaluate_checkpoint(&config, &ckpt, force)
                .with_context(|| format!("evaluating {}", ckpt.display()))?;
            for r in reports {
                let parts: Vec<String> = r
                    .metadata()
                    .into_iter()
                    .filter_map(|m| m.value.map(|v| format!("{} {v:.4}", m.name)))
                    .collect();
                println!("{}: {}", r.split, parts.join(" | "));
            }
        }
        Command::List { category } => {
            let cat = Category::parse(&category)?;
            for name in Registry::standard().names(cat) {
                println!("{name}");
            }
        }
    }
    Ok(())
}
