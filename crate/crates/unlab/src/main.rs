//! unlab: a desk-scale machine-unlearning laboratory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unlab::config::ExperimentConfig;
use unlab::runner::{run_bench, Workspace};
use unlab::{reference, RunError, RunResult};
use unlab_core::unlearn::Variant;

#[derive(Parser)]
#[command(
    name = "unlab",
    about = "Desk-scale machine-unlearning laboratory: train, unlearn, and \
             evaluate representation-level forgetting on seeded synthetic data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the original model on the full dataset.
    TrainOriginal {
        #[command(flatten)]
        common: Common,
    },
    /// Train the retrained oracle on the retain split only.
    Retrain {
        #[command(flatten)]
        common: Common,
    },
    /// Attach EC modules and SupCon-pretrain their blocks.
    PretrainEc {
        #[command(flatten)]
        common: Common,
    },
    /// Run one unlearning method.
    Unlearn {
        #[command(flatten)]
        common: Common,
        /// ec, cu, rl, ga, finetune, plugin:ga, plugin:cu
        #[arg(long)]
        method: String,
        /// full, no-layerwise-ce, no-ec-modules, plus-final-blocks (ec only)
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Evaluate a method against the original and retrained checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Run the method x seed grid and aggregate a comparison table.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Grid cells to run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Recompute the published H-Mean columns from their raw metrics.
    HmeanReplay,
    /// Export raw tap features of a method's checkpoint (ULAB files).
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
        #[arg(long, default_value = "full")]
        variant: String,
    },
}

fn workspace(common: &Common) -> RunResult<(Workspace, u64)> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let seed = cfg.seed;
    Ok((Workspace::new(cfg, common.out.as_deref()), seed))
}

fn parse_variant(s: &str) -> RunResult<Variant> {
    Variant::parse(s).map_err(|e| RunError::Config(e.to_string()))
}

fn run(cli: Cli) -> RunResult<()> {
    match cli.command {
        Command::TrainOriginal { common } => {
            let (ws, seed) = workspace(&common)?;
            let path = ws.run_train_original(seed, false)?;
            println!("wrote {}", path.display());
        }
        Command::Retrain { common } => {
            let (ws, seed) = workspace(&common)?;
            let path = ws.run_retrain(seed, false)?;
            println!("wrote {}", path.display());
        }
        Command::PretrainEc { common } => {
            let (ws, seed) = workspace(&common)?;
            let path = ws.run_pretrain_ec(seed, false)?;
            println!("wrote {}", path.display());
        }
        Command::Unlearn { common, method, variant } => {
            let (ws, seed) = workspace(&common)?;
            let variant = parse_variant(&variant)?;
            let path = ws.run_unlearn(seed, &method, variant)?;
            println!("wrote {}", path.display());
        }
        Command::Eval { common, method, variant } => {
            let (ws, seed) = workspace(&common)?;
            let variant = parse_variant(&variant)?;
            let report = ws.run_eval(seed, &method, variant)?;
            let label = Workspace::method_label(&method, variant);
            let dir = ws.method_dir(&label, seed);
            println!(
                "{label}: FA {:.2} RA {:.2} TFA {:.2} TRA {:.2} CKA {:.2} |IDI| {:.3} H-Mean {}",
                report.fa,
                report.ra,
                report.tfa,
                report.tra,
                report.cka,
                report.idi.abs(),
                report
                    .h_mean
                    .map(|h| format!("{h:.2}"))
                    .unwrap_or_else(|| "--".into()),
            );
            println!("wrote {}", dir.join("report.json").display());
        }
        Command::Bench { common, parallel } => {
            let (ws, _) = workspace(&common)?;
            let path = run_bench(&ws, parallel)?;
            println!("wrote {}", path.display());
        }
        Command::HmeanReplay => {
            let lines = reference::replay();
            let mut failures = 0;
            for line in &lines {
                let status = if line.pass() { "ok" } else { "MISMATCH" };
                println!(
                    "{:<20} {:<8} published {:>6.2}  computed {:>8.4}  [{status}]",
                    line.table, line.method, line.expected, line.computed
                );
                if !line.pass() {
                    failures += 1;
                }
            }
            if failures > 0 {
                return Err(RunError::Check(format!(
                    "{failures} reference H-Mean values diverged beyond {}",
                    reference::TOLERANCE
                )));
            }
        }
        Command::ExportFeatures { common, method, variant } => {
            let (ws, seed) = workspace(&common)?;
            let variant = parse_variant(&variant)?;
            ws.run_export_features(seed, &method, variant)?;
            let label = Workspace::method_label(&method, variant);
            println!("wrote features under {}", ws.method_dir(&label, seed).display());
        }
    }
    Ok(())
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
