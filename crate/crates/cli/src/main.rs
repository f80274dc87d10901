//! `far`: dataset generation, training, variant ladders and diagnostics.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use far_cli::{commands, CliError, Config};
use far_core::diagnostics::VariantId;

#[derive(Parser)]
#[command(name = "far", version, about = "Feature alignment and restoration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Training seed (for `dataset gen`: the data seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic dataset files.
    Dataset {
        #[command(subcommand)]
        command: DatasetCmd,
    },
    /// Train the configured variant.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs; resume later with --resume.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Run every configured variant × seed and summarize.
    Ablation {
        #[command(flatten)]
        common: Common,
        /// Output directory; FAR_THREADS sets the number of worker processes.
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Export divergence reports, activation maps and features.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint; must match the configured variant.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "diagnostics")]
        out: PathBuf,
    },
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: String,
        #[arg(long)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Write one FARD file per domain and split, plus a manifest.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to `data.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a FARD file.
    Inspect { path: PathBuf },
}

fn resolve(common: &Common, seed_key: &str) -> Result<Config, CliError> {
    let mut overrides = common.set.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("{seed_key}={s}"));
    }
    Config::load(common.config.as_deref(), &overrides)?.resolved()
}

fn worker_count() -> usize {
    std::env::var("FAR_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Dataset { command } => match command {
            DatasetCmd::Gen { common, out } => {
                let cfg = resolve(&common, "data.seed")?;
                if common.dry_run {
                    print!("{}", cfg.to_text());
                    return Ok(());
                }
                let dir = out.unwrap_or_else(|| cfg.data_dir.clone());
                let manifest = commands::dataset_gen(&cfg, &dir)?;
                println!("wrote {} files and manifest.json to {}", manifest.files.len(), dir.display());
            }
            DatasetCmd::Inspect { path } => print!("{}", commands::dataset_inspect(&path)?),
        },
        Cmd::Train { common, out, resume, stop_after } => {
            let cfg = resolve(&common, "seed")?;
            if let Some(summary) = commands::train(&cfg, &out, resume.as_deref(), stop_after, common.dry_run)? {
                let acc = &summary.final_row.accuracy;
                println!(
                    "trained {} into {}; target accuracy {}",
                    cfg.variant,
                    summary.run_dir.display(),
                    acc.get(cfg.experiment.target_domain)
                        .map(|a| far_cli::fmt_float(*a))
                        .unwrap_or_else(|| "n/a".into())
                );
            }
        }
        Cmd::Ablation { common, out } => {
            let cfg = resolve(&common, "seed")?;
            if common.dry_run {
                print!("{}", cfg.to_text());
                return Ok(());
            }
            let exe = std::env::current_exe().ok();
            let outcome = commands::ablation(&cfg, &out, worker_count(), exe.as_deref())?;
            for row in &outcome.summary {
                println!(
                    "{:<18} mean {} std {} ({} seeds)",
                    row.variant,
                    far_cli::fmt_float(row.mean_accuracy),
                    far_cli::fmt_float(row.std_accuracy),
                    row.seeds
                );
            }
            if let Some(holds) = outcome.verdict.ordering_holds {
                println!("ladder ordering holds: {holds}");
            }
        }
        Cmd::Diagnose { common, checkpoint, out } => {
            let cfg = resolve(&common, "seed")?;
            if common.dry_run {
                print!("{}", cfg.to_text());
                return Ok(());
            }
            let outcome = commands::diagnose(&cfg, &checkpoint, &out)?;
            for r in &outcome.reports {
                println!("divergence {:<5} mean {}", r.stage.label(), far_cli::fmt_float(r.mean));
            }
        }
        Cmd::Worker { config, variant, seed } => {
            let cfg = Config::load(Some(&config), &[])?.resolved()?;
            let variant: VariantId = variant.parse()?;
            println!("{}", commands::worker(&cfg, variant, seed)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("far-error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("far-error: {e}");
            ExitCode::FAILURE
        }
    }
}
