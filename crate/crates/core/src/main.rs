//! `confharness` — evaluates how well chat models perceive their own
//! knowledge boundaries, by eliciting confidence (verbalized, probabilistic,
//! or answer-consistency), calibrating score thresholds on a held-out split,
//! grading answers, and reporting alignment metrics.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use confidence_harness::calibrate::Direction;
use confidence_harness::report::{Modality, ReportFormat};
use confidence_harness::runner::{self, MethodEntry, RunConfig, RunError, RunSummary};

#[derive(Parser)]
#[command(
    name = "confharness",
    version,
    about = "Knowledge-boundary evaluation harness for chat models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full evaluation and write reports plus a resumable ledger.
    Run {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Evaluate only these methods (repeatable); overrides the config.
        #[arg(long = "method")]
        methods: Vec<String>,
        /// Override the config's modality: vqa, qa, or image_only.
        #[arg(long)]
        modality: Option<String>,
        /// Continue from the existing ledger instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Fit the confidence threshold for one score-kind method on the
    /// held-out split and write thresholds.json.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: String,
    },
    /// Evaluate one method under vqa, qa, and image_only and emit a single
    /// grouped report.
    CompareModalities {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: String,
    },
    /// Rebuild a report from an existing run ledger directory.
    Report {
        /// Directory containing ledger.jsonl.
        #[arg(long)]
        ledger: PathBuf,
        /// Output format: json, csv, or md.
        #[arg(long, default_value = "json")]
        format: String,
    },
}

fn print_summary(summary: &RunSummary) {
    println!(
        "{} report row(s); {} backend call(s); {} warning(s)",
        summary.reports.len(),
        summary.backend_calls,
        summary.warnings.len()
    );
    for warning in &summary.warnings {
        println!("warning: {warning}");
    }
    for path in &summary.report_paths {
        println!("wrote {}", path.display());
    }
}

async fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run {
            config,
            methods,
            modality,
            resume,
        } => {
            let mut config = RunConfig::load(&config)?;
            if !methods.is_empty() {
                config.methods = methods.into_iter().map(MethodEntry::Name).collect();
            }
            if let Some(name) = modality {
                config.modality = Modality::from_str_opt(&name).ok_or_else(|| {
                    RunError::Config(format!(
                        "unknown modality {name:?}; expected vqa, qa, or image_only"
                    ))
                })?;
            }
            let summary = runner::run(&config, resume).await?;
            print_summary(&summary);
            Ok(())
        }
        Command::Fit { config, method } => {
            let config = RunConfig::load(&config)?;
            let fit = runner::fit(&config, &method).await?;
            let rule = match fit.direction {
                Direction::ConfidentIfScoreAtMost => "score <= threshold",
                Direction::ConfidentIfScoreAtLeast => "score >= threshold",
            };
            println!(
                "fitted {method}: confident when {rule}, threshold {}, \
                 held-out alignment {:.4} over {} record(s)",
                fit.threshold, fit.heldout_alignment, fit.n_heldout
            );
            Ok(())
        }
        Command::CompareModalities { config, method } => {
            let config = RunConfig::load(&config)?;
            let summary = runner::compare_modalities(&config, &method).await?;
            print_summary(&summary);
            Ok(())
        }
        Command::Report { ledger, format } => {
            let format = ReportFormat::from_name(&format).ok_or_else(|| {
                RunError::Config(format!(
                    "unknown report format {format:?}; expected json, csv, or md"
                ))
            })?;
            let text = runner::report_from_ledger(&ledger, format)?;
            print!("{text}");
            Ok(())
        }
    }
}

#[tokio::main]
async fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(err) = execute(cli).await {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
