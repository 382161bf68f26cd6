use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use psyprobe_core::config::AppConfig;
use psyprobe_core::domain::SessionMode;
use psyprobe_core::metrics::{transcript_question_rate, Smoothing, Tokenizer};
use psyprobe_core::session::read_transcript;
use psyprobe_eval::{run_ablation, score_lines, AblationBackend, ScoreOptions};

#[derive(Debug, Parser)]
#[command(
    name = "psyprobe-eval",
    version,
    about = "ROUGE, BLEU, question rate and ablation runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct MetricArgs {
    /// `ws` splits on whitespace, `char` scores characters (for Korean).
    #[arg(long, default_value = "ws")]
    tokenizer: Tokenizer,
    /// BLEU smoothing for orders 2 and up: `none` or `add_one`.
    #[arg(long, default_value = "none")]
    smoothing: Smoothing,
}

impl MetricArgs {
    fn options(&self) -> ScoreOptions {
        ScoreOptions {
            tokenizer: self.tokenizer,
            smoothing: self.smoothing,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score line-aligned candidate and reference files.
    Score {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[command(flatten)]
        metrics: MetricArgs,
    },
    /// Question rate of the agent turns in a transcript.
    Qr {
        #[arg(long)]
        transcript: PathBuf,
    },
    /// Regenerate each counselor turn per mode and score against the human reply.
    Ablate {
        #[arg(long)]
        dir: PathBuf,
        /// Comma-separated modes, e.g. `full,wo_sb,wo_sp,wo_qic,baseline`.
        #[arg(long, value_delimiter = ',', required = true)]
        modes: Vec<SessionMode>,
        /// Use the deterministic mock backend.
        #[arg(long)]
        mock: bool,
        /// TOML config for engine, assets and backend settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        metrics: MetricArgs,
    },
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Score {
            candidates,
            references,
            metrics,
        } => {
            let (mean, pairs) =
                score_lines(&read(&candidates)?, &read(&references)?, metrics.options())?;
            println!(
                "{:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}   pairs",
                "R-1", "R-2", "R-L", "B-1", "B-2", "B-3", "B-4"
            );
            for v in mean.values() {
                print!("{v:>7.4} ");
            }
            println!("{pairs:>7}");
        }
        Command::Qr { transcript } => {
            let entries = read_transcript(&transcript)?;
            let rate = transcript_question_rate(&entries)
                .with_context(|| transcript.display().to_string())?;
            println!("{rate:.4}");
        }
        Command::Ablate {
            dir,
            modes,
            mock,
            config,
            out,
            metrics,
        } => {
            let app = match &config {
                Some(p) => AppConfig::load(p)?,
                None => AppConfig::default(),
            };
            if !mock && config.is_none() {
                bail!("pass --mock, or --config with a live backend");
            }
            let backend = AblationBackend {
                engine: app.engine()?,
                templates: Arc::new(app.templates()?),
                factory: app.backend_factory(mock)?,
                gateway: app.session.backend.clone(),
            };
            let report = run_ablation(&dir, &modes, &backend, metrics.options())?;
            print!("{}", report.to_table());
            for f in &report.failures {
                eprintln!(
                    "{} [{}] turn {}: {} failed: {}",
                    f.transcript, f.mode, f.turn_index, f.stage, f.message
                );
            }
            if let Some(out) = out {
                let json = serde_json::to_string_pretty(&report)?;
                std::fs::write(&out, json + "\n")
                    .with_context(|| format!("writing {}", out.display()))?;
            }
        }
    }
    Ok(())
}
