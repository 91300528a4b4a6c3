//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::RunConfig;
use super::stages::{self, CONFIG_FILE};
use crate::error::{FlowError, Result};

#[derive(Debug, Parser)]
#[command(name = "flowrl", version, about = "Dense-reward GRPO alignment of toy flow-matching models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Run configuration (JSON). Defaults to `<out>/config.json` when present.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the reference velocity field with conditional flow matching.
    Pretrain(Common),
    /// Calibrate the per-step exploration noise table.
    Calibrate(Common),
    /// Run GRPO alignment from the reference checkpoint.
    Align(Common),
    /// Score a checkpoint with deterministic ODE sampling.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the aligned checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render SVG charts from the run directory's CSV files.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Resolves config and run directory for a stage.
pub fn resolve(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match (&common.config, &common.out) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(out)) if out.join(CONFIG_FILE).exists() => RunConfig::load(&out.join(CONFIG_FILE))?,
        _ => RunConfig::default().resolve()?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| FlowError::Config("no output directory: pass --out or set output_dir".into()))?;
    cfg.output_dir = Some(out.clone());
    Ok((cfg, out))
}

/// Caps the global worker pool from `FLOWRL_THREADS`.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("FLOWRL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| FlowError::Config(format!("FLOWRL_THREADS: expected a positive integer, got {raw:?}")))?;
    // A pool may already exist when called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn rel(p: &Path) -> String {
    p.display().to_string()
}

pub fn execute(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Pretrain(c) => {
            let (cfg, out) = resolve(&c)?;
            let losses = stages::run_pretrain(&cfg, &out)?;
            println!(
                "pretrain: {} steps, final loss {:.4} -> {}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN),
                rel(&out.join(stages::REFERENCE_CKPT))
            );
        }
        Command::Calibrate(c) => {
            let (cfg, out) = resolve(&c)?;
            let outcome = stages::run_calibrate(&cfg, &out)?;
            let psi: Vec<String> = outcome.psi_descending().iter().map(|p| format!("{p:.3}")).collect();
            println!("calibrate: psi[T..1] = [{}] -> {}", psi.join(", "), rel(&out.join(stages::PSI_JSON)));
        }
        Command::Align(c) => {
            let (cfg, out) = resolve(&c)?;
            let outcome = stages::run_align(&cfg, &out)?;
            println!(
                "align: eval reward {:.4} -> {:.4} -> {}",
                outcome.initial_eval.mean_reward,
                outcome.final_eval().mean_reward,
                rel(&out.join(stages::ALIGNED_CKPT))
            );
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = resolve(&common)?;
            let (dest, summary) = stages::run_eval(&cfg, &out, checkpoint.as_deref())?;
            println!("eval: mean reward {:.4} -> {}", summary.mean_reward, rel(&dest));
        }
        Command::Report { out } => {
            for p in stages::run_report(&out)? {
                println!("report: {}", rel(&p));
            }
        }
    }
    Ok(())
}

/// Process exit code for an error.
pub fn exit_code(err: &FlowError) -> i32 {
    match err {
        FlowError::Config(_) => 2,
        FlowError::MissingArtifact { .. } => 3,
        FlowError::Malformed { .. }
        | FlowError::VersionMismatch { .. }
        | FlowError::DigestMismatch { .. }
        | FlowError::ShapeMismatch { .. } => 4,
        _ => 1,
    }
}

/// Parses `argv`, runs the command and returns the exit status.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            exit_code(&e)
        }
    }
}
