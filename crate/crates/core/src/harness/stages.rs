//! The pipeline stages behind each CLI subcommand. Each stage reads its
//! inputs from and writes its outputs to one run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint_expecting, save_checkpoint, Checkpoint, Provenance};
use super::config::{RunConfig, ScheduleChoice};
use super::io::{fmt_f64, fmt_opt, write_json, CsvTable};
use super::report::render_report;
use crate::calibration::{calibrate, CalibrationOutcome};
use crate::error::{FlowError, Result};
use crate::flow_model::{cfm_pretrain, VelocityField};
use crate::grpo::{evaluate, train, EvalSummary, TrainOutcome};
use crate::numerics::RngStream;
use crate::samplers::{NoiseSchedule, TimeGrid};

pub const CONFIG_FILE: &str = "config.json";
pub const REFERENCE_CKPT: &str = "reference.ckpt.json";
pub const ALIGNED_CKPT: &str = "aligned.ckpt.json";
pub const PRETRAIN_LOSS_CSV: &str = "pretrain_loss.csv";
pub const PSI_JSON: &str = "psi.json";
pub const CALIBRATION_CSV: &str = "calibration.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const DENSE_REWARDS_CSV: &str = "dense_rewards.csv";
pub const REPORT_DIR: &str = "report";

pub const PRETRAIN_LOSS_HEADER: [&str; 2] = ["step", "loss"];
pub const CALIBRATION_HEADER: [&str; 6] = ["iteration", "timestep", "psi", "positive", "negative", "imbalance"];
pub const METRICS_HEADER: [&str; 7] = [
    "step",
    "epoch",
    "mean_terminal_reward",
    "eval_reward",
    "mean_kl",
    "clip_fraction",
    "objective",
];
pub const DENSE_REWARDS_HEADER: [&str; 5] = ["round", "traj", "timestep", "latent_reward", "gain"];

pub const PSI_FORMAT_VERSION: u32 = 1;
pub const EVAL_FORMAT_VERSION: u32 = 1;

const INIT_TAG: u64 = 0x494e_4954;

/// Calibration constants echoed into the ψ document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsiConfigEcho {
    pub eps1: usize,
    pub eps2: f64,
    pub iterations: usize,
    pub samples: usize,
    pub psi_min: f64,
    pub psi_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsiDocument {
    pub format_version: u32,
    pub grid_t: usize,
    /// Ordered `[psi_T, ..., psi_1]`.
    pub psi: Vec<f64>,
    pub config: PsiConfigEcho,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub format_version: u32,
    pub checkpoint: String,
    pub mean_reward: f64,
    pub per_class_reward: Vec<f64>,
    pub samples_per_class: usize,
    pub eval_steps: usize,
    pub seed: u64,
    pub config_digest: String,
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(FlowError::MissingArtifact { path, stage })
    }
}

fn provenance(cfg: &RunConfig, stage: &str) -> Provenance {
    Provenance {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        stage: stage.into(),
    }
}

/// Persists the fully materialized config next to the artifacts.
pub fn write_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut persisted = cfg.clone();
    persisted.output_dir = Some(out.to_path_buf());
    let mut text = persisted.to_json_pretty();
    text.push('\n');
    super::io::write_atomic(&out.join(CONFIG_FILE), text.as_bytes())
}

pub fn load_reference(cfg: &RunConfig, out: &Path) -> Result<Checkpoint> {
    let path = require(out.join(REFERENCE_CKPT), "pretrain")?;
    load_checkpoint_expecting(&path, &cfg.network_shape()?)
}

pub fn run_pretrain(cfg: &RunConfig, out: &Path) -> Result<Vec<f64>> {
    write_config(cfg, out)?;
    let mut rng = RngStream::keyed(cfg.seed, &[INIT_TAG]);
    let mut field = VelocityField::new_random(
        cfg.task.dim,
        cfg.task.num_classes,
        cfg.model.time_embed_dim,
        &cfg.model.hidden_dims,
        &mut rng,
    )?;
    let losses = cfm_pretrain(&mut field, &cfg.dataset(), &cfg.pretrain_config())?;
    let mut table = CsvTable::new(&PRETRAIN_LOSS_HEADER);
    for (i, l) in losses.iter().enumerate() {
        table.push(vec![i.to_string(), fmt_f64(*l)]);
    }
    table.write(&out.join(PRETRAIN_LOSS_CSV))?;
    save_checkpoint(
        &Checkpoint {
            field,
            optimizer: None,
            psi: None,
            provenance: provenance(cfg, "pretrain"),
        },
        &out.join(REFERENCE_CKPT),
    )?;
    Ok(losses)
}

pub fn run_calibrate(cfg: &RunConfig, out: &Path) -> Result<CalibrationOutcome> {
    let reference = load_reference(cfg, out)?;
    write_config(cfg, out)?;
    let grid = TimeGrid::new(cfg.align.steps)?;
    let outcome = calibrate(&reference.field, &cfg.reward_model()?, &cfg.calibrate, &grid, cfg.seed)?;
    let mut table = CsvTable::new(&CALIBRATION_HEADER);
    for rec in &outcome.history {
        for s in &rec.steps {
            table.push(vec![
                rec.iteration.to_string(),
                s.k.to_string(),
                fmt_f64(s.psi),
                s.positive.to_string(),
                s.negative.to_string(),
                s.imbalance.to_string(),
            ]);
        }
    }
    table.write(&out.join(CALIBRATION_CSV))?;
    let c = &cfg.calibrate;
    write_json(
        &out.join(PSI_JSON),
        &PsiDocument {
            format_version: PSI_FORMAT_VERSION,
            grid_t: grid.steps(),
            psi: outcome.psi_descending(),
            config: PsiConfigEcho {
                eps1: c.eps1,
                eps2: c.eps2,
                iterations: c.iterations,
                samples: c.samples,
                psi_min: c.psi_min,
                psi_max: c.psi_max,
            },
            seed: cfg.seed,
            config_digest: cfg.digest(),
        },
    )?;
    Ok(outcome)
}

pub fn load_psi(path: &Path) -> Result<PsiDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| FlowError::io(path, e))?;
    let doc: PsiDocument = serde_json::from_str(&text).map_err(|e| FlowError::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if doc.format_version != PSI_FORMAT_VERSION {
        return Err(FlowError::VersionMismatch {
            found: doc.format_version,
            expected: PSI_FORMAT_VERSION,
        });
    }
    if doc.psi.len() != doc.grid_t {
        return Err(FlowError::Malformed {
            path: path.to_path_buf(),
            reason: format!("{} psi entries for grid_t = {}", doc.psi.len(), doc.grid_t),
        });
    }
    Ok(doc)
}

/// Exploration schedule selected by the align section.
pub fn align_schedule(cfg: &RunConfig, out: &Path) -> Result<NoiseSchedule> {
    match cfg.align.schedule {
        ScheduleChoice::Uniform { a } => NoiseSchedule::uniform(a),
        ScheduleChoice::Calibrated {} => {
            let path = require(out.join(PSI_JSON), "calibrate")?;
            let doc = load_psi(&path)?;
            if doc.grid_t != cfg.align.steps {
                return Err(FlowError::Config(format!(
                    "{}: table covers {} steps but align.steps is {}",
                    path.display(),
                    doc.grid_t,
                    cfg.align.steps
                )));
            }
            NoiseSchedule::from_descending(&doc.psi)
        }
    }
}

pub fn run_align(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let reference = load_reference(cfg, out)?;
    let schedule = align_schedule(cfg, out)?;
    write_config(cfg, out)?;
    let outcome = train(
        reference.field.clone(),
        &reference.field,
        &cfg.reward_model()?,
        &schedule,
        &cfg.grpo_config(),
    )?;

    let mut metrics = CsvTable::new(&METRICS_HEADER);
    for m in &outcome.metrics {
        metrics.push(vec![
            m.round.to_string(),
            m.epoch.to_string(),
            fmt_f64(m.mean_terminal_reward),
            fmt_opt(m.eval_reward),
            fmt_f64(m.mean_kl),
            fmt_f64(m.clip_fraction),
            fmt_f64(m.objective),
        ]);
    }
    metrics.write(&out.join(METRICS_CSV))?;

    let mut dense = CsvTable::new(&DENSE_REWARDS_HEADER);
    for r in &outcome.dense_dump {
        dense.push(vec![
            r.round.to_string(),
            r.traj.to_string(),
            r.timestep.to_string(),
            fmt_f64(r.latent_reward),
            fmt_opt(r.gain),
        ]);
    }
    dense.write(&out.join(DENSE_REWARDS_CSV))?;

    let psi = match &schedule {
        NoiseSchedule::Calibrated { psi } => Some(psi.iter().rev().copied().collect()),
        NoiseSchedule::Uniform { .. } => None,
    };
    save_checkpoint(
        &Checkpoint {
            field: outcome.field.clone(),
            optimizer: Some(outcome.optimizer.clone()),
            psi,
            provenance: provenance(cfg, "align"),
        },
        &out.join(ALIGNED_CKPT),
    )?;
    Ok(outcome)
}

/// `eval_<name>.json` for `<name>.ckpt.json`.
pub fn eval_output_name(checkpoint: &Path) -> String {
    let name = checkpoint.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name
        .strip_suffix(".ckpt.json")
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(&name);
    format!("eval_{stem}.json")
}

/// Evaluates `checkpoint` (default: the aligned checkpoint in `out`).
pub fn run_eval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(PathBuf, EvalSummary)> {
    let path = match checkpoint {
        Some(p) => require(p.to_path_buf(), "align")?,
        None => require(out.join(ALIGNED_CKPT), "align")?,
    };
    let ckpt = load_checkpoint_expecting(&path, &cfg.network_shape()?)?;
    let a = &cfg.align;
    let summary = evaluate(&ckpt.field, &cfg.reward_model()?, a.eval_steps, a.eval_samples_per_class, cfg.seed)?;
    let dest = out.join(eval_output_name(&path));
    write_json(
        &dest,
        &EvalDocument {
            format_version: EVAL_FORMAT_VERSION,
            checkpoint: path.display().to_string(),
            mean_reward: summary.mean_reward,
            per_class_reward: summary.per_class_reward.clone(),
            samples_per_class: summary.samples_per_class,
            eval_steps: summary.eval_steps,
            seed: cfg.seed,
            config_digest: cfg.digest(),
        },
    )?;
    Ok((dest, summary))
}

pub fn run_report(out: &Path) -> Result<Vec<PathBuf>> {
    let any = [PRETRAIN_LOSS_CSV, CALIBRATION_CSV, METRICS_CSV, DENSE_REWARDS_CSV]
        .iter()
        .any(|f| out.join(f).exists());
    if !any {
        return Err(FlowError::MissingArtifact {
            path: out.join(METRICS_CSV),
            stage: "align",
        });
    }
    render_report(out, &out.join(REPORT_DIR))
}
