//! Run configuration: one JSON document, unknown keys rejected, every
//! default materialized by [`RunConfig::resolve`] before it is persisted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::CalibrationConfig;
use crate::dense_reward::{AdvantageMode, NPolicy};
use crate::error::{FlowError, Result};
use crate::flow_model::{ring_centers, DatasetKind, PretrainConfig, ToyDataset, VelocityField};
use crate::grpo::GrpoConfig;
use crate::numerics::{AdamConfig, NetworkShape};
use crate::reward_models::{RewardKind, RewardModel};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKindTag {
    GaussianMode,
    NegDistance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub kind: RewardKindTag,
    /// Width for `gaussian_mode`; ignored by `neg_distance`.
    pub width: f64,
    /// Defaults to the data centers scaled by 1.25.
    pub centers: Option<Vec<Vec<f64>>>,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            kind: RewardKindTag::GaussianMode,
            width: 0.5,
            centers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub dataset: DatasetKind,
    pub num_classes: usize,
    pub dim: usize,
    pub mode_std: f64,
    /// Defaults to a radius-2 ring (mixture) or the quadrant centers
    /// (checkerboard).
    pub centers: Option<Vec<Vec<f64>>>,
    pub reward: RewardSection,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::GaussianMixture2d,
            num_classes: 4,
            dim: 2,
            mode_std: 0.1,
            centers: None,
            reward: RewardSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            time_embed_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            batch: d.batch,
            steps: d.steps,
            lr: d.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleChoice {
    Uniform { a: f64 },
    /// Read the table written by `calibrate`.
    Calibrated {},
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSection {
    pub group_size: usize,
    pub steps: usize,
    pub eval_steps: usize,
    pub clip: f64,
    /// Defaults to 0.01 for `gaussian_mode` rewards and 0.04 for
    /// `neg_distance`.
    pub beta: Option<f64>,
    pub adam: AdamConfig,
    pub inner_epochs: usize,
    pub train_steps: usize,
    pub advantage_mode: AdvantageMode,
    pub n_policy: NPolicy,
    pub eval_every: usize,
    pub eval_samples_per_class: usize,
    pub schedule: ScheduleChoice,
}

impl Default for AlignSection {
    fn default() -> Self {
        let d = GrpoConfig::default();
        Self {
            group_size: d.group_size,
            steps: d.steps,
            eval_steps: d.eval_steps,
            clip: d.clip,
            beta: None,
            adam: d.adam,
            inner_epochs: d.inner_epochs,
            train_steps: d.train_steps,
            advantage_mode: d.advantage_mode,
            n_policy: d.n_policy,
            eval_every: d.eval_every,
            eval_samples_per_class: d.eval_samples_per_class,
            schedule: ScheduleChoice::Calibrated {},
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub calibrate: CalibrationConfig,
    pub align: AlignSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            seed: 0,
            output_dir: None,
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainSection::default(),
            calibrate: CalibrationConfig::default(),
            align: AlignSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config document; diagnostics carry `path:line:column`.
    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            FlowError::Config(format!(
                "{}:{}:{}: {}",
                origin.display(),
                e.line(),
                e.column(),
                e
            ))
        })?;
        if cfg.format_version != CONFIG_FORMAT_VERSION {
            return Err(FlowError::Config(format!(
                "{}: format_version {} is not supported (expected {})",
                origin.display(),
                cfg.format_version,
                CONFIG_FORMAT_VERSION
            )));
        }
        cfg.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FlowError::io(path, e))?;
        Self::from_json_str(&text, path)
    }

    /// Fills every optional field and validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        let t = &mut self.task;
        if t.centers.is_none() {
            t.centers = Some(match t.dataset {
                DatasetKind::GaussianMixture2d => ring_centers(t.num_classes, 2.0),
                DatasetKind::Checkerboard2d => ToyDataset::checkerboard().centers,
            });
        }
        if t.reward.centers.is_none() {
            let data = t.centers.as_ref().expect("materialized above");
            t.reward.centers = Some(
                data.iter()
                    .map(|c| c.iter().map(|v| 1.25 * v).collect())
                    .collect(),
            );
        }
        if self.align.beta.is_none() {
            self.align.beta = Some(match t.reward.kind {
                RewardKindTag::GaussianMode => 0.01,
                RewardKindTag::NegDistance => 0.04,
            });
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let field = |name: &str, e: FlowError| FlowError::Config(format!("{name}: {e}"));
        let t = &self.task;
        if t.dim != 2 {
            return Err(FlowError::Config(format!("task.dim: toy datasets are 2-D, got {}", t.dim)));
        }
        let centers = t.centers.as_ref().expect("resolved");
        if centers.len() != t.num_classes {
            return Err(FlowError::Config(format!(
                "task.centers: {} centers for {} classes",
                centers.len(),
                t.num_classes
            )));
        }
        if t.dataset == DatasetKind::Checkerboard2d && t.num_classes != 4 {
            return Err(FlowError::Config("task.num_classes: checkerboard has exactly 4 classes".into()));
        }
        self.dataset().validate().map_err(|e| field("task", e))?;
        let reward = self.reward_model().map_err(|e| field("task.reward", e))?;
        if reward.num_classes() != t.num_classes || reward.centers[0].len() != t.dim {
            return Err(FlowError::Config(
                "task.reward.centers: need one center of dimension task.dim per class".into(),
            ));
        }
        self.network_shape().map_err(|e| field("model", e))?;
        if self.pretrain.steps == 0 || self.pretrain.batch == 0 {
            return Err(FlowError::Config("pretrain: steps and batch must be >= 1".into()));
        }
        self.calibrate.validate().map_err(|e| field("calibrate", e))?;
        self.grpo_config().validate().map_err(|e| field("align", e))?;
        if let ScheduleChoice::Uniform { a } = self.align.schedule {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(FlowError::Config(format!("align.schedule.a: must be >= 0, got {a}")));
            }
        }
        Ok(())
    }

    pub fn dataset(&self) -> ToyDataset {
        ToyDataset {
            kind: self.task.dataset,
            centers: self.task.centers.clone().unwrap_or_default(),
            mode_std: self.task.mode_std,
        }
    }

    pub fn reward_model(&self) -> Result<RewardModel> {
        let kind = match self.task.reward.kind {
            RewardKindTag::GaussianMode => RewardKind::GaussianMode {
                width: self.task.reward.width,
            },
            RewardKindTag::NegDistance => RewardKind::NegDistance,
        };
        RewardModel::new(kind, self.task.reward.centers.clone().unwrap_or_default())
    }

    pub fn network_shape(&self) -> Result<NetworkShape> {
        VelocityField::shape_for(
            self.task.dim,
            self.task.num_classes,
            self.model.time_embed_dim,
            &self.model.hidden_dims,
        )
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            batch: self.pretrain.batch,
            steps: self.pretrain.steps,
            lr: self.pretrain.lr,
            seed: self.seed,
        }
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        let a = &self.align;
        GrpoConfig {
            group_size: a.group_size,
            steps: a.steps,
            eval_steps: a.eval_steps,
            clip: a.clip,
            beta: a.beta.unwrap_or(0.01),
            adam: a.adam,
            inner_epochs: a.inner_epochs,
            train_steps: a.train_steps,
            advantage_mode: a.advantage_mode,
            n_policy: a.n_policy,
            seed: self.seed,
            eval_every: a.eval_every,
            eval_samples_per_class: a.eval_samples_per_class,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON with `output_dir` cleared, so runs in
    /// different directories share a digest.
    pub fn digest(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = None;
        let text = serde_json::to_string(&canon).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_json_str(text, Path::new("test.json"))
    }

    #[test]
    fn empty_document_materializes_defaults() {
        let cfg = parse("{}").unwrap();
        assert_eq!(cfg.task.centers.as_ref().unwrap().len(), 4);
        assert_eq!(cfg.align.beta, Some(0.01));
        assert_eq!(cfg.calibrate.eps1, 2);
        assert_eq!(cfg.calibrate.eps2, 0.01);
        let reparsed = parse(&cfg.to_json_pretty()).unwrap();
        assert_eq!(reparsed, cfg);
        assert_eq!(reparsed.digest(), cfg.digest());
    }

    #[test]
    fn neg_distance_defaults_beta() {
        let cfg = parse(r#"{"task": {"reward": {"kind": "neg_distance"}}}"#).unwrap();
        assert_eq!(cfg.align.beta, Some(0.04));
    }

    #[test]
    fn unknown_key_reports_position() {
        let err = parse("{\n  \"align\": {\"groupsize\": 3}\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("test.json:2:"), "{msg}");
        assert!(msg.contains("groupsize"), "{msg}");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let err = parse(r#"{"align": {"group_size": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("align"), "{err}");
        let err = parse(r#"{"task": {"num_classes": 3, "centers": [[0,0],[1,1]]}}"#).unwrap_err();
        assert!(err.to_string().contains("task.centers"), "{err}");
    }

    #[test]
    fn schedule_variants_parse() {
        let cfg = parse(r#"{"align": {"schedule": {"mode": "uniform", "a": 0.7}}}"#).unwrap();
        assert_eq!(cfg.align.schedule, ScheduleChoice::Uniform { a: 0.7 });
        assert!(parse(r#"{"align": {"schedule": {"mode": "calibrated", "a": 1}}}"#).is_err());
        let cfg = parse(r#"{"align": {"n_policy": {"fixed": 2}}}"#).unwrap();
        assert_eq!(cfg.align.n_policy, NPolicy::Fixed(2));
    }

    #[test]
    fn digest_ignores_output_dir() {
        let a = parse("{}").unwrap();
        let mut b = a.clone();
        b.output_dir = Some(PathBuf::from("/elsewhere"));
        assert_eq!(a.digest(), b.digest());
        b.seed = 9;
        assert_ne!(a.digest(), b.digest());
    }
}
