//! JSON checkpoints with parameters stored as 17-significant-digit decimal
//! text, which round-trips every finite `f64` exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::write_atomic;
use crate::error::{FlowError, Result};
use crate::flow_model::VelocityField;
use crate::numerics::{NetworkShape, OptimizerState, ParameterVector, Segment};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub seed: u64,
    pub stage: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub field: VelocityField,
    pub optimizer: Option<OptimizerState>,
    /// Noise table ordered `[psi_T, ..., psi_1]`.
    pub psi: Option<Vec<f64>>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerDoc {
    step_count: u64,
    first_moment: Vec<String>,
    second_moment: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format_version: u32,
    shape: NetworkShape,
    dim: usize,
    time_embed_dim: usize,
    num_classes: usize,
    segments: Vec<Segment>,
    params: Vec<String>,
    param_digest: String,
    optimizer: Option<OptimizerDoc>,
    psi: Option<Vec<String>>,
    provenance: Provenance,
}

pub fn encode_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn encode_all(vs: &[f64]) -> Vec<String> {
    vs.iter().map(|v| encode_f64(*v)).collect()
}

fn decode_all(path: &Path, what: &str, vs: &[String]) -> Result<Vec<f64>> {
    vs.iter()
        .enumerate()
        .map(|(i, s)| {
            s.parse::<f64>().map_err(|e| FlowError::Malformed {
                path: path.to_path_buf(),
                reason: format!("{what}[{i}] = {s:?}: {e}"),
            })
        })
        .collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let f = &ckpt.field;
    let doc = CheckpointDoc {
        format_version: CHECKPOINT_FORMAT_VERSION,
        shape: f.shape.clone(),
        dim: f.dim,
        time_embed_dim: f.time_embed_dim,
        num_classes: f.num_classes,
        segments: f.params.segments().to_vec(),
        params: encode_all(f.params.values()),
        param_digest: f.params.digest(),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerDoc {
            step_count: o.step_count,
            first_moment: encode_all(o.first_moment.values()),
            second_moment: encode_all(o.second_moment.values()),
        }),
        psi: ckpt.psi.as_deref().map(encode_all),
        provenance: ckpt.provenance.clone(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("checkpoint serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| FlowError::io(path, e))?;
    let malformed = |reason: String| FlowError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    // Peek at the version first so a future layout reports a version error
    // rather than a parse error.
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed("missing format_version".into()))?;
    if version != CHECKPOINT_FORMAT_VERSION as u64 {
        return Err(FlowError::VersionMismatch {
            found: version as u32,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let doc: CheckpointDoc = serde_json::from_value(raw).map_err(|e| malformed(e.to_string()))?;
    let values = decode_all(path, "params", &doc.params)?;
    let params = ParameterVector::from_parts(values, doc.segments.clone()).map_err(|e| malformed(e.to_string()))?;
    let computed = params.digest();
    if computed != doc.param_digest {
        return Err(FlowError::DigestMismatch {
            recorded: doc.param_digest,
            computed,
        });
    }
    if doc.segments != doc.shape.zero_params().segments() {
        return Err(malformed(format!("segment layout does not match network {}", doc.shape)));
    }
    let field = VelocityField::from_params(doc.shape, params, doc.dim, doc.time_embed_dim, doc.num_classes)
        .map_err(|e| malformed(e.to_string()))?;
    let optimizer = match doc.optimizer {
        None => None,
        Some(o) => {
            let mut first = field.params.zeros_like();
            let mut second = field.params.zeros_like();
            let m = decode_all(path, "first_moment", &o.first_moment)?;
            let v = decode_all(path, "second_moment", &o.second_moment)?;
            if m.len() != first.len() || v.len() != second.len() {
                return Err(malformed("optimizer moments do not match parameter count".into()));
            }
            first.values_mut().copy_from_slice(&m);
            second.values_mut().copy_from_slice(&v);
            Some(OptimizerState {
                first_moment: first,
                second_moment: second,
                step_count: o.step_count,
            })
        }
    };
    let psi = doc.psi.as_deref().map(|p| decode_all(path, "psi", p)).transpose()?;
    Ok(Checkpoint {
        field,
        optimizer,
        psi,
        provenance: doc.provenance,
    })
}

/// Loads a checkpoint and checks its network against the configured one.
pub fn load_checkpoint_expecting(path: &Path, expected: &NetworkShape) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.field.shape != expected {
        return Err(FlowError::ShapeMismatch {
            found: ckpt.field.shape.to_string(),
            expected: expected.to_string(),
        });
    }
    Ok(ckpt)
}
