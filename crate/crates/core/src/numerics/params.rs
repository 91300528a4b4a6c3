use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FlowError, Result};

/// A named, contiguous slice of a [`ParameterVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter storage with a named segment layout.
///
/// Segments are disjoint, laid out in order and cover the whole vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParameterVector {
    /// Builds a zero vector from `(name, len)` pairs.
    pub fn zeros(layout: &[(String, usize)]) -> Self {
        let mut segments = Vec::with_capacity(layout.len());
        let mut offset = 0;
        for (name, len) in layout {
            segments.push(Segment {
                name: name.clone(),
                offset,
                len: *len,
            });
            offset += len;
        }
        Self {
            values: vec![0.0; offset],
            segments,
        }
    }

    pub fn from_parts(values: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        let mut expected = 0;
        for seg in &segments {
            if seg.offset != expected {
                return Err(FlowError::Shape(format!(
                    "segment {} starts at {} but previous segments end at {}",
                    seg.name, seg.offset, expected
                )));
            }
            expected += seg.len;
        }
        if expected != values.len() {
            return Err(FlowError::Shape(format!(
                "segments cover {} values but vector holds {}",
                expected,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite(format!("parameter {i}")));
        }
        Ok(Self { values, segments })
    }

    /// A zero vector with the same layout as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            segments: self.segments.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    /// Name of the segment containing flat index `index`.
    pub fn segment_name_of(&self, index: usize) -> &str {
        self.segments
            .iter()
            .find(|s| index >= s.offset && index < s.offset + s.len)
            .map(|s| s.name.as_str())
            .unwrap_or("<out of range>")
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.segments == other.segments
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Self) -> Result<()> {
        if !self.same_layout(other) {
            return Err(FlowError::Shape("parameter layouts differ".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// SHA-256 over the little-endian bit patterns of the values.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for seg in &self.segments {
            hasher.update(seg.name.as_bytes());
            hasher.update((seg.len as u64).to_le_bytes());
        }
        for v in &self.values {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}
