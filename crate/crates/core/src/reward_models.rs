//! Closed-form conditional rewards on clean samples.

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::flow_model::Condition;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardKind {
    /// `exp(-||x - mu_c||^2 / (2 width^2))`, in `(0, 1]`.
    GaussianMode { width: f64 },
    /// `-||x - mu_c||^2`, always `<= 0`.
    NegDistance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub kind: RewardKind,
    pub centers: Vec<Vec<f64>>,
}

impl RewardModel {
    pub fn new(kind: RewardKind, centers: Vec<Vec<f64>>) -> Result<Self> {
        let model = Self { kind, centers };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(FlowError::InvalidArgument("reward model needs at least one center".into()));
        }
        let d = self.centers[0].len();
        if self.centers.iter().any(|c| c.len() != d) {
            return Err(FlowError::Shape("reward centers have mixed dimensions".into()));
        }
        if let RewardKind::GaussianMode { width } = self.kind {
            if !(width > 0.0 && width.is_finite()) {
                return Err(FlowError::InvalidArgument(format!(
                    "reward width must be positive, got {width}"
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn reward(&self, x0: &[f64], c: Condition) -> Result<f64> {
        let mu = self.centers.get(c.0).ok_or(FlowError::UnknownClass {
            class: c.0,
            num_classes: self.centers.len(),
        })?;
        if mu.len() != x0.len() {
            return Err(FlowError::Shape(format!(
                "sample has length {}, reward centers have length {}",
                x0.len(),
                mu.len()
            )));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite(format!("reward input {x0:?}")));
        }
        let sq: f64 = x0.iter().zip(mu).map(|(x, m)| (x - m) * (x - m)).sum();
        Ok(match self.kind {
            RewardKind::GaussianMode { width } => (-sq / (2.0 * width * width)).exp(),
            RewardKind::NegDistance => -sq,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(kind: RewardKind) -> RewardModel {
        RewardModel::new(kind, vec![vec![1.0, -1.0], vec![0.0, 2.0]]).unwrap()
    }

    #[test]
    fn closed_form_values() {
        let g = model(RewardKind::GaussianMode { width: 0.5 });
        assert_eq!(g.reward(&[1.0, -1.0], Condition(0)).unwrap(), 1.0);
        let off = 0.5 * 2f64.sqrt();
        let r = g.reward(&[1.0 + off, -1.0], Condition(0)).unwrap();
        assert!((r - (-1f64).exp()).abs() < 1e-12);
        let n = model(RewardKind::NegDistance);
        assert_eq!(n.reward(&[0.0, 2.0], Condition(1)).unwrap(), 0.0);
        assert_eq!(n.reward(&[1.0, 2.0], Condition(1)).unwrap(), -1.0);
    }

    #[test]
    fn unknown_class_and_bad_width() {
        let g = model(RewardKind::GaussianMode { width: 0.5 });
        assert!(matches!(g.reward(&[0.0, 0.0], Condition(2)), Err(FlowError::UnknownClass { .. })));
        assert!(RewardModel::new(RewardKind::GaussianMode { width: 0.0 }, vec![vec![0.0]]).is_err());
    }

    #[test]
    fn lattice_maximum_is_the_center() {
        for kind in [RewardKind::GaussianMode { width: 0.5 }, RewardKind::NegDistance] {
            let m = model(kind);
            let mu = &m.centers[0];
            let mut best = (f64::NEG_INFINITY, 0i32, 0i32);
            for i in -50..=50 {
                for j in -50..=50 {
                    let x = [mu[0] + 0.02 * i as f64, mu[1] + 0.02 * j as f64];
                    let r = m.reward(&x, Condition(0)).unwrap();
                    if r > best.0 {
                        best = (r, i, j);
                    }
                }
            }
            assert_eq!((best.1, best.2), (0, 0));
        }
    }

    #[test]
    fn gaussian_mode_decreases_with_distance() {
        let g = model(RewardKind::GaussianMode { width: 0.5 });
        let mut prev = f64::INFINITY;
        for s in 0..40 {
            let r = g.reward(&[1.0 + 0.05 * s as f64, -1.0], Condition(0)).unwrap();
            assert!(r < prev && r > 0.0 && r <= 1.0);
            prev = r;
        }
    }
}
