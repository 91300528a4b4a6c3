//! Step-wise dense rewards.
//!
//! Each intermediate latent `x_k` of a trajectory is completed to a clean
//! sample by deterministic ODE integration and scored; that score is the
//! latent reward `R_k`. The reward gain of step `k` is `R_{k-1} - R_k`, and
//! advantages are formed by normalizing gains across the group at each step.

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::flow_model::VelocityModel;
use crate::reward_models::RewardModel;
use crate::samplers::{rollout_ode, TimeGrid, Trajectory};

/// How many Euler steps the completion from `x_k` uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NPolicy {
    /// `n = k`: the native grid.
    Full,
    /// `n = min(n, k)`.
    Fixed(usize),
}

impl NPolicy {
    pub fn steps_for(&self, k: usize) -> usize {
        match *self {
            NPolicy::Full => k,
            NPolicy::Fixed(n) => n.min(k.max(1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NPolicy::Fixed(0) => Err(FlowError::InvalidArgument("fixed ODE step count must be >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Velocity evaluations needed for one trajectory of `T` steps.
    pub fn evaluations_per_trajectory(&self, steps: usize) -> usize {
        (1..=steps).map(|k| self.steps_for(k)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRewardTable {
    /// `values[k]` is `R_k`, for `k = 0..=T`.
    pub values: Vec<f64>,
    pub n_policy: NPolicy,
}

impl LatentRewardTable {
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn at(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn terminal(&self) -> f64 {
        self.values[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseRewardTable {
    /// `gains[k - 1]` is `R_{k-1} - R_k`, for `k = 1..=T`.
    pub gains: Vec<f64>,
}

impl DenseRewardTable {
    pub fn at(&self, k: usize) -> f64 {
        self.gains[k - 1]
    }

    pub fn total(&self) -> f64 {
        self.gains.iter().sum()
    }
}

pub fn latent_rewards(
    field: &(impl VelocityModel + ?Sized),
    traj: &Trajectory,
    model: &RewardModel,
    grid: &TimeGrid,
    n_policy: NPolicy,
) -> Result<LatentRewardTable> {
    n_policy.validate()?;
    let steps = grid.steps();
    if traj.states.len() != steps + 1 {
        return Err(FlowError::Shape(format!(
            "trajectory has {} states, grid needs {}",
            traj.states.len(),
            steps + 1
        )));
    }
    let c = traj.condition;
    let mut values = Vec::with_capacity(steps + 1);
    values.push(model.reward(traj.terminal(), c)?);
    for k in 1..=steps {
        let clean = rollout_ode(field, traj.state(k), k, grid, c, n_policy.steps_for(k))?;
        values.push(model.reward(&clean, c)?);
    }
    Ok(LatentRewardTable { values, n_policy })
}

pub fn reward_gains(table: &LatentRewardTable) -> DenseRewardTable {
    DenseRewardTable {
        gains: table.values.windows(2).map(|w| w[0] - w[1]).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Terminal reward, normalized once and shared by every step.
    Sparse,
    /// Reward gains `R_{k-1} - R_k`, normalized per step.
    Dense,
    /// Next latent reward `R_{k-1}`, normalized per step.
    NextLatent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    /// `values[i][k - 1]` is the advantage of trajectory `i` at step `k`.
    pub values: Vec<Vec<f64>>,
    pub mode: AdvantageMode,
}

impl AdvantageTable {
    pub fn at(&self, i: usize, k: usize) -> f64 {
        self.values[i][k - 1]
    }

    pub fn group_size(&self) -> usize {
        self.values.len()
    }
}

/// Population standard deviation below which a group is treated as constant.
pub const STD_FLOOR: f64 = 1e-8;

/// `(x - mean) / std` with the population std; all zeros when the group is
/// (numerically) constant.
pub fn group_normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > STD_FLOOR) {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / std).collect()
}

pub fn group_advantages(tables: &[LatentRewardTable], mode: AdvantageMode) -> Result<AdvantageTable> {
    let g = tables.len();
    if g < 2 {
        return Err(FlowError::InvalidArgument(format!(
            "group normalization needs at least 2 members, got {g}"
        )));
    }
    let steps = tables[0].steps();
    if tables.iter().any(|t| t.steps() != steps) {
        return Err(FlowError::Shape("reward tables in a group have different lengths".into()));
    }
    let mut values = vec![vec![0.0; steps]; g];
    match mode {
        AdvantageMode::Sparse => {
            let terminal: Vec<f64> = tables.iter().map(|t| t.terminal()).collect();
            for (row, a) in values.iter_mut().zip(group_normalize(&terminal)) {
                row.iter_mut().for_each(|v| *v = a);
            }
        }
        AdvantageMode::Dense | AdvantageMode::NextLatent => {
            for k in 1..=steps {
                let column: Vec<f64> = tables
                    .iter()
                    .map(|t| match mode {
                        AdvantageMode::Dense => t.at(k - 1) - t.at(k),
                        _ => t.at(k - 1),
                    })
                    .collect();
                for (row, a) in values.iter_mut().zip(group_normalize(&column)) {
                    row[k - 1] = a;
                }
            }
        }
    }
    Ok(AdvantageTable { values, mode })
}
