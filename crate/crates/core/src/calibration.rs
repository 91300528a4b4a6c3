//! Reward-aware calibration of the per-step exploration noise.
//!
//! Each iteration samples `N` SDE trajectories under the current table,
//! computes their reward gains and, per step, raises the noise level by
//! `eps2` when positive and negative gains are balanced (imbalance below
//! `eps1`) and lowers it otherwise.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense_reward::{latent_rewards, reward_gains, NPolicy};
use crate::error::{FlowError, Result};
use crate::flow_model::{Condition, VelocityModel};
use crate::numerics::RngStream;
use crate::reward_models::RewardModel;
use crate::samplers::{rollout_sde, NoiseSchedule, TimeGrid};

const CALIBRATION_TAG: u64 = 0x4341_4c49;

/// `|#{g > 0} - #{g < 0}|`; exact zeros count in neither set.
pub fn sign_imbalance(gains: &[f64]) -> usize {
    let pos = gains.iter().filter(|g| **g > 0.0).count();
    let neg = gains.iter().filter(|g| **g < 0.0).count();
    pos.abs_diff(neg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Trajectories per iteration.
    pub samples: usize,
    pub iterations: usize,
    pub eps1: usize,
    pub eps2: f64,
    /// Initial table ordered `[psi_T, ..., psi_1]`; `None` starts from the
    /// clamped uniform profile with `a = 0.7`.
    pub psi_init: Option<Vec<f64>>,
    pub psi_min: f64,
    pub psi_max: f64,
    pub n_policy: NPolicy,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            samples: 24,
            iterations: 50,
            eps1: 2,
            eps2: 0.01,
            psi_init: None,
            psi_min: 0.01,
            psi_max: 3.0,
            n_policy: NPolicy::Full,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(FlowError::InvalidArgument("calibration needs at least 2 samples".into()));
        }
        if !(self.eps2 > 0.0) {
            return Err(FlowError::InvalidArgument("eps2 must be positive".into()));
        }
        if !(self.psi_min >= 0.0 && self.psi_min < self.psi_max) {
            return Err(FlowError::InvalidArgument(format!(
                "need 0 <= psi_min < psi_max, got [{}, {}]",
                self.psi_min, self.psi_max
            )));
        }
        self.n_policy.validate()
    }

    /// Starting table indexed by `k - 1`, clamped into bounds.
    pub fn initial_psi(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        let psi = match &self.psi_init {
            Some(desc) => {
                if desc.len() != grid.steps() {
                    return Err(FlowError::Shape(format!(
                        "psi_init has {} entries, grid has {} steps",
                        desc.len(),
                        grid.steps()
                    )));
                }
                desc.iter().rev().copied().collect()
            }
            None => {
                let uniform = NoiseSchedule::Uniform { a: 0.7 };
                (1..=grid.steps())
                    .map(|k| uniform.sigma_at(grid, k))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(psi.into_iter().map(|p| p.clamp(self.psi_min, self.psi_max)).collect())
    }
}

/// Sign counts observed at one step during one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepBalance {
    pub k: usize,
    pub positive: usize,
    pub negative: usize,
    pub imbalance: usize,
    /// Level used to sample this iteration.
    pub psi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Ordered `k = T..1`.
    pub steps: Vec<StepBalance>,
    pub failed_trajectories: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationOutcome {
    /// Final table indexed by `k - 1`.
    pub psi: Vec<f64>,
    pub history: Vec<IterationRecord>,
}

impl CalibrationOutcome {
    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::Calibrated {
            psi: self.psi.clone(),
        }
    }

    /// Table ordered `[psi_T, ..., psi_1]`.
    pub fn psi_descending(&self) -> Vec<f64> {
        self.psi.iter().rev().copied().collect()
    }
}

/// One update of the table from per-step imbalances (both indexed by `k - 1`).
pub fn update_psi(psi: &mut [f64], imbalances: &[usize], cfg: &CalibrationConfig) {
    for (p, &imb) in psi.iter_mut().zip(imbalances) {
        let moved = if imb < cfg.eps1 { *p + cfg.eps2 } else { *p - cfg.eps2 };
        *p = moved.clamp(cfg.psi_min, cfg.psi_max);
    }
}

/// Reward gains of `samples` fresh trajectories, `gains[i][k - 1]`.
/// Trajectories that fail are dropped; the count of failures is returned.
pub fn sample_gains(
    field: &(impl VelocityModel + ?Sized),
    model: &RewardModel,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    n_policy: NPolicy,
    samples: usize,
    seed: u64,
    tag: &[u64],
) -> Result<(Vec<Vec<f64>>, usize)> {
    let num_classes = model.num_classes();
    let results: Vec<Result<Vec<f64>>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut key = tag.to_vec();
            key.push(i as u64);
            let mut rng = RngStream::keyed(seed, &key);
            let c = Condition(rng.below(num_classes));
            let traj = rollout_sde(field, c, grid, schedule, &mut rng)?;
            let table = latent_rewards(field, &traj, model, grid, n_policy)?;
            Ok(reward_gains(&table).gains)
        })
        .collect();
    let mut gains = Vec::with_capacity(samples);
    let mut last_err = None;
    for r in results {
        match r {
            Ok(g) => gains.push(g),
            Err(e) => last_err = Some(e),
        }
    }
    let failed = samples - gains.len();
    if gains.is_empty() {
        return Err(last_err.unwrap_or_else(|| FlowError::InvalidArgument("no samples".into())));
    }
    Ok((gains, failed))
}

/// Per-step imbalance of a gain matrix, indexed by `k - 1`.
pub fn per_step_balance(gains: &[Vec<f64>], steps: usize) -> Vec<(usize, usize, usize)> {
    (1..=steps)
        .map(|k| {
            let column: Vec<f64> = gains.iter().map(|g| g[k - 1]).collect();
            let pos = column.iter().filter(|g| **g > 0.0).count();
            let neg = column.iter().filter(|g| **g < 0.0).count();
            (pos, neg, sign_imbalance(&column))
        })
        .collect()
}

pub fn calibrate(
    field: &(impl VelocityModel + ?Sized),
    model: &RewardModel,
    cfg: &CalibrationConfig,
    grid: &TimeGrid,
    seed: u64,
) -> Result<CalibrationOutcome> {
    cfg.validate()?;
    let steps = grid.steps();
    let mut psi = cfg.initial_psi(grid)?;
    let mut history = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let schedule = NoiseSchedule::Calibrated { psi: psi.clone() };
        let (gains, failed) = sample_gains(
            field,
            model,
            grid,
            &schedule,
            cfg.n_policy,
            cfg.samples,
            seed,
            &[CALIBRATION_TAG, iteration as u64],
        )?;
        let balance = per_step_balance(&gains, steps);
        let imbalances: Vec<usize> = balance.iter().map(|b| b.2).collect();
        history.push(IterationRecord {
            iteration,
            steps: (1..=steps)
                .rev()
                .map(|k| {
                    let (positive, negative, imbalance) = balance[k - 1];
                    StepBalance {
                        k,
                        positive,
                        negative,
                        imbalance,
                        psi: psi[k - 1],
                    }
                })
                .collect(),
            failed_trajectories: failed,
        });
        update_psi(&mut psi, &imbalances, cfg);
    }
    Ok(CalibrationOutcome { psi, history })
}
