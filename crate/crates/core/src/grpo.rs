//! Group relative policy optimization over SDE denoising trajectories.
//!
//! A round snapshots the current field as the sampling policy, draws one
//! condition and `G` trajectories, fixes their advantages, then takes
//! `inner_epochs` Adam steps on the clipped importance-ratio surrogate with
//! an analytic KL penalty toward the frozen reference field.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense_reward::{
    group_advantages, latent_rewards, reward_gains, AdvantageMode, AdvantageTable, DenseRewardTable,
    LatentRewardTable, NPolicy,
};
use crate::error::{FlowError, Result};
use crate::flow_model::{Condition, VelocityField, VelocityModel};
use crate::numerics::{adam_step, AdamConfig, OptimizerState, ParameterVector, RngStream};
use crate::reward_models::RewardModel;
use crate::samplers::{
    ode_sample, rollout_sde, sde_mean, sde_mean_velocity_jacobian, transition_log_prob, NoiseSchedule,
    TimeGrid, TransitionParams, Trajectory,
};

const GROUP_TAG: u64 = 0x4752_4f55;
const TRAJ_TAG: u64 = 0x5452_414a;
const EVAL_TAG: u64 = 0x4556_414c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    /// Sampling steps `T`.
    pub steps: usize,
    /// ODE steps used for evaluation.
    pub eval_steps: usize,
    pub clip: f64,
    pub beta: f64,
    pub adam: AdamConfig,
    pub inner_epochs: usize,
    /// Number of sampling rounds.
    pub train_steps: usize,
    pub advantage_mode: AdvantageMode,
    pub n_policy: NPolicy,
    pub seed: u64,
    /// Evaluate every this many rounds (and after the last one).
    pub eval_every: usize,
    pub eval_samples_per_class: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 24,
            steps: 10,
            eval_steps: 40,
            clip: 0.2,
            beta: 0.01,
            adam: AdamConfig::default(),
            inner_epochs: 2,
            train_steps: 150,
            advantage_mode: AdvantageMode::Dense,
            n_policy: NPolicy::Full,
            seed: 0,
            eval_every: 5,
            eval_samples_per_class: 64,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FlowError::InvalidArgument(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.steps == 0 || self.eval_steps == 0 {
            return bad("steps and eval_steps must be >= 1");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if self.inner_epochs == 0 || self.train_steps == 0 {
            return bad("inner_epochs and train_steps must be >= 1");
        }
        if self.eval_every == 0 || self.eval_samples_per_class == 0 {
            return bad("eval_every and eval_samples_per_class must be >= 1");
        }
        self.n_policy.validate()
    }
}

/// One sampled group with its fixed reward and advantage tables.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRollout {
    pub round: usize,
    pub condition: Condition,
    pub trajectories: Vec<Trajectory>,
    pub latent: Vec<LatentRewardTable>,
    pub dense: Vec<DenseRewardTable>,
    pub advantages: AdvantageTable,
    pub old_digest: String,
}

impl GroupRollout {
    pub fn mean_terminal_reward(&self) -> f64 {
        self.latent.iter().map(|t| t.terminal()).sum::<f64>() / self.latent.len() as f64
    }

    /// Recomputes advantages from (possibly modified) latent tables.
    pub fn with_latent(&self, latent: Vec<LatentRewardTable>) -> Result<Self> {
        let advantages = group_advantages(&latent, self.advantages.mode)?;
        Ok(Self {
            dense: latent.iter().map(reward_gains).collect(),
            latent,
            advantages,
            ..self.clone()
        })
    }
}

pub fn sample_group(
    field_old: &VelocityField,
    model: &RewardModel,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    cfg: &GrpoConfig,
    round: usize,
) -> Result<GroupRollout> {
    if cfg.group_size < 2 {
        return Err(FlowError::InvalidArgument("group_size must be >= 2".into()));
    }
    let mut control = RngStream::keyed(cfg.seed, &[GROUP_TAG, round as u64]);
    let condition = Condition(control.below(model.num_classes()));
    let trajectories = (0..cfg.group_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::keyed(cfg.seed, &[TRAJ_TAG, round as u64, i as u64]);
            rollout_sde(field_old, condition, grid, schedule, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let latent = trajectories
        .par_iter()
        .map(|t| latent_rewards(field_old, t, model, grid, cfg.n_policy))
        .collect::<Result<Vec<_>>>()?;
    let dense = latent.iter().map(reward_gains).collect();
    let advantages = group_advantages(&latent, cfg.advantage_mode)?;
    Ok(GroupRollout {
        round,
        condition,
        trajectories,
        latent,
        dense,
        advantages,
        old_digest: field_old.digest(),
    })
}

/// KL divergence between isotropic Gaussians sharing `std`.
pub fn kl_gaussian(mean_new: &[f64], mean_ref: &[f64], std: f64) -> Result<f64> {
    if !(std > 0.0) {
        return Err(FlowError::InvalidArgument(format!("KL needs std > 0, got {std}")));
    }
    if mean_new.len() != mean_ref.len() {
        return Err(FlowError::Shape("KL means have different lengths".into()));
    }
    let sq: f64 = mean_new.iter().zip(mean_ref).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (2.0 * std * std))
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)` and its derivative in `r`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        (clipped, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub round: usize,
    pub epoch: usize,
    pub mean_terminal_reward: f64,
    pub eval_reward: Option<f64>,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub objective: f64,
    pub max_ratio_deviation: f64,
}

#[derive(Clone, Debug)]
pub struct SurrogateOutput {
    pub objective: f64,
    /// Gradient of the objective (to be ascended).
    pub grad: ParameterVector,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub max_ratio_deviation: f64,
}

struct TrajectoryContribution {
    objective: f64,
    kl: f64,
    clipped: usize,
    max_dev: f64,
    grad: ParameterVector,
}

fn trajectory_contribution(
    field: &VelocityField,
    field_ref: &VelocityField,
    traj: &Trajectory,
    advantages: &[f64],
    grid: &TimeGrid,
    cfg: &GrpoConfig,
    scale: f64,
) -> Result<TrajectoryContribution> {
    let c = traj.condition;
    let dt = grid.dt();
    let mut out = TrajectoryContribution {
        objective: 0.0,
        kl: 0.0,
        clipped: 0,
        max_dev: 0.0,
        grad: field.params.zeros_like(),
    };
    for k in (1..=grid.steps()).rev() {
        let trans = traj.transition(k);
        let x = traj.state(k);
        let x_next = traj.state(k - 1);
        let behavior = traj.behavior_logp[k - 1]
            .filter(|lp| lp.is_finite())
            .ok_or_else(|| FlowError::NonFinite(format!("behavior log-probability at k={k}")))?;
        if transition_log_prob(trans, x_next)? != behavior {
            return Err(FlowError::InvalidArgument(format!(
                "stored transition at k={k} does not reproduce its behavior log-probability (sigma mismatch)"
            )));
        }
        let t = grid.time(k);
        let (sigma, std) = (trans.sigma, trans.std);
        let mean_ref = sde_mean(x, &field_ref.velocity(x, t, c)?, t, sigma, dt);
        let jac = sde_mean_velocity_jacobian(t, sigma, dt);
        let adv = advantages[k - 1];
        let mut step_obj = 0.0;
        let mut step_kl = 0.0;
        let mut ratio = 1.0;
        field.velocity_vjp(x, t, c, &mut out.grad, |v| {
            let mean = sde_mean(x, v, t, sigma, dt);
            let logp = transition_log_prob(
                &TransitionParams {
                    mean: mean.clone(),
                    std,
                    sigma,
                    k,
                },
                x_next,
            )?;
            ratio = (logp - behavior).exp();
            if !ratio.is_finite() {
                return Err(FlowError::NonFinite(format!("importance ratio at k={k}")));
            }
            let (term, d_term) = clipped_surrogate(ratio, adv, cfg.clip);
            step_kl = kl_gaussian(&mean, &mean_ref, std)?;
            step_obj = term - cfg.beta * step_kl;
            let inv_var = 1.0 / (std * std);
            Ok(mean
                .iter()
                .zip(x_next)
                .zip(&mean_ref)
                .map(|((m, xn), mr)| {
                    let d_mean = d_term * ratio * (xn - m) * inv_var - cfg.beta * (m - mr) * inv_var;
                    scale * jac * d_mean
                })
                .collect())
        })?;
        out.objective += scale * step_obj;
        out.kl += step_kl;
        out.max_dev = out.max_dev.max((ratio - 1.0).abs());
        if ratio < 1.0 - cfg.clip || ratio > 1.0 + cfg.clip {
            out.clipped += 1;
        }
    }
    Ok(out)
}

/// Surrogate objective averaged over the group and steps, with its exact
/// gradient in `field`'s parameters.
pub fn surrogate_and_grad(
    field: &VelocityField,
    field_ref: &VelocityField,
    group: &GroupRollout,
    cfg: &GrpoConfig,
) -> Result<SurrogateOutput> {
    let g = group.trajectories.len();
    let steps = group.trajectories[0].steps();
    let grid = TimeGrid::new(steps)?;
    if group.trajectories.iter().any(|t| t.steps() != steps) {
        return Err(FlowError::Shape("group trajectories have different lengths".into()));
    }
    let scale = 1.0 / (g * steps) as f64;
    let parts = group
        .trajectories
        .par_iter()
        .enumerate()
        .map(|(i, traj)| {
            trajectory_contribution(field, field_ref, traj, &group.advantages.values[i], &grid, cfg, scale)
        })
        .collect::<Result<Vec<_>>>()?;
    // Reduce in trajectory order so results do not depend on scheduling.
    let mut grad = field.params.zeros_like();
    let mut objective = 0.0;
    let mut kl = 0.0;
    let mut clipped = 0;
    let mut max_dev: f64 = 0.0;
    for p in &parts {
        grad.axpy(1.0, &p.grad)?;
        objective += p.objective;
        kl += p.kl;
        clipped += p.clipped;
        max_dev = max_dev.max(p.max_dev);
    }
    let pairs = (g * steps) as f64;
    Ok(SurrogateOutput {
        objective,
        grad,
        mean_kl: kl / pairs,
        clip_fraction: clipped as f64 / pairs,
        max_ratio_deviation: max_dev,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_reward: f64,
    pub per_class_reward: Vec<f64>,
    pub samples_per_class: usize,
    pub eval_steps: usize,
}

/// Mean terminal reward of deterministic ODE samples, with fixed initial
/// noise per `(seed, class, index)`.
pub fn evaluate(
    field: &(impl VelocityModel + ?Sized),
    model: &RewardModel,
    eval_steps: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<EvalSummary> {
    let grid = TimeGrid::new(eval_steps)?;
    let per_class = (0..model.num_classes())
        .map(|c| {
            let rewards = (0..samples_per_class)
                .into_par_iter()
                .map(|j| {
                    let mut rng = RngStream::keyed(seed, &[EVAL_TAG, c as u64, j as u64]);
                    let x_t = rng.normal_vec(field.dim());
                    let x0 = ode_sample(field, &x_t, &grid, Condition(c))?;
                    model.reward(&x0, Condition(c))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(rewards.iter().sum::<f64>() / samples_per_class as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary {
        mean_reward: per_class.iter().sum::<f64>() / per_class.len() as f64,
        per_class_reward: per_class,
        samples_per_class,
        eval_steps,
    })
}

/// Row of the per-round dense reward dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseDumpRow {
    pub round: usize,
    pub traj: usize,
    pub timestep: usize,
    pub latent_reward: f64,
    /// `None` at `timestep = 0`.
    pub gain: Option<f64>,
}

pub fn dense_dump_rows(group: &GroupRollout) -> Vec<DenseDumpRow> {
    let mut rows = Vec::new();
    for (i, (latent, dense)) in group.latent.iter().zip(&group.dense).enumerate() {
        for k in (0..=latent.steps()).rev() {
            rows.push(DenseDumpRow {
                round: group.round,
                traj: i,
                timestep: k,
                latent_reward: latent.at(k),
                gain: (k > 0).then(|| dense.at(k)),
            });
        }
    }
    rows
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub field: VelocityField,
    pub optimizer: OptimizerState,
    pub metrics: Vec<StepMetrics>,
    pub initial_eval: EvalSummary,
    /// `(round, eval)` after each evaluated round (1-based round counts).
    pub eval_curve: Vec<(usize, EvalSummary)>,
    pub dense_dump: Vec<DenseDumpRow>,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> &EvalSummary {
        &self.eval_curve.last().expect("train always evaluates the last round").1
    }
}

pub fn train(
    field: VelocityField,
    field_ref: &VelocityField,
    model: &RewardModel,
    schedule: &NoiseSchedule,
    cfg: &GrpoConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    schedule.validate()?;
    let grid = TimeGrid::new(cfg.steps)?;
    let eval = |f: &VelocityField| evaluate(f, model, cfg.eval_steps, cfg.eval_samples_per_class, cfg.seed);
    let mut field = field;
    let mut optimizer = OptimizerState::new(&field.params);
    let mut metrics = Vec::with_capacity(cfg.train_steps * cfg.inner_epochs);
    let mut dense_dump = Vec::new();
    let mut eval_curve = Vec::new();
    let initial_eval = eval(&field)?;
    for round in 0..cfg.train_steps {
        let abort = |epoch: usize, e: FlowError| FlowError::TrainingAborted {
            round,
            epoch,
            reason: e.to_string(),
        };
        let field_old = field.clone();
        let group = sample_group(&field_old, model, &grid, schedule, cfg, round).map_err(|e| abort(0, e))?;
        dense_dump.extend(dense_dump_rows(&group));
        for epoch in 1..=cfg.inner_epochs {
            let out = surrogate_and_grad(&field, field_ref, &group, cfg).map_err(|e| abort(epoch, e))?;
            if !out.objective.is_finite() {
                return Err(abort(epoch, FlowError::NonFinite("surrogate objective".into())));
            }
            let mut descent = out.grad.clone();
            descent.values_mut().iter_mut().for_each(|g| *g = -*g);
            adam_step(&mut optimizer, &mut field.params, &descent, &cfg.adam).map_err(|e| abort(epoch, e))?;
            metrics.push(StepMetrics {
                round,
                epoch,
                mean_terminal_reward: group.mean_terminal_reward(),
                eval_reward: None,
                mean_kl: out.mean_kl,
                clip_fraction: out.clip_fraction,
                objective: out.objective,
                max_ratio_deviation: out.max_ratio_deviation,
            });
        }
        if (round + 1) % cfg.eval_every == 0 || round + 1 == cfg.train_steps {
            let summary = eval(&field).map_err(|e| abort(cfg.inner_epochs, e))?;
            if let Some(last) = metrics.last_mut() {
                last.eval_reward = Some(summary.mean_reward);
            }
            eval_curve.push((round + 1, summary));
        }
    }
    Ok(TrainOutcome {
        field,
        optimizer,
        metrics,
        initial_eval,
        eval_curve,
        dense_dump,
    })
}
