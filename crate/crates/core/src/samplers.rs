//! Euler ODE and Euler-Maruyama SDE samplers over a uniform time grid.
//!
//! Grid index `k` runs from `T` (pure noise, `t = 1`) down to `0` (data).
//! Every step moves time by `dt = -1/T`; the noise term uses `sqrt(|dt|)`.

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::flow_model::{Condition, VelocityModel};
use crate::numerics::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(FlowError::InvalidArgument("time grid needs at least one step".into()));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `t_k = k / T`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.steps as f64
    }

    /// Signed step `t_{k-1} - t_k = -1/T`.
    pub fn dt(&self) -> f64 {
        -(1.0 / self.steps as f64)
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps {
            return Err(FlowError::InvalidArgument(format!(
                "step index {k} outside [1, {}]",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Source of the exploration noise level `sigma_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// `sigma = a * sqrt(t / (1 - t))`, with `t` clamped to `t_{T-1}`.
    Uniform { a: f64 },
    /// Per-step table; `psi[k - 1]` is the noise level of step `k`.
    Calibrated { psi: Vec<f64> },
}

impl NoiseSchedule {
    pub fn uniform(a: f64) -> Result<Self> {
        let s = NoiseSchedule::Uniform { a };
        s.validate()?;
        Ok(s)
    }

    /// Builds a calibrated schedule from a table ordered `[psi_T, ..., psi_1]`.
    pub fn from_descending(psi_desc: &[f64]) -> Result<Self> {
        let mut psi = psi_desc.to_vec();
        psi.reverse();
        let s = NoiseSchedule::Calibrated { psi };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseSchedule::Uniform { a } if !(a.is_finite() && *a >= 0.0) => Err(
                FlowError::InvalidArgument(format!("noise level a must be finite and >= 0, got {a}")),
            ),
            NoiseSchedule::Calibrated { psi } if psi.iter().any(|p| !(p.is_finite() && *p >= 0.0)) => Err(
                FlowError::InvalidArgument("calibrated noise levels must be finite and >= 0".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn sigma_at(&self, grid: &TimeGrid, k: usize) -> Result<f64> {
        grid.check_step(k)?;
        match self {
            NoiseSchedule::Uniform { a } => {
                let t = grid.time(k).min(grid.time(grid.steps() - 1));
                Ok(a * (t / (1.0 - t)).sqrt())
            }
            NoiseSchedule::Calibrated { psi } => {
                psi.get(k - 1).copied().ok_or(FlowError::MissingScheduleEntry(k))
            }
        }
    }

    /// Noise levels for `k = T..1`.
    pub fn profile(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        (1..=grid.steps()).rev().map(|k| self.sigma_at(grid, k)).collect()
    }
}

pub fn sigma_at(schedule: &NoiseSchedule, grid: &TimeGrid, k: usize) -> Result<f64> {
    schedule.sigma_at(grid, k)
}

/// Gaussian policy `p(x_{k-1} | x_k, c)` of one stochastic step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionParams {
    pub mean: Vec<f64>,
    /// Isotropic standard deviation `sigma * sqrt(1/T)`.
    pub std: f64,
    /// Noise level the transition was drawn with.
    pub sigma: f64,
    pub k: usize,
}

impl TransitionParams {
    pub fn is_degenerate(&self) -> bool {
        !(self.std > 0.0)
    }
}

fn checked_velocity(
    field: &(impl VelocityModel + ?Sized),
    x: &[f64],
    t: f64,
    c: Condition,
    k: usize,
) -> Result<Vec<f64>> {
    let v = field.velocity(x, t, c)?;
    if v.len() != x.len() {
        return Err(FlowError::Shape(format!(
            "velocity has length {}, state has length {}",
            v.len(),
            x.len()
        )));
    }
    if v.iter().any(|a| !a.is_finite()) {
        return Err(FlowError::NonFinite(format!("velocity at k={k}, x={x:?}")));
    }
    Ok(v)
}

/// Mean of the SDE transition:
/// `x + dt * [v + sigma^2 / (2t) * (x + (1 - t) v)]`.
pub fn sde_mean(x: &[f64], v: &[f64], t: f64, sigma: f64, dt: f64) -> Vec<f64> {
    let coef = sigma * sigma / (2.0 * t);
    x.iter()
        .zip(v)
        .map(|(x, v)| x + dt * (v + coef * (x + (1.0 - t) * v)))
        .collect()
}

/// `d mean / d v` for [`sde_mean`] (a scalar, the map is isotropic).
pub fn sde_mean_velocity_jacobian(t: f64, sigma: f64, dt: f64) -> f64 {
    dt * (1.0 + sigma * sigma / (2.0 * t) * (1.0 - t))
}

/// Explicit Euler step of the probability-flow ODE, from `t_k` to `t_{k-1}`.
pub fn ode_step(
    field: &(impl VelocityModel + ?Sized),
    x: &[f64],
    k: usize,
    grid: &TimeGrid,
    c: Condition,
) -> Result<Vec<f64>> {
    grid.check_step(k)?;
    let v = checked_velocity(field, x, grid.time(k), c, k)?;
    let dt = grid.dt();
    Ok(x.iter().zip(&v).map(|(x, v)| x + dt * v).collect())
}

/// SDE step with an explicitly supplied standard-normal draw.
pub fn sde_step_with_noise(
    field: &(impl VelocityModel + ?Sized),
    x: &[f64],
    k: usize,
    grid: &TimeGrid,
    c: Condition,
    schedule: &NoiseSchedule,
    eps: &[f64],
) -> Result<(Vec<f64>, TransitionParams)> {
    grid.check_step(k)?;
    if eps.len() != x.len() {
        return Err(FlowError::Shape("noise draw and state lengths differ".into()));
    }
    let sigma = schedule.sigma_at(grid, k)?;
    let t = grid.time(k);
    let v = checked_velocity(field, x, t, c, k)?;
    let mean = sde_mean(x, &v, t, sigma, grid.dt());
    if mean.iter().any(|m| !m.is_finite()) {
        return Err(FlowError::NonFinite(format!("SDE drift at k={k}, x={x:?}")));
    }
    let std = sigma * (1.0 / grid.steps() as f64).sqrt();
    let next = mean.iter().zip(eps).map(|(m, e)| m + std * e).collect();
    Ok((next, TransitionParams { mean, std, sigma, k }))
}

pub fn sde_step(
    field: &(impl VelocityModel + ?Sized),
    x: &[f64],
    k: usize,
    grid: &TimeGrid,
    c: Condition,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, TransitionParams)> {
    let eps = rng.normal_vec(x.len());
    sde_step_with_noise(field, x, k, grid, c, schedule, &eps)
}

/// Isotropic Gaussian log-density of `x_next` under `trans`.
pub fn transition_log_prob(trans: &TransitionParams, x_next: &[f64]) -> Result<f64> {
    if trans.is_degenerate() {
        return Err(FlowError::DegenerateTransition {
            k: trans.k,
            std: trans.std,
        });
    }
    if x_next.len() != trans.mean.len() {
        return Err(FlowError::Shape("sample and mean lengths differ".into()));
    }
    let var = trans.std * trans.std;
    let sq: f64 = x_next
        .iter()
        .zip(&trans.mean)
        .map(|(x, m)| (x - m) * (x - m))
        .sum();
    let d = x_next.len() as f64;
    Ok(-sq / (2.0 * var) - d * trans.std.ln() - 0.5 * d * std::f64::consts::TAU.ln())
}

/// Where a trajectory's randomness came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedInfo {
    pub seed: u64,
    pub stream_id: u64,
    pub start_counter: u64,
    pub end_counter: u64,
}

/// One recorded SDE denoising episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub condition: Condition,
    /// `states[k]` is `x_k`, for `k = 0..=T`.
    pub states: Vec<Vec<f64>>,
    /// `transitions[k - 1]` produced `x_{k-1}` from `x_k`.
    pub transitions: Vec<TransitionParams>,
    /// `behavior_logp[k - 1]`; `None` for degenerate (noise-free) steps.
    pub behavior_logp: Vec<Option<f64>>,
    pub seed_info: SeedInfo,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.transitions.len()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k]
    }

    pub fn transition(&self, k: usize) -> &TransitionParams {
        &self.transitions[k - 1]
    }

    pub fn terminal(&self) -> &[f64] {
        &self.states[0]
    }
}

pub fn rollout_sde(
    field: &(impl VelocityModel + ?Sized),
    c: Condition,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let start = rng.counter();
    let x_t = rng.normal_vec(field.dim());
    rollout_sde_from(field, x_t, c, grid, schedule, rng, start)
}

/// SDE rollout from a given initial state `x_T`.
pub fn rollout_sde_from(
    field: &(impl VelocityModel + ?Sized),
    x_start: Vec<f64>,
    c: Condition,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
    start_counter: u64,
) -> Result<Trajectory> {
    schedule.validate()?;
    let steps = grid.steps();
    let mut states = vec![Vec::new(); steps + 1];
    let mut transitions = Vec::with_capacity(steps);
    let mut logps = Vec::with_capacity(steps);
    states[steps] = x_start;
    for k in (1..=steps).rev() {
        let (next, trans) = sde_step(field, &states[k], k, grid, c, schedule, rng)?;
        let logp = if trans.is_degenerate() {
            None
        } else {
            Some(transition_log_prob(&trans, &next)?)
        };
        states[k - 1] = next;
        transitions.push(trans);
        logps.push(logp);
    }
    transitions.reverse();
    logps.reverse();
    Ok(Trajectory {
        condition: c,
        states,
        transitions,
        behavior_logp: logps,
        seed_info: SeedInfo {
            seed: rng.seed(),
            stream_id: rng.stream_id(),
            start_counter,
            end_counter: rng.counter(),
        },
    })
}

/// `n`-step Euler completion from `x_{k_start}` down to `t = 0`.
///
/// `[0, t_{k_start}]` is split into `n` equal steps. Step times are formed as
/// exact integer ratios so that `n = k_start` lands on the native grid times
/// bit for bit.
pub fn rollout_ode(
    field: &(impl VelocityModel + ?Sized),
    x_start: &[f64],
    k_start: usize,
    grid: &TimeGrid,
    c: Condition,
    n: usize,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(FlowError::InvalidArgument("ODE completion needs n >= 1".into()));
    }
    if k_start > grid.steps() {
        return Err(FlowError::InvalidArgument(format!(
            "start index {k_start} beyond grid of {} steps",
            grid.steps()
        )));
    }
    let mut x = x_start.to_vec();
    if k_start == 0 {
        return Ok(x);
    }
    let denom = (n * grid.steps()) as f64;
    let h = k_start as f64 / denom;
    for j in 0..n {
        let t = (k_start * (n - j)) as f64 / denom;
        let v = field.velocity(&x, t, c)?;
        if v.len() != x.len() {
            return Err(FlowError::Shape("velocity and state lengths differ".into()));
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += -h * vi;
        }
        if x.iter().any(|a| !a.is_finite()) {
            return Err(FlowError::NonFinite(format!("ODE completion state at step {j}")));
        }
    }
    Ok(x)
}

/// Full deterministic sample from `x_T` on the given grid.
pub fn ode_sample(
    field: &(impl VelocityModel + ?Sized),
    x_t: &[f64],
    grid: &TimeGrid,
    c: Condition,
) -> Result<Vec<f64>> {
    rollout_ode(field, x_t, grid.steps(), grid, c, grid.steps())
}
