//! Python bindings: the core types plus the pipeline stages.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use flowrl::calibration::{calibrate as calibrate_psi, sign_imbalance as imbalance};
use flowrl::dense_reward::{group_advantages as advantages, reward_gains as gains, AdvantageMode, LatentRewardTable, NPolicy};
use flowrl::flow_model::{cfm_pretrain, Condition, VelocityModel};
use flowrl::grpo::{evaluate as eval_field, train as grpo_train};
use flowrl::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};
use flowrl::numerics::RngStream;
use flowrl::reward_models::{RewardKind, RewardModel as CoreRewardModel};
use flowrl::samplers::{rollout_ode as ode_complete, rollout_sde, NoiseSchedule, TimeGrid, Trajectory as CoreTrajectory};

create_exception!(flowrl, FlowRLError, PyException);

fn err(e: flowrl::FlowError) -> PyErr {
    FlowRLError::new_err(e.to_string())
}

fn json_to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| FlowRLError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn schedule(a: Option<f64>, psi: Option<Vec<f64>>) -> PyResult<NoiseSchedule> {
    match (a, psi) {
        (_, Some(p)) => NoiseSchedule::from_descending(&p).map_err(err),
        (a, None) => NoiseSchedule::uniform(a.unwrap_or(0.7)).map_err(err),
    }
}

fn n_policy(n: Option<usize>) -> NPolicy {
    n.map_or(NPolicy::Full, NPolicy::Fixed)
}

fn advantage_mode(mode: &str) -> PyResult<AdvantageMode> {
    match mode {
        "dense" => Ok(AdvantageMode::Dense),
        "sparse" => Ok(AdvantageMode::Sparse),
        "next_latent" => Ok(AdvantageMode::NextLatent),
        other => Err(FlowRLError::new_err(format!("unknown advantage mode {other:?}"))),
    }
}

/// Full run configuration; every field is materialized.
#[pyclass(module = "flowrl", skip_from_py_object)]
#[derive(Clone)]
struct RunConfig {
    inner: flowrl::harness::RunConfig,
}

#[pymethods]
impl RunConfig {
    /// Parses a JSON document (defaults for everything when omitted).
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let text = json.unwrap_or("{}");
        let inner = flowrl::harness::RunConfig::from_json_str(text, std::path::Path::new("<python>")).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: flowrl::harness::RunConfig::load(&path).map_err(err)?,
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn to_json(&self) -> String {
        self.inner.to_json_pretty()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn reward_model(&self) -> PyResult<RewardModel> {
        Ok(RewardModel {
            inner: self.inner.reward_model().map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, digest={})", self.inner.seed, &self.inner.digest()[..12])
    }
}

/// Conditional velocity network `v(x, t, c)`.
#[pyclass(module = "flowrl", skip_from_py_object)]
#[derive(Clone)]
struct VelocityField {
    inner: flowrl::flow_model::VelocityField,
}

#[pymethods]
impl VelocityField {
    #[staticmethod]
    #[pyo3(signature = (dim = 2, num_classes = 4, time_embed_dim = 16, hidden = vec![64, 64], seed = 0))]
    fn random(dim: usize, num_classes: usize, time_embed_dim: usize, hidden: Vec<usize>, seed: u64) -> PyResult<Self> {
        let mut rng = RngStream::new(seed, 1);
        let inner = flowrl::flow_model::VelocityField::new_random(dim, num_classes, time_embed_dim, &hidden, &mut rng)
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(err)?.field,
        })
    }

    #[pyo3(signature = (path, stage = "python"))]
    fn save(&self, path: PathBuf, stage: &str) -> PyResult<()> {
        let ckpt = Checkpoint {
            field: self.inner.clone(),
            optimizer: None,
            psi: None,
            provenance: Provenance {
                config_digest: String::new(),
                seed: 0,
                stage: stage.into(),
            },
        };
        save_checkpoint(&ckpt, &path).map_err(err)
    }

    fn velocity(&self, x: Vec<f64>, t: f64, c: usize) -> PyResult<Vec<f64>> {
        self.inner.velocity(&x, t, Condition(c)).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.len()
    }

    #[getter]
    fn shape(&self) -> String {
        self.inner.shape.to_string()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params.values().to_vec()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn __repr__(&self) -> String {
        format!("VelocityField(shape={}, classes={})", self.inner.shape, self.inner.num_classes)
    }
}

/// Per-class reward `r(x0, c)`.
#[pyclass(module = "flowrl", skip_from_py_object)]
#[derive(Clone)]
struct RewardModel {
    inner: CoreRewardModel,
}

#[pymethods]
impl RewardModel {
    #[staticmethod]
    #[pyo3(signature = (centers, width = 0.5))]
    fn gaussian_mode(centers: Vec<Vec<f64>>, width: f64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreRewardModel::new(RewardKind::GaussianMode { width }, centers).map_err(err)?,
        })
    }

    #[staticmethod]
    fn neg_distance(centers: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: CoreRewardModel::new(RewardKind::NegDistance, centers).map_err(err)?,
        })
    }

    fn reward(&self, x0: Vec<f64>, c: usize) -> PyResult<f64> {
        self.inner.reward(&x0, Condition(c)).map_err(err)
    }
}

/// One SDE trajectory `x_T, ..., x_0`.
#[pyclass(module = "flowrl")]
struct Trajectory {
    inner: CoreTrajectory,
}

#[pymethods]
impl Trajectory {
    /// `states[k]` is `x_k`.
    #[getter]
    fn states(&self) -> Vec<Vec<f64>> {
        self.inner.states.clone()
    }

    #[getter]
    fn condition(&self) -> usize {
        self.inner.condition.0
    }

    /// `behavior_logp[k - 1]` for step `k`; `None` for noise-free steps.
    #[getter]
    fn behavior_logp(&self) -> Vec<Option<f64>> {
        self.inner.behavior_logp.clone()
    }

    fn terminal(&self) -> Vec<f64> {
        self.inner.terminal().to_vec()
    }
}

/// Uniform-mode `sigma` at step `k` of a `steps`-step grid.
#[pyfunction]
fn sigma_at(a: f64, steps: usize, k: usize) -> PyResult<f64> {
    let grid = TimeGrid::new(steps).map_err(err)?;
    NoiseSchedule::uniform(a).map_err(err)?.sigma_at(&grid, k).map_err(err)
}

/// SDE rollout; `psi` (ordered `[psi_T..psi_1]`) overrides the uniform `a`.
#[pyfunction]
#[pyo3(signature = (field, condition, steps = 10, seed = 0, a = None, psi = None))]
fn sample_trajectory(
    field: &VelocityField,
    condition: usize,
    steps: usize,
    seed: u64,
    a: Option<f64>,
    psi: Option<Vec<f64>>,
) -> PyResult<Trajectory> {
    let grid = TimeGrid::new(steps).map_err(err)?;
    let sched = schedule(a, psi)?;
    let mut rng = RngStream::new(seed, 0);
    let inner = rollout_sde(&field.inner, Condition(condition), &grid, &sched, &mut rng).map_err(err)?;
    Ok(Trajectory { inner })
}

/// `n`-step Euler completion from `x` at grid index `k`.
#[pyfunction]
fn rollout_ode(field: &VelocityField, x: Vec<f64>, k: usize, steps: usize, condition: usize, n: usize) -> PyResult<Vec<f64>> {
    let grid = TimeGrid::new(steps).map_err(err)?;
    ode_complete(&field.inner, &x, k, &grid, Condition(condition), n).map_err(err)
}

/// `[R_0, ..., R_T]` for a trajectory; `n=None` completes with `k` steps.
#[pyfunction]
#[pyo3(signature = (field, trajectory, model, n = None))]
fn latent_rewards(field: &VelocityField, trajectory: &Trajectory, model: &RewardModel, n: Option<usize>) -> PyResult<Vec<f64>> {
    let grid = TimeGrid::new(trajectory.inner.steps()).map_err(err)?;
    let table =
        flowrl::dense_reward::latent_rewards(&field.inner, &trajectory.inner, &model.inner, &grid, n_policy(n))
            .map_err(err)?;
    Ok(table.values)
}

/// `[R_0 - R_1, ..., R_{T-1} - R_T]`.
#[pyfunction]
fn reward_gains(latent: Vec<f64>) -> PyResult<Vec<f64>> {
    if latent.len() < 2 {
        return Err(FlowRLError::new_err("need at least two latent rewards"));
    }
    Ok(gains(&LatentRewardTable {
        values: latent,
        n_policy: NPolicy::Full,
    })
    .gains)
}

/// Group-normalized advantages, `out[i][k - 1]`.
#[pyfunction]
#[pyo3(signature = (latent, mode = "dense"))]
fn group_advantages(latent: Vec<Vec<f64>>, mode: &str) -> PyResult<Vec<Vec<f64>>> {
    let tables: Vec<_> = latent
        .into_iter()
        .map(|values| LatentRewardTable {
            values,
            n_policy: NPolicy::Full,
        })
        .collect();
    Ok(advantages(&tables, advantage_mode(mode)?).map_err(err)?.values)
}

#[pyfunction]
fn sign_imbalance(gains: Vec<f64>) -> usize {
    imbalance(&gains)
}

/// Flow-matching pretraining from the config; returns `(field, losses)`.
#[pyfunction]
fn pretrain(config: &RunConfig) -> PyResult<(VelocityField, Vec<f64>)> {
    let cfg = &config.inner;
    let mut rng = RngStream::new(cfg.seed, 1);
    let mut field = flowrl::flow_model::VelocityField::new_random(
        cfg.task.dim,
        cfg.task.num_classes,
        cfg.model.time_embed_dim,
        &cfg.model.hidden_dims,
        &mut rng,
    )
    .map_err(err)?;
    let losses = cfm_pretrain(&mut field, &cfg.dataset(), &cfg.pretrain_config()).map_err(err)?;
    Ok((VelocityField { inner: field }, losses))
}

/// Noise calibration; returns `psi` ordered `[psi_T..psi_1]`.
#[pyfunction]
fn calibrate(config: &RunConfig, field: &VelocityField) -> PyResult<Vec<f64>> {
    let cfg = &config.inner;
    let grid = TimeGrid::new(cfg.align.steps).map_err(err)?;
    let model = cfg.reward_model().map_err(err)?;
    let out = calibrate_psi(&field.inner, &model, &cfg.calibrate, &grid, cfg.seed).map_err(err)?;
    Ok(out.psi_descending())
}

/// GRPO alignment against `field` as the frozen reference.
/// Returns `(aligned_field, metrics)` with one dict per update.
#[pyfunction]
#[pyo3(signature = (config, field, a = None, psi = None))]
fn align(
    py: Python<'_>,
    config: &RunConfig,
    field: &VelocityField,
    a: Option<f64>,
    psi: Option<Vec<f64>>,
) -> PyResult<(VelocityField, Py<PyAny>)> {
    let cfg = &config.inner;
    let model = cfg.reward_model().map_err(err)?;
    let sched = schedule(a, psi)?;
    let out = grpo_train(field.inner.clone(), &field.inner, &model, &sched, &cfg.grpo_config()).map_err(err)?;
    let metrics = json_to_py(py, &out.metrics)?;
    Ok((VelocityField { inner: out.field }, metrics))
}

/// Mean terminal reward under deterministic ODE sampling.
#[pyfunction]
#[pyo3(signature = (field, model, eval_steps = 40, samples_per_class = 64, seed = 0))]
fn evaluate(
    py: Python<'_>,
    field: &VelocityField,
    model: &RewardModel,
    eval_steps: usize,
    samples_per_class: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let s = eval_field(&field.inner, &model.inner, eval_steps, samples_per_class, seed).map_err(err)?;
    json_to_py(py, &s)
}

/// Runs a CLI command line (without the program name) and returns its exit code.
#[pyfunction]
fn run_command(args: Vec<String>) -> i32 {
    let argv = std::iter::once("flowrl".to_string()).chain(args);
    flowrl::harness::run_command(argv)
}

#[pymodule]
#[pyo3(name = "flowrl")]
fn flowrl_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FlowRLError", m.py().get_type::<FlowRLError>())?;
    m.add_class::<RunConfig>()?;
    m.add_class::<VelocityField>()?;
    m.add_class::<RewardModel>()?;
    m.add_class::<Trajectory>()?;
    m.add_function(wrap_pyfunction!(sigma_at, m)?)?;
    m.add_function(wrap_pyfunction!(sample_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(rollout_ode, m)?)?;
    m.add_function(wrap_pyfunction!(latent_rewards, m)?)?;
    m.add_function(wrap_pyfunction!(reward_gains, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(sign_imbalance, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
