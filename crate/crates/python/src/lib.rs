//! Python bindings: configuration, the tabular game solver, advantage
//! estimation, the beam-catch environment and the trainer.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stackrl::autodiff::Checkpoint;
use stackrl::config::TrainerConfig;
use stackrl::env::{optimal_return, BeamCatch, BeamCatchConfig, Environment};
use stackrl::policy::clip_loss as core_clip_loss;
use stackrl::tabular::instance::InstanceFile;
use stackrl::tabular::{self, TabularGameMdp, ValueTable};
use stackrl::trainer::{self, IterationMetrics};
use stackrl::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { .. }
        | Error::Usage(_)
        | Error::Shape(_)
        | Error::InvalidValue(_)
        | Error::DegenerateBatch(_)
        | Error::Size(_)
        | Error::Format(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Training configuration. Built from flat `key = value` text; omitted keys
/// take their defaults.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: TrainerConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TrainerConfig::parse(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations()
    }

    fn lineage_hash(&self) -> u64 {
        self.inner.lineage_hash()
    }

    fn __repr__(&self) -> String {
        format!("Config(mode={:?}, seed={})", self.inner.mode.as_str(), self.inner.seed)
    }
}

/// Finite game with leader and follower grids over a tabular MDP.
#[pyclass(name = "TabularGame")]
struct PyTabularGame {
    inner: TabularGameMdp,
}

#[pymethods]
impl PyTabularGame {
    /// Parses the instance text format used by the `solve` command.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = InstanceFile::parse(text).and_then(|f| f.build()).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (seed, n_states, n_actions, n_theta, gamma, lambda_cost))]
    fn random(seed: u64, n_states: usize, n_actions: usize, n_theta: usize, gamma: f64, lambda_cost: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            inner: TabularGameMdp::random(&mut rng, n_states, n_actions, n_theta, gamma, lambda_cost),
        }
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    /// One operator application to a flat `(s, a)` table.
    fn apply(&self, values: Vec<f64>) -> PyResult<Vec<f64>> {
        let f = self.table(values)?;
        let step = tabular::stackelberg_bellman_apply(&f, &self.inner).map_err(to_py)?;
        Ok(step.values.values().to_vec())
    }

    fn contraction_ratio(&self, a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
        let (fa, fb) = (self.table(a)?, self.table(b)?);
        tabular::contraction_ratio(&self.inner, &fa, &fb).map_err(to_py)
    }

    /// Value iteration from zero followed by equilibrium extraction.
    #[pyo3(signature = (tol = tabular::DEFAULT_TOL, max_iters = tabular::DEFAULT_MAX_ITERS))]
    fn solve<'py>(&self, py: Python<'py>, tol: f64, max_iters: usize) -> PyResult<Bound<'py, PyDict>> {
        let vi = tabular::value_iteration(&self.inner, tol, max_iters).map_err(to_py)?;
        let eq = tabular::extract_equilibrium(&self.inner, &vi.fixed_point, tol).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("values", vi.fixed_point.values().to_vec())?;
        d.set_item("iterations", vi.iterations)?;
        d.set_item("residuals", vi.residuals)?;
        d.set_item("theta_star", eq.theta_star)?;
        d.set_item("phi_star", eq.phi_star)?;
        d.set_item("greedy_policy", eq.greedy_policy)?;
        Ok(d)
    }
}

impl PyTabularGame {
    fn table(&self, values: Vec<f64>) -> PyResult<ValueTable> {
        ValueTable::new(self.inner.n_states(), self.inner.n_actions(), values).map_err(to_py)
    }
}

/// Returns `(advantages, returns)`; `values` carries one bootstrap entry more
/// than `rewards`.
#[pyfunction]
#[pyo3(signature = (rewards, values, dones, gamma = 0.99, lam = 0.95, normalize = false))]
fn gae(
    rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
    gamma: f64,
    lam: f64,
    normalize: bool,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let mut b = stackrl::gae::gae(&rewards, &values, &dones, gamma, lam).map_err(to_py)?;
    if normalize {
        b = stackrl::gae::normalize(&b).map_err(to_py)?;
    }
    Ok((b.advantages, b.returns))
}

#[pyfunction]
#[pyo3(signature = (ratios, advantages, epsilon = 0.2))]
fn clip_loss(ratios: Vec<f64>, advantages: Vec<f64>, epsilon: f64) -> PyResult<f64> {
    core_clip_loss(&ratios, &advantages, epsilon).map_err(to_py)
}

#[pyclass(name = "BeamCatch", unsendable)]
struct PyBeamCatch {
    inner: BeamCatch,
}

#[pymethods]
impl PyBeamCatch {
    #[new]
    #[pyo3(signature = (height = 12, width = 12, spawn_every = 3, max_objects = 4, max_episode_length = 10_000))]
    fn new(height: usize, width: usize, spawn_every: usize, max_objects: usize, max_episode_length: usize) -> PyResult<Self> {
        let cfg = BeamCatchConfig {
            height,
            width,
            spawn_every,
            max_objects,
            max_episode_length,
            ..BeamCatchConfig::default()
        };
        Ok(Self {
            inner: BeamCatch::new(cfg).map_err(to_py)?,
        })
    }

    #[getter]
    fn observation_shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.inner.observation_shape();
        (c, h, w)
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.inner.reset(seed)
    }

    /// Returns `(observation, reward, done)`.
    fn step(&mut self, action: usize) -> PyResult<(Vec<f64>, f64, bool)> {
        let s = self.inner.step(action).map_err(to_py)?;
        Ok((s.observation, s.reward, s.done))
    }

    /// Best achievable return from `reset(seed)` over `horizon` steps.
    fn optimal_return(&self, seed: u64, horizon: usize) -> PyResult<f64> {
        optimal_return(self.inner.config(), seed, horizon).map_err(to_py)
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &IterationMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("iteration", m.iteration)?;
    d.set_item("env_steps", m.env_steps)?;
    d.set_item("mean_episode_return", m.mean_episode_return)?;
    d.set_item("leader_utility", m.leader_utility)?;
    d.set_item("u_policy", m.u_policy)?;
    d.set_item("raw_cost", m.raw_cost)?;
    d.set_item("weighted_cost", m.weighted_cost)?;
    d.set_item("clip_loss", m.clip_loss)?;
    d.set_item("value_loss", m.value_loss)?;
    d.set_item("entropy", m.entropy)?;
    d.set_item("leader_grad_norm", m.leader_grad_norm)?;
    d.set_item("follower_grad_norm", m.follower_grad_norm)?;
    Ok(d)
}

/// Leader/follower trainer over the configured environment.
#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    inner: trainer::Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: PyConfig) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::Trainer::new(config.inner).map_err(to_py)?,
        })
    }

    /// Runs one rollout plus update and returns its metrics row.
    fn train_iteration<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let m = self.inner.train_iteration().map_err(to_py)?;
        metrics_dict(py, &m)
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.inner.iteration()
    }

    #[getter]
    fn env_steps(&self) -> usize {
        self.inner.env_steps()
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().save(&path).map_err(to_py)
    }
}

/// Trains to completion, writing metrics and checkpoints under `out_dir`.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: PyConfig, out_dir: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let out = trainer::train_to_dir(&config.inner, &out_dir).map_err(to_py)?;
    out.metrics.iter().map(|m| metrics_dict(py, m)).collect()
}

/// Greedy returns of a saved checkpoint over `episodes` seeded episodes.
#[pyfunction]
#[pyo3(signature = (path, episodes = 10, seed = 0, episode_cap = None))]
fn evaluate(path: PathBuf, episodes: usize, seed: u64, episode_cap: Option<usize>) -> PyResult<Vec<f64>> {
    let ckpt = Checkpoint::load(&path).map_err(to_py)?;
    Ok(trainer::evaluate(&ckpt, episodes, seed, episode_cap).map_err(to_py)?.returns)
}

#[pyfunction]
#[pyo3(signature = (config, episodes = 10, seed = 0))]
fn random_returns(config: PyConfig, episodes: usize, seed: u64) -> PyResult<Vec<f64>> {
    Ok(trainer::random_policy_returns(&config.inner, episodes, seed).map_err(to_py)?.returns)
}

#[pymodule]
fn stackrl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTabularGame>()?;
    m.add_class::<PyBeamCatch>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(gae, m)?)?;
    m.add_function(wrap_pyfunction!(clip_loss, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(random_returns, m)?)?;
    Ok(())
}
