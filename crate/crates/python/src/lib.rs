//! Python bindings for the main types and operations: the Q-network,
//! the curvature-pair memory with its two-loop recursion, gridworld
//! environments with the value-iteration oracle, the training loop, and
//! the cost/bound calculators.
//!
//! The module name must match `lib.name` in Cargo.toml (`qnrl_py`).

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use qnrl_core::envs;
use qnrl_core::qnet;
use qnrl_core::trainer;
use qnrl_core::ParamVector;

fn err(e: qnrl_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Dense network shape: input dim, hidden dims, action count.
#[pyclass(name = "NetworkSpec", skip_from_py_object)]
#[derive(Clone)]
struct PyNetworkSpec {
    inner: qnrl_core::NetworkSpec,
}

#[pymethods]
impl PyNetworkSpec {
    #[new]
    fn new(layer_sizes: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: qnrl_core::NetworkSpec::new(layer_sizes).map_err(err)?,
        })
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("NetworkSpec({:?})", self.inner.layer_sizes())
    }
}

#[pyfunction]
fn init_weights(spec: &PyNetworkSpec, seed: u64) -> Vec<f64> {
    qnet::init_weights(&spec.inner, seed).into_vec()
}

#[pyfunction]
fn forward(spec: &PyNetworkSpec, w: Vec<f64>, features: Vec<f64>) -> PyResult<Vec<f64>> {
    qnet::forward(&spec.inner, &ParamVector::from_vec(w), &features).map_err(err)
}

#[pyfunction]
fn grad_q(
    spec: &PyNetworkSpec,
    w: Vec<f64>,
    features: Vec<f64>,
    action: usize,
) -> PyResult<Vec<f64>> {
    qnet::grad_q(&spec.inner, &ParamVector::from_vec(w), &features, action)
        .map(ParamVector::into_vec)
        .map_err(err)
}

/// Bounded store of accepted curvature pairs with the two-loop map.
#[pyclass(name = "LbfgsMemory")]
struct PyLbfgsMemory {
    inner: qnrl_core::lbfgs::LbfgsMemory,
}

#[pymethods]
impl PyLbfgsMemory {
    #[new]
    fn new(capacity: usize) -> PyResult<Self> {
        if capacity == 0 {
            return Err(PyValueError::new_err("capacity must be positive"));
        }
        Ok(Self {
            inner: qnrl_core::lbfgs::LbfgsMemory::new(capacity),
        })
    }

    /// Returns whether the pair passed the cautious curvature test.
    fn push_pair(&mut self, s: Vec<f64>, y: Vec<f64>) -> PyResult<bool> {
        self.inner
            .push_pair(ParamVector::from_vec(s), ParamVector::from_vec(y))
            .map_err(err)
    }

    fn gamma_scaling(&self) -> f64 {
        self.inner.gamma_scaling()
    }

    fn two_loop(&self, g: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner
            .two_loop(&ParamVector::from_vec(g))
            .map(ParamVector::into_vec)
            .map_err(err)
    }

    fn search_direction(&self, g: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner
            .search_direction(&ParamVector::from_vec(g))
            .map(ParamVector::into_vec)
            .map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A gridworld with its episode state.
#[pyclass(name = "GridWorld")]
struct PyGridWorld {
    env: envs::GridWorld,
    state: envs::GridState,
}

#[pymethods]
impl PyGridWorld {
    /// The built-in 6x6 instance.
    #[staticmethod]
    fn default6() -> Self {
        let env = envs::GridWorld::default_6x6();
        let state = env.reset();
        Self { env, state }
    }

    #[staticmethod]
    #[pyo3(signature = (text, step_reward=-0.01, goal_reward=1.0, max_episode_steps=200))]
    fn from_text(
        text: &str,
        step_reward: f64,
        goal_reward: f64,
        max_episode_steps: u32,
    ) -> PyResult<Self> {
        let env = envs::GridWorld::from_text(text, step_reward, goal_reward, max_episode_steps)
            .map_err(err)?;
        let state = env.reset();
        Ok(Self { env, state })
    }

    #[getter]
    fn width(&self) -> usize {
        self.env.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.env.height()
    }

    #[getter]
    fn num_cells(&self) -> usize {
        self.env.num_cells()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        envs::NUM_ACTIONS
    }

    /// Starts a fresh episode and returns the one-hot features.
    fn reset(&mut self) -> Vec<f64> {
        self.state = self.env.reset();
        self.env.features(self.state)
    }

    /// Applies an action (0 up, 1 down, 2 left, 3 right); returns
    /// `(features, reward, terminal)`.
    fn step(&mut self, action: usize) -> PyResult<(Vec<f64>, f64, bool)> {
        let a = envs::Action::from_index(action).map_err(err)?;
        let (next, reward, terminal) = self.env.step(self.state, a).map_err(err)?;
        self.state = next;
        Ok((self.env.features(next), reward, terminal))
    }

    /// Exact optimal Q values as a cell-major list of per-action lists.
    #[pyo3(signature = (gamma=0.95, tol=1e-8))]
    fn value_iteration(&self, gamma: f64, tol: f64) -> Vec<Vec<f64>> {
        let q = envs::value_iteration(&self.env, gamma, tol);
        let mut out = Vec::with_capacity(self.env.num_cells());
        for y in 0..self.env.height() {
            for x in 0..self.env.width() {
                let c = envs::Cell { x, y };
                out.push((0..envs::NUM_ACTIONS).map(|a| q.get(c, a)).collect());
            }
        }
        out
    }

    /// Sup-norm distance between a parameter vector's Q function and the
    /// value-iteration oracle over reachable non-terminal cells.
    #[pyo3(signature = (spec, w, gamma=0.95, tol=1e-8))]
    fn optimality_gap(
        &self,
        spec: &PyNetworkSpec,
        w: Vec<f64>,
        gamma: f64,
        tol: f64,
    ) -> PyResult<f64> {
        let oracle = envs::value_iteration(&self.env, gamma, tol);
        trainer::q_optimality_gap(&spec.inner, &ParamVector::from_vec(w), &oracle, &self.env)
            .map_err(err)
    }
}

/// One optimization step's diagnostics.
#[pyclass(name = "TrainRecord", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainRecord {
    #[pyo3(get)]
    k: u64,
    #[pyo3(get)]
    env_steps: u64,
    #[pyo3(get)]
    loss: f64,
    #[pyo3(get)]
    grad_norm: f64,
    #[pyo3(get)]
    alpha: f64,
    #[pyo3(get)]
    wolfe_satisfied: bool,
    #[pyo3(get)]
    floor_hit: bool,
    #[pyo3(get)]
    pair_accepted: bool,
    #[pyo3(get)]
    epsilon: f64,
    #[pyo3(get)]
    test_score: Option<f64>,
}

#[pyclass(name = "TrainResult")]
struct PyTrainResult {
    #[pyo3(get)]
    records: Vec<PyTrainRecord>,
    #[pyo3(get)]
    stop_reason: String,
    #[pyo3(get)]
    final_score: f64,
    #[pyo3(get)]
    final_weights: Vec<f64>,
}

/// Runs the full interaction loop on a gridworld.
#[pyfunction]
#[pyo3(signature = (env, hidden_layers=vec![64], b=512, m=20, seed=0, total_steps=50_000,
                    gamma=0.95, optimizer="lbfgs", sgd_learning_rate=0.00025))]
#[allow(clippy::too_many_arguments)]
fn train(
    env: &PyGridWorld,
    hidden_layers: Vec<usize>,
    b: usize,
    m: usize,
    seed: u64,
    total_steps: u64,
    gamma: f64,
    optimizer: &str,
    sgd_learning_rate: f64,
) -> PyResult<PyTrainResult> {
    let mut sizes = vec![env.env.num_cells()];
    sizes.extend(&hidden_layers);
    sizes.push(envs::NUM_ACTIONS);
    let spec = qnrl_core::NetworkSpec::new(sizes).map_err(err)?;
    let optimizer = match optimizer {
        "lbfgs" => trainer::OptimizerKind::Lbfgs,
        "sgd" => trainer::OptimizerKind::Sgd,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown optimizer {other:?}; expected lbfgs or sgd"
            )))
        }
    };
    let config = trainer::TrainConfig {
        batch_size: b,
        lbfgs_memory: m,
        discount: gamma,
        eps_anneal_steps: total_steps / 2,
        total_steps,
        seed,
        optimizer,
        sgd_learning_rate,
        ..trainer::TrainConfig::default()
    };
    let outcome = trainer::train(&config, &env.env, &spec).map_err(err)?;
    Ok(PyTrainResult {
        records: outcome
            .records
            .into_iter()
            .map(|r| PyTrainRecord {
                k: r.k,
                env_steps: r.env_steps,
                loss: r.loss,
                grad_norm: r.grad_norm,
                alpha: r.alpha,
                wolfe_satisfied: r.wolfe_satisfied,
                floor_hit: r.floor_hit,
                pair_accepted: r.pair_accepted,
                epsilon: r.epsilon,
                test_score: r.test_score,
            })
            .collect(),
        stop_reason: outcome.stop_reason.to_string(),
        final_score: outcome.final_score,
        final_weights: outcome.final_weights.into_vec(),
    })
}

/// Per-update runtime of the quasi-Newton scheme relative to the SGD
/// baseline: `f z / b_s + 4 f m / (b b_s)`.
#[pyfunction]
fn cost_ratio(f: f64, z: f64, bs: f64, b: f64, m: f64) -> f64 {
    qnrl_core::bench::cost_ratio(f, z, bs, b, m)
}

/// Risk-offset bound after `k` fixed-step iterations.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn convergence_bound(
    k: usize,
    gap0: f64,
    lambda: f64,
    lambda_max: f64,
    h_lambda: f64,
    h_lambda_max: f64,
    eta: f64,
    alpha: f64,
) -> PyResult<f64> {
    let c = qnrl_core::bench::BoundConstants {
        lambda,
        lambda_max,
        h_lambda,
        h_lambda_max,
        eta,
        alpha,
    };
    qnrl_core::bench::convergence_bound(k, gap0, &c).map_err(err)
}

/// Rosenbrock value and gradient at a 2-vector.
#[pyfunction]
fn rosenbrock_eval(w: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    if w.len() != 2 {
        return Err(PyValueError::new_err("rosenbrock is two-dimensional"));
    }
    Ok(qnrl_core::bench::rosenbrock_eval(&w))
}

/// Linear exploration schedule clamped at `eps_end`.
#[pyfunction]
fn epsilon_schedule(step: u64, total_anneal_steps: u64, eps_start: f64, eps_end: f64) -> f64 {
    trainer::epsilon_schedule(step, total_anneal_steps, eps_start, eps_end)
}

#[pymodule]
fn qnrl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetworkSpec>()?;
    m.add_class::<PyLbfgsMemory>()?;
    m.add_class::<PyGridWorld>()?;
    m.add_class::<PyTrainRecord>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(init_weights, m)?)?;
    m.add_function(wrap_pyfunction!(forward, m)?)?;
    m.add_function(wrap_pyfunction!(grad_q, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(cost_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_bound, m)?)?;
    m.add_function(wrap_pyfunction!(rosenbrock_eval, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon_schedule, m)?)?;
    Ok(())
}
