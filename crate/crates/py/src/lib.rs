//! Python bindings for the `seqcredit` core crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use seqcredit::estimators;
use seqcredit::exact_oracle::ChainKernel;
use seqcredit::harness::{self, ExperimentConfig, ExperimentId};
use seqcredit::ridge::{build_features, ridge_fit as core_ridge_fit};
use seqcredit::rng::rng_from_seed;
use seqcredit::trainer::{self, RegretScale};
use seqcredit::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Budget(_) | Error::Capability(_) | Error::Numeric(_) | Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Per-agent reward tables with Gaussian observation noise.
#[pyclass(frozen)]
struct RewardModel(seqcredit::RewardModel);

#[pymethods]
impl RewardModel {
    #[staticmethod]
    #[pyo3(signature = (seed, k, a=4, lambda_int=0.0, sigma=0.5))]
    fn sample(seed: u64, k: usize, a: usize, lambda_int: f64, sigma: f64) -> PyResult<Self> {
        seqcredit::RewardModel::sample(seed, k, a, lambda_int, sigma).map(Self).map_err(err)
    }

    #[getter]
    fn agents(&self) -> usize {
        self.0.agents()
    }

    #[getter]
    fn actions(&self) -> usize {
        self.0.actions()
    }

    #[getter]
    fn lambda_int(&self) -> f64 {
        self.0.lambda_int()
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.0.sigma()
    }

    fn mean_reward(&self, joint: Vec<usize>) -> PyResult<f64> {
        self.0.mean_reward(&joint).map_err(err)
    }

    /// Best joint action and its mean reward.
    fn optimal_action(&self) -> PyResult<(Vec<usize>, f64)> {
        self.0.optimal_action().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("RewardModel(K={}, A={}, lambda_int={}, sigma={})", self.0.agents(), self.0.actions(), self.0.lambda_int(), self.0.sigma())
    }
}

/// Softmax chain policy: agent `k` conditions on the action of agent `k-1`.
#[pyclass(frozen)]
struct ChainPolicy(seqcredit::ChainPolicy);

#[pymethods]
impl ChainPolicy {
    #[staticmethod]
    #[pyo3(signature = (seed, k, a=4, rho=0.0))]
    fn init(seed: u64, k: usize, a: usize, rho: f64) -> PyResult<Self> {
        seqcredit::ChainPolicy::init(seed, k, a, rho).map(Self).map_err(err)
    }

    #[staticmethod]
    fn uniform(k: usize, a: usize) -> PyResult<Self> {
        seqcredit::ChainPolicy::uniform(k, a).map(Self).map_err(err)
    }

    #[getter]
    fn agents(&self) -> usize {
        self.0.agents()
    }

    #[getter]
    fn actions(&self) -> usize {
        self.0.actions()
    }

    /// `pi_k(. | prev)`; `prev` must be `None` for the first agent.
    #[pyo3(signature = (k, prev=None))]
    fn conditional(&self, k: usize, prev: Option<usize>) -> PyResult<Vec<f64>> {
        self.0.conditional(k, prev).map(|p| p.to_vec()).map_err(err)
    }

    fn joint_prob(&self, joint: Vec<usize>) -> f64 {
        self.0.joint_prob(&joint)
    }

    /// Exact expected mean reward under this policy.
    fn value(&self, model: &RewardModel) -> f64 {
        ChainKernel::new(&self.0).value(&model.0)
    }
}

/// On-policy rollouts with realized rewards.
#[pyclass(frozen)]
struct RolloutBatch(seqcredit::RolloutBatch);

#[pymethods]
impl RolloutBatch {
    #[staticmethod]
    fn collect(model: &RewardModel, policy: &ChainPolicy, n: usize, seed: u64) -> PyResult<Self> {
        seqcredit::RolloutBatch::collect(&model.0, &policy.0, n, &mut rng_from_seed(seed))
            .map(Self)
            .map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn joints(&self) -> Vec<Vec<usize>> {
        (0..self.0.len()).map(|n| self.0.joint(n).to_vec()).collect()
    }

    fn rewards(&self) -> Vec<f64> {
        self.0.rewards().to_vec()
    }
}

/// Fitted per-agent additive components.
#[pyclass(frozen)]
struct AttributionFit(seqcredit::AttributionFit);

#[pymethods]
impl AttributionFit {
    fn phi(&self, j: usize) -> PyResult<Vec<f64>> {
        if j >= self.0.agents() {
            return Err(PyValueError::new_err("agent index out of range"));
        }
        Ok(self.0.phi(j).to_vec())
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.0.lambda()
    }

    fn predict(&self, joint: Vec<usize>) -> PyResult<f64> {
        self.0.additive_predict(&joint).map_err(err)
    }

    fn gauge_shift(&self, shifts: Vec<f64>) -> PyResult<Self> {
        self.0.gauge_shift(&shifts).map(Self).map_err(err)
    }
}

fn rows(t: &seqcredit::AdvantageTable) -> Vec<Vec<f64>> {
    (0..t.rollouts()).map(|n| (0..t.agents()).map(|k| t.get(n, k)).collect()).collect()
}

#[pyfunction]
#[pyo3(signature = (batch, lam=0.1))]
fn ridge_fit(batch: &RolloutBatch, lam: f64) -> PyResult<AttributionFit> {
    core_ridge_fit(&build_features(&batch.0), batch.0.rewards(), lam)
        .map(AttributionFit)
        .map_err(err)
}

/// Exact CAPO advantages, one row per rollout and one column per agent.
#[pyfunction]
fn capo_exact(fit: &AttributionFit, policy: &ChainPolicy, batch: &RolloutBatch) -> PyResult<Vec<Vec<f64>>> {
    estimators::capo_exact_table(&fit.0, &policy.0, &batch.0).map(|t| rows(&t)).map_err(err)
}

/// CAPO advantages with the indirect effect estimated from `l` paired draws.
#[pyfunction]
#[pyo3(signature = (fit, policy, batch, l=64, seed=0))]
fn capo_fictitious(fit: &AttributionFit, policy: &ChainPolicy, batch: &RolloutBatch, l: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    estimators::capo_fictitious_table(&fit.0, &policy.0, &batch.0, l, &mut rng_from_seed(seed))
        .map(|t| rows(&t))
        .map_err(err)
}

#[pyfunction]
fn magrpo(batch: &RolloutBatch) -> PyResult<Vec<Vec<f64>>> {
    estimators::magrpo_table(&batch.0).map(|t| rows(&t)).map_err(err)
}

/// Ground-truth sequential advantages along every rollout.
#[pyfunction]
fn seqau(model: &RewardModel, policy: &ChainPolicy, batch: &RolloutBatch) -> Vec<Vec<f64>> {
    let kernel = ChainKernel::new(&policy.0);
    (0..batch.0.len())
        .map(|n| kernel.advantages_along(&model.0, batch.0.joint(n)))
        .collect()
}

/// Trains one method from `policy` until `budget` reward evaluations are
/// spent. Returns `(values, regrets, env_calls, auc)`.
#[pyfunction]
#[pyo3(signature = (model, policy, method, budget, seed=0, n=None, l=None, eta=None))]
#[allow(clippy::too_many_arguments)]
fn train(
    model: &RewardModel,
    policy: &ChainPolicy,
    method: &str,
    budget: u64,
    seed: u64,
    n: Option<usize>,
    l: Option<usize>,
    eta: Option<f64>,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<u64>, f64)> {
    let mut cfg = trainer::TrainConfig::for_method(trainer::Method::parse(method).map_err(err)?);
    cfg.n = n.unwrap_or(cfg.n);
    cfg.l = l.unwrap_or(cfg.l);
    cfg.eta = eta.unwrap_or(cfg.eta);
    let scale = RegretScale::new(&model.0).map_err(err)?;
    let trace = trainer::run_method(&model.0, &policy.0, budget, &cfg, &scale, &mut rng_from_seed(seed)).map_err(err)?;
    let auc = trainer::regret_auc(&trace).map_err(err)?;
    Ok((trace.values, trace.regrets, trace.env_calls, auc))
}

/// Runs a harness experiment and returns its output directory. For
/// `theory-check` a failed suite raises `RuntimeError`.
#[pyfunction]
#[pyo3(signature = (experiment, out, overrides=Vec::new()))]
fn run_experiment(experiment: &str, out: PathBuf, overrides: Vec<String>) -> PyResult<PathBuf> {
    let id: ExperimentId = experiment.parse().map_err(err)?;
    let cfg = ExperimentConfig::load(id, None, &overrides).map_err(err)?;
    let outcome = harness::run(&cfg, &out).map_err(err)?;
    if let Some(report) = &outcome.theory {
        if !report.passed() {
            return Err(PyRuntimeError::new_err(format!("theory check failed with {} violations", report.violations())));
        }
    }
    Ok(outcome.dir)
}

#[pymodule]
fn seqcredit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RewardModel>()?;
    m.add_class::<ChainPolicy>()?;
    m.add_class::<RolloutBatch>()?;
    m.add_class::<AttributionFit>()?;
    m.add_function(wrap_pyfunction!(ridge_fit, m)?)?;
    m.add_function(wrap_pyfunction!(capo_exact, m)?)?;
    m.add_function(wrap_pyfunction!(capo_fictitious, m)?)?;
    m.add_function(wrap_pyfunction!(magrpo, m)?)?;
    m.add_function(wrap_pyfunction!(seqau, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
