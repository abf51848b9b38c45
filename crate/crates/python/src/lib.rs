//! Python bindings: configuration, policies, the trainer and the latent
//! sampling primitives. Structured results come back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

use latent_grpo::autodiff::Tape;
use latent_grpo::config::RunConfig;
use latent_grpo::eval::evaluate;
use latent_grpo::latent::OneSidedBounds;
use latent_grpo::policy::{Checkpoint, ModelConfig, PolicyParams, RolloutMode, CHECKPOINT_FORMAT};
use latent_grpo::task::{make_warmup_corpus, vocab};
use latent_grpo::trainer::{eval_tasks, variant_config, Algorithm};
use latent_grpo::verify::Fault;
use latent_grpo::{latent, rng, surrogate, task, trainer, verify};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Run configuration. Construct the defaults, or parse TOML.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self { inner: RunConfig::default() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::from_toml_str(text).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(&path).map_err(err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    /// Copy with every seed replaced by `seed`.
    fn reseeded(&self, seed: u64) -> Self {
        Self { inner: self.inner.reseeded(seed) }
    }

    /// Copy configured for a named variant, e.g. "no_one_sided".
    fn variant(&self, name: &str) -> PyResult<(String, Self)> {
        let (alg, cfg) = variant_config(&self.inner, name).map_err(err)?;
        Ok((alg.name().to_string(), Self { inner: cfg }))
    }

    #[getter]
    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn as_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }
}

#[pyclass(name = "Policy", from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: PolicyParams,
}

#[pymethods]
impl PyPolicy {
    /// Freshly initialized parameters.
    #[new]
    #[pyo3(signature = (d_model = 32, seed = 0))]
    fn new(d_model: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig { d_model, seed, ..ModelConfig::default() };
        Ok(Self { inner: PolicyParams::init(&cfg).map_err(err)? })
    }

    /// Initialization described by the `[model]` table of `config`.
    #[staticmethod]
    fn from_config(config: &PyConfig) -> PyResult<Self> {
        Ok(Self { inner: PolicyParams::init(&config.inner.model).map_err(err)? })
    }

    /// Supervised warmup; returns the trained policy and its report.
    #[staticmethod]
    fn warmup(py: Python<'_>, config: &PyConfig) -> PyResult<(Self, Py<PyAny>)> {
        let w = &config.inner.warmup;
        let (params, report) = py
            .detach(|| {
                let corpus = make_warmup_corpus(w.corpus_size, (w.difficulty[0], w.difficulty[1]), w.seed)?;
                latent_grpo::warmup::warmup(&config.inner, &corpus)
            })
            .map_err(err)?;
        Ok((Self { inner: params }, to_py(py, &report)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(&path).map_err(err)?.params })
    }

    /// Writes a checkpoint usable as `train --init`.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT,
            kind: "warmup".into(),
            step: 0,
            rng_seed: self.inner.config.seed,
            config_hash: String::new(),
            params: self.inner.clone(),
            reference: None,
            consecutive_skips: 0,
            skipped_total: 0,
        }
        .save(&path)
        .map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Held-out evaluation; `sampled` switches pass@k to noisy latent decoding.
    #[pyo3(signature = (config, n = 1, sampled = true))]
    fn evaluate(&self, py: Python<'_>, config: &PyConfig, n: usize, sampled: bool) -> PyResult<Py<PyAny>> {
        let cfg = &config.inner;
        let mode = if sampled { RolloutMode::LatentSampledInference } else { RolloutMode::LatentDeterministic };
        let report = py
            .detach(|| {
                let tasks = eval_tasks(cfg)?;
                let settings = cfg.rl.rollout_settings();
                evaluate(&self.inner, &tasks, RolloutMode::LatentDeterministic, mode, &settings, n, cfg.eval.noise_scale, cfg.run.seed)
            })
            .map_err(err)?;
        to_py(py, &report)
    }
}

#[pyclass(name = "Trainer")]
struct PyTrainer {
    inner: trainer::Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (config, policy, algorithm = "latent_grpo"))]
    fn new(config: &PyConfig, policy: &PyPolicy, algorithm: &str) -> PyResult<Self> {
        let alg: Algorithm = algorithm.parse().map_err(err)?;
        let inner = trainer::Trainer::new(alg, config.inner.clone(), policy.inner.clone()).map_err(err)?;
        Ok(Self { inner })
    }

    /// One RL step; returns its metrics.
    fn train_step(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let m = py.detach(|| self.inner.train_step()).map_err(err)?;
        to_py(py, &m)
    }

    fn evaluate(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let report = py.detach(|| self.inner.evaluate()).map_err(err)?;
        to_py(py, &report)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn done(&self) -> bool {
        self.inner.done()
    }

    #[getter]
    fn policy(&self) -> PyPolicy {
        PyPolicy { inner: self.inner.params.clone() }
    }
}

/// Randomized gradient-identity suite; `missing_flip` injects the fault.
#[pyfunction]
#[pyo3(signature = (trials = 200, seed = 0, missing_flip = false))]
fn verify_gradients(py: Python<'_>, trials: usize, seed: u64, missing_flip: bool) -> PyResult<Py<PyAny>> {
    let fault = if missing_flip { Fault::MissingFlip } else { Fault::None };
    let rep = verify::verify_gradients(trials, seed, fault).map_err(err)?;
    let out = serde_json::json!({
        "passed": rep.passed(),
        "max_rel_error": rep.max_rel_error,
        "crossed_instances": rep.crossed_instances,
        "failed_identities": rep.failed_identities(),
    });
    to_py(py, &out)
}

#[pyfunction]
fn generate_task(py: Python<'_>, seed: u64, difficulty: usize) -> PyResult<Py<PyAny>> {
    let t = task::generate_task(seed, difficulty).map_err(err)?;
    let out = serde_json::json!({
        "expression": t.expression(),
        "prompt": vocab::render(&t.prompt_tokens),
        "prompt_tokens": t.prompt_tokens,
        "answer_tokens": t.gold_answer_tokens,
    });
    to_py(py, &out)
}

/// Renormalized top-K of a distribution: `(token_ids, probs)`.
#[pyfunction]
fn top_k(dist: Vec<f64>, k: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let s = latent::TopKSlice::select(&dist, k, &[]).map_err(err)?;
    Ok((s.token_ids, s.probs))
}

#[pyfunction]
#[pyo3(signature = (noise, a = 1.5, b = 3.0, delta = 0.01))]
fn one_sided_transform(noise: Vec<f64>, a: f64, b: f64, delta: f64) -> PyResult<Vec<f64>> {
    latent::one_sided_transform(&noise, OneSidedBounds { a, b, delta }).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (log_probs, perturbation, tau = 1.0))]
fn mixture_weights(log_probs: Vec<f64>, perturbation: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    latent::noisy_mixture_weights(&log_probs, &perturbation, tau).map_err(err)
}

#[pyfunction]
fn sample_gumbel(n: usize, seed: u64) -> Vec<f64> {
    latent::sample_standard_gumbel(n, &mut rng::stream(seed, &[]))
}

/// Gumbel log-density of `targets` around `log_probs`, with its gradient.
#[pyfunction]
fn gumbel_log_density(targets: Vec<f64>, log_probs: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let x = tape.vector(log_probs, true);
    let y = surrogate::gumbel_log_density(&targets, &x).map_err(err)?;
    let grad = y.backward().map_err(err)?.wrt(&x).unwrap_or_default();
    Ok((y.item(), grad))
}

#[pyfunction]
fn pass_at_k(n: usize, c: usize, k: usize) -> PyResult<f64> {
    latent_grpo::eval::pass_at_k(n, c, k).map_err(err)
}

#[pymodule]
fn latent_grpo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(verify_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(generate_task, m)?)?;
    m.add_function(wrap_pyfunction!(top_k, m)?)?;
    m.add_function(wrap_pyfunction!(one_sided_transform, m)?)?;
    m.add_function(wrap_pyfunction!(mixture_weights, m)?)?;
    m.add_function(wrap_pyfunction!(sample_gumbel, m)?)?;
    m.add_function(wrap_pyfunction!(gumbel_log_density, m)?)?;
    m.add_function(wrap_pyfunction!(pass_at_k, m)?)?;
    m.add("ALGORITHMS", Algorithm::ALL.map(|a| a.name()).to_vec())?;
    m.add("VARIANTS", trainer::VARIANTS.to_vec())?;
    Ok(())
}
