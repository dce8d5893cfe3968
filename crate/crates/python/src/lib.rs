//! Python bindings: configs, codebooks, checkpoints, training runs and the
//! group-level GRPO math.
//!
//! Prompts cross the boundary as prompt-set JSON records, e.g.
//! `{"task": "counting", "categories": [3], "targets": {"count": 4}}`.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use gridrl::codebook::Codebook;
use gridrl::grpo::{self, GroupAdvantages, KlClip};
use gridrl::numerics::{Rng, Tensor};
use gridrl::policy::prompt::PromptRecord;
use gridrl::policy::{checkpoint, sample_rollout, PolicyParams, PromptSet, PromptSpec, SamplingOptions};
use gridrl::rewards::{self, EntropyRewardMode};
use gridrl::trainer::{self, TrainConfig};
use gridrl::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for gridrl::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn matrix(m: &[Vec<f64>]) -> PyResult<Tensor> {
    let cols = m.first().map_or(0, Vec::len);
    if m.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Tensor::matrix(m.len(), cols, m.concat()).py()
}

fn prompt(json: &str) -> PyResult<PromptSpec> {
    let rec: PromptRecord = serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    rec.to_spec().py()
}

/// Training, pretraining and evaluation settings.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    /// Defaults, or a named preset, patched with JSON (`overrides`).
    #[new]
    #[pyo3(signature = (preset = None, overrides = None))]
    fn new(preset: Option<&str>, overrides: Option<&str>) -> PyResult<Self> {
        let base = TrainConfig::preset(preset.unwrap_or("default")).py()?;
        let inner = match overrides {
            None => base,
            Some(text) => {
                let patch: serde_json::Value =
                    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
                let mut map = match serde_json::to_value(&base) {
                    Ok(serde_json::Value::Object(m)) => m,
                    _ => unreachable!("config serializes to an object"),
                };
                let serde_json::Value::Object(patch) = patch else {
                    return Err(PyValueError::new_err("overrides must be a JSON object"));
                };
                map.extend(patch);
                TrainConfig::from_json(&serde_json::Value::Object(map).to_string()).py()?
            }
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::load(&path).py()?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn codebook(&self) -> PyResult<PyCodebook> {
        Ok(PyCodebook {
            inner: self.inner.codebook().py()?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(seed={}, group_size={}, batch_size={}, learning_rate={}, total_steps={})",
            self.inner.seed, self.inner.group_size, self.inner.batch_size, self.inner.learning_rate, self.inner.total_steps
        )
    }
}

/// Token embeddings grouped into categories.
#[pyclass(name = "Codebook", from_py_object)]
#[derive(Clone)]
struct PyCodebook {
    inner: Codebook,
}

#[pymethods]
impl PyCodebook {
    #[new]
    #[pyo3(signature = (vocab = 64, dim = 16, categories = 8, intra_noise = 0.1, seed = 7))]
    fn new(vocab: usize, dim: usize, categories: usize, intra_noise: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: Codebook::build(vocab, dim, categories, intra_noise, seed).py()?,
        })
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.inner.vocab()
    }

    #[getter]
    fn num_categories(&self) -> usize {
        self.inner.num_categories()
    }

    fn category_of(&self, token: usize) -> PyResult<usize> {
        if token >= self.inner.vocab() {
            return Err(PyValueError::new_err(format!("token {token} out of range")));
        }
        Ok(self.inner.category_of(token))
    }

    fn cosine(&self, a: usize, b: usize) -> PyResult<f64> {
        if a >= self.inner.vocab() || b >= self.inner.vocab() {
            return Err(PyValueError::new_err("token out of range"));
        }
        Ok(self.inner.cosine(a, b))
    }

    fn embedding(&self, token: usize) -> PyResult<Vec<f64>> {
        if token >= self.inner.vocab() {
            return Err(PyValueError::new_err(format!("token {token} out of range")));
        }
        Ok(self.inner.embedding(token).to_vec())
    }
}

/// Policy weights (an STG1 checkpoint in memory).
#[pyclass(name = "Policy", from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: PolicyParams,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn init(cfg: &PyTrainConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: PolicyParams::init(cfg.inner.dims(), seed).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).py()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Samples one grid; returns `(tokens, logp_old, sequence_entropy)`.
    #[pyo3(signature = (prompt_json, seed, temperature = 1.0))]
    fn sample(&self, prompt_json: &str, seed: u64, temperature: f64) -> PyResult<(Vec<usize>, Vec<f64>, f64)> {
        let p = prompt(prompt_json)?;
        let r = sample_rollout(&self.inner, &p, &SamplingOptions::at(temperature), &mut Rng::new(seed)).py()?;
        let h = r.entropy_old.iter().sum::<f64>() / r.entropy_old.len().max(1) as f64;
        Ok((r.tokens, r.logp_old, h))
    }
}

/// Pretrains a reference policy; returns `(policy, losses, heldout_counting)`.
#[pyfunction]
#[pyo3(signature = (cfg, out = None))]
fn pretrain(py: Python<'_>, cfg: &PyTrainConfig, out: Option<PathBuf>) -> PyResult<(PyPolicy, Vec<f64>, f64)> {
    let cfg = cfg.inner.clone();
    let rep = py.detach(|| trainer::run_pretrain(&cfg, out.as_deref())).py()?;
    Ok((PyPolicy { inner: rep.params }, rep.losses, rep.heldout_counting))
}

/// Runs GRPO from `reference`; returns the trained policy and the metrics
/// rows as dicts-ready JSON strings.
#[pyfunction]
#[pyo3(signature = (cfg, reference, out = None))]
fn train(
    py: Python<'_>,
    cfg: &PyTrainConfig,
    reference: &PyPolicy,
    out: Option<PathBuf>,
) -> PyResult<(PyPolicy, Vec<String>)> {
    let cfg = cfg.inner.clone();
    let reference = reference.inner.clone();
    let run = py.detach(|| trainer::run_rl(&cfg, &reference, out.as_deref())).py()?;
    let metrics = run
        .metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("record serializes"))
        .collect();
    Ok((PyPolicy { inner: run.params }, metrics))
}

/// Per-task `(task, mean_reward, std_reward, mean_entropy)` plus an
/// `overall` row. Uses the held-out set when `prompts_jsonl` is omitted.
#[pyfunction]
#[pyo3(signature = (cfg, policy, prompts_jsonl = None, n_samples = None, temperature = None))]
fn evaluate(
    py: Python<'_>,
    cfg: &PyTrainConfig,
    policy: &PyPolicy,
    prompts_jsonl: Option<&str>,
    n_samples: Option<usize>,
    temperature: Option<f64>,
) -> PyResult<Vec<(String, f64, f64, f64)>> {
    let c = &cfg.inner;
    let set = match prompts_jsonl {
        Some(text) => PromptSet::parse_jsonl(text).py()?,
        None => gridrl::policy::data::heldout_set(&c.active_tasks(), c.eval_prompts, c.categories, c.grid(), c.eval_seed),
    };
    let cb = c.codebook().py()?;
    let opts = SamplingOptions::at(temperature.unwrap_or(c.temperature));
    let n = n_samples.unwrap_or(c.eval_samples);
    let rep = py
        .detach(|| trainer::evaluate(&policy.inner, &cb, &set, n, &opts, c.eval_seed, &c.reward_options()))
        .py()?;
    Ok(rep
        .per_task
        .iter()
        .chain(std::iter::once(&rep.overall))
        .map(|s| (s.task.clone(), s.mean_reward, s.std_reward, s.mean_entropy))
        .collect())
}

/// Rule reward of one grid for one prompt.
#[pyfunction]
fn score(cfg: &PyTrainConfig, tokens: Vec<usize>, prompt_json: &str) -> PyResult<f64> {
    let c = &cfg.inner;
    let cb = c.codebook().py()?;
    rewards::score(&tokens, &cb, c.grid(), &prompt(prompt_json)?, &c.reward_options()).py()
}

/// `1 / (1 + (h_ref - h_theta)^2)`.
#[pyfunction]
fn entropy_reward(h_ref: f64, h_theta: f64) -> f64 {
    rewards::entropy_reward(h_ref, h_theta)
}

#[pyfunction]
#[pyo3(signature = (base, ent, lam = 0.4, mode = "top"))]
fn combine_rewards(base: Vec<f64>, ent: Vec<f64>, lam: f64, mode: &str) -> PyResult<Vec<f64>> {
    let mode: EntropyRewardMode = mode.parse().py()?;
    rewards::combine_rewards(&base, &ent, lam, mode).py()
}

/// Group-normalized advantages; all zeros for a zero-variance group.
#[pyfunction]
fn normalize_advantages(rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(grpo::normalize_advantages(&rewards).py()?.values)
}

/// Per-token similarity to opposite-sign rollouts, `[G][T]`.
#[pyfunction]
fn opposite_sign_similarity(codebook: &PyCodebook, rewards: Vec<f64>, tokens: Vec<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
    let adv: GroupAdvantages = grpo::normalize_advantages(&rewards).py()?;
    let refs: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
    Ok(rows(&grpo::opposite_sign_similarity(&adv, &refs, &codebook.inner).py()?))
}

/// `(1 - Sim) / 2`.
#[pyfunction]
fn similarity_mask(sim: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&grpo::similarity_mask(&matrix(&sim)?)))
}

/// Mask times broadcast advantage.
#[pyfunction]
fn reweight_advantages(adv: Vec<f64>, mask: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&grpo::reweight_advantages(&adv, &matrix(&mask)?).py()?))
}

/// Per-token KL coefficients.
#[pyfunction]
#[pyo3(signature = (sim, beta = 0.03, lo = 0.0, hi = 2.0))]
fn kl_weights(sim: Vec<Vec<f64>>, beta: f64, lo: f64, hi: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&grpo::kl_weights(&matrix(&sim)?, beta, KlClip { lo, hi }).py()?))
}

/// Compares metrics CSV files; returns the plain-text report.
#[pyfunction]
fn compare_runs(paths: Vec<PathBuf>) -> PyResult<String> {
    let runs = paths
        .iter()
        .map(|p| Ok((p.display().to_string(), trainer::read_metrics(p)?)))
        .collect::<gridrl::Result<Vec<_>>>()
        .py()?;
    Ok(trainer::format_report(&trainer::compare_runs(&runs).py()?))
}

#[pymodule]
fn gridrl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyCodebook>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_reward, m)?)?;
    m.add_function(wrap_pyfunction!(combine_rewards, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(opposite_sign_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_mask, m)?)?;
    m.add_function(wrap_pyfunction!(reweight_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(kl_weights, m)?)?;
    m.add_function(wrap_pyfunction!(compare_runs, m)?)?;
    Ok(())
}
