use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::policy::rollout::mean;
use crate::policy::{sample_rollout, PolicyParams, PromptSet, SamplingOptions, Task};
use crate::rewards::{score, RewardOptions};

use super::metrics::write_csv;
use super::EVAL_STREAM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    /// Task name, or `overall`.
    pub task: String,
    pub samples: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    /// Mean sequence entropy of the sampling distribution.
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: Vec<TaskStats>,
    pub overall: TaskStats,
}

impl EvalReport {
    pub fn task(&self, task: Task) -> Option<&TaskStats> {
        self.per_task.iter().find(|s| s.task == task.name())
    }
}

fn stats(task: &str, rewards: &[f64], entropies: &[f64]) -> TaskStats {
    let m = mean(rewards);
    let var = mean(&rewards.iter().map(|r| (r - m) * (r - m)).collect::<Vec<_>>());
    TaskStats {
        task: task.to_string(),
        samples: rewards.len(),
        mean_reward: m,
        std_reward: var.sqrt(),
        mean_entropy: mean(entropies),
    }
}

/// Samples `n_samples` rollouts per prompt and scores them. Sample `s` of
/// prompt `k` uses its own Rng stream, so results do not depend on the
/// order of evaluation.
pub fn evaluate(
    params: &PolicyParams,
    cb: &Codebook,
    prompts: &PromptSet,
    n_samples: usize,
    opts: &SamplingOptions,
    seed: u64,
    ropts: &RewardOptions,
) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(Error::arg("empty prompt set"));
    }
    if n_samples == 0 {
        return Err(Error::arg("n_samples must be at least 1"));
    }
    let grid = params.dims().grid;
    prompts.validate(params.dims().categories, grid)?;
    let mut by_task: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); Task::ALL.len()];
    for (k, prompt) in prompts.prompts.iter().enumerate() {
        for s in 0..n_samples {
            let mut rng = Rng::derive(seed, &[EVAL_STREAM, k as u64, s as u64]);
            let r = sample_rollout(params, prompt, opts, &mut rng)?;
            let slot = &mut by_task[prompt.task().index()];
            slot.0.push(score(&r.tokens, cb, grid, prompt, ropts)?);
            slot.1.push(mean(&r.sampling_entropy));
        }
    }
    let per_task: Vec<TaskStats> = Task::ALL
        .iter()
        .zip(&by_task)
        .filter(|(_, (r, _))| !r.is_empty())
        .map(|(t, (r, h))| stats(t.name(), r, h))
        .collect();
    let all_r: Vec<f64> = by_task.iter().flat_map(|(r, _)| r.iter().copied()).collect();
    let all_h: Vec<f64> = by_task.iter().flat_map(|(_, h)| h.iter().copied()).collect();
    Ok(EvalReport {
        per_task,
        overall: stats("overall", &all_r, &all_h),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub mean_entropy: f64,
    pub mean_reward: f64,
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::from("temperature  mean_entropy  mean_reward\n");
    for r in rows {
        let _ = writeln!(s, "{:>11.3}  {:>12.6}  {:>11.6}", r.temperature, r.mean_entropy, r.mean_reward);
    }
    s
}

/// Evaluates at each temperature with common random streams and checks that
/// mean sequence entropy does not decrease with temperature.
pub fn temperature_sweep(
    params: &PolicyParams,
    cb: &Codebook,
    prompts: &PromptSet,
    temperatures: &[f64],
    n_samples: usize,
    seed: u64,
    ropts: &RewardOptions,
) -> Result<Vec<SweepRow>> {
    if temperatures.is_empty() {
        return Err(Error::arg("no temperatures given"));
    }
    if temperatures.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::arg("temperatures must be positive and finite"));
    }
    if temperatures.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("temperatures must be sorted ascending without repeats"));
    }
    let mut rows = Vec::with_capacity(temperatures.len());
    for &t in temperatures {
        let rep = evaluate(params, cb, prompts, n_samples, &SamplingOptions::at(t), seed, ropts)?;
        rows.push(SweepRow {
            temperature: t,
            mean_entropy: rep.overall.mean_entropy,
            mean_reward: rep.overall.mean_reward,
        });
    }
    if rows.windows(2).any(|w| w[1].mean_entropy < w[0].mean_entropy) {
        return Err(Error::Contract(format!(
            "mean entropy decreased with temperature:\n{}",
            format_sweep(&rows)
        )));
    }
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_csv(path, rows)
}
