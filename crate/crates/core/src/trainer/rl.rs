use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::grpo::{rollout_loss, Group, ObjectiveStats};
use crate::numerics::optim::{clip_global_norm, global_norm};
use crate::numerics::{Adam, Rng, Tape};
use crate::policy::data::{heldout_set, random_prompt, sample_task};
use crate::policy::rollout::mean;
use crate::policy::{checkpoint, sample_rollout, teacher_forced, PolicyParams, PromptSet, PromptSpec, SamplingOptions, Task};
use crate::rewards::{combine_rewards, entropy_reward, score, RewardVector};

use super::config::TrainConfig;
use super::eval::evaluate;
use super::metrics::{CsvLog, EvalRecord, MetricsRecord, TimingRecord};
use super::{PROMPT_STREAM, SAMPLE_STREAM};

/// The `batch_size * grad_accum` prompts of one step.
pub fn step_prompts(cfg: &TrainConfig, step: usize) -> Vec<PromptSpec> {
    (0..cfg.batch_size * cfg.grad_accum)
        .map(|b| {
            let mut rng = Rng::derive(cfg.seed, &[PROMPT_STREAM, step as u64, b as u64]);
            let task = sample_task(&cfg.task_weights, &mut rng);
            random_prompt(task, cfg.categories, cfg.grid(), &mut rng)
        })
        .collect()
}

/// Stream for rollout `g` of prompt `b` at `step`.
pub fn rollout_rng(seed: u64, step: usize, b: usize, g: usize) -> Rng {
    Rng::derive(seed, &[SAMPLE_STREAM, step as u64, b as u64, g as u64])
}

/// Everything sampled and scored for one update.
pub struct StepBatch {
    pub groups: Vec<Group>,
    /// Reference log-distributions, indexed `[group][rollout][t]`.
    pub ref_log: Vec<Vec<Vec<Vec<f64>>>>,
    /// Reference sequence entropy per rollout.
    pub ref_entropy: Vec<Vec<f64>>,
    /// Sampling-policy sequence entropy per rollout.
    pub policy_entropy: Vec<Vec<f64>>,
}

/// Samples `G` rollouts per prompt from `policy`, scores them and prepares
/// each group's weights.
pub fn collect_groups(
    cfg: &TrainConfig,
    cb: &Codebook,
    policy: &PolicyParams,
    reference: &PolicyParams,
    step: usize,
) -> Result<StepBatch> {
    let opts = SamplingOptions {
        temperature: cfg.temperature,
        greedy: false,
        cfg_scale: cfg.cfg_scale,
    };
    let grid = cfg.grid();
    let ropts = cfg.reward_options();
    let reweight = cfg.reweight();
    let prompts = step_prompts(cfg, step);
    let mut out = StepBatch {
        groups: Vec::with_capacity(prompts.len()),
        ref_log: Vec::with_capacity(prompts.len()),
        ref_entropy: Vec::with_capacity(prompts.len()),
        policy_entropy: Vec::with_capacity(prompts.len()),
    };
    for (b, prompt) in prompts.iter().enumerate() {
        let rollouts = (0..cfg.group_size)
            .map(|g| sample_rollout(policy, prompt, &opts, &mut rollout_rng(cfg.seed, step, b, g)))
            .collect::<Result<Vec<_>>>()?;
        let base = rollouts
            .iter()
            .map(|r| score(&r.tokens, cb, grid, prompt, &ropts))
            .collect::<Result<Vec<_>>>()?;
        let h_theta: Vec<f64> = rollouts.iter().map(|r| mean(&r.entropy_old)).collect();
        let tf = rollouts
            .iter()
            .map(|r| teacher_forced(reference, &r.prompt, &r.tokens))
            .collect::<Result<Vec<_>>>()?;
        let h_ref: Vec<f64> = tf.iter().map(|t| t.mean_entropy()).collect();
        let entropy: Vec<f64> = h_ref.iter().zip(&h_theta).map(|(&r, &t)| entropy_reward(r, t)).collect();
        let combined = combine_rewards(&base, &entropy, cfg.entropy_lambda, cfg.entropy_reward_mode)?;
        let rewards = RewardVector { base, entropy, combined };
        out.groups.push(Group::prepare(rollouts, rewards, cb, &reweight)?);
        out.ref_log.push(tf.into_iter().map(|t| t.log_dists).collect());
        out.ref_entropy.push(h_ref);
        out.policy_entropy.push(h_theta);
    }
    Ok(out)
}

/// Aggregates of one update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    /// Value of the minimized loss (first inner epoch).
    pub loss: f64,
    /// Mean per-token clipped surrogate.
    pub surrogate: f64,
    /// Mean per-token exact KL.
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub ratio_clamped: usize,
    /// Global gradient norm before clipping (last inner epoch).
    pub grad_norm: f64,
}

#[derive(Serialize)]
struct GroupDump<'a> {
    step: usize,
    group: usize,
    error: String,
    prompt: &'a PromptSpec,
    tokens: Vec<&'a [usize]>,
    logp_old: Vec<&'a [f64]>,
    base_reward: &'a [f64],
    entropy_reward: &'a [f64],
    combined_reward: &'a [f64],
    advantages: &'a [f64],
    zero_std: bool,
    shape: [usize; 2],
    similarity: Option<&'a [f64]>,
    mask: &'a [f64],
    weighted_advantages: &'a [f64],
    kl_weights: &'a [f64],
}

fn dump_group(dir: &Path, step: usize, gi: usize, g: &Group, err: &Error) -> Result<()> {
    let d = GroupDump {
        step,
        group: gi,
        error: err.to_string(),
        prompt: &g.prompt,
        tokens: g.rollouts.iter().map(|r| r.tokens.as_slice()).collect(),
        logp_old: g.rollouts.iter().map(|r| r.logp_old.as_slice()).collect(),
        base_reward: &g.rewards.base,
        entropy_reward: &g.rewards.entropy,
        combined_reward: &g.rewards.combined,
        advantages: &g.advantages.values,
        zero_std: g.advantages.zero_std,
        shape: [g.size(), g.rollouts[0].len()],
        similarity: g.similarity.as_ref().map(|s| s.data()),
        mask: g.mask.data(),
        weighted_advantages: g.reweighted.data(),
        kl_weights: g.kl_weights.data(),
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("nan_dump.json"), serde_json::to_string_pretty(&d)?)?;
    Ok(())
}

/// `inner_epochs` Adam steps on the batch loss
/// `(1/N) sum_groups -J_group (+ entropy-loss ablation)`.
///
/// A non-finite loss or gradient aborts with [`Error::Numerical`]; when
/// `dump_dir` is given the offending group is written to `nan_dump.json`.
pub fn update(
    cfg: &TrainConfig,
    params: &mut PolicyParams,
    adam: &mut Adam,
    batch: &StepBatch,
    step: usize,
    dump_dir: Option<&Path>,
) -> Result<UpdateStats> {
    let scale = 1.0 / batch.groups.len() as f64;
    let ent_lambda = cfg.entropy_loss_ablation.then_some(cfg.entropy_lambda);
    let fail = |gi: usize, e: Error| -> Error {
        if let (Error::Numerical(_), Some(dir)) = (&e, dump_dir) {
            if let Err(io) = dump_group(dir, step, gi, &batch.groups[gi], &e) {
                return io;
            }
        }
        e
    };
    let mut out = UpdateStats::default();
    let mut tape = Tape::new();
    for epoch in 0..cfg.inner_epochs {
        let mut grads: Vec<Vec<f64>> = params.sizes().iter().map(|&n| vec![0.0; n]).collect();
        let mut loss = 0.0;
        let mut stats = ObjectiveStats::default();
        for (gi, group) in batch.groups.iter().enumerate() {
            for i in 0..group.size() {
                tape.reset();
                let pv = params.record(&mut tape, true);
                let (l, s, _) = rollout_loss(
                    &mut tape,
                    &pv,
                    group,
                    i,
                    &batch.ref_log[gi][i],
                    batch.ref_entropy[gi][i],
                    ent_lambda,
                    cfg.clip_eps,
                    scale,
                )
                .map_err(|e| fail(gi, e))?;
                loss += tape.item(l);
                stats.merge(&s);
                let g = tape.backward(l).map_err(|e| fail(gi, e))?;
                for (acc, &v) in grads.iter_mut().zip(pv.vars()) {
                    if let Some(gv) = g.get_ref(v) {
                        acc.iter_mut().zip(gv).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(fail(0, Error::Numerical(format!("non-finite gradient norm at step {step}"))));
        }
        if let Some(max) = cfg.max_grad_norm {
            clip_global_norm(&mut grads, max);
        }
        adam.step(&mut params.buffers_mut(), &grads);
        if !params.is_finite() {
            return Err(fail(0, Error::Numerical(format!("non-finite parameters after step {step}"))));
        }
        if epoch == 0 {
            let n = stats.tokens.max(1) as f64;
            out.loss = loss;
            out.surrogate = stats.surrogate_sum / n;
            out.mean_kl = stats.kl_sum / n;
            out.clip_fraction = stats.clip_fraction();
            out.ratio_clamped = stats.ratio_clamped;
        }
        out.grad_norm = norm;
    }
    Ok(out)
}

fn step_record(step: usize, batch: &StepBatch, stats: &UpdateStats) -> MetricsRecord {
    let base: Vec<f64> = batch.groups.iter().flat_map(|g| g.rewards.base.iter().copied()).collect();
    let combined: Vec<f64> = batch.groups.iter().flat_map(|g| g.rewards.combined.iter().copied()).collect();
    let adv: Vec<f64> = batch.groups.iter().flat_map(|g| g.advantages.values.iter().copied()).collect();
    let weighted: Vec<f64> = batch.groups.iter().flat_map(|g| g.reweighted.data().iter().map(|a| a.abs())).collect();
    let max: Vec<f64> = batch
        .groups
        .iter()
        .map(|g| g.rewards.base.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let per_task = |t: Task| {
        let r: Vec<f64> = batch
            .groups
            .iter()
            .filter(|g| g.prompt.task() == t)
            .flat_map(|g| g.rewards.base.iter().copied())
            .collect();
        (!r.is_empty()).then(|| mean(&r))
    };
    MetricsRecord {
        step,
        mean_reward: mean(&base),
        max_reward: mean(&max),
        mean_combined: mean(&combined),
        mean_adv: mean(&adv),
        mean_abs_weighted_adv: mean(&weighted),
        entropy: mean(&batch.policy_entropy.concat()),
        ref_entropy: mean(&batch.ref_entropy.concat()),
        kl: stats.mean_kl,
        clip_frac: stats.clip_fraction,
        skipped_groups: batch.groups.iter().filter(|g| g.skipped()).count(),
        loss: stats.loss,
        grad_norm: stats.grad_norm,
        reward_counting: per_task(Task::Counting),
        reward_position: per_task(Task::Position),
        reward_region: per_task(Task::Region),
        reward_text: per_task(Task::Text),
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: PolicyParams,
    pub metrics: Vec<MetricsRecord>,
    pub evals: Vec<EvalRecord>,
    pub timing: Vec<TimingRecord>,
}

struct Logs {
    metrics: CsvLog,
    timing: CsvLog,
    evals: CsvLog,
}

fn eval_records(
    cfg: &TrainConfig,
    params: &PolicyParams,
    cb: &Codebook,
    heldout: &PromptSet,
    step: usize,
) -> Result<Vec<EvalRecord>> {
    let opts = SamplingOptions::at(cfg.temperature);
    let rep = evaluate(params, cb, heldout, cfg.eval_samples, &opts, cfg.eval_seed, &cfg.reward_options())?;
    Ok(rep
        .per_task
        .iter()
        .chain(std::iter::once(&rep.overall))
        .map(|s| EvalRecord {
            step,
            task: s.task.clone(),
            mean_reward: s.mean_reward,
            std_reward: s.std_reward,
            mean_entropy: s.mean_entropy,
        })
        .collect())
}

/// GRPO fine-tuning of a copy of `reference`.
///
/// With `out`, writes `config.json`, `metrics.csv` (one row per step,
/// appended as training goes), `timing.csv`, `evals.csv`, `final.stg` and,
/// when `render_every > 0`, PPM renders of the first rollout.
pub fn run_rl(cfg: &TrainConfig, reference: &PolicyParams, out: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    if *reference.dims() != cfg.dims() {
        return Err(Error::arg(format!(
            "reference architecture {:?} does not match config {:?}",
            reference.dims(),
            cfg.dims()
        )));
    }
    let cb = cfg.codebook()?;
    let mut params = reference.clone();
    let mut adam = Adam::new(cfg.adam(), &params.sizes());
    let heldout = heldout_set(&cfg.active_tasks(), cfg.eval_prompts, cfg.categories, cfg.grid(), cfg.eval_seed);

    let mut logs = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.json"), cfg.to_json())?;
            if cfg.render_every > 0 {
                fs::create_dir_all(dir.join("renders"))?;
            }
            Some(Logs {
                metrics: CsvLog::create(&dir.join("metrics.csv"))?,
                timing: CsvLog::create(&dir.join("timing.csv"))?,
                evals: CsvLog::create(&dir.join("evals.csv"))?,
            })
        }
        None => None,
    };
    let mut run = RunOutput {
        params: reference.clone(),
        metrics: Vec::with_capacity(cfg.total_steps),
        evals: Vec::new(),
        timing: Vec::with_capacity(cfg.total_steps),
    };
    let do_eval = |params: &PolicyParams, step: usize, run: &mut RunOutput, logs: &mut Option<Logs>| -> Result<()> {
        if cfg.eval_every == 0 {
            return Ok(());
        }
        for rec in eval_records(cfg, params, &cb, &heldout, step)? {
            if let Some(l) = logs.as_mut() {
                l.evals.append(&rec)?;
            }
            run.evals.push(rec);
        }
        Ok(())
    };
    do_eval(&params, 0, &mut run, &mut logs)?;

    for step in 0..cfg.total_steps {
        let start = Instant::now();
        let batch = collect_groups(cfg, &cb, &params, reference, step)?;
        let stats = update(cfg, &mut params, &mut adam, &batch, step, out)?;
        let rec = step_record(step, &batch, &stats);
        let timing = TimingRecord {
            step,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(l) = logs.as_mut() {
            l.metrics.append(&rec)?;
            l.timing.append(&timing)?;
        }
        if let (Some(dir), true) = (out, cfg.render_every > 0 && step % cfg.render_every == 0) {
            let r = &batch.groups[0].rollouts[0];
            cb.render_grid(&r.tokens, cfg.grid(), &dir.join("renders").join(format!("step_{step:05}.ppm")))?;
        }
        run.metrics.push(rec);
        run.timing.push(timing);
        let done = step + 1;
        if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.total_steps) {
            do_eval(&params, done, &mut run, &mut logs)?;
        }
    }
    if let Some(dir) = out {
        checkpoint::save(&params, &dir.join("final.stg"))?;
    }
    run.params = params;
    Ok(run)
}
