use std::path::Path;

use crate::error::Result;
use crate::numerics::{Adam, Rng};
use crate::policy::data::{heldout_set, random_prompt, sample_task, target_grid};
use crate::policy::{checkpoint, pretrain_step, PolicyParams, SamplingOptions, Task};

use super::config::TrainConfig;
use super::eval::evaluate;
use super::PRETRAIN_STREAM;

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub params: PolicyParams,
    /// Mean NLL of each step's batch.
    pub losses: Vec<f64>,
    /// Held-out counting reward of the final policy at temperature 1.
    pub heldout_counting: f64,
}

/// Maximum-likelihood training on procedurally generated prompt-satisfying
/// grids (all four tasks, uniformly), producing the reference policy.
/// Writes `out` when given.
pub fn run_pretrain(cfg: &TrainConfig, out: Option<&Path>) -> Result<PretrainReport> {
    cfg.validate()?;
    let cb = cfg.codebook()?;
    let grid = cfg.grid();
    let mut params = PolicyParams::init(cfg.dims(), cfg.seed)?;
    let mut adam = Adam::new(cfg.pretrain_adam(), &params.sizes());
    let mut losses = Vec::with_capacity(cfg.pretrain_steps);
    for step in 0..cfg.pretrain_steps {
        let mut rng = Rng::derive(cfg.seed, &[PRETRAIN_STREAM, step as u64]);
        let batch: Vec<_> = (0..cfg.pretrain_batch)
            .map(|_| {
                let task = sample_task(&[1.0; 4], &mut rng);
                let p = random_prompt(task, cfg.categories, grid, &mut rng);
                let g = target_grid(&p, &cb, grid, cfg.label_noise, &mut rng);
                (p, g)
            })
            .collect();
        losses.push(pretrain_step(&mut params, &mut adam, &batch)?);
    }
    if let Some(path) = out {
        checkpoint::save(&params, path)?;
    }
    let heldout = heldout_set(&[Task::Counting], cfg.eval_prompts, cfg.categories, grid, cfg.eval_seed);
    let rep = evaluate(
        &params,
        &cb,
        &heldout,
        cfg.eval_samples,
        &SamplingOptions::default(),
        cfg.eval_seed,
        &cfg.reward_options(),
    )?;
    Ok(PretrainReport {
        params,
        losses,
        heldout_counting: rep.overall.mean_reward,
    })
}
