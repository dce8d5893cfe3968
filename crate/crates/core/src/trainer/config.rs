use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, GridShape};
use crate::error::{Error, Result};
use crate::grpo::{KlClip, ReweightConfig};
use crate::numerics::AdamConfig;
use crate::policy::{PolicyDims, Task};
use crate::rewards::{EntropyRewardMode, RewardOptions};

/// Every knob of pretraining, RL and evaluation.
///
/// Unknown JSON keys are rejected so a typo cannot silently fall back to a
/// default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub vocab: usize,
    pub code_dim: usize,
    pub categories: usize,
    pub intra_noise: f64,
    /// Shared by pretraining and RL so rewards see the same embeddings.
    pub codebook_seed: u64,
    pub hidden: usize,

    pub group_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub kl_beta: f64,
    pub entropy_lambda: f64,
    pub clip_eps: f64,
    pub temperature: f64,
    pub cfg_scale: Option<f64>,
    pub total_steps: usize,
    pub inner_epochs: usize,
    pub grad_accum: usize,
    pub max_grad_norm: Option<f64>,

    pub reweight_advantage: bool,
    pub reweight_kl: bool,
    pub entropy_reward_mode: EntropyRewardMode,
    pub entropy_loss_ablation: bool,
    pub drop_kl_on_zero_std: bool,
    pub counting_clamp: bool,
    pub beta_clip_bounds: [f64; 2],
    /// Prompt mixture over counting, position, region, text.
    pub task_weights: [f64; 4],

    pub eval_every: usize,
    pub eval_prompts: usize,
    pub eval_samples: usize,
    pub eval_seed: u64,
    pub render_every: usize,

    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    /// Share of cells replaced by uniform tokens in pretraining targets.
    pub label_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid_h: 8,
            grid_w: 8,
            vocab: 64,
            code_dim: 16,
            categories: 8,
            intra_noise: 0.1,
            codebook_seed: 7,
            hidden: 64,
            group_size: 8,
            batch_size: 8,
            learning_rate: 5e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            kl_beta: 0.03,
            entropy_lambda: 0.4,
            clip_eps: 0.2,
            temperature: 1.0,
            cfg_scale: None,
            total_steps: 500,
            inner_epochs: 1,
            grad_accum: 1,
            max_grad_norm: None,
            reweight_advantage: true,
            reweight_kl: true,
            entropy_reward_mode: EntropyRewardMode::Top,
            entropy_loss_ablation: false,
            drop_kl_on_zero_std: false,
            counting_clamp: true,
            beta_clip_bounds: [0.0, 2.0],
            task_weights: [1.0; 4],
            eval_every: 50,
            eval_prompts: 64,
            eval_samples: 4,
            eval_seed: 1234,
            render_every: 0,
            pretrain_steps: 2000,
            pretrain_batch: 16,
            pretrain_lr: 1e-2,
            label_noise: 0.1,
        }
    }
}

/// Named configurations.
pub const PRESETS: [&str; 5] = ["default", "geneval", "combination", "ocr", "desk"];

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        Ok(match name {
            "default" => base,
            // Performance-proportional mixture single:two:counting:colors:
            // position:attribute = 0:1:7:1:4:5, folded onto the four tasks.
            "geneval" => Self {
                task_weights: parse_task_weights("7:5:6:0")?,
                ..base
            },
            "combination" => Self {
                learning_rate: 1e-6,
                kl_beta: 0.01,
                grad_accum: 2,
                ..base
            },
            "ocr" => Self {
                learning_rate: 1e-6,
                kl_beta: 0.01,
                task_weights: [0.0, 0.0, 0.0, 1.0],
                ..base
            },
            // Step size that moves a 60k-parameter policy within a few
            // hundred updates.
            "desk" => Self {
                learning_rate: DESK_LR,
                ..base
            },
            _ => return Err(Error::arg(format!("unknown preset {name:?}; expected one of {PRESETS:?}"))),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::arg(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.batch_size == 0 || self.inner_epochs == 0 || self.grad_accum == 0 || self.pretrain_batch == 0 {
            return bad("batch sizes, inner_epochs and grad_accum must be positive".into());
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return bad("empty grid".into());
        }
        if self.categories < 2 || !self.vocab.is_multiple_of(self.categories) || self.code_dim < self.categories {
            return bad("codebook needs K >= 2, K | V and C >= K".into());
        }
        if self.hidden == 0 {
            return bad("hidden must be positive".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("pretrain_lr", self.pretrain_lr),
            ("temperature", self.temperature),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.kl_beta >= 0.0) || !(self.entropy_lambda >= 0.0) {
            return bad("kl_beta and entropy_lambda must be non-negative".into());
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(0.0..=0.5).contains(&self.intra_noise) || !(0.0..=1.0).contains(&self.label_noise) {
            return bad("intra_noise must lie in [0, 0.5] and label_noise in [0, 1]".into());
        }
        let [lo, hi] = self.beta_clip_bounds;
        if !(lo <= hi) {
            return bad("beta_clip_bounds reversed".into());
        }
        if self.task_weights.iter().any(|w| !(*w >= 0.0)) || self.task_weights.iter().sum::<f64>() <= 0.0 {
            return bad("task_weights must be non-negative with a positive sum".into());
        }
        if matches!(self.max_grad_norm, Some(n) if !(n > 0.0)) {
            return bad("max_grad_norm must be positive".into());
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> GridShape {
        GridShape::new(self.grid_h, self.grid_w)
    }

    pub fn dims(&self) -> PolicyDims {
        PolicyDims {
            hidden: self.hidden,
            ..PolicyDims::new(self.vocab, self.categories, self.grid())
        }
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::build(self.vocab, self.code_dim, self.categories, self.intra_noise, self.codebook_seed)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn pretrain_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.pretrain_lr,
            ..self.adam()
        }
    }

    pub fn reweight(&self) -> ReweightConfig {
        ReweightConfig {
            reweight_advantage: self.reweight_advantage,
            reweight_kl: self.reweight_kl,
            beta: self.kl_beta,
            kl_clip: KlClip {
                lo: self.beta_clip_bounds[0],
                hi: self.beta_clip_bounds[1],
            },
            drop_kl_on_zero_std: self.drop_kl_on_zero_std,
        }
    }

    pub fn reward_options(&self) -> RewardOptions {
        RewardOptions {
            counting_clamp: self.counting_clamp,
        }
    }

    /// Tasks with non-zero mixture weight.
    pub fn active_tasks(&self) -> Vec<Task> {
        Task::ALL.iter().copied().filter(|t| self.task_weights[t.index()] > 0.0).collect()
    }
}

/// Learning rate of the `desk` preset.
pub const DESK_LR: f64 = 1e-3;

/// Parses `"a:b:c:d"` (counting:position:region:text) mixture weights.
pub fn parse_task_weights(s: &str) -> Result<[f64; 4]> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 4 {
        return Err(Error::arg(format!("task weights {s:?}: expected four ':'-separated numbers")));
    }
    let mut out = [0.0; 4];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| Error::arg(format!("task weight {p:?} is not a number")))?;
        if !(*o >= 0.0) {
            return Err(Error::arg(format!("negative task weight {p}")));
        }
    }
    Ok(out)
}
