//! Pretraining, the RL loop, evaluation and run comparison.

pub mod compare;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod pretrain;
pub mod rl;

pub use compare::{compare_runs, format_report, summarize, CompareRow};
pub use config::{parse_task_weights, TrainConfig, PRESETS};
pub use eval::{evaluate, temperature_sweep, EvalReport, SweepRow, TaskStats};
pub use metrics::{read_metrics, EvalRecord, MetricsRecord};
pub use pretrain::{run_pretrain, PretrainReport};
pub use rl::{collect_groups, rollout_rng, run_rl, step_prompts, update, RunOutput, StepBatch, UpdateStats};

// Rng stream labels; each consumer draws from its own stream so toggling one
// feature cannot shift another's random numbers.
pub(crate) const PRETRAIN_STREAM: u64 = 0x97e;
pub(crate) const PROMPT_STREAM: u64 = 0x9e0;
pub(crate) const SAMPLE_STREAM: u64 = 0x5a3;
pub(crate) const EVAL_STREAM: u64 = 0xe7a;
