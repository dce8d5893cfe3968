//! The autoregressive categorical policy and everything needed to train it
//! by maximum likelihood.

pub mod checkpoint;
pub mod data;
pub mod model;
pub mod pretrain;
pub mod prompt;
pub mod rollout;

pub use model::{forward_logits, PolicyDims, PolicyParams};
pub use pretrain::pretrain_step;
pub use prompt::{PromptEncoder, PromptSet, PromptSpec, Rect, Relation, Task};
pub use rollout::{
    sample_rollout, sequence_entropy, teacher_forced, teacher_forced_logprobs, token_entropies, Rollout,
    SamplingOptions, TeacherForced,
};
