//! Group-relative policy optimization for a small autoregressive token-grid
//! generator, with similarity-aware advantage and KL reweighting and a
//! reference-anchored entropy reward.

pub mod codebook;
pub mod error;
pub mod grpo;
pub mod numerics;
pub mod policy;
pub mod rewards;
pub mod trainer;

pub use error::{Error, Result};
