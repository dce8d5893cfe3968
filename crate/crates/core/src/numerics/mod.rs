//! Dense tensors, reverse-mode differentiation, seeded randomness and the
//! finite-difference oracle everything else is checked against.

pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::finite_diff_check;
pub use optim::{Adam, AdamConfig};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{entropy_from_log_probs, log_softmax, logsumexp, softmax, Tensor};
