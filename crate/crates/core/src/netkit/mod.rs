//! Differentiable substrate: conditioned MLPs with exact reverse-mode
//! gradients, the adaptive-moment optimizer and EMA tracking.

mod mlp;
mod nets;
mod optim;

pub use mlp::{Cond, CondNet, NetSpec, Workspace};
pub use nets::{Discriminator, EmaTarget, EpsilonNet};
pub use optim::{l2_norm, Adam, TrainState};

pub(crate) use optim::{add_into, chunked_reduce};
