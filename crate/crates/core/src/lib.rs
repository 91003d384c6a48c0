//! Phased consistency distillation of toy 2-D diffusion models.

pub mod distill;
pub mod error;
pub mod evalkit;
pub mod netkit;
pub mod persist;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod solvers;
pub mod toydata;

pub use error::{Error, Result};
pub use netkit::{Adam, Cond, CondNet, Discriminator, EmaTarget, EpsilonNet, NetSpec, TrainState};
pub use scalar::{Point, Scalar};
pub use schedule::{EdgeMode, NoiseSchedule, PhasePartition, TimestepGrid};
pub use solvers::{CfgSpec, Crossing, EpsModel};
pub use toydata::{GaussianOracle, MixtureSpec};

pub type NoiseSchedule64 = NoiseSchedule<f64>;
pub type PhasePartition64 = PhasePartition<f64>;
pub type EpsilonNet64 = EpsilonNet<f64>;
pub type Discriminator64 = Discriminator<f64>;
pub type MixtureSpec64 = MixtureSpec<f64>;
