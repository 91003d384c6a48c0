//! Teacher pretraining, phased consistency distillation (guided and
//! dropout-based teacher solvers), and the adversarial consistency loss.

mod config;
mod identity;
mod loss;
mod teacher;
mod trainer;

pub use config::{DistillConfig, Metric, Mode, NetConfig, TeacherConfig, Weighting};
pub use identity::cfg_composition_identity;
pub use loss::{
    adversarial_loss, adversarial_pair, draw_sample, pcm_loss, pcm_loss_value, train_discriminator,
    AdvPair, LossSettings, PcmSample,
};
pub use teacher::{train_teacher, TeacherRow, TeacherTrainer};
pub use trainer::{distill, make_partition, Distiller, LossRow};
pub(crate) use loss::disc_pair_grad;
