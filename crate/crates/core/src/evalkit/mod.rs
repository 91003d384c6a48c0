//! Sample-quality metrics, consistency diagnostics and executable checks of
//! the method's identities.

mod consistency;
mod metrics;
mod theorems;

pub use consistency::{
    cross_step_consistency, negative_condition_sensitivity, self_consistency_residual, NegReport, Residual,
};
pub use metrics::{
    class_fraction, mean_paired_l2, mode_entropy, mode_histogram, mode_mass, sliced_wasserstein, Estimate, PROJECTIONS,
};
pub use theorems::{
    adversarial_demo, boundary_deviation, cfg_identity_deviation, order_study, phase_map_ddim_deviation,
    verify_theorems, AdversarialDemo, Check, OrderMode, OrderReport, TheoremReport, VerifyOptions,
};
