use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::netkit::Cond;
use crate::rng::{stream, Purpose};
use crate::sampler::{sample_stochastic_r, Guidance, SamplerConfig};
use crate::scalar::{to_f64, Point, Scalar};
use crate::schedule::{NoiseSchedule, PhasePartition};
use crate::solvers::{consistency_in_phase, solve_k_steps, CfgSpec, Crossing, EpsModel};
use crate::toydata::{forward_diffuse, MixtureSpec};

use super::metrics::{mean_paired_l2, mode_mass, pairwise_sum, Estimate};

/// Result of [`self_consistency_residual`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    /// Mean residual divided by the data standard deviation.
    pub relative: f64,
    pub absolute: f64,
    pub data_std: f64,
    pub n: usize,
    pub seed: u64,
}

/// Mean `|f^m(x_t, t) - f^m(x_t', t')|` over random same-phase grid pairs
/// `t' <= t`, where `x_t'` is the teacher's DDIM transport of `x_t`.
/// `teacher_w` guides the teacher solve against the null condition.
pub fn self_consistency_residual<S, St, Te>(
    student: &St,
    teacher: &Te,
    data: &MixtureSpec<S>,
    partition: &PhasePartition<S>,
    schedule: &NoiseSchedule<S>,
    n_pairs: usize,
    seed: u64,
    teacher_w: Option<S>,
    clip: Option<S>,
) -> Result<Residual>
where
    S: Scalar,
    St: EpsModel<S> + ?Sized,
    Te: EpsModel<S> + ?Sized,
{
    if n_pairs == 0 {
        return Err(Error::domain("need at least one pair"));
    }
    let grid = partition.grid();
    let per: Vec<Result<f64>> = (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, Purpose::Evaluation, 0, i as u64);
            let k = rng.below(data.num_classes());
            let c = Cond::Class(k);
            let x0 = data.draw(k, &mut rng);
            let m = rng.below(partition.phases());
            let (lo, hi) = partition.phase_bounds(m);
            let a = lo + rng.below(hi - lo + 1);
            let b = lo + rng.below(hi - lo + 1);
            let (i_hi, i_lo) = (a.max(b), a.min(b));
            let z = rng.normal_point();
            let x_t = forward_diffuse(schedule, x0, grid.time(i_hi), z);
            let spec = teacher_w.map(|w| CfgSpec { w, c, neg: Cond::Null });
            let x_u = solve_k_steps(
                teacher,
                x_t,
                i_lo,
                i_hi - i_lo,
                partition,
                c,
                spec.as_ref(),
                Crossing::Forbid,
                schedule,
            )?;
            let f_t = consistency_in_phase(student, x_t, grid.time(i_hi), m, partition, c, schedule, clip)?;
            let f_u = consistency_in_phase(student, x_u, grid.time(i_lo), m, partition, c, schedule, clip)?;
            Ok(to_f64((f_t[0] - f_u[0]).hypot(f_t[1] - f_u[1])))
        })
        .collect();
    let per = per.into_iter().collect::<Result<Vec<f64>>>()?;
    let absolute = pairwise_sum(&per) / n_pairs as f64;
    let data_std = to_f64(data.data_std());
    Ok(Residual { relative: absolute / data_std, absolute, data_std, n: n_pairs, seed })
}

/// Mean L2 between same-seed outputs of two samplers that share `r`.
pub fn cross_step_consistency<S, M>(
    student: &M,
    partition: &PhasePartition<S>,
    schedule: &NoiseSchedule<S>,
    steps_a: usize,
    steps_b: usize,
    r: S,
    n: usize,
    c: Cond,
    seed: u64,
) -> Result<Estimate>
where
    S: Scalar,
    M: EpsModel<S> + ?Sized,
{
    let cfg = |steps| SamplerConfig { steps, r, guidance: None, clip: None, seed };
    let a = sample_stochastic_r(student, partition, schedule, n, c, &cfg(steps_a))?;
    let b = sample_stochastic_r(student, partition, schedule, n, c, &cfg(steps_b))?;
    Ok(Estimate { value: mean_paired_l2(&a, &b)?, n, seed })
}

/// Negative-class mass under guidance `eps(neg) + w (eps(c) - eps(neg))`.
#[derive(Debug, Clone, PartialEq)]
pub struct NegReport {
    pub w: f64,
    pub pcd: f64,
    pub pcd_star: f64,
    pub n: usize,
    pub seed: u64,
}

impl NegReport {
    pub fn star_is_less_sensitive(&self) -> bool {
        self.pcd_star < self.pcd
    }
}

/// Mahalanobis radius that counts a sample as inside a mode.
pub const NEG_MODE_RADIUS: f64 = 3.0;

/// Fraction of samples landing in modes of the negative class (within
/// [`NEG_MODE_RADIUS`]) when each class `c` is sampled against `neg = (c + 1) mod C` with scale `w`; both
/// students are run with the same seeds. `n` is split evenly over classes.
pub fn negative_condition_sensitivity<S, A, B>(
    pcd: &A,
    pcd_star: &B,
    data: &MixtureSpec<S>,
    partition: &PhasePartition<S>,
    schedule: &NoiseSchedule<S>,
    steps: usize,
    w: S,
    n: usize,
    seed: u64,
) -> Result<NegReport>
where
    S: Scalar,
    A: EpsModel<S> + ?Sized,
    B: EpsModel<S> + ?Sized,
{
    let classes = data.num_classes();
    if classes < 2 {
        return Err(Error::config("negative conditioning needs at least two classes"));
    }
    let per = n / classes;
    let frac = |model: &dyn Fn(&SamplerConfig<S>, Cond) -> Result<Vec<Point<S>>>| -> Result<f64> {
        let mut total = 0.0;
        for k in 0..classes {
            let neg = (k + 1) % classes;
            let cfg = SamplerConfig {
                steps,
                r: S::one(),
                guidance: Some(Guidance { w, neg: Cond::Class(neg) }),
                clip: None,
                seed: seed.wrapping_add(k as u64),
            };
            let pts = model(&cfg, Cond::Class(k))?;
            total += mode_mass(data, &pts, neg, NEG_MODE_RADIUS);
        }
        Ok(total / classes as f64)
    };
    let a = frac(&|cfg, c| sample_stochastic_r(pcd, partition, schedule, per, c, cfg))?;
    let b = frac(&|cfg, c| sample_stochastic_r(pcd_star, partition, schedule, per, c, cfg))?;
    Ok(NegReport { w: to_f64(w), pcd: a, pcd_star: b, n: per * classes, seed })
}
