//! Few-step generation from a phased student: deterministic phase-by-phase
//! sampling, `r`-interpolated stochastic stepping, and guided variants.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::netkit::Cond;
use crate::rng::{stream, Purpose};
use crate::scalar::{lit, Point, Scalar};
use crate::schedule::{NoiseSchedule, PhasePartition};
use crate::solvers::{
    cfg_epsilon, consistency_in_phase, phase_map, solve_k_steps, x0_prediction, CfgSpec, Crossing,
    EpsModel,
};

/// Inference-side guidance `eps(neg) + w (eps(c) - eps(neg))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guidance<S> {
    pub w: S,
    pub neg: Cond,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig<S> {
    pub steps: usize,
    /// Share of the predicted noise re-injected at each step.
    pub r: S,
    pub guidance: Option<Guidance<S>>,
    pub clip: Option<S>,
    pub seed: u64,
}

impl<S: Scalar> SamplerConfig<S> {
    pub fn deterministic(steps: usize, seed: u64) -> Self {
        Self { steps, r: S::one(), guidance: None, clip: None, seed }
    }

    pub fn validate(&self, phases: usize) -> Result<()> {
        if self.steps < phases.max(1) {
            return Err(Error::config(format!(
                "{} sampling steps requested but the model has {phases} phases; \
                 each phase needs at least one step",
                self.steps
            )));
        }
        if !(self.r >= S::zero() && self.r <= S::one()) {
            return Err(Error::config(format!("stochasticity r = {} must lie in [0, 1]", self.r)));
        }
        if let Some(g) = self.guidance {
            if !(g.w > S::zero()) || !g.w.is_finite() {
                return Err(Error::config(format!("guidance scale must be positive, got {}", g.w)));
            }
        }
        Ok(())
    }
}

/// One sampler step from `from` down to `to`, both inside phase `phase`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step<S> {
    pub phase: usize,
    pub from: S,
    pub to: S,
}

/// Step times for `steps` evaluations. Phases are visited from high noise
/// to low; each gets `steps / M` sub-steps and the first `steps % M` visited
/// get one extra. Sub-step times are uniform in `t`, rounded to grid points
/// when the phase has at least as many grid intervals as sub-steps.
pub fn step_schedule<S: Scalar>(partition: &PhasePartition<S>, steps: usize) -> Result<Vec<Step<S>>> {
    let m_total = partition.phases();
    if steps < m_total {
        return Err(Error::config(format!(
            "{steps} steps cannot reach all {m_total} phase edges"
        )));
    }
    let (base, extra) = (steps / m_total, steps % m_total);
    let grid = partition.grid();
    let mut out = Vec::with_capacity(steps);
    for (visit, m) in (0..m_total).rev().enumerate() {
        let k = base + usize::from(visit < extra);
        let (lo, hi) = partition.phase_bounds(m);
        let len = hi - lo;
        let times: Vec<S> = if k <= len {
            (0..=k)
                .map(|j| {
                    let off = ((j * len) as f64 / k as f64).round() as usize;
                    grid.time(hi - off)
                })
                .collect()
        } else {
            let (a, b) = (grid.time(hi), grid.time(lo));
            (0..=k)
                .map(|j| if j == k { b } else { a + (b - a) * lit(j as f64 / k as f64) })
                .collect()
        };
        out.extend(times.windows(2).map(|w| Step { phase: m, from: w[0], to: w[1] }));
    }
    Ok(out)
}

fn guided_eps<S: Scalar, M: EpsModel<S> + ?Sized>(
    model: &M,
    x: &Point<S>,
    t: S,
    c: Cond,
    g: Option<Guidance<S>>,
) -> Point<S> {
    match g {
        Some(g) => cfg_epsilon(model, x, t, &CfgSpec { w: g.w, c, neg: g.neg }),
        None => model.eps(x, t, c),
    }
}

fn initial_noise<S: Scalar>(seed: u64, i: usize) -> Point<S> {
    stream(seed, Purpose::SamplerInit, 0, i as u64).normal_point()
}

/// Draws `x_T ~ N(0, I)` and applies the per-phase consistency maps from
/// phase `M - 1` down to `0`: one evaluation per phase.
pub fn sample_deterministic<S: Scalar, M: EpsModel<S> + ?Sized>(
    student: &M,
    partition: &PhasePartition<S>,
    schedule: &NoiseSchedule<S>,
    n: usize,
    c: Cond,
    seed: u64,
    clip: Option<S>,
) -> Vec<Point<S>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut x = initial_noise(seed, i);
            for m in (0..partition.phases()).rev() {
                let t = partition.edge_time(m + 1);
                x = consistency_in_phase(student, x, t, m, partition, c, schedule, clip)
                    .expect("phase edges lie inside their phase");
            }
            x
        })
        .collect()
}

/// Multi-step sampling `x_u = alpha_u x0 + sigma_u (sqrt(r) eps + sqrt(1 - r) z)`.
/// With `r = 1` every step is the phase map itself.
pub fn sample_stochastic_r<S: Scalar, M: EpsModel<S> + ?Sized>(
    student: &M,
    partition: &PhasePartition<S>,
    schedule: &NoiseSchedule<S>,
    n: usize,
    c: Cond,
    cfg: &SamplerConfig<S>,
) -> Result<Vec<Point<S>>> {
    cfg.validate(partition.phases())?;
    let steps = step_schedule(partition, cfg.steps)?;
    let deterministic = cfg.r == S::one();
    let (keep, fresh) = (cfg.r.sqrt(), (S::one() - cfg.r).sqrt());
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut x = initial_noise(cfg.seed, i);
            for (j, st) in steps.iter().enumerate() {
                let e = guided_eps(student, &x, st.from, c, cfg.guidance);
                if deterministic {
                    x = phase_map(e, x, st.from, st.to, schedule, cfg.clip);
                    continue;
                }
                let clip = cfg.clip.filter(|_| st.to <= schedule.t_min);
                let x0 = x0_prediction(e, x, st.from, schedule, clip);
                let (a, s) = schedule.coeffs(st.to);
                let z: Point<S> = stream(cfg.seed, Purpose::SamplerStep, j as u64, i as u64).normal_point();
                x = [
                    a * x0[0] + s * (keep * e[0] + fresh * z[0]),
                    a * x0[1] + s * (keep * e[1] + fresh * z[1]),
                ];
            }
            x
        })
        .collect())
}

/// Deterministic sampling with `w' eps(c) + (1 - w') eps(null)`, `w'` in `(0.5, 1]`.
pub fn sample_diversity_cfg<S: Scalar, M: EpsModel<S> + ?Sized>(
    student: &M,
    partition: &PhasePartition<S>,
    schedule: &NoiseSchedule<S>,
    steps: usize,
    n: usize,
    c: Cond,
    w: S,
    seed: u64,
) -> Result<Vec<Point<S>>> {
    if !(w > lit(0.5) && w <= S::one()) {
        return Err(Error::config(format!("diversity guidance w' = {w} must lie in (0.5, 1]")));
    }
    let cfg = SamplerConfig {
        steps,
        r: S::one(),
        guidance: Some(Guidance { w, neg: Cond::Null }),
        clip: None,
        seed,
    };
    sample_stochastic_r(student, partition, schedule, n, c, &cfg)
}

/// Full-grid DDIM sampling from a teacher, optionally guided.
pub fn sample_teacher<S: Scalar, M: EpsModel<S> + ?Sized>(
    teacher: &M,
    partition: &PhasePartition<S>,
    schedule: &NoiseSchedule<S>,
    n: usize,
    c: Cond,
    guidance: Option<Guidance<S>>,
    seed: u64,
) -> Vec<Point<S>> {
    let spec = guidance.map(|g| CfgSpec { w: g.w, c, neg: g.neg });
    let steps = partition.grid().intervals();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let x = initial_noise(seed, i);
            solve_k_steps(teacher, x, 0, steps, partition, c, spec.as_ref(), Crossing::Allow, schedule)
                .expect("full grid solve")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{EdgeMode, TimestepGrid};
    use crate::solvers::{GaussianPhaseStudent, OptimalTarget, OracleEps};
    use crate::toydata::GaussianOracle;

    fn setup(m: usize) -> (NoiseSchedule<f64>, PhasePartition<f64>) {
        let s = NoiseSchedule::default();
        let g = TimestepGrid::uniform(&s, 50).unwrap();
        (s, PhasePartition::new(g, m, EdgeMode::UniformIndex).unwrap())
    }

    struct Counting<'a, M>(&'a M, std::sync::atomic::AtomicUsize);
    impl<M: EpsModel<f64>> EpsModel<f64> for Counting<'_, M> {
        fn eps(&self, x: &Point<f64>, t: f64, c: Cond) -> Point<f64> {
            self.1.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            self.0.eps(x, t, c)
        }
    }

    struct Split;
    impl EpsModel<f64> for Split {
        fn eps(&self, x: &Point<f64>, t: f64, c: Cond) -> Point<f64> {
            let k = if c == Cond::Null { -0.3 } else { 0.4 };
            [k * x[0] + t, k * x[1] - t]
        }
    }

    #[test]
    fn schedule_assigns_extras_to_early_phases() {
        let (_, p) = setup(4);
        let st = step_schedule(&p, 6).unwrap();
        let per: Vec<usize> = (0..4).map(|m| st.iter().filter(|s| s.phase == m).count()).collect();
        assert_eq!(per, vec![1, 1, 2, 2]);
        assert_eq!(st[0].from, 1.0);
        assert_eq!(st.last().unwrap().to, p.edge_time(0));
        for w in st.windows(2) {
            assert_eq!(w[0].to, w[1].from);
            assert!(w[0].to < w[0].from);
        }
        assert!(step_schedule(&p, 3).is_err());
        let fine = step_schedule(&p, 200).unwrap();
        assert_eq!(fine.len(), 200);
    }

    #[test]
    fn one_phase_is_one_evaluation() {
        let (s, p) = setup(1);
        let m = Counting(&Split, Default::default());
        let out = sample_deterministic(&m, &p, &s, 10, Cond::Class(0), 3, None);
        assert_eq!(out.len(), 10);
        assert_eq!(m.1.into_inner(), 10);
    }

    #[test]
    fn deterministic_paths_agree_bitwise() {
        let (s, p) = setup(4);
        let a = sample_deterministic(&Split, &p, &s, 64, Cond::Class(1), 8, None);
        let b = sample_deterministic(&Split, &p, &s, 64, Cond::Class(1), 8, None);
        assert_eq!(a, b);
        let c = sample_stochastic_r(&Split, &p, &s, 64, Cond::Class(1), &SamplerConfig::deterministic(4, 8)).unwrap();
        assert_eq!(a, c);
        let other = sample_deterministic(&Split, &p, &s, 64, Cond::Class(1), 9, None);
        assert_ne!(a, other);
    }

    #[test]
    fn r_one_never_draws_fresh_noise() {
        // Outputs at r = 1 depend on the seed only through x_T.
        let (s, p) = setup(2);
        let cfg = SamplerConfig::deterministic(6, 5);
        let a = sample_stochastic_r(&Split, &p, &s, 16, Cond::Class(0), &cfg).unwrap();
        let b = sample_stochastic_r(&Split, &p, &s, 16, Cond::Class(0), &cfg).unwrap();
        assert_eq!(a, b);
        let r0 = SamplerConfig { r: 0.0, ..cfg };
        let c = sample_stochastic_r(&Split, &p, &s, 16, Cond::Class(0), &r0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn r_zero_single_phase_is_multistep_consistency_sampling() {
        let (s, p) = setup(1);
        let cfg = SamplerConfig { steps: 3, r: 0.0, guidance: None, clip: None, seed: 4 };
        let out = sample_stochastic_r(&Split, &p, &s, 4, Cond::Class(0), &cfg).unwrap();
        let steps = step_schedule(&p, 3).unwrap();
        for (i, got) in out.iter().enumerate() {
            let mut x: Point<f64> = initial_noise(4, i);
            for (j, st) in steps.iter().enumerate() {
                let e = Split.eps(&x, st.from, Cond::Class(0));
                let x0 = x0_prediction(e, x, st.from, &s, None);
                let z: Point<f64> = stream(4, Purpose::SamplerStep, j as u64, i as u64).normal_point();
                let (a, sg) = s.coeffs(st.to);
                x = [a * x0[0] + sg * z[0], a * x0[1] + sg * z[1]];
            }
            assert!((x[0] - got[0]).abs() < 1e-15 && (x[1] - got[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn diversity_guidance_range_and_identities() {
        let (s, p) = setup(2);
        for w in [0.5, 1.2, 0.0] {
            assert!(sample_diversity_cfg(&Split, &p, &s, 2, 4, Cond::Class(0), w, 1).is_err());
        }
        let plain = sample_stochastic_r(&Split, &p, &s, 8, Cond::Class(0), &SamplerConfig::deterministic(2, 1)).unwrap();
        let one = sample_diversity_cfg(&Split, &p, &s, 2, 8, Cond::Class(0), 1.0, 1).unwrap();
        assert_eq!(plain, one);
        let (s2, p2) = setup(2);
        let o = OracleEps { oracle: GaussianOracle::new([1.0, 0.0], 0.2).unwrap(), schedule: s2 };
        let a = sample_diversity_cfg(&o, &p2, &s2, 2, 8, Cond::Class(0), 0.7, 1).unwrap();
        let b = sample_diversity_cfg(&o, &p2, &s2, 2, 8, Cond::Class(0), 1.0, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_optimal_student_matches_target_moments() {
        let (s, p) = setup(4);
        let o = GaussianOracle::new([1.0, -0.5], 0.25).unwrap();
        let st = GaussianPhaseStudent { oracle: o, schedule: s, partition: p.clone(), target: OptimalTarget::Exact };
        let n = 100_000;
        let out = sample_deterministic(&st, &p, &s, n, Cond::Null, 12, None);
        let mean = [
            out.iter().map(|x| x[0]).sum::<f64>() / n as f64,
            out.iter().map(|x| x[1]).sum::<f64>() / n as f64,
        ];
        let var = out.iter().map(|x| (x[0] - mean[0]).powi(2) + (x[1] - mean[1]).powi(2)).sum::<f64>()
            / (2.0 * n as f64);
        // Exact transport to t_min: mean alpha mu, variance alpha^2 s^2 + sigma^2.
        let (a, sg) = s.coeffs(s.t_min);
        assert!((mean[0] - a).abs() < 0.02 && (mean[1] + 0.5 * a).abs() < 0.02);
        let v = a * a * 0.25 + sg * sg;
        assert!((var / v - 1.0).abs() < 0.02, "{var} vs {v}");
    }
}
