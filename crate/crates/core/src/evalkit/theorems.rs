use std::fmt;

use crate::distill::{cfg_composition_identity, draw_sample, DistillConfig, Mode};
use crate::error::{Error, Result};
use crate::netkit::{add_into, chunked_reduce, Adam, Cond, Discriminator, EpsilonNet, NetSpec};
use crate::rng::{stream, Purpose};
use crate::scalar::{dist, Point};
use crate::schedule::{EdgeMode, NoiseSchedule, PhasePartition, TimestepGrid};
use crate::solvers::{
    consistency_in_phase, ddim_step, phase_map, solve_k_steps, Crossing,
    GaussianPhaseStudent, OptimalTarget, OracleEps,
};
use crate::toydata::{forward_diffuse, GaussianOracle};

use crate::distill::AdvPair;

use super::metrics::pairwise_sum;

/// How the order study advances along the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderMode {
    /// First-order DDIM steps with the oracle noise.
    Ddim,
    /// Exact closed-form transport, stepped interval by interval.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderReport {
    /// `(N, mean endpoint error)` per grid size.
    pub errors: Vec<(usize, f64)>,
    /// Least-squares slope of `log(error)` against `log(1/N)`; `None` when
    /// errors are at round-off level.
    pub slope: Option<f64>,
    pub monotone: bool,
}

/// Endpoint error of full-trajectory solves from `T` to `t_min` against the
/// closed-form flow, for each `N` in `n_list`.
pub fn order_study(
    oracle: &GaussianOracle<f64>,
    schedule: &NoiseSchedule<f64>,
    n_list: &[usize],
    mode: OrderMode,
    samples: usize,
    seed: u64,
) -> Result<OrderReport> {
    if n_list.len() < 3 {
        return Err(Error::domain("order study needs at least three grid sizes"));
    }
    let starts: Vec<Point<f64>> = (0..samples.max(1))
        .map(|i| stream(seed, Purpose::Evaluation, 1, i as u64).normal_point())
        .collect();
    let eps = OracleEps { oracle: *oracle, schedule: *schedule };
    let mut errors = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let grid = TimestepGrid::uniform(schedule, n)?;
        let part = PhasePartition::new(grid, 1, EdgeMode::UniformIndex)?;
        let errs: Vec<f64> = starts
            .iter()
            .map(|&x| {
                let exact = oracle.transport(schedule, x, schedule.t_max, schedule.t_min);
                let got = match mode {
                    OrderMode::Ddim => {
                        solve_k_steps(&eps, x, 0, n, &part, Cond::Null, None, Crossing::Allow, schedule)
                            .expect("grid solve")
                    }
                    OrderMode::Exact => {
                        let g = part.grid();
                        (0..n).rev().fold(x, |x, i| oracle.transport(schedule, x, g.time(i + 1), g.time(i)))
                    }
                };
                dist(got, exact)
            })
            .collect();
        errors.push((n, pairwise_sum(&errs) / errs.len() as f64));
    }
    let monotone = errors.windows(2).all(|w| w[1].1 < w[0].1);
    let slope = if errors.iter().all(|e| e.1 > 1e-12) {
        let pts: Vec<(f64, f64)> = errors.iter().map(|&(n, e)| (-(n as f64).ln(), e.ln())).collect();
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    } else {
        None
    };
    Ok(OrderReport { errors, slope, monotone })
}

/// One verifier line.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub bound: String,
    pub passed: bool,
    pub skipped: Option<String>,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.skipped {
            Some(why) => write!(f, "SKIP {:<28} {why}", self.name),
            None => write!(
                f,
                "{} {:<28} {:.3e} ({})",
                if self.passed { "PASS" } else { "FAIL" },
                self.name,
                self.value,
                self.bound
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremReport {
    pub checks: Vec<Check>,
    pub seed: u64,
}

impl TheoremReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || c.skipped.is_some())
    }
}

impl fmt::Display for TheoremReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Max `|phase_map - ddim_step|` over random `(eps, x, t, s)`.
pub fn phase_map_ddim_deviation(tuples: usize, seed: u64) -> f64 {
    let s = NoiseSchedule::<f64>::default();
    (0..tuples)
        .map(|i| {
            let mut r = stream(seed, Purpose::Evaluation, 2, i as u64);
            let t = r.uniform_in(s.t_min, s.t_max);
            let u = r.uniform_in(s.t_min, t);
            let x = r.normal_point();
            let e = r.normal_point();
            let a = phase_map(e, x, t, u, &s, None);
            let b = ddim_step(e, x, t, u, &s);
            (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
        })
        .fold(0.0, f64::max)
}

/// Max deviation between both sides of the guidance composition identity.
pub fn cfg_identity_deviation(tuples: usize, seed: u64) -> f64 {
    (0..tuples)
        .map(|i| {
            let mut r = stream(seed, Purpose::Evaluation, 3, i as u64);
            let c = r.normal_point();
            let n = r.normal_point();
            let z = r.normal_point();
            let w = r.uniform_in(1.0, 3.0);
            let w2 = r.uniform_in(0.5, 3.0);
            let (l, rr) = cfg_composition_identity::<f64>(c, n, z, w, w2);
            (l[0] - rr[0]).abs().max((l[1] - rr[1]).abs())
        })
        .fold(0.0, f64::max)
}

/// Max `|f^m(x, s_m) - x|` over all phases of a random default-size network.
pub fn boundary_deviation(points: usize, phases: usize, seed: u64) -> Result<f64> {
    let s = NoiseSchedule::<f64>::default();
    let grid = TimestepGrid::uniform(&s, 50)?;
    let p = PhasePartition::new(grid, phases, EdgeMode::UniformIndex)?;
    let net = EpsilonNet::<f64>::init(NetSpec::epsilon(2), seed)?;
    let mut worst: f64 = 0.0;
    for i in 0..points {
        let mut r = stream(seed, Purpose::Evaluation, 4, i as u64);
        let x: Point<f64> = r.normal_point();
        let c = Cond::Class(r.below(2));
        for m in 0..phases {
            let y = consistency_in_phase(&net, [3.0 * x[0], 3.0 * x[1]], p.edge_time(m), m, &p, c, &s, None)?;
            worst = worst.max((y[0] - 3.0 * x[0]).abs()).max((y[1] - 3.0 * x[1]).abs());
        }
    }
    Ok(worst)
}

/// Discriminator plateaus for the two pairings of the adversarial demo.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialDemo {
    /// Hinge loss when both branches come from the self-consistent model.
    pub consistent_pairing: f64,
    /// Hinge loss when the real branch is re-noised data of a shifted mixture.
    pub shifted_data_pairing: f64,
    pub steps: usize,
    pub seed: u64,
}

/// Trains a fresh discriminator on freshly drawn pairs each step and
/// returns the mean pre-update loss over the last quarter of training.
fn discriminator_plateau(
    make: &(dyn Fn(u64) -> Vec<AdvPair<f64>> + Sync),
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let spec = NetSpec { hidden: vec![32, 32], ..NetSpec::discriminator(1) };
    let mut d = Discriminator::<f64>::init(spec, seed)?;
    let np = d.net().num_params();
    let mut opt = Adam::new(np);
    let tail = (steps / 4).max(1);
    let mut hist = Vec::with_capacity(tail);
    for step in 0..steps {
        let pairs = make(step as u64);
        let net = d.net();
        let (l, mut g, _) = chunked_reduce(
            pairs.len(),
            || (0.0, vec![0.0; np], net.workspace()),
            |acc, i| {
                acc.0 += crate::distill::disc_pair_grad(net, &pairs[i], &mut acc.2, &mut acc.1);
            },
            |a, b| {
                a.0 += b.0;
                add_into(&mut a.1, &b.1);
            },
        );
        let inv = 1.0 / pairs.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        if step + tail >= steps {
            hist.push(l * inv);
        }
        opt.step(d.net_mut().params_mut(), &g, lr)?;
    }
    Ok(hist.iter().sum::<f64>() / hist.len() as f64)
}

/// At the closed-form self-consistent student for Gaussian data, trains a
/// discriminator on (a) the consistency pairing and (b) the student branch
/// against re-noised samples of the same Gaussian shifted by `shift`.
pub fn adversarial_demo(shift: f64, steps: usize, batch: usize, seed: u64) -> Result<AdversarialDemo> {
    let s = NoiseSchedule::<f64>::default();
    let grid = TimestepGrid::uniform(&s, 50)?;
    let p = PhasePartition::new(grid, 4, EdgeMode::UniformIndex)?;
    let o = GaussianOracle::new([1.0, -0.5], 0.25)?;
    let shifted = GaussianOracle::new([1.0 + shift, -0.5], 0.25)?;
    let teacher = OracleEps { oracle: o, schedule: s };
    let student = GaussianPhaseStudent { oracle: o, schedule: s, partition: p.clone(), target: OptimalTarget::TeacherGrid };
    let data = o.as_mixture();
    let other = shifted.as_mixture();
    let cfg = DistillConfig { mode: Mode::PcdStar, drop_ratio: 0.0, ..DistillConfig::default() };
    let pairs = |step: u64, shifted_real: bool| -> Vec<AdvPair<f64>> {
        (0..batch)
            .map(|i| {
                let mut rng = stream(seed, Purpose::DistillBatch, step, i as u64);
                let smp = draw_sample(&data, &p, &s, &cfg, &mut rng);
                let mut adv = stream(seed, Purpose::Custom(7), step, i as u64);
                let pair = crate::distill::adversarial_pair(
                    &student,
                    &student,
                    &teacher,
                    std::slice::from_ref(&smp),
                    &p,
                    &s,
                    None,
                    |_| stream(seed, Purpose::Adversarial, step, i as u64),
                )
                .expect("in-phase sample")[0];
                if shifted_real {
                    let x0 = other.draw(0, &mut adv);
                    let z = adv.normal_point();
                    AdvPair { real: forward_diffuse(&s, x0, pair.s, z), ..pair }
                } else {
                    pair
                }
            })
            .collect()
    };
    let consistent = discriminator_plateau(&|k| pairs(k, false), steps, 1e-3, seed)?;
    let gan = discriminator_plateau(&|k| pairs(k, true), steps, 1e-3, seed)?;
    Ok(AdversarialDemo { consistent_pairing: consistent, shifted_data_pairing: gan, steps, seed })
}

/// Settings for [`verify_theorems`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub tuples: usize,
    pub boundary_points: usize,
    /// Run the discriminator demonstration (a few seconds).
    pub adversarial: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, tuples: 10_000, boundary_points: 1000, adversarial: true }
    }
}

fn check(name: &'static str, value: f64, passed: bool, bound: impl Into<String>) -> Check {
    Check { name, value, bound: bound.into(), passed, skipped: None }
}

/// Runs every executable identity and property check.
pub fn verify_theorems(opts: &VerifyOptions) -> Result<TheoremReport> {
    let mut checks = Vec::new();
    let d3 = phase_map_ddim_deviation(opts.tuples, opts.seed);
    checks.push(check("phase-map-equals-ddim", d3, d3 < 1e-10, "< 1e-10"));
    let d4 = cfg_identity_deviation(opts.tuples, opts.seed);
    checks.push(check("guidance-composition", d4, d4 < 1e-12, "< 1e-12"));
    let db = boundary_deviation(opts.boundary_points, 4, opts.seed)?;
    checks.push(check("boundary-condition", db, db < 1e-12, "< 1e-12"));
    let s = NoiseSchedule::default();
    let o = GaussianOracle::new([1.0, -0.5], 0.25)?;
    let order = order_study(&o, &s, &[10, 20, 40, 80, 160], OrderMode::Ddim, 256, opts.seed)?;
    let slope = order.slope.unwrap_or(f64::NAN);
    checks.push(check(
        "ddim-first-order",
        slope,
        order.monotone && (0.8..=1.2).contains(&slope),
        "slope in [0.8, 1.2], monotone",
    ));
    if opts.adversarial {
        let demo = adversarial_demo(6.0, 400, 256, opts.seed)?;
        let a = demo.consistent_pairing;
        checks.push(check("consistent-pairing-plateau", a, (a - 2.0).abs() <= 0.1, "2 +- 0.1"));
        let b = demo.shifted_data_pairing;
        checks.push(check("shifted-data-separable", b, b <= 1.5, "<= 1.5"));
    } else {
        for name in ["consistent-pairing-plateau", "shifted-data-separable"] {
            checks.push(Check {
                name,
                value: f64::NAN,
                bound: String::new(),
                passed: false,
                skipped: Some("adversarial demonstration disabled".into()),
            });
        }
    }
    Ok(TheoremReport { checks, seed: opts.seed })
}
