//! Epsilon composition, the DDIM step, the exact-solution phase map and
//! multi-step teacher solving.

use crate::error::{Error, Result};
use crate::netkit::{Cond, EmaTarget, EpsilonNet};
use crate::scalar::{axpby, lit, Point, Scalar};
use crate::schedule::{NoiseSchedule, PhasePartition};
use crate::toydata::GaussianOracle;

/// Anything that predicts noise from `(x, t, c)`.
pub trait EpsModel<S: Scalar>: Sync {
    fn eps(&self, x: &Point<S>, t: S, c: Cond) -> Point<S>;
}

impl<S: Scalar> EpsModel<S> for EpsilonNet<S> {
    #[inline]
    fn eps(&self, x: &Point<S>, t: S, c: Cond) -> Point<S> {
        self.predict(x, t, c)
    }
}

impl<S: Scalar> EpsModel<S> for EmaTarget<S> {
    #[inline]
    fn eps(&self, x: &Point<S>, t: S, c: Cond) -> Point<S> {
        self.predict(x, t, c)
    }
}

impl<S: Scalar, M: EpsModel<S> + ?Sized> EpsModel<S> for &M {
    #[inline]
    fn eps(&self, x: &Point<S>, t: S, c: Cond) -> Point<S> {
        (**self).eps(x, t, c)
    }
}

/// The exact noise of a [`GaussianOracle`]; ignores the condition.
#[derive(Debug, Clone, Copy)]
pub struct OracleEps<S> {
    pub oracle: GaussianOracle<S>,
    pub schedule: NoiseSchedule<S>,
}

impl<S: Scalar> EpsModel<S> for OracleEps<S> {
    #[inline]
    fn eps(&self, x: &Point<S>, t: S, _c: Cond) -> Point<S> {
        self.oracle.epsilon(&self.schedule, *x, t)
    }
}

/// Which trajectory the optimal Gaussian student is consistent with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimalTarget {
    /// The exact PF-ODE flow.
    Exact,
    /// The teacher's DDIM discretization on the partition grid; off-grid
    /// times fall back to the exact flow.
    TeacherGrid,
}

/// Closed-form optimal phased student for Gaussian data: at `t` in phase `m`
/// it predicts the weighted-integral noise that makes the phase map land on
/// the chosen trajectory's point at `s_m`.
#[derive(Debug, Clone)]
pub struct GaussianPhaseStudent<S> {
    pub oracle: GaussianOracle<S>,
    pub schedule: NoiseSchedule<S>,
    pub partition: PhasePartition<S>,
    pub target: OptimalTarget,
}

impl<S: Scalar> GaussianPhaseStudent<S> {
    fn landing(&self, x: Point<S>, t: S, m: usize) -> Point<S> {
        let s = self.partition.edge_time(m);
        if self.target == OptimalTarget::TeacherGrid {
            if let Some(i) = self.partition.grid().index_of(t) {
                let lo = self.partition.edges()[m];
                let teacher = OracleEps { oracle: self.oracle, schedule: self.schedule };
                if let Ok(p) = solve_k_steps(
                    &teacher,
                    x,
                    lo,
                    i - lo,
                    &self.partition,
                    Cond::Null,
                    None,
                    Crossing::Forbid,
                    &self.schedule,
                ) {
                    return p;
                }
            }
        }
        self.oracle.transport(&self.schedule, x, t, s)
    }
}

impl<S: Scalar> EpsModel<S> for GaussianPhaseStudent<S> {
    fn eps(&self, x: &Point<S>, t: S, _c: Cond) -> Point<S> {
        let m = match self.partition.phase_of(t) {
            Ok(m) => m,
            Err(_) => return self.oracle.epsilon(&self.schedule, *x, t),
        };
        let s = self.partition.edge_time(m);
        let coef = self.schedule.alpha(s)
            * (self.schedule.noise_to_signal(t) - self.schedule.noise_to_signal(s));
        if coef.abs() <= lit(1e-14) {
            return self.oracle.epsilon(&self.schedule, *x, t);
        }
        let target = self.landing(*x, t, m);
        let r = self.schedule.alpha(s) / self.schedule.alpha(t);
        [(r * x[0] - target[0]) / coef, (r * x[1] - target[1]) / coef]
    }
}

/// Classifier-free guidance parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfgSpec<S> {
    /// Guidance scale.
    pub w: S,
    pub c: Cond,
    /// Negative condition; the null condition for teacher augmentation.
    pub neg: Cond,
}

impl<S: Scalar> CfgSpec<S> {
    pub fn new(w: S, c: Cond, neg: Cond) -> Result<Self> {
        if !(w > S::zero()) || !w.is_finite() {
            return Err(Error::config(format!("guidance scale must be positive, got {w}")));
        }
        Ok(Self { w, c, neg })
    }

    /// Teacher augmentation `eps(null) + w (eps(c) - eps(null))`, `w >= 1`.
    pub fn teacher(w: S, c: Cond) -> Result<Self> {
        if !(w >= S::one()) {
            return Err(Error::config(format!("teacher guidance scale must be >= 1, got {w}")));
        }
        Ok(Self { w, c, neg: Cond::Null })
    }
}

/// `e_neg + w (e_c - e_neg)`.
#[inline]
pub fn cfg_combine<S: Scalar>(e_c: Point<S>, e_neg: Point<S>, w: S) -> Point<S> {
    [
        e_neg[0] + w * (e_c[0] - e_neg[0]),
        e_neg[1] + w * (e_c[1] - e_neg[1]),
    ]
}

/// Guided prediction; `w = 1` returns the conditional prediction as is.
pub fn cfg_epsilon<S: Scalar, M: EpsModel<S> + ?Sized>(
    model: &M,
    x: &Point<S>,
    t: S,
    spec: &CfgSpec<S>,
) -> Point<S> {
    let e_c = model.eps(x, t, spec.c);
    if spec.w == S::one() || spec.c == spec.neg {
        return e_c;
    }
    let e_neg = model.eps(x, t, spec.neg);
    cfg_combine(e_c, e_neg, spec.w)
}

/// First-order DDIM step `x_s = alpha_s (x_t - sigma_t eps) / alpha_t + sigma_s eps`.
#[inline]
pub fn ddim_step<S: Scalar>(
    eps: Point<S>,
    x_t: Point<S>,
    t: S,
    s: S,
    schedule: &NoiseSchedule<S>,
) -> Point<S> {
    debug_assert!(s <= t, "ddim_step runs backward in time");
    let (a_t, sg_t) = schedule.coeffs(t);
    let (a_s, sg_s) = schedule.coeffs(s);
    [
        a_s * (x_t[0] - sg_t * eps[0]) / a_t + sg_s * eps[0],
        a_s * (x_t[1] - sg_t * eps[1]) / a_t + sg_s * eps[1],
    ]
}

/// Lower bound on the `alpha_t` divisor of the data prediction at `s = t_min`.
pub const DEFAULT_CLIP_FLOOR: f64 = 0.5;

fn clip_active<S: Scalar>(s: S, schedule: &NoiseSchedule<S>, clip: Option<S>) -> Option<S> {
    clip.filter(|_| s <= schedule.t_min)
}

/// Data prediction `(x_t - sigma_t eps) / alpha_t`, the divisor floored at
/// `clip` when given.
#[inline]
pub fn x0_prediction<S: Scalar>(
    eps: Point<S>,
    x_t: Point<S>,
    t: S,
    schedule: &NoiseSchedule<S>,
    clip: Option<S>,
) -> Point<S> {
    let (a_t, sg_t) = schedule.coeffs(t);
    let div = clip.map_or(a_t, |f| a_t.max(f));
    [(x_t[0] - sg_t * eps[0]) / div, (x_t[1] - sg_t * eps[1]) / div]
}

/// Exact-solution parameterization
/// `x_s = (alpha_s/alpha_t) x_t - alpha_s eps (e^{-lambda_t} - e^{-lambda_s})`.
/// With `clip`, a target of `s = t_min` uses the floored data prediction.
#[inline]
pub fn phase_map<S: Scalar>(
    eps: Point<S>,
    x_t: Point<S>,
    t: S,
    s: S,
    schedule: &NoiseSchedule<S>,
    clip: Option<S>,
) -> Point<S> {
    debug_assert!(s <= t, "phase_map runs backward in time");
    if let Some(floor) = clip_active(s, schedule, clip) {
        let x0 = x0_prediction(eps, x_t, t, schedule, Some(floor));
        let (a_s, sg_s) = schedule.coeffs(s);
        return axpby(a_s, x0, sg_s, eps);
    }
    let (a_t, sg_t) = schedule.coeffs(t);
    let (a_s, sg_s) = schedule.coeffs(s);
    let integral = sg_t / a_t - sg_s / a_s;
    let k = a_s * integral;
    let r = a_s / a_t;
    [r * x_t[0] - k * eps[0], r * x_t[1] - k * eps[1]]
}

/// `d phase_map / d eps` (a scalar multiple of the identity).
#[inline]
pub fn phase_map_eps_coeff<S: Scalar>(
    t: S,
    s: S,
    schedule: &NoiseSchedule<S>,
    clip: Option<S>,
) -> S {
    let (a_t, sg_t) = schedule.coeffs(t);
    let (a_s, sg_s) = schedule.coeffs(s);
    if let Some(floor) = clip_active(s, schedule, clip) {
        return sg_s - a_s * sg_t / a_t.max(floor);
    }
    -(a_s * (sg_t / a_t - sg_s / a_s))
}

/// Whether a multi-step solve may cross phase edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Crossing {
    Forbid,
    Allow,
}

/// `k` DDIM steps along the grid from `t_{n+k}` down to `t_n`. With `cfg`,
/// every step uses the guided prediction (its `c` replaces `c`).
pub fn solve_k_steps<S: Scalar, M: EpsModel<S> + ?Sized>(
    model: &M,
    x: Point<S>,
    n: usize,
    k: usize,
    partition: &PhasePartition<S>,
    c: Cond,
    cfg: Option<&CfgSpec<S>>,
    crossing: Crossing,
    schedule: &NoiseSchedule<S>,
) -> Result<Point<S>> {
    let grid = partition.grid();
    if n + k > grid.intervals() {
        return Err(Error::domain(format!(
            "solve from index {} exceeds grid of {} intervals",
            n + k,
            grid.intervals()
        )));
    }
    if k == 0 {
        return Ok(x);
    }
    if crossing == Crossing::Forbid
        && partition.phase_of_interval(n) != partition.phase_of_interval(n + k - 1)
    {
        return Err(Error::Contract(format!(
            "solve from t_{} to t_{n} crosses a phase edge",
            n + k
        )));
    }
    let mut x = x;
    for i in (n..n + k).rev() {
        let (t, s) = (grid.time(i + 1), grid.time(i));
        let e = match cfg {
            Some(spec) => cfg_epsilon(model, &x, t, spec),
            None => model.eps(&x, t, c),
        };
        x = ddim_step(e, x, t, s, schedule);
    }
    Ok(x)
}

/// `f^m(x_t, t)` with `m` given explicitly; `t` must lie in phase `m`.
pub fn consistency_in_phase<S: Scalar, M: EpsModel<S> + ?Sized>(
    student: &M,
    x: Point<S>,
    t: S,
    m: usize,
    partition: &PhasePartition<S>,
    c: Cond,
    schedule: &NoiseSchedule<S>,
    clip: Option<S>,
) -> Result<Point<S>> {
    if m >= partition.phases() {
        return Err(Error::domain(format!("phase {m} out of range")));
    }
    let lo = partition.edge_time(m);
    let hi = partition.edge_time(m + 1);
    if !(t >= lo && t <= hi) {
        return Err(Error::domain(format!("time {t} outside phase {m} = [{lo}, {hi}]")));
    }
    let e = student.eps(&x, t, c);
    Ok(phase_map(e, x, t, lo, schedule, clip))
}

/// `f^m(x_t, t)` with `m = phase_of(t)`.
pub fn consistency_function<S: Scalar, M: EpsModel<S> + ?Sized>(
    student: &M,
    x: Point<S>,
    t: S,
    partition: &PhasePartition<S>,
    c: Cond,
    schedule: &NoiseSchedule<S>,
    clip: Option<S>,
) -> Result<Point<S>> {
    let m = partition.phase_of(t)?;
    consistency_in_phase(student, x, t, m, partition, c, schedule, clip)
}

/// `f^{m, m'}`: maps `x_t` (in phase `m`) to the solution point `s_{m'}`,
/// `m' <= m`, through successive per-phase consistency maps.
pub fn compose_phases<S: Scalar, M: EpsModel<S> + ?Sized>(
    student: &M,
    x: Point<S>,
    t: S,
    m: usize,
    m_to: usize,
    partition: &PhasePartition<S>,
    c: Cond,
    schedule: &NoiseSchedule<S>,
    clip: Option<S>,
) -> Result<Point<S>> {
    if m_to > m {
        return Err(Error::domain(format!("cannot compose from phase {m} up to {m_to}")));
    }
    let mut x = consistency_in_phase(student, x, t, m, partition, c, schedule, clip)?;
    for j in (m_to..m).rev() {
        x = consistency_in_phase(student, x, partition.edge_time(j + 1), j, partition, c, schedule, clip)?;
    }
    Ok(x)
}
