//! Continuous variance-preserving noise schedule, timestep grids and phase
//! partitions.
//!
//! The schedule uses a linear rate `beta(t) = beta_min + (beta_max - beta_min) t`,
//! which gives closed forms for every quantity:
//!
//! ```text
//! B(t)     = beta_min t + (beta_max - beta_min) t^2 / 2
//! alpha(t) = exp(-B(t) / 2)
//! sigma(t) = sqrt(1 - exp(-B(t)))
//! lambda   = ln(alpha / sigma)
//! ```
//!
//! and `lambda -> t` inverts through `B = ln(1 + exp(-2 lambda))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Variance-preserving schedule on `[t_min, t_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule<S> {
    pub t_min: S,
    pub t_max: S,
    pub beta_min: S,
    pub beta_max: S,
}

impl<S: Scalar> Default for NoiseSchedule<S> {
    fn default() -> Self {
        Self {
            t_min: lit(1e-3),
            t_max: S::one(),
            beta_min: lit(0.1),
            beta_max: lit(20.0),
        }
    }
}

impl<S: Scalar> NoiseSchedule<S> {
    pub fn new(t_min: S, t_max: S, beta_min: S, beta_max: S) -> Result<Self> {
        let ok = t_min > S::zero()
            && t_max > t_min
            && beta_min > S::zero()
            && beta_max >= beta_min
            && [t_min, t_max, beta_min, beta_max].iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::config(format!(
                "invalid schedule: t in [{t_min}, {t_max}], beta in [{beta_min}, {beta_max}]"
            )));
        }
        Ok(Self {
            t_min,
            t_max,
            beta_min,
            beta_max,
        })
    }

    pub fn beta(&self, t: S) -> S {
        self.beta_min + (self.beta_max - self.beta_min) * t
    }

    /// `B(t) = \int_0^t beta(u) du`.
    pub fn beta_integral(&self, t: S) -> S {
        self.beta_min * t + lit::<S>(0.5) * (self.beta_max - self.beta_min) * t * t
    }

    fn check_time(&self, t: S) -> Result<()> {
        if t.is_finite() && t >= S::zero() && t <= self.t_max {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "time {t} outside [0, {}]",
                self.t_max
            )))
        }
    }

    /// `(alpha_t, sigma_t)` for `t` in `[0, t_max]`.
    pub fn alpha_sigma(&self, t: S) -> Result<(S, S)> {
        self.check_time(t)?;
        Ok(self.coeffs(t))
    }

    /// Unchecked `(alpha_t, sigma_t)`; callers guarantee the range.
    #[inline]
    pub fn coeffs(&self, t: S) -> (S, S) {
        let b = self.beta_integral(t);
        let alpha = (-lit::<S>(0.5) * b).exp();
        let sigma = (-(-b).exp_m1()).sqrt();
        (alpha, sigma)
    }

    #[inline]
    pub fn alpha(&self, t: S) -> S {
        self.coeffs(t).0
    }

    #[inline]
    pub fn sigma(&self, t: S) -> S {
        self.coeffs(t).1
    }

    /// `lambda_t = ln(alpha_t / sigma_t)`, defined for `t` in `(0, t_max]`.
    pub fn log_snr(&self, t: S) -> Result<S> {
        self.check_time(t)?;
        if t <= S::zero() {
            return Err(Error::domain("log-SNR is infinite at t = 0"));
        }
        Ok(self.lambda(t))
    }

    #[inline]
    pub(crate) fn lambda(&self, t: S) -> S {
        let b = self.beta_integral(t);
        -lit::<S>(0.5) * b - lit::<S>(0.5) * (-(-b).exp_m1()).ln()
    }

    /// `e^{-lambda_t} = sigma_t / alpha_t`.
    #[inline]
    pub(crate) fn noise_to_signal(&self, t: S) -> S {
        let (a, s) = self.coeffs(t);
        s / a
    }

    /// Smallest log-SNR reachable on `(0, t_max]`.
    pub fn lambda_min(&self) -> S {
        self.lambda(self.t_max)
    }

    /// Inverse of [`log_snr`](Self::log_snr): the time with log-SNR `lambda`.
    pub fn t_of_log_snr(&self, lambda: S) -> Result<S> {
        if !lambda.is_finite() || lambda < self.lambda_min() {
            return Err(Error::domain(format!(
                "log-SNR {lambda} not reachable (minimum {})",
                self.lambda_min()
            )));
        }
        // B = softplus(-2 lambda), computed without overflow.
        let z = -lit::<S>(2.0) * lambda;
        let b = if z > S::zero() {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        };
        let d = self.beta_max - self.beta_min;
        let root = (self.beta_min * self.beta_min + lit::<S>(2.0) * d * b).sqrt();
        let t = lit::<S>(2.0) * b / (self.beta_min + root);
        Ok(t.min(self.t_max))
    }

    /// Drift coefficient `f_t = d log(alpha_t) / dt`.
    pub fn drift(&self, t: S) -> S {
        -lit::<S>(0.5) * self.beta(t)
    }

    /// Squared diffusion coefficient `g_t^2 = d sigma_t^2/dt - 2 f_t sigma_t^2`.
    pub fn diffusion_sq(&self, t: S) -> S {
        let (alpha, sigma) = self.coeffs(t);
        let dsigma2 = self.beta(t) * alpha * alpha;
        dsigma2 - lit::<S>(2.0) * self.drift(t) * sigma * sigma
    }
}

/// Ordered discretization `t_0 = t_min < ... < t_N = t_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepGrid<S> {
    times: Vec<S>,
}

impl<S: Scalar> TimestepGrid<S> {
    /// `n` sub-intervals spaced uniformly in `t`.
    pub fn uniform(schedule: &NoiseSchedule<S>, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("grid needs at least one interval"));
        }
        let span = schedule.t_max - schedule.t_min;
        let nn = lit::<S>(n as f64);
        let mut times: Vec<S> = (0..=n)
            .map(|i| schedule.t_min + span * lit::<S>(i as f64) / nn)
            .collect();
        times[n] = schedule.t_max;
        Ok(Self { times })
    }

    pub fn from_times(schedule: &NoiseSchedule<S>, times: Vec<S>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::config("grid needs at least two times"));
        }
        if times[0] != schedule.t_min || times[times.len() - 1] != schedule.t_max {
            return Err(Error::config("grid endpoints must equal the schedule range"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("grid times must be strictly increasing"));
        }
        Ok(Self { times })
    }

    /// Number of sub-intervals `N`.
    pub fn intervals(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[S] {
        &self.times
    }

    #[inline]
    pub fn time(&self, i: usize) -> S {
        self.times[i]
    }

    /// Index of a grid member within a relative tolerance.
    pub fn index_of(&self, t: S) -> Option<usize> {
        let tol = lit::<S>(1e-12) * (S::one() + t.abs());
        self.times.iter().position(|&g| (g - t).abs() <= tol)
    }
}

/// How edge timesteps are selected.
#[derive(Debug, Clone, PartialEq)]
pub enum EdgeMode<S> {
    /// Edges at grid indices `round(j N / M)`.
    UniformIndex,
    /// Edges given as times; each must be a grid member and include both ends.
    Explicit(Vec<S>),
}

/// A grid together with `M + 1` edge indices splitting it into `M` phases.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePartition<S> {
    grid: TimestepGrid<S>,
    edges: Vec<usize>,
}

impl<S: Scalar> PhasePartition<S> {
    pub fn new(grid: TimestepGrid<S>, phases: usize, mode: EdgeMode<S>) -> Result<Self> {
        let n = grid.intervals();
        if phases == 0 || phases > n {
            return Err(Error::config(format!(
                "phase count {phases} must lie in [1, {n}]"
            )));
        }
        let edges = match mode {
            EdgeMode::UniformIndex => (0..=phases)
                .map(|j| (2 * j * n + phases) / (2 * phases))
                .collect(),
            EdgeMode::Explicit(times) => {
                if times.len() != phases + 1 {
                    return Err(Error::config(format!(
                        "{} explicit edges given for {phases} phases",
                        times.len()
                    )));
                }
                times
                    .iter()
                    .map(|&t| {
                        grid.index_of(t)
                            .ok_or_else(|| Error::config(format!("edge {t} is not a grid time")))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Self::from_indices(grid, edges)
    }

    pub fn from_indices(grid: TimestepGrid<S>, edges: Vec<usize>) -> Result<Self> {
        let n = grid.intervals();
        if edges.len() < 2 || edges[0] != 0 || edges[edges.len() - 1] != n {
            return Err(Error::config(format!(
                "edges must start at 0 and end at {n}, got {edges:?}"
            )));
        }
        if edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(format!(
                "edges must be strictly increasing without duplicates, got {edges:?}"
            )));
        }
        Ok(Self { grid, edges })
    }

    pub fn grid(&self) -> &TimestepGrid<S> {
        &self.grid
    }

    pub fn edges(&self) -> &[usize] {
        &self.edges
    }

    /// Number of phases `M`.
    pub fn phases(&self) -> usize {
        self.edges.len() - 1
    }

    /// Edge time `s_m`, `m` in `0..=M`.
    pub fn edge_time(&self, m: usize) -> S {
        self.grid.time(self.edges[m])
    }

    /// Grid index range `(lo, hi)` of phase `m` (inclusive on both ends).
    pub fn phase_bounds(&self, m: usize) -> (usize, usize) {
        (self.edges[m], self.edges[m + 1])
    }

    /// Phase containing `t`. A time equal to an interior edge `s_m` belongs to
    /// phase `m - 1`, whose trajectory it starts; `s_0` belongs to phase 0.
    pub fn phase_of(&self, t: S) -> Result<usize> {
        let lo = self.edge_time(0);
        let hi = self.edge_time(self.phases());
        if !(t >= lo && t <= hi) {
            return Err(Error::domain(format!("time {t} outside [{lo}, {hi}]")));
        }
        let m = (1..=self.phases())
            .find(|&j| t <= self.edge_time(j))
            .map(|j| j - 1)
            .unwrap_or(self.phases() - 1);
        Ok(m)
    }

    /// Phase of the grid interval `[t_n, t_{n+1}]`.
    pub fn phase_of_interval(&self, n: usize) -> usize {
        debug_assert!(n < self.grid.intervals());
        self.edges[1..]
            .iter()
            .position(|&e| n < e)
            .expect("interval inside grid")
    }
}
