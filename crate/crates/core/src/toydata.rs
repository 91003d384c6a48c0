//! Conditional 2-D mixtures, forward diffusion and closed-form Gaussian
//! oracles.

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, Stream};
use crate::scalar::{add, axpby, lit, sub, Point, Scalar};
use crate::schedule::NoiseSchedule;

/// One Gaussian component of a class-conditional mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component<S> {
    pub mean: Point<S>,
    /// Symmetric positive-definite covariance.
    pub cov: [[S; 2]; 2],
    pub weight: S,
}

impl<S: Scalar> Component<S> {
    pub fn isotropic(mean: Point<S>, std: S, weight: S) -> Self {
        let v = std * std;
        Self {
            mean,
            cov: [[v, S::zero()], [S::zero(), v]],
            weight,
        }
    }

    /// Lower Cholesky factor `[l00, l10, l11]`.
    fn cholesky(&self) -> [S; 3] {
        let l00 = self.cov[0][0].sqrt();
        let l10 = self.cov[1][0] / l00;
        let l11 = (self.cov[1][1] - l10 * l10).sqrt();
        [l00, l10, l11]
    }
}

/// Class-conditional Gaussian mixture; `classes[c]` lists the components of
/// class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec<S> {
    classes: Vec<Vec<Component<S>>>,
}

impl<S: Scalar> MixtureSpec<S> {
    pub fn new(classes: Vec<Vec<Component<S>>>) -> Result<Self> {
        if classes.is_empty() || classes.iter().any(|c| c.is_empty()) {
            return Err(Error::config("every class needs at least one component"));
        }
        for (c, comps) in classes.iter().enumerate() {
            let total: S = comps.iter().map(|k| k.weight).sum();
            if comps.iter().any(|k| !(k.weight > S::zero()))
                || (total - S::one()).abs() > lit(1e-9)
            {
                return Err(Error::config(format!(
                    "class {c} weights must be positive and sum to 1 (sum {total})"
                )));
            }
            for k in comps {
                let [[a, b], [b2, d]] = k.cov;
                let spd = a > S::zero() && (b - b2).abs() <= lit(1e-12) && a * d - b * b > S::zero();
                if !spd {
                    return Err(Error::config(format!(
                        "class {c} covariance {:?} is not symmetric positive definite",
                        k.cov
                    )));
                }
            }
        }
        Ok(Self { classes })
    }

    /// `modes` isotropic components evenly spaced on a circle, assigned to
    /// classes round-robin (mode `k` goes to class `k % classes`).
    pub fn ring(modes: usize, radius: S, std: S, classes: usize) -> Result<Self> {
        if classes == 0 || modes < classes {
            return Err(Error::config(format!(
                "ring needs at least one mode per class ({modes} modes, {classes} classes)"
            )));
        }
        let mut out: Vec<Vec<Component<S>>> = vec![Vec::new(); classes];
        for k in 0..modes {
            let ang = lit::<S>(std::f64::consts::TAU * k as f64 / modes as f64);
            let mean = [radius * ang.cos(), radius * ang.sin()];
            out[k % classes].push(Component::isotropic(mean, std, S::one()));
        }
        for comps in &mut out {
            let w = S::one() / lit::<S>(comps.len() as f64);
            for k in comps.iter_mut() {
                k.weight = w;
            }
        }
        Self::new(out)
    }

    /// Default benchmark: 8 modes of std 0.1 on a radius-2 circle, 2 classes.
    pub fn benchmark() -> Self {
        Self::ring(8, lit(2.0), lit(0.1), 2).expect("valid benchmark")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn components(&self, c: usize) -> &[Component<S>] {
        &self.classes[c]
    }

    /// Every component mean tagged with its class.
    pub fn modes(&self) -> Vec<(usize, Point<S>)> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(c, comps)| comps.iter().map(move |k| (c, k.mean)))
            .collect()
    }

    /// Draws one point of class `c` from `rng`.
    pub fn draw(&self, c: usize, rng: &mut Stream) -> Point<S> {
        let comps = &self.classes[c];
        let u: S = rng.uniform();
        let mut acc = S::zero();
        let mut pick = comps.len() - 1;
        for (i, k) in comps.iter().enumerate() {
            acc = acc + k.weight;
            if u < acc {
                pick = i;
                break;
            }
        }
        let k = &comps[pick];
        let [l00, l10, l11] = k.cholesky();
        let z: Point<S> = rng.normal_point();
        [k.mean[0] + l00 * z[0], k.mean[1] + l10 * z[0] + l11 * z[1]]
    }

    /// `n` i.i.d. draws of class `c`; draw `i` uses its own stream.
    pub fn sample_data(&self, c: usize, n: usize, seed: u64) -> Result<Vec<Point<S>>> {
        if c >= self.classes.len() {
            return Err(Error::domain(format!(
                "class {c} out of range for {} classes",
                self.classes.len()
            )));
        }
        Ok((0..n)
            .map(|i| self.draw(c, &mut stream(seed, Purpose::DataSample, c as u64, i as u64)))
            .collect())
    }

    /// Mean of class `c`.
    pub fn class_mean(&self, c: usize) -> Point<S> {
        self.classes[c]
            .iter()
            .fold([S::zero(); 2], |acc, k| add(acc, [k.weight * k.mean[0], k.weight * k.mean[1]]))
    }

    /// Per-coordinate RMS standard deviation of the class-balanced data
    /// distribution, `sqrt(trace(Cov) / 2)`.
    pub fn data_std(&self) -> S {
        let nc = lit::<S>(self.classes.len() as f64);
        let mut mean = [S::zero(); 2];
        let mut second = S::zero();
        for comps in &self.classes {
            for k in comps {
                let w = k.weight / nc;
                mean = add(mean, [w * k.mean[0], w * k.mean[1]]);
                second = second
                    + w * (k.cov[0][0] + k.cov[1][1] + k.mean[0] * k.mean[0] + k.mean[1] * k.mean[1]);
            }
        }
        let var = second - (mean[0] * mean[0] + mean[1] * mean[1]);
        (var / lit(2.0)).sqrt()
    }

    /// Index into [`modes`](Self::modes) of the nearest component mean.
    pub fn nearest_mode(&self, x: Point<S>) -> usize {
        let modes = self.modes();
        let mut best = 0;
        let mut best_d = S::infinity();
        for (i, (_, m)) in modes.iter().enumerate() {
            let d = sub(x, *m);
            let d2 = d[0] * d[0] + d[1] * d[1];
            if d2 < best_d {
                best_d = d2;
                best = i;
            }
        }
        best
    }
}

/// `x_t = alpha_t x0 + sigma_t noise`.
#[inline]
pub fn forward_diffuse<S: Scalar>(
    schedule: &NoiseSchedule<S>,
    x0: Point<S>,
    t: S,
    noise: Point<S>,
) -> Point<S> {
    let (a, s) = schedule.coeffs(t);
    axpby(a, x0, s, noise)
}

/// Forward transition from time `s` to `t >= s`:
/// `x_t = (alpha_t/alpha_s) x_s + sqrt(sigma_t^2 - (alpha_t/alpha_s)^2 sigma_s^2) noise`.
#[inline]
pub fn renoise<S: Scalar>(
    schedule: &NoiseSchedule<S>,
    x_s: Point<S>,
    s: S,
    t: S,
    noise: Point<S>,
) -> Point<S> {
    let (a_s, sg_s) = schedule.coeffs(s);
    let (a_t, sg_t) = schedule.coeffs(t);
    let ratio = a_t / a_s;
    let var = (sg_t * sg_t - ratio * ratio * sg_s * sg_s).max(S::zero());
    axpby(ratio, x_s, var.sqrt(), noise)
}

/// Isotropic Gaussian data `N(mean, var I)`: its PF-ODE is linear and solvable
/// in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianOracle<S> {
    pub mean: Point<S>,
    /// Scalar data variance `s^2`.
    pub var: S,
}

impl<S: Scalar> GaussianOracle<S> {
    pub fn new(mean: Point<S>, var: S) -> Result<Self> {
        if !(var > S::zero()) || !var.is_finite() {
            return Err(Error::config(format!("oracle variance must be positive, got {var}")));
        }
        Ok(Self { mean, var })
    }

    /// Standard deviation of the marginal at `t`: `sqrt(alpha^2 s^2 + sigma^2)`.
    pub fn marginal_std(&self, schedule: &NoiseSchedule<S>, t: S) -> S {
        let (a, s) = schedule.coeffs(t);
        (a * a * self.var + s * s).sqrt()
    }

    /// `eps*(x, t) = sigma_t (x - alpha_t mu) / (alpha_t^2 s^2 + sigma_t^2)`.
    pub fn epsilon(&self, schedule: &NoiseSchedule<S>, x: Point<S>, t: S) -> Point<S> {
        let (a, s) = schedule.coeffs(t);
        let k = s / (a * a * self.var + s * s);
        [k * (x[0] - a * self.mean[0]), k * (x[1] - a * self.mean[1])]
    }

    /// Exact PF-ODE transport of `x_t` from time `t` down to `s <= t`.
    pub fn ode_solution(
        &self,
        schedule: &NoiseSchedule<S>,
        x_t: Point<S>,
        t: S,
        s: S,
    ) -> Result<Point<S>> {
        if s > t {
            return Err(Error::domain(format!("target time {s} is after start time {t}")));
        }
        Ok(self.transport(schedule, x_t, t, s))
    }

    #[inline]
    pub(crate) fn transport(&self, schedule: &NoiseSchedule<S>, x_t: Point<S>, t: S, s: S) -> Point<S> {
        let ratio = self.marginal_std(schedule, s) / self.marginal_std(schedule, t);
        let shift = schedule.alpha(s) - schedule.alpha(t) * ratio;
        axpby(ratio, x_t, shift, self.mean)
    }

    /// Log-density of the marginal at `t`.
    pub fn log_density(&self, schedule: &NoiseSchedule<S>, x: Point<S>, t: S) -> S {
        let a = schedule.alpha(t);
        let v = a * a * self.var + schedule.sigma(t).powi(2);
        let d = sub(x, [a * self.mean[0], a * self.mean[1]]);
        -(d[0] * d[0] + d[1] * d[1]) / (lit::<S>(2.0) * v)
            - (lit::<S>(std::f64::consts::TAU) * v).ln()
    }

    /// Single-class mixture with this distribution.
    pub fn as_mixture(&self) -> MixtureSpec<S> {
        MixtureSpec::new(vec![vec![Component::isotropic(self.mean, self.var.sqrt(), S::one())]])
            .expect("valid gaussian")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::dist;

    fn sched() -> NoiseSchedule<f64> {
        NoiseSchedule::default()
    }

    #[test]
    fn near_zero_covariance_collapses_to_mean() {
        let spec = MixtureSpec::new(vec![vec![Component::isotropic([1.5, -0.5], 1e-6, 1.0)]]).unwrap();
        for p in spec.sample_data(0, 100, 3).unwrap() {
            assert!(dist(p, [1.5, -0.5]) < 1e-4);
        }
    }

    #[test]
    fn sample_mean_within_clt_bound() {
        let spec = MixtureSpec::<f64>::benchmark();
        let n = 100_000;
        for c in 0..2 {
            let pts = spec.sample_data(c, n, 11).unwrap();
            let m = spec.class_mean(c);
            // Per-coordinate std of class c: ring radius 2 gives var = 2 + 0.01 per axis.
            let sd = (2.0f64 + 0.01).sqrt();
            for k in 0..2 {
                let emp = pts.iter().map(|p| p[k]).sum::<f64>() / n as f64;
                assert!((emp - m[k]).abs() < 3.0 * sd / (n as f64).sqrt(), "class {c} axis {k}: {emp}");
            }
        }
    }

    #[test]
    fn same_seed_same_batch() {
        let spec = MixtureSpec::<f64>::benchmark();
        assert_eq!(spec.sample_data(1, 64, 5).unwrap(), spec.sample_data(1, 64, 5).unwrap());
        assert_ne!(spec.sample_data(1, 64, 5).unwrap(), spec.sample_data(1, 64, 6).unwrap());
    }

    #[test]
    fn invalid_mixtures_rejected() {
        let bad_w = MixtureSpec::new(vec![vec![Component::isotropic([0.0, 0.0], 1.0, 0.7)]]);
        assert!(matches!(bad_w, Err(Error::Config(_))));
        let bad_cov = MixtureSpec::new(vec![vec![Component {
            mean: [0.0, 0.0],
            cov: [[1.0, 2.0], [2.0, 1.0]],
            weight: 1.0,
        }]]);
        assert!(matches!(bad_cov, Err(Error::Config(_))));
        assert!(MixtureSpec::<f64>::benchmark().sample_data(2, 1, 0).is_err());
    }

    #[test]
    fn forward_diffuse_cases() {
        let s = sched();
        let x0 = [0.3, -1.2];
        let near = forward_diffuse(&s, x0, s.t_min, [0.0, 0.0]);
        assert!(dist(near, x0) < 1e-3);
        let t = 0.4;
        let a = s.alpha(t);
        let no_noise = forward_diffuse(&s, x0, t, [0.0, 0.0]);
        assert_eq!(no_noise, [a * x0[0], a * x0[1]]);
        // Direct formula with (alpha, sigma) = (0.6, 0.8).
        let direct = axpby(0.6, [1.0, 0.0], 0.8, [0.0, 1.0]);
        assert_eq!(direct, [0.6, 0.8]);
    }

    #[test]
    fn renoise_from_zero_matches_forward_diffuse() {
        let s = sched();
        let x = [0.5, 0.25];
        let z = [0.1, -0.3];
        let a = renoise(&s, x, 0.0, 0.6, z);
        let b = forward_diffuse(&s, x, 0.6, z);
        assert!(dist(a, b) < 1e-14);
        assert_eq!(renoise(&s, x, 0.3, 0.3, z), x);
    }

    #[test]
    fn oracle_epsilon_cases() {
        let s = sched();
        let o = GaussianOracle::new([1.0, -0.5], 0.04).unwrap();
        let t = 0.35;
        let a = s.alpha(t);
        let centre = o.epsilon(&s, [a * 1.0, a * -0.5], t);
        assert_eq!(centre, [0.0, 0.0]);

        let unit = GaussianOracle::new([1.0, -0.5], 1.0).unwrap();
        let x = [0.2, 0.9];
        let e = unit.epsilon(&s, x, t);
        let sg = s.sigma(t);
        assert!((e[0] - sg * (x[0] - a)).abs() < 1e-12);
        assert!((e[1] - sg * (x[1] + 0.5 * a)).abs() < 1e-12);
    }

    #[test]
    fn oracle_epsilon_matches_log_density_gradient() {
        let s = sched();
        let o = GaussianOracle::new([0.7, 0.1], 0.09).unwrap();
        let h = 1e-5;
        for &t in &[0.01, 0.2, 0.6, 0.99] {
            let x = [0.3, -0.4];
            let e = o.epsilon(&s, x, t);
            for k in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                let score = (o.log_density(&s, xp, t) - o.log_density(&s, xm, t)) / (2.0 * h);
                assert!((e[k] + s.sigma(t) * score).abs() < 1e-8, "t={t}");
            }
        }
    }

    #[test]
    fn oracle_solution_cases() {
        let s = sched();
        let o = GaussianOracle::new([1.0, -0.5], 0.25).unwrap();
        let x = [0.4, 0.4];
        assert_eq!(o.ode_solution(&s, x, 0.5, 0.5).unwrap(), x);
        let (t, u) = (0.8, 0.2);
        let mode = o.ode_solution(&s, [s.alpha(t) * 1.0, s.alpha(t) * -0.5], t, u).unwrap();
        assert!(dist(mode, [s.alpha(u) * 1.0, s.alpha(u) * -0.5]) < 1e-12);
        assert!(matches!(o.ode_solution(&s, x, 0.2, 0.5), Err(Error::Domain(_))));
    }

    fn ddim_oracle_run(o: &GaussianOracle<f64>, x: Point<f64>, t0: f64, t1: f64, steps: usize) -> Point<f64> {
        let s = sched();
        let mut x = x;
        for i in 0..steps {
            let t = t0 + (t1 - t0) * i as f64 / steps as f64;
            let u = t0 + (t1 - t0) * (i + 1) as f64 / steps as f64;
            let e = o.epsilon(&s, x, t);
            let (at, st) = s.coeffs(t);
            let (au, su) = s.coeffs(u);
            x = [
                au * (x[0] - st * e[0]) / at + su * e[0],
                au * (x[1] - st * e[1]) / at + su * e[1],
            ];
        }
        x
    }

    #[test]
    fn oracle_solution_matches_fine_ddim() {
        let s = sched();
        let o = GaussianOracle::new([1.0, -0.5], 0.25).unwrap();
        let (t0, t1) = (0.9, 0.05);
        let x = [0.8, -1.3];
        let exact = o.ode_solution(&s, x, t0, t1).unwrap();
        let coarse = ddim_oracle_run(&o, x, t0, t1, 10_000);
        let fine = ddim_oracle_run(&o, x, t0, t1, 20_000);
        // First-order convergence: halving the step halves the error.
        let (ec, ef) = (dist(coarse, exact), dist(fine, exact));
        assert!(ec < 2e-4 && (ec / ef - 2.0).abs() < 0.05, "{ec} {ef}");
        let extrapolated = [2.0 * fine[0] - coarse[0], 2.0 * fine[1] - coarse[1]];
        assert!(dist(extrapolated, exact) < 1e-5, "{extrapolated:?} vs {exact:?}");
    }

    #[test]
    fn data_std_of_single_gaussian() {
        let o = GaussianOracle::<f64>::new([3.0, 1.0], 0.36).unwrap();
        assert!((o.as_mixture().data_std() - 0.6).abs() < 1e-12);
    }
}
