use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::scalar::{to_f64, Point, Scalar};
use crate::toydata::MixtureSpec;

/// Default number of random projections.
pub const PROJECTIONS: usize = 512;

/// A metric value with the sample size and seed that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

/// Squared 1-D Wasserstein-2 distance between two sorted empirical samples
/// of possibly different sizes, integrating the quantile functions exactly.
fn w2_sq_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut acc = 0.0;
    let mut u = 0.0;
    while i < na && j < nb {
        let ua = (i + 1) as f64 / na as f64;
        let ub = (j + 1) as f64 / nb as f64;
        let next = ua.min(ub);
        let d = a[i] - b[j];
        acc += (next - u) * d * d;
        u = next;
        if ua <= next {
            i += 1;
        }
        if ub <= next {
            j += 1;
        }
    }
    acc
}

/// Sliced Wasserstein-2 distance `sqrt(d * mean_theta W2^2(theta))` over
/// `projections` random unit directions. The `d` factor makes a pure
/// translation by `v` come out as `|v|`.
pub fn sliced_wasserstein<S: Scalar>(
    a: &[Point<S>],
    b: &[Point<S>],
    projections: usize,
    seed: u64,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("sliced Wasserstein needs two non-empty point sets"));
    }
    if projections == 0 {
        return Err(Error::domain("at least one projection is required"));
    }
    let a: Vec<[f64; 2]> = a.iter().map(|p| [to_f64(p[0]), to_f64(p[1])]).collect();
    let b: Vec<[f64; 2]> = b.iter().map(|p| [to_f64(p[0]), to_f64(p[1])]).collect();
    let per: Vec<f64> = (0..projections)
        .into_par_iter()
        .map(|j| {
            let theta: f64 = stream(seed, Purpose::Projection, 0, j as u64)
                .uniform_in(0.0, std::f64::consts::TAU);
            let (s, c) = theta.sin_cos();
            let proj = |pts: &[[f64; 2]]| {
                let mut v: Vec<f64> = pts.iter().map(|p| c * p[0] + s * p[1]).collect();
                v.sort_by(f64::total_cmp);
                v
            };
            w2_sq_sorted(&proj(&a), &proj(&b))
        })
        .collect();
    let mean = pairwise_sum(&per) / projections as f64;
    Ok((2.0 * mean).sqrt())
}

/// Fixed-order pairwise summation.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Mean L2 distance between index-paired points.
pub fn mean_paired_l2<S: Scalar>(a: &[Point<S>], b: &[Point<S>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::domain("paired distance needs equal, non-empty sets"));
    }
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(p, q)| to_f64((p[0] - q[0]).hypot(p[1] - q[1])))
        .collect();
    Ok(pairwise_sum(&d) / a.len() as f64)
}

/// Counts of points per mixture component (nearest mean), in
/// [`MixtureSpec::modes`] order.
pub fn mode_histogram<S: Scalar>(spec: &MixtureSpec<S>, pts: &[Point<S>]) -> Vec<usize> {
    let mut h = vec![0; spec.modes().len()];
    for p in pts {
        h[spec.nearest_mode(*p)] += 1;
    }
    h
}

/// Shannon entropy (nats) of the nearest-mode assignment.
pub fn mode_entropy<S: Scalar>(spec: &MixtureSpec<S>, pts: &[Point<S>]) -> f64 {
    let h = mode_histogram(spec, pts);
    let n = pts.len().max(1) as f64;
    h.iter()
        .filter(|&&k| k > 0)
        .map(|&k| {
            let p = k as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Fraction of points whose nearest mode belongs to class `c`.
pub fn class_fraction<S: Scalar>(spec: &MixtureSpec<S>, pts: &[Point<S>], c: usize) -> f64 {
    let modes = spec.modes();
    let hits = pts.iter().filter(|p| modes[spec.nearest_mode(**p)].0 == c).count();
    hits as f64 / pts.len().max(1) as f64
}

/// Fraction of points within Mahalanobis distance `k` of some component of
/// class `c`. Points between or away from modes count for no class.
pub fn mode_mass<S: Scalar>(spec: &MixtureSpec<S>, pts: &[Point<S>], c: usize, k: f64) -> f64 {
    let comps: Vec<([f64; 2], [[f64; 2]; 2])> = spec
        .components(c)
        .iter()
        .map(|m| {
            let a = m.cov.map(|r| r.map(to_f64));
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
            ([to_f64(m.mean[0]), to_f64(m.mean[1])], inv)
        })
        .collect();
    let hits = pts
        .iter()
        .filter(|p| {
            let x = [to_f64(p[0]), to_f64(p[1])];
            comps.iter().any(|(mu, inv)| {
                let d = [x[0] - mu[0], x[1] - mu[1]];
                let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
                q <= k * k
            })
        })
        .count();
    hits as f64 / pts.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(n: usize, seed: u64, shift: Point<f64>) -> Vec<Point<f64>> {
        (0..n)
            .map(|i| {
                let z: Point<f64> = stream(seed, Purpose::Custom(40), 0, i as u64).normal_point();
                [z[0] + shift[0], z[1] + shift[1]]
            })
            .collect()
    }

    #[test]
    fn identical_sets_are_at_zero() {
        let a = gauss(500, 1, [0.0, 0.0]);
        assert_eq!(sliced_wasserstein(&a, &a, 64, 3).unwrap(), 0.0);
    }

    #[test]
    fn translation_recovers_shift_length() {
        let a = gauss(2000, 2, [0.0, 0.0]);
        let v = [1.5, -2.0];
        let b: Vec<_> = a.iter().map(|p| [p[0] + v[0], p[1] + v[1]]).collect();
        let d = sliced_wasserstein(&a, &b, PROJECTIONS, 4).unwrap();
        assert!((d / 2.5 - 1.0).abs() < 0.05, "{d}");
    }

    #[test]
    fn same_law_bias_is_small() {
        let a = gauss(10_000, 5, [0.0, 0.0]);
        let b = gauss(10_000, 6, [0.0, 0.0]);
        let d = sliced_wasserstein(&a, &b, PROJECTIONS, 7).unwrap();
        assert!(d < 0.05, "{d}");
    }

    #[test]
    fn unequal_sizes_use_exact_quantiles() {
        // {0, 1} vs {0.5}: W2^2 = 0.5 * 0.25 + 0.5 * 0.25.
        assert!((w2_sq_sorted(&[0.0, 1.0], &[0.5]) - 0.25).abs() < 1e-15);
        let a = gauss(300, 8, [0.0, 0.0]);
        let b = gauss(700, 9, [3.0, 0.0]);
        let d = sliced_wasserstein(&a, &b, PROJECTIONS, 1).unwrap();
        assert!((d - 3.0).abs() < 0.3, "{d}");
    }

    #[test]
    fn empty_set_is_a_domain_error() {
        let a = gauss(3, 1, [0.0, 0.0]);
        assert!(matches!(sliced_wasserstein::<f64>(&a, &[], 8, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn mode_statistics() {
        let spec = MixtureSpec::<f64>::benchmark();
        let modes = spec.modes();
        let pts: Vec<Point<f64>> = modes.iter().map(|(_, m)| *m).collect();
        assert_eq!(mode_histogram(&spec, &pts), vec![1; 8]);
        assert!((mode_entropy(&spec, &pts) - (8.0f64).ln()).abs() < 1e-12);
        assert_eq!(class_fraction(&spec, &pts, 0), 0.5);
        let one = vec![modes[0].1; 10];
        assert_eq!(mode_entropy(&spec, &one), 0.0);
    }

    #[test]
    fn mode_mass_ignores_points_between_modes() {
        let spec = MixtureSpec::<f64>::benchmark();
        let m = spec.components(1)[0].mean;
        let pts = vec![m, [m[0] + 0.25, m[1]], [m[0] + 0.35, m[1]], [0.0, 0.0]];
        assert_eq!(mode_mass(&spec, &pts, 1, 3.0), 0.5);
        assert_eq!(mode_mass(&spec, &pts, 0, 3.0), 0.0);
    }
}
