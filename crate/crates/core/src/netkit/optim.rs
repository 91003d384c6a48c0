use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

use super::nets::{EmaTarget, EpsilonNet};

/// Adaptive-moment optimizer state with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    m: Vec<S>,
    v: Vec<S>,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: lit(0.9),
            beta2: lit(0.999),
            eps: lit(1e-8),
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[S], &[S]) {
        (&self.m, &self.v)
    }

    /// One update of `params` against `grad`. Rejects non-finite gradients
    /// before touching any state.
    pub fn step(&mut self, params: &mut [S], grad: &[S], lr: S) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer sized for {} parameters, got {} / {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient component {i} is {} at optimizer step {}",
                grad[i],
                self.step + 1
            )));
        }
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let n = lit::<S>(self.step as f64);
        let c1 = S::one() - b1.powf(n);
        let c2 = S::one() - b2.powf(n);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (S::one() - b1) * g;
            *v = b2 * *v + (S::one() - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p = *p - lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Student parameters, their EMA target and optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState<S> {
    pub student: EpsilonNet<S>,
    pub target: EmaTarget<S>,
    pub opt: Adam<S>,
    pub ema_mu: S,
    pub seed: u64,
    /// Index of the next random stream block (one per training step).
    pub stream: u64,
}

impl<S: Scalar> TrainState<S> {
    /// Starts from `student` with `theta^- = theta`.
    pub fn new(student: EpsilonNet<S>, ema_mu: S, seed: u64) -> Self {
        let target = EmaTarget::from_student(&student);
        let opt = Adam::new(student.net().num_params());
        Self {
            student,
            target,
            opt,
            ema_mu,
            seed,
            stream: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.opt.step_count()
    }

    pub fn adam_step(&mut self, grad: &[S], lr: S) -> Result<()> {
        self.opt.step(self.student.net_mut().params_mut(), grad, lr)
    }

    pub fn ema_update(&mut self) {
        let mu = self.ema_mu;
        self.target.blend(self.student.net().params(), mu);
    }

    /// Replaces the EMA target, e.g. when resuming from a checkpoint.
    pub fn set_target(&mut self, net: EpsilonNet<S>) -> Result<()> {
        if net.net().spec() != self.student.net().spec() {
            return Err(Error::Format("target network shape differs from student".into()));
        }
        self.target.replace(net);
        Ok(())
    }
}

pub(crate) const CHUNK: usize = 16;

/// Runs `f` over `0..n` in fixed-size chunks (in parallel), then reduces the
/// per-chunk accumulators with a pairwise tree in chunk order. Results do not
/// depend on the number of worker threads.
pub(crate) fn chunked_reduce<A, I, F, M>(n: usize, init: I, f: F, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) + Sync,
    M: Fn(&mut A, A) + Sync,
{
    let chunks = n.div_ceil(CHUNK).max(1);
    let mut parts: Vec<A> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                f(&mut acc, i);
            }
            acc
        })
        .collect();
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                merge(&mut a, b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().expect("at least one chunk")
}

pub(crate) fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub fn l2_norm<S: Scalar>(v: &[S]) -> S {
    v.iter().fold(S::zero(), |a, &x| a + x * x).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netkit::NetSpec;

    #[test]
    fn zero_gradient_leaves_params_but_counts_step() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut opt = Adam::<f64>::new(3);
        opt.step(&mut p, &[0.0; 3], 1e-3).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = vec![0.0, 0.0, 0.0];
        let g = [0.3, -2.0, 1e-9];
        let lr = 0.01;
        let mut opt = Adam::<f64>::new(3);
        opt.step(&mut p, &g, lr).unwrap();
        // m_hat = g, v_hat = g^2 after bias correction.
        for (pi, gi) in p.iter().zip(g) {
            let expect = -lr * gi / (gi.abs() + 1e-8);
            assert!((pi - expect).abs() < 1e-15, "{pi} vs {expect}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = vec![1.0, 2.0];
        let mut opt = Adam::<f64>::new(2);
        let err = opt.step(&mut p, &[0.1, f64::INFINITY], 1e-3).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn repeated_runs_are_identical() {
        let run = || {
            let mut p = vec![0.2, -0.7, 1.1];
            let mut opt = Adam::<f64>::new(3);
            for k in 0..5 {
                let g: Vec<f64> = p.iter().map(|x| x * 2.0 + k as f64 * 0.1).collect();
                opt.step(&mut p, &g, 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    fn state(mu: f64) -> TrainState<f64> {
        let spec = NetSpec {
            hidden: vec![3],
            ..NetSpec::epsilon(1)
        };
        TrainState::new(EpsilonNet::init(spec, 5).unwrap(), mu, 0)
    }

    #[test]
    fn ema_extremes() {
        let mut s = state(0.0);
        s.student.net_mut().params_mut()[0] += 1.0;
        s.ema_update();
        assert_eq!(s.target.params(), s.student.net().params());

        let mut s = state(1.0);
        let before = s.target.params().to_vec();
        s.student.net_mut().params_mut()[0] += 1.0;
        s.ema_update();
        assert_eq!(s.target.params(), &before[..]);
    }

    #[test]
    fn ema_two_steps_expand_recurrence() {
        let mut s = state(0.99);
        let theta0 = s.target.params().to_vec();
        for p in s.student.net_mut().params_mut() {
            *p = 3.0 * *p + 0.25;
        }
        let theta = s.student.net().params().to_vec();
        s.ema_update();
        s.ema_update();
        for ((e, t0), t) in s.target.params().iter().zip(&theta0).zip(&theta) {
            let expect = 0.9801 * t0 + 0.0199 * t;
            assert!((e - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn chunked_reduce_is_order_fixed() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin() * 1e-3 + 1.0).collect();
        let a = chunked_reduce(v.len(), || 0.0, |acc, i| *acc += v[i], |a, b| *a += b);
        let b = chunked_reduce(v.len(), || 0.0, |acc, i| *acc += v[i], |a, b| *a += b);
        assert_eq!(a.to_bits(), b.to_bits());
        assert!((a - v.iter().sum::<f64>()).abs() < 1e-9);
    }
}
