use crate::error::{Error, Result};
use crate::netkit::{add_into, chunked_reduce, l2_norm, Adam, Cond, EmaTarget, EpsilonNet, Workspace};
use crate::rng::{stream, Purpose};
use crate::scalar::{lit, to_f64, Scalar};
use crate::schedule::NoiseSchedule;
use crate::toydata::{forward_diffuse, MixtureSpec};

use super::config::TeacherConfig;

/// One row of the teacher loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Epsilon-matching trainer with condition dropout.
#[derive(Debug, Clone)]
pub struct TeacherTrainer<S> {
    pub net: EpsilonNet<S>,
    /// Exponential moving average of `net`.
    pub ema: EmaTarget<S>,
    pub opt: Adam<S>,
    pub config: TeacherConfig,
    pub schedule: NoiseSchedule<S>,
    pub data: MixtureSpec<S>,
    pub seed: u64,
}

struct Acc<S> {
    grad: Vec<S>,
    loss: S,
    ws: Workspace<S>,
}

impl<S: Scalar> TeacherTrainer<S> {
    pub fn new(
        data: MixtureSpec<S>,
        schedule: NoiseSchedule<S>,
        config: TeacherConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let spec = config.net.spec(data.num_classes(), 2);
        let net = EpsilonNet::init(spec, seed)?;
        Self::resume(net, Adam::new(0), data, schedule, config, seed)
    }

    /// Continues from existing network and optimizer state.
    pub fn resume(
        net: EpsilonNet<S>,
        opt: Adam<S>,
        data: MixtureSpec<S>,
        schedule: NoiseSchedule<S>,
        config: TeacherConfig,
        seed: u64,
    ) -> Result<Self> {
        if net.net().spec().classes != data.num_classes() {
            return Err(Error::config("teacher class count differs from the data"));
        }
        let n = net.net().num_params();
        let opt = if opt.moments().0.len() == n { opt } else { Adam::new(n) };
        let ema = EmaTarget::from_student(&net);
        Ok(Self { net, ema, opt, config, schedule, data, seed })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step_count()
    }

    /// One optimizer step; on a non-finite loss the state is left untouched.
    pub fn step(&mut self) -> Result<TeacherRow> {
        let step = self.opt.step_count();
        let batch = self.config.batch;
        let classes = self.data.num_classes();
        let drop = lit::<S>(self.config.cond_dropout);
        let net = &self.net;
        let np = net.net().num_params();
        let acc = chunked_reduce(
            batch,
            || Acc { grad: vec![S::zero(); np], loss: S::zero(), ws: net.net().workspace() },
            |acc, i| {
                let mut rng = stream(self.seed, Purpose::TeacherBatch, step, i as u64);
                let k = rng.below(classes);
                let x0 = self.data.draw(k, &mut rng);
                let c = if rng.uniform::<S>() < drop { Cond::Null } else { Cond::Class(k) };
                let t = rng.uniform_in(self.schedule.t_min, self.schedule.t_max);
                let z = rng.normal_point();
                let xt = forward_diffuse(&self.schedule, x0, t, z);
                let e = net.predict_traced(&xt, t, c, &mut acc.ws);
                let d = [e[0] - z[0], e[1] - z[1]];
                acc.loss = acc.loss + d[0] * d[0] + d[1] * d[1];
                let adj = [lit::<S>(2.0) * d[0], lit::<S>(2.0) * d[1]];
                net.net().backward(&mut acc.ws, &adj, Some(&mut acc.grad), None);
            },
            |a, b| {
                add_into(&mut a.grad, &b.grad);
                a.loss = a.loss + b.loss;
            },
        );
        let inv = S::one() / lit(batch as f64);
        let loss = acc.loss * inv;
        let mut grad = acc.grad;
        grad.iter_mut().for_each(|g| *g = *g * inv);
        let grad_norm = l2_norm(&grad);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: step + 1,
                detail: format!("teacher loss {loss}, gradient norm {grad_norm}"),
            });
        }
        self.opt.step(self.net.net_mut().params_mut(), &grad, lit(self.config.lr))?;
        // Warm-up keeps short runs from averaging in the initial weights.
        let n = lit::<S>((step + 1) as f64);
        let mu = lit::<S>(self.config.ema_mu).min((S::one() + n) / (lit::<S>(10.0) + n));
        self.ema.blend(self.net.net().params(), mu);
        Ok(TeacherRow { step: step + 1, loss: to_f64(loss), grad_norm: to_f64(grad_norm) })
    }

    /// The averaged weights used for sampling and distillation.
    pub fn averaged(&self) -> EpsilonNet<S> {
        self.ema.to_net()
    }

    /// Runs the remaining configured iterations, reporting each row.
    pub fn run(&mut self, mut on_row: impl FnMut(&TeacherRow)) -> Result<()> {
        while (self.opt.step_count() as usize) < self.config.iterations {
            let row = self.step()?;
            on_row(&row);
        }
        Ok(())
    }
}

/// Trains a teacher for `config.iterations` steps and returns the averaged
/// weights.
pub fn train_teacher<S: Scalar>(
    data: &MixtureSpec<S>,
    schedule: &NoiseSchedule<S>,
    config: &TeacherConfig,
    seed: u64,
) -> Result<EpsilonNet<S>> {
    let mut tr = TeacherTrainer::new(data.clone(), *schedule, config.clone(), seed)?;
    tr.run(|_| {})?;
    Ok(tr.averaged())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::NetConfig;

    fn small() -> TeacherConfig {
        TeacherConfig {
            iterations: 0,
            batch: 32,
            net: NetConfig { hidden: vec![16, 16], ..NetConfig::default() },
            ..TeacherConfig::default()
        }
    }

    #[test]
    fn zero_iterations_returns_init() {
        let data = MixtureSpec::<f64>::benchmark();
        let s = NoiseSchedule::default();
        let cfg = small();
        let net = train_teacher(&data, &s, &cfg, 3).unwrap();
        let init = EpsilonNet::init(cfg.net.spec(2, 2), 3).unwrap();
        assert_eq!(net, init);
    }

    #[test]
    fn steps_reduce_loss_and_repeat_exactly() {
        let data = MixtureSpec::<f64>::benchmark();
        let s = NoiseSchedule::default();
        let cfg = TeacherConfig { iterations: 150, ..small() };
        let run = || {
            let mut tr = TeacherTrainer::new(data.clone(), s, cfg.clone(), 9).unwrap();
            let mut rows = Vec::new();
            tr.run(|r| rows.push(*r)).unwrap();
            (tr.net, rows)
        };
        let (a, rows) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        let head: f64 = rows[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        let tail: f64 = rows[rows.len() - 20..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn averaging_off_keeps_last_iterate() {
        let data = MixtureSpec::<f64>::benchmark();
        let s = NoiseSchedule::default();
        let mut tr = TeacherTrainer::new(data.clone(), s, TeacherConfig { iterations: 5, ema_mu: 0.0, ..small() }, 2).unwrap();
        tr.run(|_| {}).unwrap();
        assert_eq!(tr.averaged(), tr.net);
        let mut tr = TeacherTrainer::new(data, s, TeacherConfig { iterations: 5, ..small() }, 2).unwrap();
        tr.run(|_| {}).unwrap();
        assert_ne!(tr.averaged(), tr.net);
        assert!(tr.averaged().net().params().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn non_finite_state_reports_divergence() {
        let data = MixtureSpec::<f64>::benchmark();
        let s = NoiseSchedule::default();
        let mut tr = TeacherTrainer::new(data, s, small(), 1).unwrap();
        let last = tr.net.net().num_params() - 1;
        tr.net.net_mut().params_mut()[last] = f64::NAN;
        let before = tr.net.clone();
        assert!(matches!(tr.step(), Err(Error::Diverged { step: 1, .. })));
        assert_eq!(tr.opt.step_count(), 0);
        assert_eq!(tr.net.net().params()[..last], before.net().params()[..last]);
    }
}
