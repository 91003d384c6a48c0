use crate::error::{Error, Result};
use crate::netkit::{
    add_into, chunked_reduce, l2_norm, Adam, Discriminator, EpsilonNet, TrainState, Workspace,
};
use crate::rng::{stream, Purpose};
use crate::scalar::{lit, to_f64, Scalar};
use crate::schedule::{EdgeMode, NoiseSchedule, PhasePartition, TimestepGrid};
use crate::solvers::{phase_map, phase_map_eps_coeff, EpsModel};
use crate::toydata::MixtureSpec;

use super::config::DistillConfig;
use super::loss::{disc_pair_grad, draw_sample, renoise_pair, target_point, LossSettings};

/// One row of the distillation loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub l_pcm: f64,
    pub l_adv_gen: f64,
    pub l_adv_disc: f64,
    pub grad_norm: f64,
}

/// Phased consistency distillation loop: student, EMA target, optional
/// discriminator, and a fixed teacher.
#[derive(Debug, Clone)]
pub struct Distiller<S, T> {
    pub state: TrainState<S>,
    pub disc: Option<(Discriminator<S>, Adam<S>)>,
    pub teacher: T,
    pub data: MixtureSpec<S>,
    pub schedule: NoiseSchedule<S>,
    pub partition: PhasePartition<S>,
    pub config: DistillConfig,
}

/// Builds the uniform-index partition of an `intervals`-step grid.
pub fn make_partition<S: Scalar>(
    schedule: &NoiseSchedule<S>,
    intervals: usize,
    phases: usize,
) -> Result<PhasePartition<S>> {
    let grid = TimestepGrid::uniform(schedule, intervals)?;
    PhasePartition::new(grid, phases, EdgeMode::UniformIndex)
}

struct Acc<S> {
    gs: Vec<S>,
    gd: Vec<S>,
    l_pcm: S,
    l_gen: S,
    l_disc: S,
    ws: Workspace<S>,
    wd: Option<Workspace<S>>,
    x_adj: [S; 2],
    err: Option<Error>,
}

impl<S: Scalar, T: EpsModel<S>> Distiller<S, T> {
    /// Starts from `student` (usually a copy of the teacher weights).
    pub fn new(
        teacher: T,
        student: EpsilonNet<S>,
        data: MixtureSpec<S>,
        schedule: NoiseSchedule<S>,
        partition: PhasePartition<S>,
        config: DistillConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if partition.phases() != config.phases {
            return Err(Error::config(format!(
                "partition has {} phases, config asks for {}",
                partition.phases(),
                config.phases
            )));
        }
        for m in 0..partition.phases() {
            let (lo, hi) = partition.phase_bounds(m);
            if hi - lo < config.solver_steps {
                return Err(Error::config(format!(
                    "phase {m} spans {} grid intervals, fewer than solver_steps = {}",
                    hi - lo,
                    config.solver_steps
                )));
            }
        }
        if student.net().spec().classes != data.num_classes() {
            return Err(Error::config("student class count differs from the data"));
        }
        let disc = if config.lambda_adv > 0.0 {
            let spec = config.disc.spec(data.num_classes(), 1);
            let d = Discriminator::init(spec, seed ^ 0xd15c)?;
            let opt = Adam::new(d.net().num_params());
            Some((d, opt))
        } else {
            None
        };
        let state = TrainState::new(student, lit(config.ema_mu), seed);
        Ok(Self { state, disc, teacher, data, schedule, partition, config })
    }

    pub fn step_count(&self) -> u64 {
        self.state.step()
    }

    pub fn settings(&self) -> LossSettings<S> {
        LossSettings::from_config(&self.config)
    }

    /// One student step, one discriminator step and one EMA update. A
    /// non-finite loss or gradient returns [`Error::Diverged`] before any
    /// state changes.
    pub fn step(&mut self) -> Result<LossRow> {
        let step = self.state.step();
        let seed = self.state.seed;
        let batch = self.config.batch;
        let settings = self.settings();
        let lambda = lit::<S>(self.config.lambda_adv);
        let student = &self.state.student;
        let target = &self.state.target;
        let disc = self.disc.as_ref().map(|(d, _)| d);
        let np = student.net().num_params();
        let nd = disc.map_or(0, |d| d.net().num_params());
        let (p, sch) = (&self.partition, &self.schedule);

        let acc = chunked_reduce(
            batch,
            || Acc {
                gs: vec![S::zero(); np],
                gd: vec![S::zero(); nd],
                l_pcm: S::zero(),
                l_gen: S::zero(),
                l_disc: S::zero(),
                ws: student.net().workspace(),
                wd: disc.map(|d| d.net().workspace()),
                x_adj: [S::zero(); 2],
                err: None,
            },
            |acc, i| {
                let mut rng = stream(seed, Purpose::DistillBatch, step, i as u64);
                let s = draw_sample(&self.data, p, sch, &self.config, &mut rng);
                let real = match target_point(target, &self.teacher, &s, p, sch, settings.clip) {
                    Ok(r) => r,
                    Err(e) => {
                        acc.err.get_or_insert(e);
                        return;
                    }
                };
                let t = p.grid().time(s.n + s.k);
                let s_m = p.edge_time(s.m);
                let e = student.predict_traced(&s.x, t, s.c, &mut acc.ws);
                let fake = phase_map(e, s.x, t, s_m, sch, settings.clip);
                let (l, mut g) = settings.distance(fake, real);
                acc.l_pcm = acc.l_pcm + l;
                if let (Some(d), Some(wd)) = (disc, acc.wd.as_mut()) {
                    let mut arng = stream(seed, Purpose::Adversarial, step, i as u64);
                    let pair = renoise_pair(fake, real, s.m, s.c, p, sch, &mut arng);
                    // Generator term -lambda D(x~_s) through the re-noising scale.
                    let df = d.score_traced(&pair.fake, pair.s, pair.c, wd);
                    acc.l_gen = acc.l_gen - df;
                    d.net().backward(wd, &[S::one()], None, Some(&mut acc.x_adj));
                    let r = sch.alpha(pair.s) / sch.alpha(s_m);
                    g[0] = g[0] - lambda * r * acc.x_adj[0];
                    g[1] = g[1] - lambda * r * acc.x_adj[1];
                    acc.l_disc = acc.l_disc + disc_pair_grad(d.net(), &pair, wd, &mut acc.gd);
                }
                let k = phase_map_eps_coeff(t, s_m, sch, settings.clip);
                student.net().backward(&mut acc.ws, &[k * g[0], k * g[1]], Some(&mut acc.gs), None);
            },
            |a, b| {
                add_into(&mut a.gs, &b.gs);
                add_into(&mut a.gd, &b.gd);
                a.l_pcm = a.l_pcm + b.l_pcm;
                a.l_gen = a.l_gen + b.l_gen;
                a.l_disc = a.l_disc + b.l_disc;
                if a.err.is_none() {
                    a.err = b.err;
                }
            },
        );
        if let Some(e) = acc.err {
            return Err(e);
        }
        let inv = S::one() / lit(batch as f64);
        let mut gs = acc.gs;
        gs.iter_mut().for_each(|g| *g = *g * inv);
        let mut gd = acc.gd;
        gd.iter_mut().for_each(|g| *g = *g * inv);
        let (l_pcm, l_gen, l_disc) = (acc.l_pcm * inv, acc.l_gen * inv, acc.l_disc * inv);
        let grad_norm = l2_norm(&gs);
        let finite = [l_pcm, l_gen, l_disc, grad_norm, l2_norm(&gd)].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Diverged {
                step: step + 1,
                detail: format!(
                    "l_pcm {l_pcm}, l_adv_gen {l_gen}, l_adv_disc {l_disc}, gradient norm {grad_norm}"
                ),
            });
        }
        self.state.adam_step(&gs, lit(self.config.lr))?;
        if let Some((d, opt)) = self.disc.as_mut() {
            opt.step(d.net_mut().params_mut(), &gd, lit(self.config.disc_lr))?;
        }
        self.state.ema_update();
        self.state.stream = step + 1;
        Ok(LossRow {
            step: step + 1,
            l_pcm: to_f64(l_pcm),
            l_adv_gen: to_f64(l_gen),
            l_adv_disc: to_f64(l_disc),
            grad_norm: to_f64(grad_norm),
        })
    }

    /// Runs the remaining configured iterations, reporting each row.
    pub fn run(&mut self, mut on_row: impl FnMut(&LossRow)) -> Result<()> {
        while (self.state.step() as usize) < self.config.iterations {
            let row = self.step()?;
            on_row(&row);
        }
        Ok(())
    }
}

/// Distills `teacher` from `init` for `config.iterations` steps.
pub fn distill<S: Scalar, T: EpsModel<S>>(
    teacher: T,
    init: EpsilonNet<S>,
    data: &MixtureSpec<S>,
    schedule: &NoiseSchedule<S>,
    intervals: usize,
    config: &DistillConfig,
    seed: u64,
) -> Result<Distiller<S, T>> {
    let partition = make_partition(schedule, intervals, config.phases)?;
    let mut d = Distiller::new(teacher, init, data.clone(), *schedule, partition, config.clone(), seed)?;
    d.run(|_| {})?;
    Ok(d)
}
