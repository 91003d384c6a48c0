use crate::error::{Error, Result};
use crate::netkit::{add_into, chunked_reduce, Cond, CondNet, Discriminator, EmaTarget, EpsilonNet};
use crate::rng::Stream;
use crate::scalar::{lit, Point, Scalar};
use crate::schedule::{NoiseSchedule, PhasePartition};
use crate::solvers::{phase_map, phase_map_eps_coeff, solve_k_steps, CfgSpec, Crossing, EpsModel};
use crate::toydata::{forward_diffuse, renoise, MixtureSpec};

use super::config::{DistillConfig, Metric, Mode};

/// One loss sample: phase `m`, grid index `n` with `t_n, t_{n+k}` in phase
/// `m`, and `x = x_{t_{n+k}}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcmSample<S> {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub x: Point<S>,
    pub c: Cond,
    /// Guided teacher solve; `None` solves with `c` directly.
    pub guidance: Option<CfgSpec<S>>,
}

/// Distance and clip settings shared by the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings<S> {
    pub metric: Metric,
    pub huber_delta: S,
    pub clip: Option<S>,
}

impl<S: Scalar> LossSettings<S> {
    pub fn from_config(cfg: &DistillConfig) -> Self {
        Self {
            metric: cfg.metric,
            huber_delta: lit(cfg.huber_delta),
            clip: cfg.clip_floor().map(lit),
        }
    }

    /// `d(a, b)` and its gradient with respect to `a`.
    pub fn distance(&self, a: Point<S>, b: Point<S>) -> (S, Point<S>) {
        let d = [a[0] - b[0], a[1] - b[1]];
        let sq = d[0] * d[0] + d[1] * d[1];
        match self.metric {
            Metric::SquaredL2 => (sq, [lit::<S>(2.0) * d[0], lit::<S>(2.0) * d[1]]),
            Metric::Huber => {
                let r = (sq + self.huber_delta * self.huber_delta).sqrt();
                (r - self.huber_delta, [d[0] / r, d[1] / r])
            }
        }
    }
}

/// Draws one loss sample per the phase-uniform, index-uniform scheme.
pub fn draw_sample<S: Scalar>(
    data: &MixtureSpec<S>,
    partition: &PhasePartition<S>,
    schedule: &NoiseSchedule<S>,
    cfg: &DistillConfig,
    rng: &mut Stream,
) -> PcmSample<S> {
    let k = cfg.solver_steps;
    let class = rng.below(data.num_classes());
    let x0 = data.draw(class, rng);
    let m = rng.below(partition.phases());
    let (lo, hi) = partition.phase_bounds(m);
    let n = lo + rng.below(hi - lo - k + 1);
    let z = rng.normal_point();
    let x = forward_diffuse(schedule, x0, partition.grid().time(n + k), z);
    let (c, guidance) = match cfg.mode {
        Mode::Pcd => {
            let w = rng.uniform_in(lit::<S>(cfg.w_min), lit::<S>(cfg.w_max));
            let c = Cond::Class(class);
            (c, Some(CfgSpec { w, c, neg: Cond::Null }))
        }
        Mode::PcdStar => {
            let dropped = rng.uniform::<f64>() < cfg.drop_ratio;
            (if dropped { Cond::Null } else { Cond::Class(class) }, None)
        }
    };
    PcmSample { m, n, k, x, c, guidance }
}

pub(crate) fn check_sample<S: Scalar>(p: &PhasePartition<S>, s: &PcmSample<S>) -> Result<()> {
    if s.m >= p.phases() {
        return Err(Error::Contract(format!("phase {} out of range", s.m)));
    }
    let (lo, hi) = p.phase_bounds(s.m);
    if s.n < lo || s.n + s.k > hi {
        return Err(Error::Contract(format!(
            "loss sample [t_{}, t_{}] is not inside phase {} = [t_{lo}, t_{hi}]",
            s.n,
            s.n + s.k,
            s.m
        )));
    }
    Ok(())
}

/// Target branch: teacher solve to `t_n`, then the EMA consistency map.
pub(crate) fn target_point<S, Tg, Te>(
    target: &Tg,
    teacher: &Te,
    s: &PcmSample<S>,
    partition: &PhasePartition<S>,
    schedule: &NoiseSchedule<S>,
    clip: Option<S>,
) -> Result<Point<S>>
where
    S: Scalar,
    Tg: EpsModel<S> + ?Sized,
    Te: EpsModel<S> + ?Sized,
{
    let x_n = solve_k_steps(
        teacher,
        s.x,
        s.n,
        s.k,
        partition,
        s.c,
        s.guidance.as_ref(),
        Crossing::Forbid,
        schedule,
    )?;
    let t_n = partition.grid().time(s.n);
    let s_m = partition.edge_time(s.m);
    Ok(phase_map(target.eps(&x_n, t_n, s.c), x_n, t_n, s_m, schedule, clip))
}

/// Mean loss over `batch` for any student, without gradients.
pub fn pcm_loss_value<S, St, Tg, Te>(
    student: &St,
    target: &Tg,
    teacher: &Te,
    batch: &[PcmSample<S>],
    partition: &PhasePartition<S>,
    schedule: &NoiseSchedule<S>,
    settings: &LossSettings<S>,
) -> Result<S>
where
    S: Scalar,
    St: EpsModel<S> + ?Sized,
    Tg: EpsModel<S> + ?Sized,
    Te: EpsModel<S> + ?Sized,
{
    let mut total = S::zero();
    for s in batch {
        check_sample(partition, s)?;
        let t = partition.grid().time(s.n + s.k);
        let s_m = partition.edge_time(s.m);
        let fake = phase_map(student.eps(&s.x, t, s.c), s.x, t, s_m, schedule, settings.clip);
        let real = target_point(target, teacher, s, partition, schedule, settings.clip)?;
        total = total + settings.distance(fake, real).0;
    }
    Ok(total / lit(batch.len().max(1) as f64))
}

/// Mean loss over `batch` and its gradient with respect to the student
/// parameters. The target branch is evaluated through [`EmaTarget`], which
/// exposes no traced pass.
pub fn pcm_loss<S, Te>(
    student: &EpsilonNet<S>,
    target: &EmaTarget<S>,
    teacher: &Te,
    batch: &[PcmSample<S>],
    partition: &PhasePartition<S>,
    schedule: &NoiseSchedule<S>,
    settings: &LossSettings<S>,
) -> Result<(S, Vec<S>)>
where
    S: Scalar,
    Te: EpsModel<S> + ?Sized,
{
    for s in batch {
        check_sample(partition, s)?;
    }
    let net = student.net();
    let np = net.num_params();
    struct Acc<S> {
        loss: S,
        grad: Vec<S>,
        ws: crate::netkit::Workspace<S>,
        err: Option<Error>,
    }
    let acc = chunked_reduce(
        batch.len(),
        || Acc { loss: S::zero(), grad: vec![S::zero(); np], ws: net.workspace(), err: None },
        |acc, i| {
            let s = &batch[i];
            let real = match target_point(target, teacher, s, partition, schedule, settings.clip) {
                Ok(r) => r,
                Err(e) => {
                    acc.err.get_or_insert(e);
                    return;
                }
            };
            let t = partition.grid().time(s.n + s.k);
            let s_m = partition.edge_time(s.m);
            let e = student.predict_traced(&s.x, t, s.c, &mut acc.ws);
            let fake = phase_map(e, s.x, t, s_m, schedule, settings.clip);
            let (l, g) = settings.distance(fake, real);
            acc.loss = acc.loss + l;
            let k = phase_map_eps_coeff(t, s_m, schedule, settings.clip);
            net.backward(&mut acc.ws, &[k * g[0], k * g[1]], Some(&mut acc.grad), None);
        },
        |a, b| {
            a.loss = a.loss + b.loss;
            add_into(&mut a.grad, &b.grad);
            if a.err.is_none() {
                a.err = b.err;
            }
        },
    );
    if let Some(e) = acc.err {
        return Err(e);
    }
    let inv = S::one() / lit(batch.len().max(1) as f64);
    let mut grad = acc.grad;
    grad.iter_mut().for_each(|g| *g = *g * inv);
    Ok((acc.loss * inv, grad))
}

/// Re-noised prediction pair at a shared time `s` in the sample's phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvPair<S> {
    /// Student branch, `x~_s`.
    pub fake: Point<S>,
    /// Target branch, `x^_s`.
    pub real: Point<S>,
    pub s: S,
    pub c: Cond,
}

/// Draws `s ~ U[s_m, s_{m+1}]` and independent noise for each branch, then
/// moves both phase-edge predictions forward from `s_m` to `s`.
pub(crate) fn renoise_pair<S: Scalar>(
    fake: Point<S>,
    real: Point<S>,
    m: usize,
    c: Cond,
    partition: &PhasePartition<S>,
    schedule: &NoiseSchedule<S>,
    rng: &mut Stream,
) -> AdvPair<S> {
    let lo = partition.edge_time(m);
    let hi = partition.edge_time(m + 1);
    let s = rng.uniform_in(lo, hi);
    let z1 = rng.normal_point();
    let z2 = rng.normal_point();
    AdvPair {
        fake: renoise(schedule, fake, lo, s, z1),
        real: renoise(schedule, real, lo, s, z2),
        s,
        c,
    }
}

/// Adversarial pairs for `batch`; `rngs[i]` drives sample `i`.
pub fn adversarial_pair<S, St, Tg, Te>(
    student: &St,
    target: &Tg,
    teacher: &Te,
    batch: &[PcmSample<S>],
    partition: &PhasePartition<S>,
    schedule: &NoiseSchedule<S>,
    clip: Option<S>,
    mut rngs: impl FnMut(usize) -> Stream,
) -> Result<Vec<AdvPair<S>>>
where
    S: Scalar,
    St: EpsModel<S> + ?Sized,
    Tg: EpsModel<S> + ?Sized,
    Te: EpsModel<S> + ?Sized,
{
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            check_sample(partition, s)?;
            let t = partition.grid().time(s.n + s.k);
            let s_m = partition.edge_time(s.m);
            let fake = phase_map(student.eps(&s.x, t, s.c), s.x, t, s_m, schedule, clip);
            let real = target_point(target, teacher, s, partition, schedule, clip)?;
            Ok(renoise_pair(fake, real, s.m, s.c, partition, schedule, &mut rngs(i)))
        })
        .collect()
}

/// Hinge losses `(mean -D(x~_s), mean [ReLU(1 + D(x~_s)) + ReLU(1 - D(x^_s))])`.
pub fn adversarial_loss<S: Scalar>(disc: &Discriminator<S>, pairs: &[AdvPair<S>]) -> (S, S) {
    let mut ws = disc.net().workspace();
    let (mut gen, mut dl) = (S::zero(), S::zero());
    for p in pairs {
        let df = disc.score_traced(&p.fake, p.s, p.c, &mut ws);
        let dr = disc.score_traced(&p.real, p.s, p.c, &mut ws);
        gen = gen - df;
        dl = dl + hinge(df, dr);
    }
    let inv = S::one() / lit(pairs.len().max(1) as f64);
    (gen * inv, dl * inv)
}

#[inline]
pub(crate) fn hinge<S: Scalar>(d_fake: S, d_real: S) -> S {
    (S::one() + d_fake).max(S::zero()) + (S::one() - d_real).max(S::zero())
}

/// Accumulates the hinge-loss parameter gradient of one pair into `grad`;
/// returns the loss.
pub(crate) fn disc_pair_grad<S: Scalar>(
    net: &CondNet<S>,
    pair: &AdvPair<S>,
    ws: &mut crate::netkit::Workspace<S>,
    grad: &mut [S],
) -> S {
    net.forward_into(&pair.fake, pair.s, pair.c, ws);
    let df = ws.output()[0];
    if S::one() + df > S::zero() {
        net.backward(ws, &[S::one()], Some(grad), None);
    }
    net.forward_into(&pair.real, pair.s, pair.c, ws);
    let dr = ws.output()[0];
    if S::one() - dr > S::zero() {
        net.backward(ws, &[-S::one()], Some(grad), None);
    }
    hinge(df, dr)
}

/// Trains `disc` on fixed pairs with full-batch steps; returns the final loss.
pub fn train_discriminator<S: Scalar>(
    disc: &mut Discriminator<S>,
    pairs: &[AdvPair<S>],
    steps: usize,
    lr: S,
) -> Result<S> {
    let np = disc.net().num_params();
    let mut opt = crate::netkit::Adam::new(np);
    for _ in 0..steps {
        let net = disc.net();
        let (loss, mut grad, _) = chunked_reduce(
            pairs.len(),
            || (S::zero(), vec![S::zero(); np], net.workspace()),
            |acc, i| {
                acc.0 = acc.0 + disc_pair_grad(net, &pairs[i], &mut acc.2, &mut acc.1);
            },
            |a, b| {
                a.0 = a.0 + b.0;
                add_into(&mut a.1, &b.1);
            },
        );
        let inv = S::one() / lit(pairs.len().max(1) as f64);
        grad.iter_mut().for_each(|g| *g = *g * inv);
        if !(loss * inv).is_finite() {
            return Err(Error::Numeric("discriminator loss is not finite".into()));
        }
        opt.step(disc.net_mut().params_mut(), &grad, lr)?;
    }
    Ok(adversarial_loss(disc, pairs).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netkit::NetSpec;
    use crate::rng::{stream, Purpose};
    use crate::schedule::{EdgeMode, TimestepGrid};
    use crate::solvers::{GaussianPhaseStudent, OptimalTarget, OracleEps};
    use crate::toydata::GaussianOracle;

    fn setup(m: usize) -> (NoiseSchedule<f64>, PhasePartition<f64>) {
        let s = NoiseSchedule::default();
        let g = TimestepGrid::uniform(&s, 50).unwrap();
        (s, PhasePartition::new(g, m, EdgeMode::UniformIndex).unwrap())
    }

    fn small_net(seed: u64) -> EpsilonNet<f64> {
        let spec = NetSpec { hidden: vec![12, 12], ..NetSpec::epsilon(2) };
        EpsilonNet::init(spec, seed).unwrap()
    }

    fn batch(cfg: &DistillConfig, p: &PhasePartition<f64>, s: &NoiseSchedule<f64>, n: usize) -> Vec<PcmSample<f64>> {
        let data = MixtureSpec::benchmark();
        (0..n).map(|i| draw_sample(&data, p, s, cfg, &mut stream(4, Purpose::DistillBatch, 0, i as u64))).collect()
    }

    fn l2() -> LossSettings<f64> {
        LossSettings { metric: Metric::SquaredL2, huber_delta: 0.1, clip: None }
    }

    #[test]
    fn samples_stay_inside_their_phase() {
        let (s, p) = setup(4);
        for k in [1, 3] {
            let cfg = DistillConfig { solver_steps: k, ..Default::default() };
            for b in batch(&cfg, &p, &s, 500) {
                check_sample(&p, &b).unwrap();
            }
        }
    }

    #[test]
    fn crossing_sample_is_a_contract_error() {
        let (s, p) = setup(4);
        let net = small_net(1);
        let tg = EmaTarget::from_student(&net);
        let bad = PcmSample { m: 0, n: 12, k: 2, x: [0.0, 0.0], c: Cond::Class(0), guidance: None };
        let r = pcm_loss(&net, &tg, &net, &[bad], &p, &s, &l2());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn zero_length_interval_gives_zero_loss() {
        let (s, p) = setup(4);
        let net = small_net(2);
        let tg = EmaTarget::from_student(&net);
        let b: Vec<_> = batch(&DistillConfig::default(), &p, &s, 16)
            .into_iter()
            .map(|b| PcmSample { k: 0, ..b })
            .collect();
        let (l, g) = pcm_loss(&net, &tg, &net, &b, &p, &s, &l2()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_student_loss_is_finite_and_nonnegative() {
        let (s, p) = setup(4);
        let teacher = small_net(3);
        let net = small_net(4);
        let tg = EmaTarget::from_student(&small_net(5));
        for mode in [Mode::Pcd, Mode::PcdStar] {
            let cfg = DistillConfig { mode, ..Default::default() };
            let (l, _) = pcm_loss(&net, &tg, &teacher, &batch(&cfg, &p, &s, 64), &p, &s, &l2()).unwrap();
            assert!(l.is_finite() && l >= 0.0);
        }
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let (s, p) = setup(4);
        let teacher = small_net(6);
        let mut net = small_net(7);
        let tg = EmaTarget::from_student(&small_net(8));
        for (metric, clip) in [(Metric::SquaredL2, None), (Metric::Huber, Some(0.5))] {
            let set = LossSettings { metric, huber_delta: 0.1, clip };
            let b = batch(&DistillConfig::default(), &p, &s, 8);
            let (_, g) = pcm_loss(&net, &tg, &teacher, &b, &p, &s, &set).unwrap();
            for idx in (0..net.net().num_params()).step_by(7) {
                let h = 1e-6;
                let orig = net.net().params()[idx];
                net.net_mut().params_mut()[idx] = orig + h;
                let lp = pcm_loss_value(&net, &tg, &teacher, &b, &p, &s, &set).unwrap();
                net.net_mut().params_mut()[idx] = orig - h;
                let lm = pcm_loss_value(&net, &tg, &teacher, &b, &p, &s, &set).unwrap();
                net.net_mut().params_mut()[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - g[idx]).abs() <= 1e-5 * (1.0 + fd.abs()), "{idx}: {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn target_branch_is_gradient_stopped() {
        // The gradient equals the one obtained with the target output frozen
        // as a constant, and computing it never touches the target parameters.
        let (s, p) = setup(4);
        let teacher = small_net(9);
        let net = small_net(10);
        let tg = EmaTarget::from_student(&small_net(11));
        let before = tg.params().to_vec();
        let b = batch(&DistillConfig::default(), &p, &s, 32);
        let (_, g) = pcm_loss(&net, &tg, &teacher, &b, &p, &s, &l2()).unwrap();
        assert_eq!(tg.params(), &before[..]);
        let frozen: Vec<Point<f64>> =
            b.iter().map(|x| target_point(&tg, &teacher, x, &p, &s, None).unwrap()).collect();
        let mut manual = vec![0.0; net.net().num_params()];
        let mut ws = net.net().workspace();
        for (x, r) in b.iter().zip(&frozen) {
            let t = p.grid().time(x.n + x.k);
            let sm = p.edge_time(x.m);
            let e = net.predict_traced(&x.x, t, x.c, &mut ws);
            let (_, d) = l2().distance(phase_map(e, x.x, t, sm, &s, None), *r);
            let k = phase_map_eps_coeff(t, sm, &s, None);
            net.net().backward(&mut ws, &[k * d[0], k * d[1]], Some(&mut manual), None);
        }
        for (a, m) in g.iter().zip(&manual) {
            assert!((a - m / 32.0).abs() < 1e-12);
        }
    }

    #[test]
    fn optimal_gaussian_student_has_negligible_loss() {
        let (s, p) = setup(4);
        let o = GaussianOracle::new([1.0, -0.5], 0.25).unwrap();
        let teacher = OracleEps { oracle: o, schedule: s };
        let exact = GaussianPhaseStudent { oracle: o, schedule: s, partition: p.clone(), target: OptimalTarget::Exact };
        let st = GaussianPhaseStudent { target: OptimalTarget::TeacherGrid, ..exact.clone() };
        let data = o.as_mixture();
        let cfg = DistillConfig { mode: Mode::PcdStar, drop_ratio: 0.0, ..Default::default() };
        let b: Vec<_> = (0..2000)
            .map(|i| draw_sample(&data, &p, &s, &cfg, &mut stream(5, Purpose::DistillBatch, 0, i)))
            .collect();
        let l = pcm_loss_value(&st, &st, &teacher, &b, &p, &s, &l2()).unwrap();
        assert!(l < 1e-6, "{l}");
        // Against the exact flow the residual is the teacher's own step error.
        let le = pcm_loss_value(&exact, &exact, &teacher, &b, &p, &s, &l2()).unwrap();
        assert!(le < 1e-5 && le > l, "{le}");
    }

    #[test]
    fn hinge_cases() {
        let spec = NetSpec { hidden: vec![4], ..NetSpec::discriminator(2) };
        let zero = Discriminator::wrap(CondNet::<f64>::zeros(spec).unwrap()).unwrap();
        let pairs = vec![AdvPair { fake: [0.3, 0.1], real: [1.0, -1.0], s: 0.4, c: Cond::Class(1) }; 5];
        assert_eq!(adversarial_loss(&zero, &pairs), (0.0, 2.0));
        assert_eq!(hinge(-1.0, 1.0), 0.0);
        assert_eq!(hinge(-3.0, 4.0), 0.0);
        assert_eq!(hinge(0.5, 0.5), 2.0);
    }

    #[test]
    fn renoise_at_phase_start_returns_raw_points() {
        let (s, p) = setup(4);
        // Force s = s_m by collapsing the phase window.
        let lo = p.edge_time(1);
        let z = [0.7, -0.4];
        assert_eq!(renoise(&s, z, lo, lo, [3.0, 3.0]), z);
        let mut rng = stream(6, Purpose::Adversarial, 0, 0);
        let pair = renoise_pair([0.1, 0.2], [0.3, 0.4], 1, Cond::Null, &p, &s, &mut rng);
        assert!(pair.s >= lo && pair.s <= p.edge_time(2));
    }

    #[test]
    fn discriminator_cannot_separate_identical_distributions() {
        let pairs: Vec<AdvPair<f64>> = (0..512)
            .map(|i| {
                let mut r = stream(7, Purpose::Custom(7), 0, i);
                let t = r.uniform_in(0.2, 0.6);
                let a: Point<f64> = r.normal_point();
                let b: Point<f64> = r.normal_point();
                AdvPair { fake: a, real: b, s: t, c: Cond::Class(0) }
            })
            .collect();
        let spec = NetSpec { hidden: vec![16, 16], ..NetSpec::discriminator(1) };
        let mut d = Discriminator::init(spec, 3).unwrap();
        let train = &pairs[..256];
        let heldout = &pairs[256..];
        train_discriminator(&mut d, train, 300, 2e-3).unwrap();
        let (_, l) = adversarial_loss(&d, heldout);
        assert!(l > 1.9, "{l}");
    }
}
