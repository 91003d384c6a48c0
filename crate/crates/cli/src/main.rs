use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pcmlab::distill::{Distiller, Mode, TeacherTrainer};
use pcmlab::evalkit::{self, OrderMode, VerifyOptions};
use pcmlab::persist::{render_svg, write_atomic, write_samples_csv, Checkpoint, Kind, LossCsv, RunConfig, TeacherCsv, TrainRecord};
use pcmlab::sampler::{sample_stochastic_r, sample_teacher, Guidance, SamplerConfig};
use pcmlab::{Cond, EpsilonNet, Error, GaussianOracle, PhasePartition, Point};

const SEED_ENV: &str = "PCMLAB_SEED";

#[derive(Parser)]
#[command(name = "pcmlab", version, about = "Phased consistency distillation on 2-D toy data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the default configuration file.
    GenConfig {
        path: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the diffusion teacher.
    TrainTeacher {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Distill a phased consistency student from a teacher checkpoint.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        phases: Option<usize>,
        /// Disable the adversarial term.
        #[arg(long)]
        no_adv: bool,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Generate samples from a checkpoint.
    Sample {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Evaluation metrics.
    Eval {
        #[command(subcommand)]
        what: EvalCmd,
    },
    /// Run the executable identity and property checks.
    Verify {
        #[arg(long)]
        seed: Option<u64>,
        /// Skip the discriminator demonstration.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured iteration count.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    r: Option<f64>,
    /// Inference guidance scale.
    #[arg(long)]
    cfg: Option<f64>,
    #[arg(long)]
    neg_class: Option<usize>,
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Sliced Wasserstein distance to the data, averaged over classes.
    Sw {
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Self-consistency residual of a student along teacher trajectories.
    Consistency {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        /// Guide the teacher transport with this scale.
        #[arg(long)]
        teacher_w: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Endpoint error of DDIM on Gaussian data against the exact flow.
    OrderStudy {
        #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 40, 80, 160])]
        n_list: Vec<usize>,
        #[arg(long, value_enum, default_value_t = StudyMode::Ddim)]
        mode: StudyMode,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Negative-class mass of two students under negative guidance.
    NegSensitivity {
        #[arg(long)]
        pcd: PathBuf,
        #[arg(long)]
        pcd_star: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2.0)]
        w: f64,
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyMode {
    Ddim,
    Exact,
}

enum Fail {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        if e.is_usage() || matches!(e, Error::Domain(_)) {
            Fail::Usage(e.to_string())
        } else {
            Fail::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Runtime(e.to_string())
    }
}

type Out = Result<(), Fail>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Fail::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> Out {
    match cmd {
        Cmd::GenConfig { path, force } => gen_config(&path, force),
        Cmd::TrainTeacher { run, out, loss_csv } => train_teacher(&run, &out, loss_csv.as_deref()),
        Cmd::Distill { run, teacher, out, mode, phases, no_adv, loss_csv } => {
            distill(&run, &teacher, &out, mode, phases, no_adv, loss_csv.as_deref())
        }
        Cmd::Sample { gen, out, svg } => sample(&gen, &out, svg.as_deref()),
        Cmd::Eval { what } => eval(what),
        Cmd::Verify { seed, quick } => verify(seed, quick),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Fail> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// Flag, then environment, then config.
fn resolve_seed(flag: Option<u64>, config: u64) -> Result<u64, Fail> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Fail::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(config),
    }
}

fn load_net(rec: &pcmlab::persist::NetRecord) -> Result<EpsilonNet<f64>, Fail> {
    Ok(EpsilonNet::wrap(rec.to_net()?)?)
}

fn gen_config(path: &Path, force: bool) -> Out {
    if path.exists() && !force {
        return Err(Fail::Usage(format!("{} exists (use --force to overwrite)", path.display())));
    }
    write_atomic(path, RunConfig::default().to_toml().as_bytes())
        .map_err(|e| Fail::Usage(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn train_teacher(args: &RunArgs, out: &Path, loss_csv: Option<&Path>) -> Out {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(n) = args.iterations {
        cfg.teacher.iterations = n;
    }
    let seed = resolve_seed(args.seed, cfg.seed)?;
    let schedule = cfg.schedule.schedule()?;
    let partition = cfg.schedule.partition(1)?;
    let mut tr = TeacherTrainer::new(cfg.data.mixture()?, schedule, cfg.teacher.clone(), seed)?;
    let mut csv = loss_csv.map(TeacherCsv::create).transpose()?;
    let mut log_err = None;
    let res = tr.run(|row| {
        if let Some(c) = csv.as_mut() {
            if let Err(e) = c.row(row) {
                log_err.get_or_insert(e);
            }
        }
    });
    if let Some(c) = csv {
        c.finish()?;
    }
    let ckpt = Checkpoint::new(
        Kind::Teacher,
        schedule,
        &partition,
        tr.averaged().net(),
        TrainRecord { step: tr.step_count(), ema_mu: None, seed, mode: None },
    );
    ckpt.save(out)?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    match res {
        Ok(()) => {
            println!("teacher: {} steps, wrote {}", tr.step_count(), out.display());
            Ok(())
        }
        Err(e) => {
            eprintln!("last good teacher state written to {}", out.display());
            Err(e.into())
        }
    }
}

fn distill(
    args: &RunArgs,
    teacher: &Path,
    out: &Path,
    mode: Option<Mode>,
    phases: Option<usize>,
    no_adv: bool,
    loss_csv: Option<&Path>,
) -> Out {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(n) = args.iterations {
        cfg.distill.iterations = n;
    }
    if let Some(m) = mode {
        cfg.distill.mode = m;
    }
    if let Some(m) = phases {
        cfg.distill.phases = m;
    }
    if no_adv {
        cfg.distill.lambda_adv = 0.0;
    }
    cfg.validate()?;
    let seed = resolve_seed(args.seed, cfg.seed)?;
    let t = Checkpoint::load(teacher)?;
    if t.kind != Kind::Teacher {
        return Err(Fail::Usage(format!("{} is not a teacher checkpoint", teacher.display())));
    }
    let teacher_net = load_net(&t.net)?;
    let schedule = t.schedule;
    let grid = t.partition()?.grid().clone();
    let partition = PhasePartition::new(grid, cfg.distill.phases, pcmlab::EdgeMode::UniformIndex)?;
    let mut d = Distiller::new(
        &teacher_net,
        teacher_net.clone(),
        cfg.data.mixture()?,
        schedule,
        partition,
        cfg.distill.clone(),
        seed,
    )?;
    let mut csv = loss_csv.map(LossCsv::create).transpose()?;
    let mut log_err = None;
    let res = d.run(|row| {
        if let Some(c) = csv.as_mut() {
            if let Err(e) = c.row(row) {
                log_err.get_or_insert(e);
            }
        }
    });
    if let Some(c) = csv {
        c.finish()?;
    }
    let ckpt = Checkpoint::new(
        Kind::Student,
        schedule,
        &d.partition,
        d.state.student.net(),
        TrainRecord { step: d.step_count(), ema_mu: Some(cfg.distill.ema_mu), seed, mode: Some(cfg.distill.mode) },
    )
    .with_target(d.state.target.to_net().net());
    ckpt.save(out)?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    match res {
        Ok(()) => {
            println!("student: {} steps, {} phases, wrote {}", d.step_count(), d.partition.phases(), out.display());
            Ok(())
        }
        Err(e) => {
            eprintln!("last good student state written to {}", out.display());
            Err(e.into())
        }
    }
}

struct Loaded {
    ckpt: Checkpoint,
    net: EpsilonNet<f64>,
    partition: PhasePartition<f64>,
    cfg: RunConfig,
}

fn load_model(path: &Path, config: Option<&Path>) -> Result<Loaded, Fail> {
    let cfg = load_config(config)?;
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind == Kind::Discriminator {
        return Err(Fail::Usage("cannot sample from a discriminator checkpoint".into()));
    }
    let net = load_net(&ckpt.net)?;
    let partition = ckpt.partition()?;
    Ok(Loaded { ckpt, net, partition, cfg })
}

/// Samples `n` points of class `c` with the options in `g` over `cfg`.
fn generate(m: &Loaded, g: &GenArgs, c: Cond, n: usize, seed: u64) -> Result<Vec<Point<f64>>, Fail> {
    let s = &m.cfg.sampler;
    let w = g.cfg.unwrap_or(s.cfg);
    let neg = g.neg_class.or(s.neg_class).map_or(Cond::Null, Cond::Class);
    if let Cond::Class(k) = neg {
        m.net.net().check_cond(Cond::Class(k))?;
    }
    let guidance = (w != 1.0).then_some(Guidance { w, neg });
    let clip = s.clip.then_some(m.cfg.distill.clip_floor);
    if m.ckpt.kind == Kind::Teacher {
        return Ok(sample_teacher(&m.net, &m.partition, &m.ckpt.schedule, n, c, guidance, seed));
    }
    let sc = SamplerConfig { steps: g.steps.unwrap_or(s.steps), r: g.r.unwrap_or(s.r), guidance, clip, seed };
    Ok(sample_stochastic_r(&m.net, &m.partition, &m.ckpt.schedule, n, c, &sc)?)
}

fn sample(g: &GenArgs, out: &Path, svg: Option<&Path>) -> Out {
    let m = load_model(&g.ckpt, g.config.as_deref())?;
    let seed = resolve_seed(g.seed, m.cfg.seed)?;
    let k = g.class.unwrap_or(m.cfg.sampler.class);
    let c = Cond::Class(k);
    m.net.net().check_cond(c)?;
    let pts = generate(&m, g, c, g.n.unwrap_or(m.cfg.sampler.n), seed)?;
    let mut buf = Vec::new();
    write_samples_csv(&mut buf, &pts, c, seed)?;
    write_atomic(out, &buf)?;
    if let Some(p) = svg {
        write_atomic(p, render_svg(&pts, &vec![Some(k); pts.len()]).as_bytes())?;
    }
    println!("wrote {} samples to {}", pts.len(), out.display());
    Ok(())
}

fn eval(what: EvalCmd) -> Out {
    let mut so = std::io::stdout().lock();
    match what {
        EvalCmd::Sw { gen } => {
            let m = load_model(&gen.ckpt, gen.config.as_deref())?;
            let seed = resolve_seed(gen.seed, m.cfg.seed)?;
            let data = m.cfg.data.mixture()?;
            let n = gen.n.unwrap_or(m.cfg.sampler.n);
            let classes = data.num_classes();
            let mut total = 0.0;
            for k in 0..classes {
                let pts = generate(&m, &gen, Cond::Class(k), n, seed.wrapping_add(k as u64))?;
                let real = data.sample_data(k, n, seed.wrapping_add(0x5eed + k as u64))?;
                let d = evalkit::sliced_wasserstein(&pts, &real, evalkit::PROJECTIONS, seed)?;
                writeln!(so, "class={k} sw={d:.6}")?;
                total += d;
            }
            writeln!(so, "sw={:.6} n={n} seed={seed}", total / classes as f64)?;
        }
        EvalCmd::Consistency { ckpt, teacher, config, pairs, teacher_w, seed } => {
            let m = load_model(&ckpt, config.as_deref())?;
            let seed = resolve_seed(seed, m.cfg.seed)?;
            let t = Checkpoint::load(&teacher)?;
            let tn = load_net(&t.net)?;
            let data = m.cfg.data.mixture()?;
            let r = evalkit::self_consistency_residual(
                &m.net, &tn, &data, &m.partition, &m.ckpt.schedule, pairs, seed, teacher_w, None,
            )?;
            writeln!(so, "relative={:.6} absolute={:.6} data_std={:.6} n={} seed={}", r.relative, r.absolute, r.data_std, r.n, r.seed)?;
        }
        EvalCmd::OrderStudy { n_list, mode, samples, seed } => {
            let seed = resolve_seed(seed, 0)?;
            let oracle = GaussianOracle::new([1.0, -0.5], 0.25)?;
            let mode = match mode {
                StudyMode::Ddim => OrderMode::Ddim,
                StudyMode::Exact => OrderMode::Exact,
            };
            let r = evalkit::order_study(&oracle, &Default::default(), &n_list, mode, samples, seed)?;
            for (n, e) in &r.errors {
                writeln!(so, "N={n} error={e:.6e}")?;
            }
            match r.slope {
                Some(k) => writeln!(so, "slope={k:.4} monotone={}", r.monotone)?,
                None => writeln!(so, "slope=none monotone={}", r.monotone)?,
            }
        }
        EvalCmd::NegSensitivity { pcd, pcd_star, config, w, n, steps, seed } => {
            let a = load_model(&pcd, config.as_deref())?;
            let b = load_model(&pcd_star, config.as_deref())?;
            if a.partition != b.partition {
                return Err(Fail::Usage("students must share a phase partition".into()));
            }
            let seed = resolve_seed(seed, a.cfg.seed)?;
            let data = a.cfg.data.mixture()?;
            let steps = steps.unwrap_or(a.partition.phases());
            let r = evalkit::negative_condition_sensitivity(
                &a.net, &b.net, &data, &a.partition, &a.ckpt.schedule, steps, w, n, seed,
            )?;
            writeln!(so, "w={} pcd={:.6} pcd_star={:.6} n={} seed={}", r.w, r.pcd, r.pcd_star, r.n, r.seed)?;
        }
    }
    Ok(())
}

fn verify(seed: Option<u64>, quick: bool) -> Out {
    let seed = resolve_seed(seed, 0)?;
    let rep = evalkit::verify_theorems(&VerifyOptions { seed, adversarial: !quick, ..VerifyOptions::default() })?;
    print!("{rep}");
    if rep.all_passed() {
        Ok(())
    } else {
        Err(Fail::Runtime("some checks failed".into()))
    }
}
