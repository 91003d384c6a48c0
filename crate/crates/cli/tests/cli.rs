use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcmlab::persist::{Checkpoint, Kind, RunConfig};
use sha2::{Digest, Sha256};

const TINY: &str = r#"
seed = 11

[schedule]
intervals = 12

[teacher]
iterations = 30
batch = 16

[teacher.net]
hidden = [8, 8]

[distill]
phases = 2
iterations = 12
batch = 16

[distill.disc]
hidden = [8]

[sampler]
steps = 2
n = 32
"#;

fn pcmlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcmlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("PCMLAB_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn sha(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = pcmlab(args, self.dir.path());
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn teacher(&self) {
        self.ok(&["train-teacher", "--config", "tiny.toml", "--out", "t.json", "--loss-csv", "t.csv"]);
    }

    fn student(&self) {
        self.teacher();
        self.ok(&["distill", "--config", "tiny.toml", "--teacher", "t.json", "--out", "s.json", "--loss-csv", "s.csv"]);
    }
}

#[test]
fn gen_config_round_trips_and_guards_existing_files() {
    let r = Run::new();
    r.ok(&["gen-config", "run.toml"]);
    let parsed = RunConfig::load(&r.path("run.toml")).unwrap();
    assert_eq!(parsed, RunConfig::default());
    assert_eq!(code(&pcmlab(&["gen-config", "run.toml"], r.dir.path())), 2);
    r.ok(&["gen-config", "run.toml", "--force"]);
    assert_eq!(code(&pcmlab(&["gen-config", "no/such/dir/run.toml"], r.dir.path())), 2);
}

#[test]
fn usage_errors_exit_two() {
    let r = Run::new();
    assert_eq!(code(&pcmlab(&["train-teacher", "--config", "tiny.toml"], r.dir.path())), 2);
    assert_eq!(code(&pcmlab(&["sample", "--out", "x.csv"], r.dir.path())), 2);
    assert_eq!(code(&pcmlab(&["distill", "--teacher", "t.json"], r.dir.path())), 2);
    assert_eq!(code(&pcmlab(&["eval"], r.dir.path())), 2);
    std::fs::write(r.path("bad.toml"), "[distill]\nphasez = 2\n").unwrap();
    let o = pcmlab(&["train-teacher", "--config", "bad.toml", "--out", "t.json"], r.dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("phasez"));
    assert_eq!(code(&pcmlab(&["sample", "--ckpt", "missing.json", "--out", "x.csv"], r.dir.path())), 2);
}

#[test]
fn pipeline_produces_declared_files() {
    let r = Run::new();
    r.student();
    let t = Checkpoint::load(&r.path("t.json")).unwrap();
    assert_eq!(t.kind, Kind::Teacher);
    assert_eq!(t.train.step, 30);
    let s = Checkpoint::load(&r.path("s.json")).unwrap();
    assert_eq!(s.kind, Kind::Student);
    assert_eq!(s.partition, vec![0, 6, 12]);
    assert!(s.target.is_some());
    let log = std::fs::read_to_string(r.path("s.csv")).unwrap();
    assert!(log.starts_with("step,l_pcm,l_adv_gen,l_adv_disc,grad_norm\n"));
    assert_eq!(log.lines().count(), 13);
    assert_eq!(std::fs::read_to_string(r.path("t.csv")).unwrap().lines().count(), 31);

    r.ok(&["sample", "--config", "tiny.toml", "--ckpt", "s.json", "--out", "x.csv", "--svg", "x.svg", "--class", "1"]);
    let csv = std::fs::read_to_string(r.path("x.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "index,x,y,class,seed");
    assert_eq!(lines.len(), 33);
    assert!(lines[1].starts_with("0,") && lines[1].ends_with(",1,11"), "{}", lines[1]);
    let svg = std::fs::read_to_string(r.path("x.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 32);

    // Fewer steps than phases cannot reach every edge.
    let o = pcmlab(&["sample", "--config", "tiny.toml", "--ckpt", "s.json", "--out", "y.csv", "--steps", "1"], r.dir.path());
    assert_eq!(code(&o), 2);
    // Teachers sample with the full grid.
    r.ok(&["sample", "--config", "tiny.toml", "--ckpt", "t.json", "--out", "z.csv", "--cfg", "2"]);

    let out = r.ok(&["eval", "sw", "--config", "tiny.toml", "--ckpt", "s.json", "--n", "64"]);
    assert!(out.lines().last().unwrap().starts_with("sw="), "{out}");
    let out = r.ok(&["eval", "consistency", "--config", "tiny.toml", "--ckpt", "s.json", "--teacher", "t.json", "--pairs", "50"]);
    assert!(out.starts_with("relative="), "{out}");
    r.ok(&["distill", "--config", "tiny.toml", "--teacher", "t.json", "--out", "p.json", "--mode", "pcd-star", "--no-adv"]);
    let out = r.ok(&["eval", "neg-sensitivity", "--config", "tiny.toml", "--pcd", "s.json", "--pcd-star", "p.json", "--n", "64"]);
    assert!(out.starts_with("w=2 pcd="), "{out}");
}

#[test]
fn seed_precedence_is_flag_env_config() {
    let r = Run::new();
    r.teacher();
    let seed_of = |extra: &[&str], env: Option<&str>| {
        let mut args = vec!["sample", "--config", "tiny.toml", "--ckpt", "t.json", "--out", "x.csv", "--n", "2"];
        args.extend_from_slice(extra);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_pcmlab"));
        cmd.args(&args).current_dir(r.dir.path()).env_remove("PCMLAB_SEED");
        if let Some(v) = env {
            cmd.env("PCMLAB_SEED", v);
        }
        assert!(cmd.status().unwrap().success());
        let csv = std::fs::read_to_string(r.path("x.csv")).unwrap();
        csv.lines().nth(1).unwrap().rsplit(',').next().unwrap().to_string()
    };
    assert_eq!(seed_of(&[], None), "11");
    assert_eq!(seed_of(&[], Some("5")), "5");
    assert_eq!(seed_of(&["--seed", "3"], Some("5")), "3");
}

#[test]
fn golden_outputs_are_reproducible() {
    let hashes = || {
        let r = Run::new();
        r.student();
        r.ok(&["sample", "--config", "tiny.toml", "--ckpt", "s.json", "--out", "x.csv"]);
        ["t.json", "s.json", "s.csv", "x.csv"].map(|f| sha(&r.path(f)))
    };
    let a = hashes();
    assert_eq!(a, hashes());
    let golden = [
        "d865053ad3dd6b80b038620c70051d2761554cdc13392acc38e88806f20fb5a3",
        "c49d451722091572f139114d88328ff651d7daeb2767f06418e603b8b6e2604d",
        "4ed383d0dc2c8f1020e8f9623747e7145461e78953753068ea8a699047575d36",
        "86138c8254881e3f9c13d6df1d4938897cfa2c4fb7b7b8a5615fb9db36d03ded",
    ];
    assert_eq!(a, golden.map(String::from));
}

#[test]
fn verify_quick_passes_and_order_study_reports_slope() {
    let r = Run::new();
    let out = r.ok(&["verify", "--quick"]);
    assert!(out.contains("PASS phase-map-equals-ddim"), "{out}");
    assert!(out.contains("SKIP"), "{out}");
    let out = r.ok(&["eval", "order-study", "--samples", "32"]);
    assert!(out.contains("slope="), "{out}");
    let o = pcmlab(&["eval", "order-study", "--n-list", "10,20"], r.dir.path());
    assert_eq!(code(&o), 2);
}
