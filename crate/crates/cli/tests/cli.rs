use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use reactsynth_core::checkpoint::{read_checkpoint, Checkpoint};
use reactsynth_core::motion::{read_motion, write_motion, MotionFormat, MotionLayout, MotionSequence};
use reactsynth_core::tensor::Tensor;

const TINY: &str = r#"
preset = "tiny"
[dataset]
num_pairs = 20
frames = 32
[vae_train]
steps = 12
batch_size = 4
[reactor_train]
steps = 8
batch_size = 4
[generation]
num_steps = 8
t_iters = 4
[eval]
repetitions = 2
samples = 8
diversity_pairs = 4
mm_conditions = 2
mm_pairs = 2
[eval.classifier]
steps = 20
min_accuracy = 0.0
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let env = Self { dir: tempfile::tempdir().unwrap() };
        std::fs::write(env.path("tiny.toml"), TINY).unwrap();
        env
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut full = vec!["--config", self.path("tiny.toml").to_str().unwrap().to_owned().leak()];
        full.extend_from_slice(args);
        run_raw(&full)
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn p(&self, name: &str) -> &'static str {
        self.path(name).to_str().unwrap().to_owned().leak()
    }

    fn dataset(&self) -> &'static str {
        self.ok(&["make-dataset", "--out", self.p("data")]);
        self.p("data")
    }
}

fn run_raw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reactsynth")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn make_dataset_splits_four_to_one_and_is_reproducible() {
    let env = Env::new();
    std::fs::write(env.path("c.toml"), "[dataset]\nnum_pairs = 100\nframes = 16\n").unwrap();
    let cfg = env.p("c.toml");
    let a = run_raw(&["--config", cfg, "make-dataset", "--out", env.p("a")]);
    let b = run_raw(&["--config", cfg, "make-dataset", "--out", env.p("b")]);
    assert!(a.status.success());
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(env.path("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train"], 80);
    assert_eq!(manifest["test"], 20);
    assert_eq!(manifest["seed"], 0);
    assert_eq!(std::fs::read(env.path("a/manifest.json")).unwrap(), std::fs::read(env.path("b/manifest.json")).unwrap());
    let sha = |o: &Output| String::from_utf8_lossy(&o.stdout).lines().last().unwrap().to_string();
    assert_eq!(sha(&a), sha(&b));
    assert!(sha(&a).starts_with("manifest sha256 "));
    let c = run_raw(&["--config", cfg, "--seed", "5", "make-dataset", "--out", env.p("c")]);
    assert!(c.status.success());
    assert_ne!(std::fs::read(env.path("a/train.mrds")).unwrap(), std::fs::read(env.path("c/train.mrds")).unwrap());
}

#[test]
fn config_errors_exit_with_two() {
    let env = Env::new();
    std::fs::write(env.path("zero.toml"), "[dataset]\nnum_pairs = 0\n").unwrap();
    assert_eq!(code(&run_raw(&["--config", env.p("zero.toml"), "make-dataset", "--out", env.p("x")])), 2);
    std::fs::write(env.path("unknown.toml"), "[model]\nwidth = 3\n").unwrap();
    assert_eq!(code(&run_raw(&["--config", env.p("unknown.toml"), "make-dataset", "--out", env.p("x")])), 2);
    assert_eq!(code(&run_raw(&["--config", env.p("missing.toml"), "make-dataset", "--out", env.p("x")])), 3);
}

#[test]
fn missing_dataset_is_a_file_error() {
    let env = Env::new();
    let out = env.run(&["train-vae", "--data", env.p("nowhere"), "--out", env.p("v.ck")]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn full_pipeline_through_the_cli() {
    let env = Env::new();
    let data = env.dataset();
    env.ok(&["train-vae", "--data", data, "--out", env.p("vae.ck"), "--loss-curve", env.p("vae.curve")]);
    let curve = std::fs::read_to_string(env.path("vae.curve")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert!(lines[0].starts_with("# step loss"));
    assert_eq!(lines.len(), 1 + 12);
    assert!(lines[12].starts_with("11 "));

    env.ok(&["train-reactor", "--data", data, "--vae", env.p("vae.ck"), "--out", env.p("model.ck"), "--loss-curve", env.p("r.curve")]);
    let vae: Checkpoint<f32> = read_checkpoint(&env.path("vae.ck")).unwrap();
    let model: Checkpoint<f32> = read_checkpoint(&env.path("model.ck")).unwrap();
    for (name, t) in vae.params.iter() {
        assert_eq!(model.params.get(name).unwrap(), t, "{name} changed while frozen");
    }
    assert_eq!(model.header.step, 8);

    // generation: length preserved, seed recorded, byte-identical reruns
    let pairs = reactsynth_core::motion::read_dataset(&env.path("data/test.mrds")).unwrap().pairs;
    write_motion(&env.path("a.mrrs"), &pairs[0].action, MotionFormat::Binary).unwrap();
    write_motion(&env.path("b.txt"), &pairs[1].action.truncate(21).unwrap(), MotionFormat::Text).unwrap();
    let gen = ["generate", "--model", env.p("model.ck"), env.p("a.mrrs"), env.p("b.txt")];
    env.ok(&[&gen[..], &["--out", env.p("g1")]].concat());
    env.ok(&[&gen[..], &["--out", env.p("g2")]].concat());
    let first = env.path("g1/0000_a.reaction.txt");
    let second = env.path("g1/0001_b.reaction.txt");
    assert_eq!(read_motion(&first).unwrap().len(), 32);
    assert_eq!(read_motion(&second).unwrap().len(), 21);
    let text = std::fs::read_to_string(&first).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("# seed=0 sample=0"));
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(env.path("g2/0000_a.reaction.txt")).unwrap());
    env.ok(&[&gen[..], &["--seed", "3", "--out", env.p("g3")]].concat());
    assert_ne!(std::fs::read(&first).unwrap(), std::fs::read(env.path("g3/0000_a.reaction.txt")).unwrap());

    // evaluation report schema
    env.ok(&["evaluate", "--model", env.p("model.ck"), "--data", data, "--out", env.p("report.txt")]);
    let report = std::fs::read_to_string(env.path("report.txt")).unwrap();
    for tag in ["train-cond", "test-cond"] {
        for key in ["fid", "acc", "diversity", "multimodality", "ape.root", "ape.hands", "ave.root", "ave.hands"] {
            assert!(report.contains(&format!("\n{tag}.{key} = ")), "{tag}.{key} missing:\n{report}");
        }
    }

    // inspect is deterministic and lists totals and the hash
    let a = env.ok(&["inspect", env.p("model.ck")]);
    let b = env.ok(&["inspect", env.p("model.ck")]);
    assert_eq!(a, b);
    assert!(a.contains(&format!("config_hash: {}", model.header.config_hash)));
    assert!(a.contains("total parameters: "));
    assert!(a.contains("reactor.block0.mum.from_body.w"));

    // a checkpoint from a different model configuration is refused
    let out = env.run(&["--fusion", "concat", "generate", "--model", env.p("model.ck"), "--out", env.p("g4"), env.p("a.mrrs")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));

    // wrong skeleton in the action file
    let other = MotionLayout::new(30).unwrap();
    let wrong = MotionSequence::new(other, 30.0, Tensor::zeros(vec![8, other.channels()])).unwrap();
    write_motion(&env.path("wrong.mrrs"), &wrong, MotionFormat::Binary).unwrap();
    let out = env.run(&["generate", "--model", env.p("model.ck"), "--out", env.p("g5"), env.p("wrong.mrrs")]);
    assert_eq!(code(&out), 2);
}

#[test]
fn reactor_training_rejects_a_foreign_tokenizer() {
    let env = Env::new();
    let data = env.dataset();
    env.ok(&["train-vae", "--data", data, "--out", env.p("vae.ck")]);
    std::fs::write(env.path("other.toml"), format!("{TINY}\n[model.vae]\nlatent_dim = 16\n")).unwrap();
    let out = run_raw(&[
        "--config", env.p("other.toml"), "train-reactor", "--data", data, "--vae", env.p("vae.ck"), "--out", env.p("m.ck"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("version error"));
    let out = env.run(&["train-reactor", "--data", data, "--vae", env.p("data/train.mrds"), "--out", env.p("m.ck")]);
    assert_eq!(code(&out), 3);
}

fn curve_line(path: &Path, step: usize) -> String {
    std::fs::read_to_string(path).unwrap().lines().find(|l| l.starts_with(&format!("{step} "))).unwrap().to_owned()
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let env = Env::new();
    let data = env.dataset();
    std::fs::write(env.path("short.toml"), TINY.replace("steps = 12", "steps = 6").replace("steps = 8", "steps = 4")).unwrap();
    let short = env.p("short.toml");
    let out = run_raw(&["--config", short, "train-vae", "--data", data, "--out", env.p("half.ck")]);
    assert!(out.status.success());
    env.ok(&["train-vae", "--data", data, "--out", env.p("resumed.ck"), "--resume", env.p("half.ck"), "--loss-curve", env.p("resumed.curve")]);
    env.ok(&["train-vae", "--data", data, "--out", env.p("full.ck"), "--loss-curve", env.p("full.curve")]);
    assert_eq!(curve_line(&env.path("resumed.curve"), 6), curve_line(&env.path("full.curve"), 6));
    assert_eq!(std::fs::read(env.path("resumed.ck")).unwrap(), std::fs::read(env.path("full.ck")).unwrap());

    env.ok(&["train-reactor", "--data", data, "--vae", env.p("full.ck"), "--out", env.p("m_full.ck")]);
    let out = run_raw(&["--config", short, "train-reactor", "--data", data, "--vae", env.p("full.ck"), "--out", env.p("m_half.ck")]);
    assert!(out.status.success());
    env.ok(&["train-reactor", "--data", data, "--vae", env.p("full.ck"), "--out", env.p("m_res.ck"), "--resume", env.p("m_half.ck")]);
    let full: Checkpoint<f32> = read_checkpoint(&env.path("m_full.ck")).unwrap();
    let resumed: Checkpoint<f32> = read_checkpoint(&env.path("m_res.ck")).unwrap();
    assert_eq!(full.params, resumed.params);
    assert_eq!(full.optim_v, resumed.optim_v);
}

#[test]
fn corrupt_checkpoints_are_reported() {
    let env = Env::new();
    let data = env.dataset();
    env.ok(&["train-vae", "--data", data, "--out", env.p("vae.ck")]);
    let bytes = std::fs::read(env.path("vae.ck")).unwrap();
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 1;
    std::fs::write(env.path("bad.ck"), &bad).unwrap();
    let out = env.run(&["inspect", env.p("bad.ck")]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
    std::fs::write(env.path("short.ck"), &bytes[..3]).unwrap();
    let out = env.run(&["inspect", env.p("short.ck")]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("parse error at byte"));
}

#[test]
fn ablation_flags_change_the_model() {
    let env = Env::new();
    let data = env.dataset();
    env.ok(&["--no-unit-division", "train-vae", "--data", data, "--out", env.p("whole.ck")]);
    env.ok(&["--no-unit-division", "train-reactor", "--data", data, "--vae", env.p("whole.ck"), "--out", env.p("whole_m.ck")]);
    let summary = env.ok(&["inspect", env.p("whole_m.ck")]);
    assert!(summary.contains("vae.whole."));
    assert!(!summary.contains("vae.body."));
    assert!(!summary.contains(".mum."));

    env.ok(&["train-vae", "--data", data, "--out", env.p("vae.ck")]);
    for (flags, present, absent) in [
        (vec!["--no-mum"], "cross_attn", ".mum."),
        (vec!["--mum-direction", "b2h"], "mum.from_body", "mum.from_hands"),
        (vec!["--fusion", "concat"], ".concat.", "cross_attn"),
        (vec!["--loss", "l2"], "diff.body", "zzz"),
    ] {
        let out = env.p("abl.ck");
        env.ok(&[&flags[..], &["train-reactor", "--data", data, "--vae", env.p("vae.ck"), "--out", out]].concat());
        let s = env.ok(&[&flags[..], &["inspect", out]].concat());
        assert!(s.contains(present), "{flags:?} lacks {present}");
        assert!(!s.contains(absent), "{flags:?} has {absent}");
    }
}

#[test]
fn desk_scale_smoke_run_is_fast() {
    let env = Env::new();
    std::fs::write(env.path("desk.toml"), "[vae_train]\nsteps = 50\n").unwrap();
    let cfg = env.p("desk.toml");
    assert!(run_raw(&["--config", cfg, "make-dataset", "--out", env.p("d")]).status.success());
    let start = Instant::now();
    let out = run_raw(&["--config", cfg, "train-vae", "--data", env.p("d"), "--out", env.p("v.ck")]);
    let secs = start.elapsed().as_secs_f64();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(secs < 60.0, "50 desk-scale steps took {secs:.1}s");
}
