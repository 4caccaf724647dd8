use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use reactsynth_core::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use reactsynth_core::config::{canonical_hash, sha256_hex, Precision, RunConfig};
use reactsynth_core::eval::{run_protocol, Classifier, ModelSource};
use reactsynth_core::generate::generate;
use reactsynth_core::motion::{
    make_synthetic_dataset, read_dataset, read_motion, write_motion_text, DatasetBundle, InteractionPair, MotionSequence,
    SplitTag,
};
use reactsynth_core::optim::AdamW;
use reactsynth_core::pipeline::{
    model_checkpoint, new_reaction_model, new_vae_state, restore_model, restore_vae, run_reactor_stage, run_vae_stage,
    vae_checkpoint,
};
use reactsynth_core::train::StepReport;
use reactsynth_core::{Error, Real, Result};

use crate::Command;

pub fn run(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Command::MakeDataset { out } => make_dataset(cfg, out),
        Command::Inspect { checkpoint } => inspect(checkpoint),
        _ => match cfg.precision {
            Precision::F32 => run_typed::<f32>(cmd, cfg),
            Precision::F64 => run_typed::<f64>(cmd, cfg),
        },
    }
}

fn run_typed<R: Real>(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Command::TrainVae { data, out, loss_curve, resume } => train_vae::<R>(cfg, data, out, loss_curve.as_deref(), resume.as_deref()),
        Command::TrainReactor { data, vae, out, loss_curve, resume } => {
            train_reactor::<R>(cfg, data, vae, out, loss_curve.as_deref(), resume.as_deref())
        }
        Command::Generate { model, out, actions } => generate_files::<R>(cfg, model, out, actions),
        Command::Evaluate { model, data, out } => evaluate::<R>(cfg, model, data, out),
        Command::MakeDataset { .. } | Command::Inspect { .. } => unreachable!("handled without a precision"),
    }
}

const TRAIN_FILE: &str = "train.mrds";
const TEST_FILE: &str = "test.mrds";
const MANIFEST_FILE: &str = "manifest.json";

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io { path: path.to_owned(), source: e })
}

fn make_dataset(cfg: &RunConfig, out: &Path) -> Result<()> {
    let pairs = make_synthetic_dataset(&cfg.dataset)?;
    let bundle = DatasetBundle { config: cfg.dataset.clone(), pairs };
    let train = bundle.subset(SplitTag::Train);
    let test = bundle.subset(SplitTag::Test);
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_owned(), source: e })?;
    let mut manifest = serde_json::json!({
        "seed": cfg.dataset.seed,
        "num_pairs": bundle.pairs.len(),
        "train": train.pairs.len(),
        "test": test.pairs.len(),
        "num_classes": cfg.dataset.num_classes,
        "frames": cfg.dataset.frames,
        "num_joints": cfg.dataset.num_joints,
        "dataset_config_hash": canonical_hash(&serde_json::to_value(&cfg.dataset).expect("serialisable")),
    });
    for (name, split) in [(TRAIN_FILE, &train), (TEST_FILE, &test)] {
        // an empty split is legal (e.g. train_fraction = 1) and simply not written
        if split.pairs.is_empty() {
            continue;
        }
        let bytes = split.encode()?;
        manifest[format!("{name}.sha256")] = sha256_hex(&bytes).into();
        write(&out.join(name), &bytes)?;
    }
    let text = serde_json::to_string_pretty(&manifest).expect("serialisable") + "\n";
    write(&out.join(MANIFEST_FILE), text.as_bytes())?;
    println!("wrote {} train / {} test pairs to {}", train.pairs.len(), test.pairs.len(), out.display());
    println!("manifest sha256 {}", sha256_hex(text.as_bytes()));
    Ok(())
}

fn load_split(dir: &Path, file: &str, cfg: &RunConfig) -> Result<Vec<InteractionPair>> {
    let bundle = read_dataset(&dir.join(file))?;
    if bundle.config.num_joints != cfg.dataset.num_joints {
        return Err(Error::Contract(format!(
            "dataset has {} joints, configuration expects {}",
            bundle.config.num_joints, cfg.dataset.num_joints
        )));
    }
    Ok(bundle.pairs)
}

struct LossCurve {
    text: String,
    every: usize,
}

impl LossCurve {
    fn new(every: usize) -> Self {
        Self { text: String::new(), every: every.max(1) }
    }

    fn record(&mut self, stage: &str, r: &StepReport) {
        if self.text.is_empty() {
            let names: Vec<&str> = r.parts.iter().map(|(n, _)| n.as_str()).collect();
            let _ = writeln!(self.text, "# step loss {}", names.join(" "));
        }
        let parts: Vec<String> = r.parts.iter().map(|(_, v)| format!("{v:.8e}")).collect();
        let _ = writeln!(self.text, "{} {:.8e} {}", r.step, r.loss, parts.join(" "));
        if r.step % self.every == 0 {
            eprintln!("{stage} step {} loss {:.6}", r.step, r.loss);
        }
    }

    fn save(&self, path: Option<&Path>) -> Result<()> {
        match path {
            Some(p) => write(p, self.text.as_bytes()),
            None => Ok(()),
        }
    }
}

fn train_vae<R: Real>(cfg: &RunConfig, data: &Path, out: &Path, curve_path: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let pairs = load_split(data, TRAIN_FILE, cfg)?;
    let refs: Vec<&InteractionPair> = pairs.iter().collect();
    let mut state = match resume {
        Some(p) => restore_vae(cfg, &read_checkpoint::<R>(p)?)?,
        None => new_vae_state::<R>(cfg)?,
    };
    let mut curve = LossCurve::new(cfg.vae_train.log_every);
    let result = run_vae_stage(cfg, &mut state, &refs, |r| curve.record("vae", r));
    curve.save(curve_path)?;
    result?;
    write_checkpoint(out, &vae_checkpoint(cfg, &state))?;
    println!("tokenizer checkpoint at step {} written to {}", state.step(), out.display());
    Ok(())
}

fn train_reactor<R: Real>(
    cfg: &RunConfig,
    data: &Path,
    vae: &Path,
    out: &Path,
    curve_path: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let pairs = load_split(data, TRAIN_FILE, cfg)?;
    let refs: Vec<&InteractionPair> = pairs.iter().collect();
    let tokenizer = restore_vae(cfg, &read_checkpoint::<R>(vae)?)?;
    let (mut model, mut optim) = match resume {
        Some(p) => {
            let (model, optim) = restore_model(cfg, &read_checkpoint::<R>(p)?)?;
            for (name, t) in tokenizer.params.iter() {
                if model.params.get(name)? != t {
                    return Err(Error::Version(format!("resumed model's `{name}` differs from the tokenizer checkpoint")));
                }
            }
            (model, optim)
        }
        None => (new_reaction_model(cfg, tokenizer.params)?, AdamW::new(cfg.reactor_train.optim.clone())?),
    };
    let mut curve = LossCurve::new(cfg.reactor_train.log_every);
    let result = run_reactor_stage(cfg, &mut model, &mut optim, &refs, |r| curve.record("reactor", r));
    curve.save(curve_path)?;
    result?;
    write_checkpoint(out, &model_checkpoint(cfg, &model, &optim))?;
    println!("model checkpoint at step {} written to {}", optim.step, out.display());
    Ok(())
}

fn load_model<R: Real>(cfg: &RunConfig, path: &Path) -> Result<reactsynth_core::model::ReactionModel<R>> {
    Ok(restore_model(cfg, &read_checkpoint::<R>(path)?)?.0)
}

fn generate_files<R: Real>(cfg: &RunConfig, model_path: &Path, out: &Path, actions: &[PathBuf]) -> Result<()> {
    let model = load_model::<R>(cfg, model_path)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_owned(), source: e })?;
    let g = &cfg.generation;
    for (i, path) in actions.iter().enumerate() {
        let action = read_motion(path)?;
        let reaction = generate(&model, &action, g, i as u64)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("action");
        let target = out.join(format!("{i:04}_{stem}.reaction.txt"));
        let comments = vec![
            format!("seed={} sample={i} order_seed={}", g.seed, g.order_seed),
            format!("mode={:?} t_iters={} num_steps={}", g.mode, g.t_iters, g.num_steps).to_lowercase(),
            format!("config_hash={}", cfg.model_hash()),
            format!("action={}", path.file_name().and_then(|s| s.to_str()).unwrap_or("")),
        ];
        write_motion_text(&target, &reaction, &comments)?;
        println!("{}", target.display());
    }
    Ok(())
}

fn evaluate<R: Real>(cfg: &RunConfig, model_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = load_model::<R>(cfg, model_path)?;
    let train = load_split(data, TRAIN_FILE, cfg)?;
    let test = load_split(data, TEST_FILE, cfg)?;
    let train_refs: Vec<&InteractionPair> = train.iter().collect();
    let test_refs: Vec<&InteractionPair> = test.iter().collect();
    eprintln!("training evaluation classifier");
    let clf = Classifier::train_on_reactions(&train_refs, cfg.dataset.num_classes, &cfg.eval.classifier)?;
    let source = ModelSource { model: &model, gen: &cfg.generation, chunk: 64 };
    let mut text = String::new();
    let _ = writeln!(text, "# mode={:?} repetitions={} samples={}", cfg.generation.mode, cfg.eval.repetitions, cfg.eval.samples);
    let _ = writeln!(text, "# config_hash={}", cfg.model_hash());
    let _ = writeln!(text, "classifier.holdout_acc = {:.6}", clf.holdout_accuracy);
    for (tag, pairs) in [("train-cond", &train_refs), ("test-cond", &test_refs)] {
        let real: Vec<&MotionSequence> = pairs.iter().map(|p| &p.reaction).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.class_label).collect();
        let _ = writeln!(text, "{tag}.real_acc = {:.6}", clf.accuracy(&real, &labels)?);
        eprintln!("running {tag} protocol");
        let (report, _) = run_protocol(&source, &clf, pairs, &real, &cfg.eval, tag)?;
        for line in report.flat_lines(tag) {
            let _ = writeln!(text, "{line}");
        }
    }
    write(out, text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ck: Checkpoint<f64> = read_checkpoint(path)?;
    print!("{}", ck.summary());
    Ok(())
}
