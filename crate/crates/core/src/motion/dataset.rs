//! Procedural action/reaction pairs.
//!
//! Actor channels are a rest pose plus two class-specific sinusoids with a
//! random phase per pair. The reactor replays the actor `lag` frames later
//! through a fixed affine map (channel gains, biases and a sparse body→hands
//! coupling), adds a class offset and Gaussian noise.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{InteractionPair, MotionLayout, MotionSequence, UnitSplit};
use crate::error::{Error, Result};
use crate::rng::{label, stream};
use crate::tensor::Tensor;

/// Frequencies are defined in cycles per this many frames.
const REFERENCE_PERIOD: f64 = 64.0;
const COMPONENTS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_pairs: usize,
    pub frames: usize,
    pub num_classes: usize,
    pub lag: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub fps: f64,
    pub train_fraction: f64,
    pub num_joints: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_pairs: 512,
            frames: 64,
            num_classes: 4,
            lag: 4,
            noise_std: 0.01,
            seed: 0,
            fps: 30.0,
            train_fraction: 0.8,
            num_joints: 54,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("dataset: {m}")));
        if self.num_pairs == 0 {
            return err("num_pairs must be at least 1");
        }
        if self.frames < self.lag + 1 {
            return err("frames must exceed lag");
        }
        if self.num_classes < 2 {
            return err("num_classes must be at least 2");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return err("noise_std must be finite and nonnegative");
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return err("fps must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return err("train_fraction must lie in (0, 1]");
        }
        MotionLayout::new(self.num_joints)?;
        Ok(())
    }

    pub fn layout(&self) -> MotionLayout {
        MotionLayout { num_joints: self.num_joints }
    }

    /// Number of pairs tagged as training data.
    pub fn num_train(&self) -> usize {
        ((self.num_pairs as f64) * self.train_fraction).round() as usize
    }
}

struct ClassSignature {
    cycles: [f64; COMPONENTS],
    amp: [Vec<f64>; COMPONENTS],
    offset: [Vec<f64>; COMPONENTS],
}

/// Fixed generative structure shared by every pair of one dataset seed.
pub struct SyntheticWorld {
    layout: MotionLayout,
    actor_rest: Vec<f64>,
    classes: Vec<ClassSignature>,
    gain: Vec<f64>,
    bias: Vec<f64>,
    coupling: Vec<(usize, usize, f64)>,
    class_offset: Vec<Vec<f64>>,
}

fn rest_pose(layout: &MotionLayout) -> Vec<f64> {
    let mut rest = vec![0.0; layout.channels()];
    for j in 0..=layout.num_joints {
        // identity rotation in 6D: first two columns of I
        rest[6 * j] = 1.0;
        rest[6 * j + 4] = 1.0;
    }
    rest[layout.translation_offset() + 1] = 0.9;
    rest
}

impl SyntheticWorld {
    pub fn new(cfg: &DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        let d = layout.channels();
        let mut rng = stream(cfg.seed, &[label("world")]);
        let classes = (0..cfg.num_classes)
            .map(|_| {
                let mut cycles = [0.0; COMPONENTS];
                for c in cycles.iter_mut() {
                    *c = rng.random_range(1..=4) as f64;
                }
                let amp = [
                    (0..d).map(|_| rng.random_range(0.0..0.25)).collect(),
                    (0..d).map(|_| rng.random_range(0.0..0.15)).collect(),
                ];
                let offset = [
                    (0..d).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
                    (0..d).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
                ];
                ClassSignature { cycles, amp, offset }
            })
            .collect();
        let gain = (0..d).map(|_| rng.random_range(0.6..1.2)).collect();
        let bias = (0..d).map(|_| rng.random_range(-0.1..0.1)).collect();
        let mut coupling = Vec::new();
        if let Ok(split) = UnitSplit::default_for(&layout) {
            for &h in &split.hands {
                if rng.random_bool(0.5) {
                    let b = split.body[rng.random_range(0..split.body.len())];
                    coupling.push((h, b, rng.random_range(-0.3..0.3)));
                }
            }
        }
        let class_offset = (0..cfg.num_classes)
            .map(|_| (0..d).map(|_| rng.random_range(-0.2..0.2)).collect())
            .collect();
        Ok(Self { actor_rest: rest_pose(&layout), layout, classes, gain, bias, coupling, class_offset })
    }

    pub fn layout(&self) -> MotionLayout {
        self.layout
    }

    pub fn actor_rest(&self) -> &[f64] {
        &self.actor_rest
    }

    /// Actor frame `i` of a pair with per-component phases `phase`.
    pub fn actor_frame(&self, class: usize, phase: &[f64; COMPONENTS], i: usize) -> Vec<f64> {
        let sig = &self.classes[class];
        let mut out = self.actor_rest.clone();
        for k in 0..COMPONENTS {
            let w = std::f64::consts::TAU * sig.cycles[k] * i as f64 / REFERENCE_PERIOD + phase[k];
            for (c, o) in out.iter_mut().enumerate() {
                *o += sig.amp[k][c] * (w + sig.offset[k][c]).sin();
            }
        }
        out
    }

    /// The fixed affine reaction map plus the class offset, without noise.
    pub fn react(&self, src: &[f64], class: usize) -> Vec<f64> {
        let mut out: Vec<f64> = src
            .iter()
            .zip(&self.gain)
            .zip(&self.bias)
            .zip(&self.class_offset[class])
            .map(|(((&s, &g), &b), &o)| g * s + b + o)
            .collect();
        for &(h, b, w) in &self.coupling {
            out[h] += w * src[b];
        }
        out
    }
}

fn to_f32_tensor(rows: &[Vec<f64>]) -> Result<Tensor<f32>> {
    let d = rows[0].len();
    Tensor::new(vec![rows.len(), d], rows.iter().flatten().map(|&v| v as f32).collect())
}

/// Builds `cfg.num_pairs` pairs. Pair `i` has class `i mod num_classes`; a
/// seeded permutation assigns `round(train_fraction · n)` pairs to training.
pub fn make_synthetic_dataset(cfg: &DatasetConfig) -> Result<Vec<InteractionPair>> {
    let world = SyntheticWorld::new(cfg)?;
    let layout = world.layout();
    let mut order: Vec<usize> = (0..cfg.num_pairs).collect();
    order.shuffle(&mut stream(cfg.seed, &[label("split")]));
    let mut split = vec![SplitTag::Test; cfg.num_pairs];
    for &i in &order[..cfg.num_train()] {
        split[i] = SplitTag::Train;
    }
    let fps = cfg.fps as f32;
    (0..cfg.num_pairs)
        .map(|i| {
            let class = i % cfg.num_classes;
            let mut rng = stream(cfg.seed, &[label("pair"), i as u64]);
            let phase = [
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            ];
            let action: Vec<Vec<f64>> = (0..cfg.frames).map(|t| world.actor_frame(class, &phase, t)).collect();
            let reaction: Vec<Vec<f64>> = (0..cfg.frames)
                .map(|t| {
                    if t < cfg.lag {
                        return world.react(world.actor_rest(), class);
                    }
                    let mut r = world.react(&action[t - cfg.lag], class);
                    if cfg.noise_std > 0.0 {
                        for v in r.iter_mut() {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            *v += cfg.noise_std * z;
                        }
                    }
                    r
                })
                .collect();
            Ok(InteractionPair {
                action: MotionSequence::new(layout, fps, to_f32_tensor(&action)?)?,
                reaction: MotionSequence::new(layout, fps, to_f32_tensor(&reaction)?)?,
                class_label: class,
                split: split[i],
            })
        })
        .collect()
}
