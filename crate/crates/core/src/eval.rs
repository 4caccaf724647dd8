//! Evaluation metrics: a small motion classifier whose penultimate features
//! define the space for FID, diversity and multimodality; recognition
//! accuracy; and coordinate-space position/variance errors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{InteractionPair, MotionLayout, MotionSequence, BODY_JOINTS, ROT6D};
use crate::nn::{conv, init_conv, init_linear, linear};
use crate::optim::{AdamW, OptimConfig};
use crate::real::Real;
use crate::rng::{label, stream};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::vae::to_columns;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub width: usize,
    pub feature_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Held-out accuracy below this aborts with a training error.
    pub min_accuracy: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { width: 64, feature_dim: 32, steps: 300, batch_size: 32, lr: 1e-3, min_accuracy: 0.7, seed: 7 }
    }
}

/// Convolutional action classifier over whole motions.
pub struct Classifier {
    pub cfg: ClassifierConfig,
    pub num_classes: usize,
    pub params: ParamStore<f32>,
    /// Held-out accuracy measured after training.
    pub holdout_accuracy: f64,
}

const CONV_BLOCKS: [(usize, usize); 3] = [(5, 2), (5, 2), (3, 2)];

fn init_classifier(cfg: &ClassifierConfig, channels: usize, classes: usize) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    let mut rng = stream(cfg.seed, &[label("classifier-init")]);
    let mut c_in = channels;
    for (i, &(k, _)) in CONV_BLOCKS.iter().enumerate() {
        init_conv(&mut store, &format!("cls.conv{i}"), cfg.width, c_in, k, &mut rng);
        c_in = cfg.width;
    }
    init_linear(&mut store, "cls.feat", cfg.width, cfg.feature_dim, &mut rng);
    init_linear(&mut store, "cls.out", cfg.feature_dim, classes, &mut rng);
    store.init_const("cls.norm.mean", &[channels], 0.0);
    store.init_const("cls.norm.std", &[channels], 1.0);
    store
}

/// `(features [S × f], logits [S × C])` for `S` equal-length motions.
fn classifier_graph(tape: &Tape<f32>, store: &ParamStore<f32>, motions: &[&Tensor<f32>]) -> Result<(Var, Var)> {
    let mean = store.get("cls.norm.mean")?;
    let std = store.get("cls.norm.std")?;
    let normed: Vec<Tensor<f32>> = motions
        .iter()
        .map(|m| {
            let c = m.cols();
            Tensor::from_fn(m.shape().to_vec(), |i| (m.data()[i] - mean.data()[i % c]) / std.data()[i % c])
        })
        .collect();
    let refs: Vec<&Tensor<f32>> = normed.iter().collect();
    let s = motions.len();
    let mut h = tape.constant(to_columns::<f32, f32>(&refs)?);
    for (i, &(k, stride)) in CONV_BLOCKS.iter().enumerate() {
        h = conv(tape, store, &format!("cls.conv{i}"), h, stride, k / 2, k / 2, s)?;
        h = tape.relu(h)?;
    }
    let pooled = tape.mean_cols(h, s)?;
    let pooled = tape.transpose(pooled)?;
    let feat = linear(tape, store, "cls.feat", pooled)?;
    let feat = tape.relu(feat)?;
    let logits = linear(tape, store, "cls.out", feat)?;
    Ok((feat, logits))
}

impl Classifier {
    /// Trains on `(motion, label)` examples; 20% are held out to measure accuracy.
    pub fn train(examples: &[(&MotionSequence, usize)], num_classes: usize, cfg: &ClassifierConfig) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Contract("classifier needs at least two classes".into()));
        }
        if examples.len() < 5 {
            return Err(Error::Contract("classifier needs at least five examples".into()));
        }
        if let Some((_, l)) = examples.iter().find(|(_, l)| *l >= num_classes) {
            return Err(Error::Contract(format!("label {l} out of range for {num_classes} classes")));
        }
        let channels = examples[0].0.frames.cols();
        let n = examples[0].0.len();
        if examples.iter().any(|(m, _)| m.frames.cols() != channels || m.len() != n) {
            return Err(Error::Contract("classifier examples must share length and channel count".into()));
        }
        let mut params = init_classifier(cfg, channels, num_classes);
        let mut mean = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        let mut count = 0.0;
        for (m, _) in examples {
            for r in 0..m.len() {
                for (c, &v) in m.frames.row(r).iter().enumerate() {
                    mean[c] += v as f64;
                    sq[c] += (v as f64).powi(2);
                }
                count += 1.0;
            }
        }
        let mean: Vec<f64> = mean.iter().map(|v| v / count).collect();
        let std: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(1e-3)).collect();
        params.insert("cls.norm.mean", Tensor::from_f64(vec![channels], &mean)?);
        params.insert("cls.norm.std", Tensor::from_f64(vec![channels], &std)?);

        let mut order: Vec<usize> = (0..examples.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut stream(cfg.seed, &[label("classifier-split")]));
        let n_hold = (examples.len() / 5).max(1);
        let (hold, train) = order.split_at(n_hold);

        let mut optim = AdamW::new(OptimConfig { lr: cfg.lr, warmup_steps: 0, beta1: 0.9, beta2: 0.999, ..OptimConfig::default() })?;
        for step in 0..cfg.steps {
            let mut rng = stream(cfg.seed, &[label("classifier-batch"), step as u64]);
            let idx = sample(&mut rng, train.len(), cfg.batch_size.min(train.len()));
            let batch: Vec<&Tensor<f32>> = idx.iter().map(|i| &examples[train[i]].0.frames).collect();
            let labels: Vec<usize> = idx.iter().map(|i| examples[train[i]].1).collect();
            let tape = Tape::new().with_frozen(&["cls.norm."]);
            let (_, logits) = classifier_graph(&tape, &params, &batch)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let grads = tape.backward(loss).map_err(|e| Error::Training { step, msg: e.to_string() })?;
            optim.update(&mut params, &grads.into_named())?;
        }
        let mut clf = Self { cfg: cfg.clone(), num_classes, params, holdout_accuracy: 0.0 };
        let hold_m: Vec<&MotionSequence> = hold.iter().map(|&i| examples[i].0).collect();
        let hold_l: Vec<usize> = hold.iter().map(|&i| examples[i].1).collect();
        clf.holdout_accuracy = clf.accuracy(&hold_m, &hold_l)?;
        if clf.holdout_accuracy < cfg.min_accuracy {
            return Err(Error::Training {
                step: cfg.steps,
                msg: format!(
                    "classifier reached only {:.3} held-out accuracy (minimum {})",
                    clf.holdout_accuracy, cfg.min_accuracy
                ),
            });
        }
        Ok(clf)
    }

    /// Classifier trained on the reactions of the training split.
    pub fn train_on_reactions(pairs: &[&InteractionPair], num_classes: usize, cfg: &ClassifierConfig) -> Result<Self> {
        let ex: Vec<(&MotionSequence, usize)> = pairs.iter().map(|p| (&p.reaction, p.class_label)).collect();
        Self::train(&ex, num_classes, cfg)
    }

    fn run(&self, motions: &[&MotionSequence]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let mut feats = Vec::with_capacity(motions.len());
        let mut preds = Vec::with_capacity(motions.len());
        for chunk in motions.chunks(64) {
            let frames: Vec<&Tensor<f32>> = chunk.iter().map(|m| &m.frames).collect();
            let n = frames[0].rows();
            if frames.iter().any(|f| f.rows() != n) {
                for f in &frames {
                    let (a, b) = self.run_one(f)?;
                    feats.push(a);
                    preds.push(b);
                }
                continue;
            }
            let tape = Tape::inference();
            let (f, l) = classifier_graph(&tape, &self.params, &frames)?;
            tape.check()?;
            let (f, l) = (tape.value(f), tape.value(l));
            for r in 0..chunk.len() {
                feats.push(f.row(r).iter().map(|v| *v as f64).collect());
                preds.push(argmax(l.row(r)));
            }
        }
        Ok((feats, preds))
    }

    fn run_one(&self, frames: &Tensor<f32>) -> Result<(Vec<f64>, usize)> {
        let tape = Tape::inference();
        let (f, l) = classifier_graph(&tape, &self.params, &[frames])?;
        tape.check()?;
        let row = tape.value(f).row(0).iter().map(|v| *v as f64).collect();
        Ok((row, argmax(tape.value(l).row(0))))
    }

    /// Penultimate features `[n × f]` in 64-bit.
    pub fn features(&self, motions: &[&MotionSequence]) -> Result<Tensor<f64>> {
        let (feats, _) = self.run(motions)?;
        let f = self.cfg.feature_dim;
        Tensor::new(vec![feats.len(), f], feats.concat())
    }

    pub fn predict(&self, motions: &[&MotionSequence]) -> Result<Vec<usize>> {
        Ok(self.run(motions)?.1)
    }

    /// Fraction of motions classified as their label.
    pub fn accuracy(&self, motions: &[&MotionSequence], labels: &[usize]) -> Result<f64> {
        if motions.len() != labels.len() || motions.is_empty() {
            return Err(Error::Contract("accuracy needs one label per motion".into()));
        }
        let preds = self.predict(motions)?;
        Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

// -- Fréchet distance -------------------------------------------------------------

pub const FID_EPS: f64 = 1e-6;

/// Mean and unbiased covariance of the rows of `x: [n × f]`.
pub fn mean_cov(x: &Tensor<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, f) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::Contract(format!("need at least two samples, got {n}")));
    }
    let m = DMatrix::from_row_slice(n, f, x.data());
    let mean = DVector::from_iterator(f, (0..f).map(|c| m.column(c).sum() / n as f64));
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(a.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`, with the trace of the root
/// taken from the symmetric product `Σa^{1/2} Σb Σa^{1/2}`.
pub fn fid_from_stats(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let f = mu_a.len();
    if mu_b.len() != f || cov_a.shape() != (f, f) || cov_b.shape() != (f, f) {
        return Err(Error::dim("fid", "mean/covariance sizes disagree"));
    }
    let ra = sym_sqrt(cov_a);
    let mut m = &ra * cov_b * &ra;
    m = (&m + m.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    let v = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_root;
    if !v.is_finite() {
        return Err(Error::Numeric("FID is not finite".into()));
    }
    Ok(v)
}

/// FID between two feature sets; both covariances get `1e-6·I`.
pub fn fid(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::dim("fid", format!("feature widths {} and {}", a.cols(), b.cols())));
    }
    let (ma, mut ca) = mean_cov(a)?;
    let (mb, mut cb) = mean_cov(b)?;
    let eye = DMatrix::<f64>::identity(a.cols(), a.cols()) * FID_EPS;
    ca += &eye;
    cb += &eye;
    fid_from_stats(&ma, &ca, &mb, &cb)
}

// -- diversity ----------------------------------------------------------------------

fn row_dist(x: &Tensor<f64>, i: usize, j: usize) -> f64 {
    x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Mean distance over `s` disjoint random pairs of rows.
pub fn diversity(feats: &Tensor<f64>, s: usize, rng: &mut (impl Rng + ?Sized)) -> Result<f64> {
    let n = feats.rows();
    if s == 0 || n < 2 * s {
        return Err(Error::Contract(format!("diversity with S={s} needs at least {} samples, got {n}", 2 * s)));
    }
    let idx = sample(rng, n, 2 * s).into_vec();
    Ok((0..s).map(|k| row_dist(feats, idx[k], idx[k + s])).sum::<f64>() / s as f64)
}

/// Mean over groups (samples sharing one condition) of the within-group diversity.
pub fn multimodality(groups: &[Tensor<f64>], s: usize, rng: &mut (impl Rng + ?Sized)) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Contract("multimodality needs at least one group".into()));
    }
    let mut total = 0.0;
    for g in groups {
        total += diversity(g, s, rng)?;
    }
    Ok(total / groups.len() as f64)
}

// -- coordinate-space errors -----------------------------------------------------------

/// Columns of the 3×3 rotation given by a 6D representation (two columns,
/// Gram-Schmidt orthonormalised).
pub fn rot6d_to_matrix(v: &[f64]) -> [[f64; 3]; 3] {
    let norm = |a: [f64; 3]| {
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt().max(1e-12);
        [a[0] / n, a[1] / n, a[2] / n]
    };
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let b1 = norm([v[0], v[1], v[2]]);
    let a2 = [v[3], v[4], v[5]];
    let p = dot(b1, a2);
    let b2 = norm([a2[0] - p * b1[0], a2[1] - p * b1[1], a2[2] - p * b1[2]]);
    let b3 = [b1[1] * b2[2] - b1[2] * b2[1], b1[2] * b2[0] - b1[0] * b2[2], b1[0] * b2[1] - b1[1] * b2[0]];
    // row-major matrix with b1, b2, b3 as columns
    [[b1[0], b2[0], b3[0]], [b1[1], b2[1], b3[1]], [b1[2], b2[2], b3[2]]]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Unit rest direction of joint `j` of `k` (points spread over a sphere).
pub fn rest_direction(j: usize, k: usize) -> [f64; 3] {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let y = 1.0 - 2.0 * (j as f64 + 0.5) / k as f64;
    let r = (1.0 - y * y).max(0.0).sqrt();
    let th = golden * j as f64;
    [r * th.cos(), y, r * th.sin()]
}

/// Positions `[N][1 + K][3]`: the root, then each joint on a unit bone from the
/// root, `p_j = t + R_root · R_j · u_j`.
pub fn star_positions(m: &MotionSequence) -> Vec<Vec<[f64; 3]>> {
    let layout = m.layout;
    let k = layout.num_joints;
    (0..m.len())
        .map(|f| {
            let row: Vec<f64> = m.frames.row(f).iter().map(|&v| v as f64).collect();
            let to = layout.translation_offset();
            let t = [row[to], row[to + 1], row[to + 2]];
            let oo = layout.orient_offset();
            let root = rot6d_to_matrix(&row[oo..oo + ROT6D]);
            let mut pts = Vec::with_capacity(k + 1);
            pts.push(t);
            for j in 0..k {
                let o = layout.joint_offset(j);
                let rj = rot6d_to_matrix(&row[o..o + ROT6D]);
                let local = mat_vec(&rj, rest_direction(j, k));
                let w = mat_vec(&root, local);
                pts.push([t[0] + w[0], t[1] + w[1], t[2] + w[2]]);
            }
            pts
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupPair {
    pub root: f64,
    pub hands: f64,
}

/// Position and variance errors for the root point and the hand joints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApeAve {
    pub ape: GroupPair,
    pub ave: GroupPair,
}

fn group_errors(gen: &[Vec<[f64; 3]>], reference: &[Vec<[f64; 3]>], points: &[usize]) -> (f64, f64) {
    let n = gen.len() as f64;
    let dist = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let mut ape = 0.0;
    for (g, r) in gen.iter().zip(reference) {
        for &p in points {
            ape += dist(g[p], r[p]);
        }
    }
    ape /= n * points.len() as f64;
    let var = |seq: &[Vec<[f64; 3]>], p: usize| {
        let mut mean = [0.0; 3];
        for fr in seq {
            for c in 0..3 {
                mean[c] += fr[p][c] / n;
            }
        }
        let mut v = [0.0; 3];
        for fr in seq {
            for c in 0..3 {
                v[c] += (fr[p][c] - mean[c]).powi(2) / n;
            }
        }
        v
    };
    let ave = points.iter().map(|&p| dist(var(gen, p), var(reference, p))).sum::<f64>() / points.len() as f64;
    (ape, ave)
}

pub fn ape_ave(generated: &MotionSequence, reference: &MotionSequence) -> Result<ApeAve> {
    if generated.layout != reference.layout || generated.frames.shape() != reference.frames.shape() {
        return Err(Error::Contract(format!(
            "APE/AVE need equal shapes, got {:?} and {:?}",
            generated.frames.shape(),
            reference.frames.shape()
        )));
    }
    let g = star_positions(generated);
    let r = star_positions(reference);
    let k = generated.layout.num_joints;
    let hands: Vec<usize> = hand_joints(&generated.layout).map(|j| j + 1).collect();
    let hands = if hands.is_empty() { (1..=k).collect() } else { hands };
    let (ape_r, ave_r) = group_errors(&g, &r, &[0]);
    let (ape_h, ave_h) = group_errors(&g, &r, &hands);
    Ok(ApeAve { ape: GroupPair { root: ape_r, hands: ape_h }, ave: GroupPair { root: ave_r, hands: ave_h } })
}

fn hand_joints(layout: &MotionLayout) -> std::ops::Range<usize> {
    BODY_JOINTS.min(layout.num_joints)..layout.num_joints
}

// -- reports ----------------------------------------------------------------------

/// Mean and 95% confidence half-width of repeated measurements.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub ci95: f64,
}

impl Stat {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self { mean: f64::NAN, ci95: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Self { mean, ci95: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self { mean, ci95: 1.96 * (var / n).sqrt() }
    }
}

/// One repetition's metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RepMetrics {
    pub fid: f64,
    pub acc: f64,
    pub diversity: f64,
    pub multimodality: f64,
    pub ape: GroupPair,
    pub ave: GroupPair,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub root: Stat,
    pub hands: Stat,
}

/// Metrics of one protocol aggregated over repetitions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: Stat,
    pub acc: Stat,
    pub diversity: Stat,
    pub multimodality: Stat,
    pub ape: GroupStat,
    pub ave: GroupStat,
}

impl MetricReport {
    pub fn aggregate(reps: &[RepMetrics]) -> Self {
        let s = |f: &dyn Fn(&RepMetrics) -> f64| Stat::from_samples(&reps.iter().map(f).collect::<Vec<_>>());
        Self {
            fid: s(&|r| r.fid),
            acc: s(&|r| r.acc),
            diversity: s(&|r| r.diversity),
            multimodality: s(&|r| r.multimodality),
            ape: GroupStat { root: s(&|r| r.ape.root), hands: s(&|r| r.ape.hands) },
            ave: GroupStat { root: s(&|r| r.ave.root), hands: s(&|r| r.ave.hands) },
        }
    }

    /// `key = mean ± ci` lines under `prefix`.
    pub fn flat_lines(&self, prefix: &str) -> Vec<String> {
        let line = |k: &str, s: &Stat| format!("{prefix}.{k} = {:.6} ± {:.6}", s.mean, s.ci95);
        vec![
            line("fid", &self.fid),
            line("acc", &self.acc),
            line("diversity", &self.diversity),
            line("multimodality", &self.multimodality),
            line("ape.root", &self.ape.root),
            line("ape.hands", &self.ape.hands),
            line("ave.root", &self.ave.root),
            line("ave.hands", &self.ave.hands),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub repetitions: usize,
    /// Generated samples per repetition.
    pub samples: usize,
    /// Pairs drawn for diversity.
    pub diversity_pairs: usize,
    /// Conditions used for multimodality and pairs drawn within each.
    pub mm_conditions: usize,
    pub mm_pairs: usize,
    pub seed: u64,
    pub classifier: ClassifierConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repetitions: 20,
            samples: 100,
            diversity_pairs: 32,
            mm_conditions: 8,
            mm_pairs: 5,
            seed: 11,
            classifier: ClassifierConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 || self.samples == 0 || self.diversity_pairs == 0 || self.mm_pairs == 0 {
            return Err(Error::Config("eval: repetitions, samples and pair counts must be positive".into()));
        }
        if self.samples < 2 * self.diversity_pairs {
            return Err(Error::Config(format!(
                "eval: {} samples cannot supply {} disjoint diversity pairs",
                self.samples, self.diversity_pairs
            )));
        }
        Ok(())
    }
}

/// Anything producing reactions: `generate(actions, sample_ids)`.
pub trait ReactionSource {
    fn generate(&self, actions: &[&MotionSequence], samples: &[u64]) -> Result<Vec<MotionSequence>>;
}

/// Runs the sampling protocol on `pairs` (the conditioning split) for
/// `cfg.repetitions` repetitions. Real features come from `real`.
pub fn run_protocol(
    source: &dyn ReactionSource,
    clf: &Classifier,
    pairs: &[&InteractionPair],
    real: &[&MotionSequence],
    cfg: &EvalConfig,
    tag: &str,
) -> Result<(MetricReport, Vec<RepMetrics>)> {
    cfg.validate()?;
    if pairs.is_empty() || real.len() < 2 {
        return Err(Error::Contract("evaluation needs conditioning pairs and at least two real motions".into()));
    }
    let real_feats = clf.features(real)?;
    let mut reps = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        let mut rng = stream(cfg.seed, &[label(tag), rep as u64]);
        let picks: Vec<usize> = (0..cfg.samples).map(|_| rng.random_range(0..pairs.len())).collect();
        let actions: Vec<&MotionSequence> = picks.iter().map(|&i| &pairs[i].action).collect();
        let ids: Vec<u64> = (0..cfg.samples as u64).map(|i| ((rep as u64) << 32) | i).collect();
        let gen = source.generate(&actions, &ids)?;
        let gen_refs: Vec<&MotionSequence> = gen.iter().collect();
        let feats = clf.features(&gen_refs)?;
        let labels: Vec<usize> = picks.iter().map(|&i| pairs[i].class_label).collect();
        let acc = clf.accuracy(&gen_refs, &labels)?;
        let fid_v = fid(&feats, &real_feats)?;
        let div = diversity(&feats, cfg.diversity_pairs, &mut rng)?;

        let conds: Vec<usize> = (0..cfg.mm_conditions.min(pairs.len())).map(|_| rng.random_range(0..pairs.len())).collect();
        let per = 2 * cfg.mm_pairs;
        let mut groups = Vec::with_capacity(conds.len());
        for (ci, &c) in conds.iter().enumerate() {
            let acts = vec![&pairs[c].action; per];
            let ids: Vec<u64> = (0..per as u64).map(|i| (1 << 63) | ((rep as u64) << 40) | ((ci as u64) << 20) | i).collect();
            let g = source.generate(&acts, &ids)?;
            let refs: Vec<&MotionSequence> = g.iter().collect();
            groups.push(clf.features(&refs)?);
        }
        let mm = multimodality(&groups, cfg.mm_pairs, &mut rng)?;

        let mut ape = GroupPair::default();
        let mut ave = GroupPair::default();
        for (g, &i) in gen.iter().zip(&picks) {
            let e = ape_ave(g, &pairs[i].reaction)?;
            ape.root += e.ape.root;
            ape.hands += e.ape.hands;
            ave.root += e.ave.root;
            ave.hands += e.ave.hands;
        }
        let n = gen.len() as f64;
        let m = RepMetrics {
            fid: fid_v,
            acc,
            diversity: div,
            multimodality: mm,
            ape: GroupPair { root: ape.root / n, hands: ape.hands / n },
            ave: GroupPair { root: ave.root / n, hands: ave.hands / n },
        };
        reps.push(m);
    }
    Ok((MetricReport::aggregate(&reps), reps))
}

/// Generation through a trained model.
pub struct ModelSource<'a, R> {
    pub model: &'a crate::model::ReactionModel<R>,
    pub gen: &'a crate::generate::GenerationConfig,
    /// Largest batch handed to the generator at once.
    pub chunk: usize,
}

impl<R: Real> ReactionSource for ModelSource<'_, R> {
    fn generate(&self, actions: &[&MotionSequence], samples: &[u64]) -> Result<Vec<MotionSequence>> {
        let mut out = Vec::with_capacity(actions.len());
        for (a, s) in actions.chunks(self.chunk.max(1)).zip(samples.chunks(self.chunk.max(1))) {
            out.extend(crate::generate::generate_batch(self.model, a, self.gen, s)?);
        }
        Ok(out)
    }
}
