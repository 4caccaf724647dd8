use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use reactsynth_core::eval::*;
use reactsynth_core::motion::{make_synthetic_dataset, DatasetConfig, InteractionPair, MotionSequence};
use reactsynth_core::tensor::Tensor;
use reactsynth_core::Error;

fn gaussian(n: usize, f: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(vec![n, f], |_| rng.sample(StandardNormal))
}

#[test]
fn fid_of_a_set_with_itself_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for f in [2usize, 8, 32] {
        let x = gaussian(200, f, &mut rng);
        assert!(fid(&x, &x).unwrap().abs() < 1e-6);
    }
}

#[test]
fn fid_of_a_shifted_set_is_the_squared_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian(150, 6, &mut rng);
    let v: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = Tensor::from_fn(vec![150, 6], |i| x.data()[i] + v[i % 6]);
    let expect: f64 = v.iter().map(|a| a * a).sum();
    assert!((fid(&x, &y).unwrap() - expect).abs() < 1e-6);
}

fn spd2(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(2, 2) * 0.1
}

/// Tr((AB)^{1/2}) for 2×2 SPD A, B from the eigenvalues of AB:
/// √λ1 + √λ2 = √(tr(AB) + 2√det(AB)).
fn trace_root_2x2(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let p = a * b;
    (p.trace() + 2.0 * p.determinant().sqrt()).sqrt()
}

#[test]
fn fid_matches_the_two_by_two_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let (ca, cb) = (spd2(&mut rng), spd2(&mut rng));
        let ma = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
        let mb = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
        let oracle = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * trace_root_2x2(&ca, &cb);
        let got = fid_from_stats(&ma, &ca, &mb, &cb).unwrap();
        assert!((got - oracle).abs() < 1e-8, "{got} vs {oracle}");
    }
}

#[test]
fn fid_is_symmetric_and_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let a = gaussian(60, 5, &mut rng);
        let b = Tensor::from_fn(vec![80, 5], |i| rng.sample::<f64, _>(StandardNormal) * (1.0 + (i % 5) as f64 * 0.3) + 0.2);
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab >= -1e-6);
    }
}

#[test]
fn fid_rejects_bad_inputs() {
    let a = Tensor::<f64>::zeros(vec![10, 3]);
    let b = Tensor::<f64>::zeros(vec![10, 4]);
    assert!(matches!(fid(&a, &b), Err(Error::Dimension { .. })));
    let one = Tensor::<f64>::zeros(vec![1, 3]);
    assert!(matches!(fid(&one, &a), Err(Error::Contract(_))));
    let nan = Tensor::<f64>::full(vec![10, 3], f64::NAN);
    assert!(fid(&nan, &a).is_err());
}

#[test]
fn diversity_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let same = Tensor::<f64>::full(vec![20, 4], 0.7);
    assert_eq!(diversity(&same, 10, &mut rng).unwrap(), 0.0);
    let v = [3.0, -4.0, 12.0];
    let two = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, v[0], v[1], v[2]]).unwrap();
    assert!((diversity(&two, 1, &mut rng).unwrap() - 13.0).abs() < 1e-12);
    assert!(matches!(diversity(&two, 2, &mut rng), Err(Error::Contract(_))));
}

#[test]
fn diversity_converges_on_a_gaussian_cloud() {
    // E‖x − y‖ for x, y ~ N(0, I_f) approaches √(2f) for large f.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = gaussian(20_000, 16, &mut rng);
    let vals: Vec<f64> = (0..4).map(|s| diversity(&x, 10_000, &mut ChaCha8Rng::seed_from_u64(s)).unwrap()).collect();
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    for v in &vals {
        assert!((v - m).abs() / m < 0.02, "{vals:?}");
    }
}

#[test]
fn multimodality_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let groups: Vec<Tensor<f64>> = (0..5).map(|g| Tensor::full(vec![10, 3], g as f64)).collect();
    assert_eq!(multimodality(&groups, 5, &mut rng).unwrap(), 0.0);

    let g = gaussian(10, 3, &mut rng);
    let a = multimodality(std::slice::from_ref(&g), 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = diversity(&g, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);

    let small = vec![gaussian(3, 2, &mut rng)];
    assert!(matches!(multimodality(&small, 2, &mut rng), Err(Error::Contract(_))));
    assert!(matches!(multimodality(&[], 2, &mut rng), Err(Error::Contract(_))));
}

#[test]
fn multimodality_matches_all_pairs_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let groups: Vec<Tensor<f64>> = (0..3).map(|_| gaussian(6, 2, &mut rng)).collect();
    let brute: f64 = groups
        .iter()
        .map(|g| {
            let n = g.rows();
            let mut s = 0.0;
            let mut c = 0;
            for i in 0..n {
                for j in i + 1..n {
                    s += g.row(i).iter().zip(g.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    c += 1;
                }
            }
            s / c as f64
        })
        .sum::<f64>()
        / 3.0;
    let trials = 4000;
    let est = (0..trials).map(|_| multimodality(&groups, 3, &mut rng).unwrap()).sum::<f64>() / trials as f64;
    assert!((est - brute).abs() / brute < 0.02, "{est} vs {brute}");
}

proptest! {
    #[test]
    fn diversity_is_reproducible_and_permutation_invariant_in_law(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(12, 3, &mut rng);
        let a = diversity(&x, 6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = diversity(&x, 6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
        // using all rows, every permutation gives a perfect matching of the same set
        prop_assert!(a >= 0.0);
    }
}

fn pairs() -> Vec<InteractionPair> {
    make_synthetic_dataset(&DatasetConfig { num_pairs: 16, frames: 16, ..DatasetConfig::default() }).unwrap()
}

#[test]
fn ape_ave_of_identical_motions_is_zero() {
    let p = &pairs()[0];
    let e = ape_ave(&p.reaction, &p.reaction).unwrap();
    assert_eq!(e, ApeAve::default());
}

#[test]
fn ape_ave_under_a_root_translation() {
    let p = &pairs()[1];
    let layout = p.reaction.layout;
    let v = [0.3f32, -1.2, 0.4];
    let mut frames = p.reaction.frames.clone();
    let d = layout.channels();
    let to = layout.translation_offset();
    for r in 0..frames.rows() {
        for c in 0..3 {
            frames.data_mut()[r * d + to + c] += v[c];
        }
    }
    let moved = MotionSequence::new(layout, p.reaction.fps, frames).unwrap();
    let e = ape_ave(&moved, &p.reaction).unwrap();
    let norm = (v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>()).sqrt();
    assert!((e.ape.root - norm).abs() < 1e-5);
    assert!((e.ape.hands - norm).abs() < 1e-5);
    assert!(e.ave.root < 1e-6 && e.ave.hands < 1e-6);
}

#[test]
fn ape_ave_matches_a_direct_formula() {
    let ps = pairs();
    let (g, r) = (&ps[2].reaction, &ps[3].reaction);
    let e = ape_ave(g, r).unwrap();
    let (pg, pr) = (star_positions(g), star_positions(r));
    let n = pg.len() as f64;
    let root_ape = pg.iter().zip(&pr).map(|(a, b)| dist(a[0], b[0])).sum::<f64>() / n;
    assert!((e.ape.root - root_ape).abs() < 1e-9);
    let k = g.layout.num_joints;
    let hands: Vec<usize> = (25..=k).collect();
    let mut hand_ape = 0.0;
    for (a, b) in pg.iter().zip(&pr) {
        for &h in &hands {
            hand_ape += dist(a[h], b[h]);
        }
    }
    hand_ape /= n * hands.len() as f64;
    assert!((e.ape.hands - hand_ape).abs() < 1e-9);
    let variance = |p: &[Vec<[f64; 3]>], j: usize| -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..3 {
            let m = p.iter().map(|f| f[j][c]).sum::<f64>() / n;
            out[c] = p.iter().map(|f| (f[j][c] - m).powi(2)).sum::<f64>() / n;
        }
        out
    };
    let root_ave = dist(variance(&pg, 0), variance(&pr, 0));
    assert!((e.ave.root - root_ave).abs() < 1e-9);
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[test]
fn ape_ave_rejects_mismatched_shapes() {
    let ps = pairs();
    let short = ps[0].reaction.truncate(8).unwrap();
    assert!(matches!(ape_ave(&short, &ps[0].reaction), Err(Error::Contract(_))));
}

#[test]
fn rot6d_yields_rotations() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = rot6d_to_matrix(&v);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        assert!((det - 1.0).abs() < 1e-9);
    }
    assert_eq!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
}

#[test]
fn stat_confidence_halves_when_samples_quadruple() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ratios = Vec::new();
    for _ in 0..50 {
        let xs: Vec<f64> = (0..80).map(|_| rng.sample(StandardNormal)).collect();
        ratios.push(Stat::from_samples(&xs).ci95 / Stat::from_samples(&xs[..20]).ci95);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((mean - 0.5).abs() < 0.15, "{mean}");
    assert_eq!(Stat::from_samples(&[2.0]), Stat { mean: 2.0, ci95: 0.0 });
}

#[test]
fn report_lists_every_metric() {
    let reps = vec![RepMetrics::default(); 3];
    let lines = MetricReport::aggregate(&reps).flat_lines("test");
    let keys: Vec<&str> = lines.iter().map(|l| l.split(' ').next().unwrap()).collect();
    assert_eq!(
        keys,
        ["test.fid", "test.acc", "test.diversity", "test.multimodality", "test.ape.root", "test.ape.hands", "test.ave.root", "test.ave.hands"]
    );
}

fn classifier_data() -> (Vec<InteractionPair>, Vec<InteractionPair>) {
    let all = make_synthetic_dataset(&DatasetConfig { num_pairs: 160, frames: 32, ..DatasetConfig::default() }).unwrap();
    all.into_iter().partition(|p| p.split == reactsynth_core::motion::SplitTag::Train)
}

fn small_classifier() -> ClassifierConfig {
    ClassifierConfig { steps: 150, ..ClassifierConfig::default() }
}

#[test]
fn classifier_separates_synthetic_classes() {
    let (train, test) = classifier_data();
    let refs: Vec<&InteractionPair> = train.iter().collect();
    let clf = Classifier::train_on_reactions(&refs, 4, &small_classifier()).unwrap();
    assert!(clf.holdout_accuracy >= 0.95, "holdout {}", clf.holdout_accuracy);
    let motions: Vec<&MotionSequence> = test.iter().map(|p| &p.reaction).collect();
    let labels: Vec<usize> = test.iter().map(|p| p.class_label).collect();
    let acc = clf.accuracy(&motions, &labels).unwrap();
    assert!(acc >= 0.95, "test accuracy {acc}");
    assert_eq!(clf.features(&motions).unwrap().cols(), clf.cfg.feature_dim);

    let again = Classifier::train_on_reactions(&refs, 4, &small_classifier()).unwrap();
    assert_eq!(again.params, clf.params);

    // constant rest pose carries no class information
    let rest = MotionSequence::new(motions[0].layout, 30.0, Tensor::zeros(vec![32, motions[0].layout.channels()])).unwrap();
    let preds = clf.predict(&[&rest]).unwrap();
    assert!(preds[0] < 4);
}

#[test]
fn classifier_on_shuffled_labels_is_near_chance() {
    let (train, test) = classifier_data();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let examples: Vec<(&MotionSequence, usize)> = train.iter().map(|p| (&p.reaction, rng.random_range(0..4))).collect();
    let cfg = ClassifierConfig { min_accuracy: 0.0, ..small_classifier() };
    let clf = Classifier::train(&examples, 4, &cfg).unwrap();
    let motions: Vec<&MotionSequence> = test.iter().map(|p| &p.reaction).collect();
    let labels: Vec<usize> = test.iter().map(|p| p.class_label).collect();
    let acc = clf.accuracy(&motions, &labels).unwrap();
    assert!(acc < 0.6, "accuracy {acc} on shuffled labels");

    let strict = ClassifierConfig { min_accuracy: 0.7, ..small_classifier() };
    assert!(matches!(Classifier::train(&examples, 4, &strict), Err(Error::Training { .. })));
}
