use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reactsynth_core::reactor::{
    apply_random_mask, attention, attention_mask_for, forward, init_attention, init_reactor, modulate, mum,
    AttentionMode, Fusion, MumDirection, ReactorBatch, ReactorConfig,
};
use reactsynth_core::tensor::{grad_check_params, ParamStore, Tape, Tensor};
use reactsynth_core::Error;

fn units() -> Vec<String> {
    vec!["body".into(), "hands".into()]
}

fn tiny_cfg() -> ReactorConfig {
    ReactorConfig { blocks: 2, d_model: 8, heads: 2, ff_hidden: 12, max_tokens: 8, ..ReactorConfig::default() }
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for (name, t) in store.iter_mut() {
        let is_gain = name.ends_with(".g");
        for v in t.data_mut() {
            *v = if is_gain { 1.0 + rng.random_range(-0.2..0.2) } else { rng.random_range(-scale..scale) };
        }
    }
}

struct Fixture {
    cfg: ReactorConfig,
    store: ParamStore<f64>,
    actor: Vec<Tensor<f64>>,
    reactor: Vec<Tensor<f64>>,
    masked: Vec<bool>,
    segments: usize,
    len: usize,
}

impl Fixture {
    fn new(cfg: ReactorConfig, segments: usize, len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_reactor(&mut store, &cfg, &units(), 3, &mut rng);
        randomize(&mut store, &mut rng, 0.4);
        let rows = segments * len;
        let actor = vec![rand_t(&[rows, 3], &mut rng), rand_t(&[rows, 3], &mut rng)];
        let reactor = vec![rand_t(&[rows, 3], &mut rng), rand_t(&[rows, 3], &mut rng)];
        let masked = (0..rows).map(|_| rng.random_bool(0.5)).collect();
        Self { cfg, store, actor, reactor, masked, segments, len }
    }

    fn run(&self) -> Vec<Tensor<f64>> {
        let tape = Tape::inference();
        let batch = ReactorBatch {
            actor: &self.actor,
            reactor: &self.reactor,
            masked: &self.masked,
            segments: self.segments,
            len: self.len,
        };
        let out = forward(&tape, &self.store, &self.cfg, &units(), &batch, None).unwrap();
        out.iter().map(|v| (*tape.value(*v)).clone()).collect()
    }
}

fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, store: &ParamStore<f64>, name: &str, heads: usize, mask: &[bool]) -> Vec<f64> {
    let proj = |x: &Tensor<f64>, p: &str| {
        let w = store.get(&format!("{name}.{p}.w")).unwrap();
        let b = store.get(&format!("{name}.{p}.b")).unwrap();
        let (n, i, o) = (x.rows(), w.rows(), w.cols());
        Tensor::from_fn(vec![n, o], |idx| {
            let (r, c) = (idx / o, idx % o);
            b.data()[c] + (0..i).map(|j| x.at(r, j) * w.at(j, c)).sum::<f64>()
        })
    };
    let (qq, kk, vv) = (proj(q, "q"), proj(k, "k"), proj(k, "v"));
    let (lq, lk, d) = (q.rows(), k.rows(), qq.cols());
    let dh = d / heads;
    let mut cat = Tensor::zeros(vec![lq, d]);
    for h in 0..heads {
        for i in 0..lq {
            let logits: Vec<f64> = (0..lk)
                .map(|j| (0..dh).map(|c| qq.at(i, h * dh + c) * kk.at(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let allowed: Vec<usize> = (0..lk).filter(|&j| mask[i * lk + j]).collect();
            if allowed.is_empty() {
                continue;
            }
            let m = allowed.iter().map(|&j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = allowed.iter().map(|&j| (logits[j] - m).exp()).sum();
            for c in 0..dh {
                let v: f64 = allowed.iter().map(|&j| (logits[j] - m).exp() / z * vv.at(j, h * dh + c)).sum();
                cat.data_mut()[i * d + h * dh + c] = v;
            }
        }
    }
    let cat_t = cat;
    let out = {
        let w = store.get(&format!("{name}.o.w")).unwrap();
        let b = store.get(&format!("{name}.o.b")).unwrap();
        Tensor::from_fn(vec![lq, d], |idx| {
            let (r, c) = (idx / d, idx % d);
            b.data()[c] + (0..d).map(|j| cat_t.at(r, j) * w.at(j, c)).sum::<f64>()
        })
    };
    out.data().to_vec()
}

#[test]
fn attention_matches_dense_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    init_attention(&mut store, "a", 8, &mut rng);
    randomize(&mut store, &mut rng, 0.5);
    let q = rand_t(&[4, 8], &mut rng);
    let k = rand_t(&[4, 8], &mut rng);
    for (heads, mode) in [(1, AttentionMode::Offline), (2, AttentionMode::Online), (4, AttentionMode::Offline)] {
        let mask = attention_mask_for(mode, 4);
        let tape = Tape::inference();
        let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
        let out = attention(&tape, &store, "a", qv, kv, heads, 1, &mask).unwrap();
        let oracle = naive_attention(&q, &k, &store, "a", heads, &mask);
        for (x, y) in tape.value(out).data().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn single_key_returns_value_row_and_empty_row_returns_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    init_attention(&mut store, "a", 4, &mut rng);
    randomize(&mut store, &mut rng, 0.5);
    let q = rand_t(&[2, 4], &mut rng);
    let k = rand_t(&[1, 4], &mut rng);
    let tape = Tape::inference();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let out = attention(&tape, &store, "a", qv, kv, 1, 1, &[true, false]).unwrap();
    let out = tape.value(out);
    let v = {
        let t = Tape::inference();
        let kv = t.constant(k.clone());
        let v = reactsynth_core::nn::linear(&t, &store, "a.v", kv).unwrap();
        let o = reactsynth_core::nn::linear(&t, &store, "a.o", v).unwrap();
        (*t.value(o)).clone()
    };
    for c in 0..4 {
        assert!((out.at(0, c) - v.at(0, c)).abs() < 1e-12);
        // fully masked row: zero attention output, so only the output bias remains
        assert!((out.at(1, c) - store.get("a.o.b").unwrap().data()[c]).abs() < 1e-12);
    }
}

#[test]
fn attention_masks() {
    assert!(attention_mask_for(AttentionMode::Offline, 5).iter().all(|&b| b));
    let m = attention_mask_for(AttentionMode::Online, 5);
    assert_eq!(&m[0..5], &[true, false, false, false, false]);
    for i in 0..5 {
        for j in 0..5 {
            assert_eq!(m[i * 5 + j], j <= i);
        }
    }
}

#[test]
fn random_mask_counts_and_uniformity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens = rand_t(&[16, 4], &mut rng);
    let emb = Tensor::from_f64(vec![4], &[9.0, 9.0, 9.0, 9.0]).unwrap();
    let (out, flags) = apply_random_mask(&tokens, 1.0, &mut rng, &emb).unwrap();
    assert!(flags.iter().all(|&f| f));
    assert!(out.data().iter().all(|&v| v == 9.0));
    let (out, flags) = apply_random_mask(&tokens, 0.0, &mut rng, &emb).unwrap();
    assert!(flags.iter().all(|&f| !f));
    assert_eq!(out, tokens);
    assert!(matches!(apply_random_mask(&tokens, 1.5, &mut rng, &emb), Err(Error::Contract(_))));

    let trials = 10_000;
    let mut counts = [0usize; 16];
    for _ in 0..trials {
        let (out, flags) = apply_random_mask(&tokens, 0.5, &mut rng, &emb).unwrap();
        assert_eq!(flags.iter().filter(|&&f| f).count(), 8);
        for (i, &f) in flags.iter().enumerate() {
            if f {
                counts[i] += 1;
                assert!(out.row(i).iter().all(|&v| v == 9.0));
            } else {
                assert_eq!(out.row(i), tokens.row(i));
            }
        }
    }
    let expected = trials as f64 * 0.5;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 15 degrees of freedom; 99.9th percentile ≈ 37.7
    assert!(chi2 < 37.7, "chi2 {chi2}");
}

#[test]
fn modulation_identity_zero_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 4;
    let body = rand_t(&[3, d], &mut rng);
    let hands = rand_t(&[3, d], &mut rng);
    let ln = |x: &Tensor<f64>| {
        Tensor::from_fn(x.shape().to_vec(), |i| {
            let r = x.row(i / d);
            let m = r.iter().sum::<f64>() / d as f64;
            let v = r.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
            (r[i % d] - m) / (v + 1e-5).sqrt()
        })
    };
    let mut store = ParamStore::<f64>::new();
    for n in ["m.from_body", "m.from_hands"] {
        store.init_const(&format!("{n}.w"), &[d, 2 * d], 0.0);
        store.insert(format!("{n}.b"), Tensor::from_f64(vec![2 * d], &[1., 1., 1., 1., 0., 0., 0., 0.]).unwrap());
    }
    let tape = Tape::inference();
    let (bv, hv) = (tape.constant(body.clone()), tape.constant(hands.clone()));
    let (b_out, h_out) = mum(&tape, &store, "m", bv, hv, MumDirection::Both).unwrap();
    assert!(tape.value(h_out.unwrap()).max_abs_diff(&ln(&hands)) < 1e-12);
    assert!(tape.value(b_out.unwrap()).max_abs_diff(&ln(&body)) < 1e-12);

    store.insert("m.from_body.b", Tensor::from_f64(vec![2 * d], &[0., 0., 0., 0., 0.5, -1., 2., 3.]).unwrap());
    let tape = Tape::inference();
    let (bv, hv) = (tape.constant(body.clone()), tape.constant(hands.clone()));
    let out = modulate(&tape, &store, "m.from_body", bv, hv).unwrap();
    for r in 0..3 {
        assert_eq!(tape.value(out).row(r), &[0.5, -1., 2., 3.]);
    }

    randomize(&mut store, &mut rng, 0.5);
    let tape = Tape::inference();
    let (bv, hv) = (tape.constant(body.clone()), tape.constant(hands.clone()));
    let out = modulate(&tape, &store, "m.from_body", bv, hv).unwrap();
    let (w, b) = (store.get("m.from_body.w").unwrap(), store.get("m.from_body.b").unwrap());
    let nh = ln(&hands);
    for r in 0..3 {
        for c in 0..d {
            let ss = |col: usize| b.data()[col] + (0..d).map(|j| body.at(r, j) * w.at(j, col)).sum::<f64>();
            let oracle = ss(c) * nh.at(r, c) + ss(d + c);
            assert!((tape.value(out).at(r, c) - oracle).abs() < 1e-6);
        }
    }

    let (b_out, h_out) = mum(&tape, &store, "m", bv, hv, MumDirection::B2h).unwrap();
    assert!(b_out.is_none() && h_out.is_some());
    let (b_out, h_out) = mum(&tape, &store, "m", bv, hv, MumDirection::H2b).unwrap();
    assert!(b_out.is_some() && h_out.is_none());
}

#[test]
fn zero_blocks_pass_inputs_through() {
    let cfg = ReactorConfig { mum: true, ..tiny_cfg() };
    let mut f = Fixture::new(cfg, 2, 5, 5);
    // identity input projections, zero sublayers, identity norms
    let names: Vec<String> = f.store.names().cloned().collect();
    for n in &names {
        let t = f.store.get_mut(n).unwrap();
        if n.contains(".block") {
            let v = if n.ends_with(".g") { 1.0 } else { 0.0 };
            t.data_mut().iter_mut().for_each(|x| *x = v);
        }
    }
    let d = f.cfg.d_model;
    for u in ["body", "hands"] {
        for s in ["in_actor", "in_reactor"] {
            f.store.insert(format!("reactor.{u}.{s}.w"), Tensor::from_fn(vec![3, d], |i| if i / d == i % d { 1.0 } else { 0.0 }));
            f.store.insert(format!("reactor.{u}.{s}.b"), Tensor::zeros(vec![d]));
        }
    }
    let out = f.run();
    let pos = f.store.get("reactor.pos_embedding").unwrap();
    let emb = f.store.get("reactor.mask_embedding").unwrap();
    for (u, z) in out.iter().enumerate() {
        for r in 0..10 {
            for c in 0..d {
                let input = if f.masked[r] { emb.data()[c] } else if c < 3 { f.reactor[u].at(r, c) } else { 0.0 };
                assert!((z.at(r, c) - (input + pos.at(r % 5, c))).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn online_outputs_ignore_future_tokens() {
    for fusion in [Fusion::Acf, Fusion::Concat] {
        let cfg = ReactorConfig { mode: AttentionMode::Online, fusion, ..tiny_cfg() };
        let mut f = Fixture::new(cfg, 1, 6, 6);
        let base = f.run();
        let j = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for u in 0..2 {
            for r in j + 1..6 {
                for c in 0..3 {
                    f.actor[u].data_mut()[r * 3 + c] = rng.random_range(-2.0..2.0);
                    f.reactor[u].data_mut()[r * 3 + c] = rng.random_range(-2.0..2.0);
                }
            }
        }
        for r in j + 1..6 {
            f.masked[r] = !f.masked[r];
        }
        let after = f.run();
        for u in 0..2 {
            for r in 0..=j {
                assert_eq!(base[u].row(r), after[u].row(r), "unit {u} row {r}");
            }
            assert!((j + 1..6).any(|r| base[u].row(r) != after[u].row(r)));
        }
    }
}

#[test]
fn offline_and_online_differ() {
    let f_on = Fixture::new(ReactorConfig { mode: AttentionMode::Online, ..tiny_cfg() }, 1, 6, 7);
    let mut f_off = Fixture::new(ReactorConfig { mode: AttentionMode::Offline, ..tiny_cfg() }, 1, 6, 7);
    f_off.store = f_on.store.clone();
    let (a, b) = (f_on.run(), f_off.run());
    assert!(a[0].max_abs_diff(&b[0]) > 1e-6);
}

#[test]
fn offline_forward_is_permutation_equivariant_without_positions() {
    let cfg = ReactorConfig { mode: AttentionMode::Offline, ..tiny_cfg() };
    let mut f = Fixture::new(cfg, 1, 6, 8);
    f.store.get_mut("reactor.pos_embedding").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let base = f.run();
    let perm = [3usize, 0, 5, 1, 4, 2];
    let permute = |t: &Tensor<f64>| {
        let c = t.cols();
        Tensor::from_fn(t.shape().to_vec(), |i| t.at(perm[i / c], i % c))
    };
    f.actor = f.actor.iter().map(permute).collect();
    f.reactor = f.reactor.iter().map(permute).collect();
    f.masked = perm.iter().map(|&p| f.masked[p]).collect();
    let after = f.run();
    for u in 0..2 {
        assert!(after[u].max_abs_diff(&permute(&base[u])) < 1e-10);
    }
}

#[test]
fn units_are_independent_without_modulation() {
    let cfg = ReactorConfig { mum: false, ..tiny_cfg() };
    let mut f = Fixture::new(cfg, 1, 5, 9);
    assert!(!f.store.names().any(|n| n.contains("mum")));
    let base = f.run();
    f.actor[1] = Tensor::zeros(vec![5, 3]);
    f.reactor[1] = Tensor::zeros(vec![5, 3]);
    let after = f.run();
    assert_eq!(base[0], after[0]);
    assert_ne!(base[1], after[1]);

    let cfg = ReactorConfig { mum: true, ..tiny_cfg() };
    let mut f = Fixture::new(cfg, 1, 5, 9);
    let base = f.run();
    f.actor[1] = Tensor::zeros(vec![5, 3]);
    assert_ne!(base[0], f.run()[0]);
}

#[test]
fn unit_stacks_share_no_gradients_outside_modulation() {
    let grads_of_body = |cfg: ReactorConfig| {
        let f = Fixture::new(cfg, 1, 4, 10);
        let tape = Tape::new();
        for n in f.store.names().cloned().collect::<Vec<_>>() {
            tape.param(&f.store, &n).unwrap();
        }
        let batch = ReactorBatch { actor: &f.actor, reactor: &f.reactor, masked: &f.masked, segments: 1, len: 4 };
        let out = forward(&tape, &f.store, &f.cfg, &units(), &batch, None).unwrap();
        let loss = tape.sum(out[0]).unwrap();
        tape.backward(loss).unwrap().into_named()
    };
    let is_hands = |n: &str| n.contains(".hands.") || n.contains("from_body");
    for cfg in [
        ReactorConfig { mum: false, ..tiny_cfg() },
        ReactorConfig { mum_direction: MumDirection::B2h, ..tiny_cfg() },
    ] {
        let g = grads_of_body(cfg);
        for (n, t) in &g {
            if is_hands(n) {
                assert!(t.data().iter().all(|v| *v == 0.0), "{n}");
            }
        }
    }
    // with hands→body modulation the hands stack reaches z_b only via the modulation linears
    let g = grads_of_body(tiny_cfg());
    assert!(g["reactor.block0.hands.ff1.w"].data().iter().any(|v| *v != 0.0));
    assert!(g["reactor.block1.mum.from_hands.w"].data().iter().any(|v| *v != 0.0));
}

#[test]
fn whole_forward_gradients_match_finite_differences() {
    for fusion in [Fusion::Acf, Fusion::Concat] {
        let cfg = ReactorConfig { blocks: 1, d_model: 16, heads: 2, ff_hidden: 8, max_tokens: 4, fusion, ..ReactorConfig::default() };
        let f = Fixture::new(cfg, 1, 4, 11);
        let weights = Tensor::from_fn(vec![4, 16], |i| (i as f64 * 0.31).sin());
        let err = grad_check_params(
            |tape, store| {
                let batch = ReactorBatch { actor: &f.actor, reactor: &f.reactor, masked: &f.masked, segments: 1, len: 4 };
                let out = forward(tape, store, &f.cfg, &units(), &batch, None)?;
                let w = tape.constant(weights.clone());
                let a = tape.mul(out[0], w)?;
                let b = tape.mul(out[1], out[1])?;
                let a = tape.sum(a)?;
                let b = tape.sum(b)?;
                tape.add(a, b)
            },
            &f.store,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "{fusion:?}: relative error {err}");
    }
}

#[test]
fn contract_errors() {
    let f = Fixture::new(tiny_cfg(), 1, 4, 12);
    let tape = Tape::inference();
    let short = vec![f.actor[0].clone(), Tensor::zeros(vec![3, 3])];
    let batch = ReactorBatch { actor: &short, reactor: &f.reactor, masked: &f.masked, segments: 1, len: 4 };
    assert!(matches!(forward(&tape, &f.store, &f.cfg, &units(), &batch, None), Err(Error::Contract(_))));
    let batch = ReactorBatch { actor: &f.actor, reactor: &f.reactor, masked: &f.masked[..3], segments: 1, len: 4 };
    assert!(matches!(forward(&tape, &f.store, &f.cfg, &units(), &batch, None), Err(Error::Contract(_))));
    assert!(ReactorConfig { d_model: 10, heads: 4, ..tiny_cfg() }.validate().is_err());
    assert!(ReactorConfig { mask_ratio_min: 0.9, mask_ratio_max: 0.8, ..tiny_cfg() }.validate().is_err());
}

#[test]
fn large_configuration_runs() {
    let cfg = ReactorConfig { blocks: 8, d_model: 384, heads: 4, ff_hidden: 1536, max_tokens: 16, ..ReactorConfig::default() };
    cfg.validate().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f32>::new();
    init_reactor(&mut store, &cfg, &units(), 64, &mut rng);
    let actor = vec![Tensor::<f32>::zeros(vec![8, 64]), Tensor::zeros(vec![8, 64])];
    let masked = vec![true; 8];
    let batch = ReactorBatch { actor: &actor, reactor: &actor, masked: &masked, segments: 1, len: 8 };
    let tape = Tape::inference();
    let out = forward(&tape, &store, &cfg, &units(), &batch, None).unwrap();
    assert_eq!(tape.shape(out[0]), vec![8, 384]);
    assert!(tape.value(out[1]).is_finite());
}
