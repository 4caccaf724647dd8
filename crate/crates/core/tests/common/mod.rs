//! Finite-difference gradient suite shared by the op tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reactsynth_core::diffusion::{init_diffusion_head, predict_noise_graph, DiffusionConfig};
use reactsynth_core::reactor::{forward, init_mum, init_reactor, mum, AttentionMode, MumDirection, ReactorBatch, ReactorConfig};
use reactsynth_core::tensor::{grad_check, grad_check_params, Activation, ParamStore, Tape, Tensor, Var};
use reactsynth_core::vae::{decode_graph, encode_graph, init_unit_vae, kl_graph, reparameterize_graph, VaeConfig};
use reactsynth_core::Result;

pub const OP_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>);

pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-5;
    let cases: Vec<Case> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_ta", vec![vec![4, 3], vec![4, 2]], Box::new(|t, v| t.matmul_t(v[0], v[1], true, false))),
        ("matmul_tb", vec![vec![3, 4], vec![2, 4]], Box::new(|t, v| t.matmul_t(v[0], v[1], false, true))),
        ("matmul_tt", vec![vec![4, 3], vec![2, 4]], Box::new(|t, v| t.matmul_t(v[0], v[1], true, true))),
        ("seg_matmul", vec![vec![6, 4], vec![8, 3]], Box::new(|t, v| t.seg_matmul(v[0], v[1], 2, false, false))),
        ("seg_matmul_tb", vec![vec![6, 4], vec![10, 4]], Box::new(|t, v| t.seg_matmul(v[0], v[1], 2, false, true))),
        ("seg_matmul_ta", vec![vec![8, 3], vec![8, 2]], Box::new(|t, v| t.seg_matmul(v[0], v[1], 2, true, false))),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_row", vec![vec![4, 3], vec![3]], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("mul_row", vec![vec![4, 3], vec![3]], Box::new(|t, v| t.mul_row(v[0], v[1]))),
        ("affine", vec![vec![5]], Box::new(|t, v| t.affine(v[0], -1.5, 0.3))),
        ("mean", vec![vec![2, 5]], Box::new(|t, v| t.mean(v[0]))),
        ("softmax", vec![vec![3, 5]], Box::new(|t, v| t.softmax_rows(v[0]))),
        (
            "masked_softmax",
            vec![vec![4, 3]],
            Box::new(|t, v| t.masked_softmax(v[0], Some(&[true, false, false, true, true, false]))),
        ),
        ("layer_norm", vec![vec![4, 8], vec![8], vec![8]], Box::new(|t, v| t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5))),
        ("layer_norm_plain", vec![vec![3, 6]], Box::new(|t, v| t.layer_norm(v[0], None, None, 1e-5))),
        ("conv1d", vec![vec![2, 9], vec![3, 2, 3]], Box::new(|t, v| t.conv1d(v[0], v[1], 2, 1))),
        (
            "conv1d_ext",
            vec![vec![2, 12], vec![3, 2, 4], vec![3]],
            Box::new(|t, v| t.conv1d_ext(v[0], v[1], Some(v[2]), 2, 2, 0, 2)),
        ),
        ("relu", vec![vec![7]], Box::new(|t, v| t.activation(v[0], Activation::Relu))),
        ("silu", vec![vec![7]], Box::new(|t, v| t.activation(v[0], Activation::Silu))),
        ("gelu", vec![vec![7]], Box::new(|t, v| t.activation(v[0], Activation::Gelu))),
        ("exp", vec![vec![6]], Box::new(|t, v| t.exp(v[0]))),
        ("clamp", vec![vec![6]], Box::new(|t, v| t.clamp(v[0], -0.5, 0.5))),
        ("transpose", vec![vec![3, 4]], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![vec![3, 4]], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        ("upsample", vec![vec![3, 4]], Box::new(|t, v| t.upsample_cols(v[0], 2))),
        ("slice_cols", vec![vec![3, 5]], Box::new(|t, v| t.slice_cols(v[0], 1, 3))),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("gather_rows", vec![vec![4, 3]], Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 3]))),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("select_rows", vec![vec![4, 3], vec![3]], Box::new(|t, v| t.select_rows(v[0], v[1], &[true, false, true, false]))),
        ("mean_cols", vec![vec![3, 8]], Box::new(|t, v| t.mean_cols(v[0], 2))),
        ("smooth_l1", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| {
            let a = t.scale(v[0], 3.0)?;
            t.smooth_l1(a, v[1], 1.0)
        })),
        ("cross_entropy", vec![vec![4, 3]], Box::new(|t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]))),
    ];
    cases
        .into_iter()
        .map(|(name, shapes, f)| {
            let inputs: Vec<_> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
            (name, grad_check(|t, v| f(t, v), &inputs, h).unwrap())
        })
        .collect()
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for (name, t) in store.iter_mut() {
        let is_gain = name.ends_with(".g");
        for v in t.data_mut() {
            *v = if is_gain { 1.0 + rng.random_range(-0.2..0.2) } else { rng.random_range(-scale..scale) };
        }
    }
}

fn reactor_error(cfg: ReactorConfig, seed: u64) -> f64 {
    let units: Vec<String> = vec!["body".into(), "hands".into()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_reactor(&mut store, &cfg, &units, 3, &mut rng);
    randomize(&mut store, &mut rng, 0.4);
    let len = 4;
    let actor = vec![rand_tensor(&[len, 3], &mut rng), rand_tensor(&[len, 3], &mut rng)];
    let reactor = vec![rand_tensor(&[len, 3], &mut rng), rand_tensor(&[len, 3], &mut rng)];
    let masked = vec![true, false, true, false];
    let d = cfg.d_model;
    let weights = Tensor::from_fn(vec![len, d], |i| (i as f64 * 0.31).sin());
    grad_check_params(
        |tape, store| {
            let batch = ReactorBatch { actor: &actor, reactor: &reactor, masked: &masked, segments: 1, len };
            let out = forward(tape, store, &cfg, &units, &batch, None)?;
            let w = tape.constant(weights.clone());
            let a = tape.mul(out[0], w)?;
            let b = tape.mul(out[1], out[1])?;
            let a = tape.sum(a)?;
            let b = tape.sum(b)?;
            tape.add(a, b)
        },
        &store,
        1e-6,
    )
    .unwrap()
}

fn mum_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 4;
    let mut store = ParamStore::<f64>::new();
    init_mum(&mut store, "m.from_body", d);
    init_mum(&mut store, "m.from_hands", d);
    randomize(&mut store, &mut rng, 0.5);
    store.insert("body", rand_tensor(&[3, d], &mut rng));
    store.insert("hands", rand_tensor(&[3, d], &mut rng));
    grad_check_params(
        |tape, store| {
            let (b, h) = (tape.param(store, "body")?, tape.param(store, "hands")?);
            let (bo, ho) = mum(tape, store, "m", b, h, MumDirection::Both)?;
            let bo = tape.mul(bo.expect("both directions"), b)?;
            let s = tape.add(bo, ho.expect("both directions"))?;
            tape.sum(s)
        },
        &store,
        1e-6,
    )
    .unwrap()
}

fn diffusion_error(seed: u64) -> f64 {
    let cfg = DiffusionConfig { hidden: 8, blocks: 2, batch_mul: 1, ..DiffusionConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    init_diffusion_head(&mut store, "h", 3, 4, &cfg, &mut rng);
    randomize(&mut store, &mut rng, 0.5);
    store.insert("x", rand_tensor(&[3, 3], &mut rng));
    store.insert("z", rand_tensor(&[3, 4], &mut rng));
    grad_check_params(
        |tape, store| {
            let (x, z) = (tape.param(store, "x")?, tape.param(store, "z")?);
            let out = predict_noise_graph(tape, store, "h", &cfg, x, &[1, 50, 999], z)?;
            let sq = tape.mul(out, out)?;
            tape.sum(sq)
        },
        &store,
        1e-6,
    )
    .unwrap()
}

/// Zero-initialised biases put ReLU inputs exactly on the kink wherever a
/// window sees only zeros; small random biases move the check off it.
pub fn jitter_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (name, t) in store.iter_mut() {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
}

fn vae_error(seed: u64) -> f64 {
    let cfg = VaeConfig { latent_dim: 3, width: 4, ..VaeConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_unit_vae(&mut store, "u", 3, &cfg, &mut rng);
    jitter_biases(&mut store, &mut rng);
    store.insert("x", rand_tensor(&[3, 16], &mut rng));
    let eps = rand_tensor(&[3, 4], &mut rng);
    grad_check_params(
        |tape, store| {
            let x = tape.param(store, "x")?;
            let (mu, lv) = encode_graph(tape, store, "u", &cfg, x, 2)?;
            let z = reparameterize_graph(tape, mu, lv, eps.clone())?;
            let xhat = decode_graph(tape, store, "u", &cfg, z, 2)?;
            let recon = tape.smooth_l1(xhat, x, 1.0)?;
            let kl = kl_graph(tape, mu, lv)?;
            tape.add(recon, kl)
        },
        &store,
        1e-5,
    )
    .unwrap()
}

/// Composite blocks: fusion stages alone, with modulation, online, the
/// modulation pair, the noise estimator and a unit VAE.
pub fn composite_gradient_errors() -> Vec<(&'static str, f64)> {
    let base = ReactorConfig { blocks: 1, d_model: 16, heads: 2, ff_hidden: 8, max_tokens: 4, ..ReactorConfig::default() };
    vec![
        ("acf_block", reactor_error(ReactorConfig { mum: false, ..base.clone() }, 11)),
        ("acf_block_online", reactor_error(ReactorConfig { mum: false, mode: AttentionMode::Online, ..base.clone() }, 12)),
        ("acf_mum_stack", reactor_error(ReactorConfig { blocks: 2, ..base }, 13)),
        ("mum", mum_error(14)),
        ("diffusion_mlp", diffusion_error(15)),
        ("unit_vae", vae_error(16)),
    ]
}
