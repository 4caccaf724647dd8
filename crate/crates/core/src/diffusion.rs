//! Per-token diffusion head: cosine noise schedule, the conditioned denoising
//! MLP, the denoising loss and an ancestral sampler.
//!
//! The MLP predicts the noise added to a token. Conditioning `U = z + emb(t)`
//! feeds three shared linears `λ, γ, β`; each of the residual blocks computes
//! `v + λ ⊙ f(γ ⊙ LN(v) + β)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_linear, init_linear_zero, linear, LN_EPS};
use crate::real::Real;
use crate::rng::Rng as StreamRng;
use crate::tensor::{Activation, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Noise prediction trained with the denoising objective.
    Diffusion,
    /// The same MLP regressing the token directly with squared error.
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub t_diff: usize,
    pub s: f64,
    pub hidden: usize,
    pub blocks: usize,
    pub activation: Activation,
    pub loss: LossKind,
    /// Apply the loss to every token instead of masked tokens only.
    pub loss_on_all_positions: bool,
    /// Independent `(t, ε)` draws per selected token in each training step.
    pub batch_mul: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_diff: 1000,
            s: 0.008,
            hidden: 256,
            blocks: 3,
            activation: Activation::Silu,
            loss: LossKind::Diffusion,
            loss_on_all_positions: false,
            batch_mul: 2,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_diff == 0 || !(self.s > 0.0) || self.hidden == 0 || self.blocks == 0 || self.batch_mul == 0 {
            return Err(Error::Config(
                "diffusion: t_diff, s, hidden, blocks and batch_mul must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Cosine schedule tables indexed by `t ∈ 0..=T`; index 0 is the clean data.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub t_diff: usize,
    pub s: f64,
    pub alpha_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub const ALPHA_MIN: f64 = 0.001;

fn cosine_f(t: f64, t_diff: f64, s: f64) -> f64 {
    let c = ((t / t_diff + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
    c * c
}

/// One reverse step of a (possibly respaced) chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseStep {
    /// Original timestep the predictor is conditioned on.
    pub t: usize,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub sigma: f64,
}

impl NoiseSchedule {
    pub fn cosine(t_diff: usize, s: f64) -> Result<Self> {
        if t_diff == 0 || !(s > 0.0) {
            return Err(Error::Contract(format!("cosine schedule needs T ≥ 1 and s > 0 (got {t_diff}, {s})")));
        }
        let tf = t_diff as f64;
        let f0 = cosine_f(0.0, tf, s);
        let alpha_bar: Vec<f64> = (0..=t_diff).map(|t| cosine_f(t as f64, tf, s) / f0).collect();
        let mut alpha = vec![1.0; t_diff + 1];
        let mut sigma = vec![0.0; t_diff + 1];
        for t in 1..=t_diff {
            alpha[t] = (alpha_bar[t] / alpha_bar[t - 1]).max(ALPHA_MIN);
            sigma[t] = ((1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * (1.0 - alpha[t])).sqrt();
        }
        Ok(Self { t_diff, s, alpha_bar, alpha, sigma })
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_diff {
            return Err(Error::Contract(format!("timestep {t} outside 1..={}", self.t_diff)));
        }
        Ok(())
    }

    /// `√ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
    pub fn perturb<R: Real>(&self, x0: &[R], t: usize, eps: &[R]) -> Result<Vec<R>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(Error::dim("perturb", format!("{} vs {}", x0.len(), eps.len())));
        }
        let a = R::from_f64(self.alpha_bar[t].sqrt());
        let b = R::from_f64((1.0 - self.alpha_bar[t]).sqrt());
        Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
    }

    /// `num_steps` timesteps spread evenly over `1..=T`, ascending.
    pub fn strided_timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        if num_steps == 0 || num_steps > self.t_diff {
            return Err(Error::Contract(format!("num_steps must lie in 1..={}, got {num_steps}", self.t_diff)));
        }
        let t = self.t_diff as f64;
        Ok((1..=num_steps).map(|i| ((i as f64) * t / num_steps as f64).round() as usize).collect())
    }

    /// Reverse chain over the strided timesteps, from `T` down to the first
    /// stride. Each step's `α, σ` are recomputed from the `ᾱ` of consecutive
    /// retained timesteps (with the same `α ≥ 0.001` clip), so the last step
    /// lands on clean data; its `σ` is forced to zero.
    pub fn reverse_steps(&self, num_steps: usize) -> Result<Vec<ReverseStep>> {
        let ts = self.strided_timesteps(num_steps)?;
        let mut steps = Vec::with_capacity(ts.len());
        for (i, &t) in ts.iter().enumerate().rev() {
            let prev_bar = if i == 0 { self.alpha_bar[0] } else { self.alpha_bar[ts[i - 1]] };
            let alpha_bar = self.alpha_bar[t];
            let alpha = (alpha_bar / prev_bar).max(ALPHA_MIN);
            let sigma = if i == 0 { 0.0 } else { ((1.0 - prev_bar) / (1.0 - alpha_bar) * (1.0 - alpha)).sqrt() };
            steps.push(ReverseStep { t, alpha, alpha_bar, sigma });
        }
        Ok(steps)
    }
}

/// Sinusoidal features of integer timesteps, `[n × dim]`.
pub fn timestep_features<R: Real>(ts: &[usize], dim: usize) -> Tensor<R> {
    let half = dim / 2;
    let mut out = vec![R::ZERO; ts.len() * dim];
    for (r, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            out[r * dim + i] = R::from_f64(a.cos());
            out[r * dim + half + i] = R::from_f64(a.sin());
        }
    }
    Tensor::from_parts(vec![ts.len(), dim], out)
}

pub fn init_diffusion_head<R: Real>(
    store: &mut ParamStore<R>,
    prefix: &str,
    token_dim: usize,
    cond_dim: usize,
    cfg: &DiffusionConfig,
    rng: &mut (impl Rng + ?Sized),
) {
    let h = cfg.hidden;
    init_linear(store, &format!("{prefix}.temb1"), cond_dim, cond_dim, rng);
    init_linear(store, &format!("{prefix}.temb2"), cond_dim, cond_dim, rng);
    init_linear_zero(store, &format!("{prefix}.lambda"), cond_dim, h);
    init_linear_zero(store, &format!("{prefix}.gamma"), cond_dim, h);
    store.init_const(&format!("{prefix}.gamma.b"), &[h], 1.0);
    init_linear_zero(store, &format!("{prefix}.beta"), cond_dim, h);
    init_linear(store, &format!("{prefix}.in"), token_dim, h, rng);
    for k in 0..cfg.blocks {
        init_linear(store, &format!("{prefix}.block{k}.f1"), h, h, rng);
        init_linear(store, &format!("{prefix}.block{k}.f2"), h, h, rng);
    }
    init_linear(store, &format!("{prefix}.out"), h, token_dim, rng);
}

/// `ε̂(x_t | t, z)` for a batch: `x_t: [n × d]`, `z: [n × d_model]`, one timestep per row.
pub fn predict_noise_graph<R: Real>(
    tape: &Tape<R>,
    store: &ParamStore<R>,
    prefix: &str,
    cfg: &DiffusionConfig,
    x_t: Var,
    ts: &[usize],
    z: Var,
) -> Result<Var> {
    let cond_dim = tape.shape(z)[1];
    let temb = tape.constant(timestep_features(ts, cond_dim));
    let temb = linear(tape, store, &format!("{prefix}.temb1"), temb)?;
    let temb = tape.silu(temb)?;
    let temb = linear(tape, store, &format!("{prefix}.temb2"), temb)?;
    let u = tape.add(z, temb)?;
    let lambda = linear(tape, store, &format!("{prefix}.lambda"), u)?;
    let gamma = linear(tape, store, &format!("{prefix}.gamma"), u)?;
    let beta = linear(tape, store, &format!("{prefix}.beta"), u)?;
    let mut v = linear(tape, store, &format!("{prefix}.in"), x_t)?;
    for k in 0..cfg.blocks {
        let n = tape.layer_norm(v, None, None, LN_EPS)?;
        let n = tape.mul(gamma, n)?;
        let n = tape.add(n, beta)?;
        let f = linear(tape, store, &format!("{prefix}.block{k}.f1"), n)?;
        let f = tape.activation(f, cfg.activation)?;
        let f = linear(tape, store, &format!("{prefix}.block{k}.f2"), f)?;
        let f = tape.mul(lambda, f)?;
        v = tape.add(v, f)?;
    }
    linear(tape, store, &format!("{prefix}.out"), v)
}

fn gaussian_rows<R: Real>(n: usize, d: usize, rngs: &mut [StreamRng]) -> Vec<R> {
    let mut out = Vec::with_capacity(n * d);
    for rng in rngs.iter_mut().take(n) {
        for _ in 0..d {
            let e: f64 = StandardNormal.sample(rng);
            out.push(R::from_f64(e));
        }
    }
    out
}

/// Loss of one head on the selected tokens `x0: [n × d]` with conditioning
/// rows `z: [n × d_model]`. Each row is repeated `batch_mul` times with its
/// own `(t, ε)` from `rngs[row]`. Returns the mean over rows of the squared
/// error summed over token dimensions.
pub fn diffusion_loss_graph<R: Real>(
    tape: &Tape<R>,
    store: &ParamStore<R>,
    prefix: &str,
    cfg: &DiffusionConfig,
    sched: &NoiseSchedule,
    x0: &Tensor<R>,
    z: Var,
    rng: &mut StreamRng,
) -> Result<Var> {
    let (n, d) = (x0.rows(), x0.cols());
    if n == 0 || tape.shape(z)[0] != n {
        return Err(Error::Contract("diffusion loss needs a nonempty token set aligned with z".into()));
    }
    let reps = cfg.batch_mul;
    let idx: Vec<usize> = (0..reps).flat_map(|_| 0..n).collect();
    let z_rep = if reps == 1 { z } else { tape.gather_rows(z, &idx)? };
    let rows = n * reps;
    let (target, pred) = match cfg.loss {
        LossKind::Diffusion => {
            let mut ts = Vec::with_capacity(rows);
            let mut xt = Vec::with_capacity(rows * d);
            let mut eps_all = Vec::with_capacity(rows * d);
            for &r in &idx {
                let t = rng.random_range(1..=sched.t_diff);
                let eps: Vec<R> = (0..d)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(rng);
                        R::from_f64(e)
                    })
                    .collect();
                xt.extend(sched.perturb(x0.row(r), t, &eps)?);
                eps_all.extend(eps);
                ts.push(t);
            }
            let x = tape.constant(Tensor::new(vec![rows, d], xt)?);
            let pred = predict_noise_graph(tape, store, prefix, cfg, x, &ts, z_rep)?;
            (Tensor::new(vec![rows, d], eps_all)?, pred)
        }
        LossKind::L2 => {
            let pred = predict_direct_graph(tape, store, prefix, cfg, z_rep)?;
            let mut tgt = Vec::with_capacity(rows * d);
            for &r in &idx {
                tgt.extend_from_slice(x0.row(r));
            }
            (Tensor::new(vec![rows, d], tgt)?, pred)
        }
    };
    let target = tape.constant(target);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let m = tape.mean(sq)?;
    tape.scale(m, d as f64)
}

/// The regression variant: the same network evaluated at `x_t = 0, t = 0`.
pub fn predict_direct_graph<R: Real>(
    tape: &Tape<R>,
    store: &ParamStore<R>,
    prefix: &str,
    cfg: &DiffusionConfig,
    z: Var,
) -> Result<Var> {
    let n = tape.shape(z)[0];
    let d = store.get(&format!("{prefix}.in.w"))?.shape()[0];
    let zero = tape.constant(Tensor::zeros(vec![n, d]));
    predict_noise_graph(tape, store, prefix, cfg, zero, &vec![0; n], z)
}

/// Anything that predicts the added noise for a batch of noisy tokens at timestep `t`.
pub trait NoisePredictor<R> {
    fn predict(&self, x_t: &Tensor<R>, t: usize) -> Result<Tensor<R>>;
}

/// The trained head with fixed conditioning rows.
pub struct MlpPredictor<'a, R> {
    pub store: &'a ParamStore<R>,
    pub prefix: &'a str,
    pub cfg: &'a DiffusionConfig,
    pub z: &'a Tensor<R>,
}

impl<R: Real> NoisePredictor<R> for MlpPredictor<'_, R> {
    fn predict(&self, x_t: &Tensor<R>, t: usize) -> Result<Tensor<R>> {
        let tape = Tape::inference();
        let x = tape.constant(x_t.clone());
        let z = tape.constant(self.z.clone());
        let out = predict_noise_graph(&tape, self.store, self.prefix, self.cfg, x, &vec![t; x_t.rows()], z)?;
        tape.check()?;
        Ok((*tape.value(out)).clone())
    }
}

/// Ancestral sampling of `rngs.len()` tokens of width `d`. Row `i` draws its
/// initial noise and every step's noise from `rngs[i]` alone, so a row's
/// result does not depend on which other rows share the batch.
pub fn ddpm_sample<R: Real>(
    predictor: &impl NoisePredictor<R>,
    sched: &NoiseSchedule,
    num_steps: usize,
    d: usize,
    rngs: &mut [StreamRng],
) -> Result<Tensor<R>> {
    let n = rngs.len();
    if n == 0 {
        return Err(Error::Contract("nothing to sample".into()));
    }
    let steps = sched.reverse_steps(num_steps)?;
    let mut x = Tensor::new(vec![n, d], gaussian_rows(n, d, rngs))?;
    for step in steps {
        let eps = predictor.predict(&x, step.t)?;
        let inv_sqrt_a = R::from_f64(1.0 / step.alpha.sqrt());
        let coef = R::from_f64((1.0 - step.alpha) / (1.0 - step.alpha_bar).sqrt());
        let noise = if step.sigma > 0.0 { Some(gaussian_rows::<R>(n, d, rngs)) } else { None };
        let sigma = R::from_f64(step.sigma);
        for (i, (xv, &e)) in x.data_mut().iter_mut().zip(eps.data()).enumerate() {
            let mut v = inv_sqrt_a * (*xv - coef * e);
            if let Some(noise) = &noise {
                v += sigma * noise[i];
            }
            *xv = v;
        }
        if !x.is_finite() {
            return Err(Error::Numeric(format!("sampler produced non-finite values at t={}", step.t)));
        }
    }
    Ok(x)
}

/// Draws tokens for conditioning rows `z: [n × d_model]` with the configured head.
pub fn sample_tokens<R: Real>(
    store: &ParamStore<R>,
    prefix: &str,
    cfg: &DiffusionConfig,
    sched: &NoiseSchedule,
    z: &Tensor<R>,
    num_steps: usize,
    rngs: &mut [StreamRng],
) -> Result<Tensor<R>> {
    if rngs.len() != z.rows() {
        return Err(Error::Contract("one random stream per conditioning row is required".into()));
    }
    match cfg.loss {
        LossKind::Diffusion => {
            let d = store.get(&format!("{prefix}.in.w"))?.shape()[0];
            let p = MlpPredictor { store, prefix, cfg, z };
            ddpm_sample(&p, sched, num_steps, d, rngs)
        }
        LossKind::L2 => {
            let tape = Tape::inference();
            let zv = tape.constant(z.clone());
            let out = predict_direct_graph(&tape, store, prefix, cfg, zv)?;
            tape.check()?;
            Ok((*tape.value(out)).clone())
        }
    }
}
