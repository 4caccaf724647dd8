//! Per-unit 1D-convolutional VAE mapping `[N × D_k]` channel sequences to
//! `L = N / r` latent tokens of width `d`.
//!
//! Sequences are laid out channels-by-time on the tape, several sequences side
//! by side along the time axis. The encoder only pads on the left, so token `j`
//! depends on frames `< (j + 1)·r` and encoding a prefix reproduces the prefix
//! tokens exactly. The decoder is symmetric and non-causal.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv, init_conv};
use crate::real::Real;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub downsample_rate: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub kl_weight: f64,
    pub smoothl1_beta: f64,
    pub logvar_clamp: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { downsample_rate: 4, latent_dim: 64, width: 128, kl_weight: 1e-4, smoothl1_beta: 1.0, logvar_clamp: 10.0 }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_rate == 0 || !self.downsample_rate.is_power_of_two() {
            return Err(Error::Config(format!("vae.downsample_rate must be a power of two, got {}", self.downsample_rate)));
        }
        if self.latent_dim == 0 || self.width == 0 {
            return Err(Error::Config("vae.latent_dim and vae.width must be positive".into()));
        }
        if !(self.kl_weight >= 0.0) || !(self.smoothl1_beta > 0.0) || !(self.logvar_clamp > 0.0) {
            return Err(Error::Config("vae.kl_weight ≥ 0, smoothl1_beta > 0 and logvar_clamp > 0 required".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.downsample_rate.trailing_zeros() as usize
    }
}

/// Gaussian posterior over one sequence's tokens, `[L × d]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDist<R> {
    pub mu: Tensor<R>,
    pub log_var: Tensor<R>,
}

pub fn init_unit_vae<R: Real>(
    store: &mut ParamStore<R>,
    prefix: &str,
    channels: usize,
    cfg: &VaeConfig,
    rng: &mut impl Rng,
) {
    let w = cfg.width;
    let d = cfg.latent_dim;
    let res = |store: &mut ParamStore<R>, name: String, rng: &mut dyn rand::RngCore| {
        init_conv(store, &format!("{name}.c1"), w, w, 3, rng);
        init_conv(store, &format!("{name}.c2"), w, w, 1, rng);
    };
    init_conv(store, &format!("{prefix}.enc.conv_in"), w, channels, 3, rng);
    for i in 0..cfg.levels() {
        init_conv(store, &format!("{prefix}.enc.down{i}"), w, w, 4, rng);
        res(store, format!("{prefix}.enc.res{i}"), rng);
    }
    res(store, format!("{prefix}.enc.res_out"), rng);
    init_conv(store, &format!("{prefix}.enc.mu"), d, w, 1, rng);
    init_conv(store, &format!("{prefix}.enc.logvar"), d, w, 1, rng);

    init_conv(store, &format!("{prefix}.dec.conv_in"), w, d, 1, rng);
    res(store, format!("{prefix}.dec.res_in"), rng);
    for i in 0..cfg.levels() {
        init_conv(store, &format!("{prefix}.dec.up{i}"), w, w, 3, rng);
        res(store, format!("{prefix}.dec.res{i}"), rng);
    }
    init_conv(store, &format!("{prefix}.dec.conv_out"), channels, w, 3, rng);
}

/// `x + c2(relu(c1(relu(x))))`; `causal` pads the width-3 conv on the left only.
fn res_block<R: Real>(
    tape: &Tape<R>,
    store: &ParamStore<R>,
    name: &str,
    x: Var,
    segments: usize,
    causal: bool,
) -> Result<Var> {
    let (pl, pr) = if causal { (2, 0) } else { (1, 1) };
    let h = tape.relu(x)?;
    let h = conv(tape, store, &format!("{name}.c1"), h, 1, pl, pr, segments)?;
    let h = tape.relu(h)?;
    let h = conv(tape, store, &format!("{name}.c2"), h, 1, 0, 0, segments)?;
    tape.add(x, h)
}

/// Encodes `x: [D_k × S·N]` into `(mu, log_var)`, each `[d × S·L]`.
pub fn encode_graph<R: Real>(
    tape: &Tape<R>,
    store: &ParamStore<R>,
    prefix: &str,
    cfg: &VaeConfig,
    x: Var,
    segments: usize,
) -> Result<(Var, Var)> {
    let cols = tape.shape(x)[1];
    if segments == 0 || cols % segments != 0 || (cols / segments) % cfg.downsample_rate != 0 {
        return Err(Error::Contract(format!(
            "sequence length must be divisible by the downsample rate {} (got {} frames over {segments} sequences)",
            cfg.downsample_rate, cols
        )));
    }
    let mut h = conv(tape, store, &format!("{prefix}.enc.conv_in"), x, 1, 2, 0, segments)?;
    h = tape.relu(h)?;
    for i in 0..cfg.levels() {
        h = conv(tape, store, &format!("{prefix}.enc.down{i}"), h, 2, 2, 0, segments)?;
        h = res_block(tape, store, &format!("{prefix}.enc.res{i}"), h, segments, true)?;
    }
    h = res_block(tape, store, &format!("{prefix}.enc.res_out"), h, segments, true)?;
    let mu = conv(tape, store, &format!("{prefix}.enc.mu"), h, 1, 0, 0, segments)?;
    let lv = conv(tape, store, &format!("{prefix}.enc.logvar"), h, 1, 0, 0, segments)?;
    let lv = tape.clamp(lv, -cfg.logvar_clamp, cfg.logvar_clamp)?;
    Ok((mu, lv))
}

/// Decodes `z: [d × S·L]` into `[D_k × S·L·r]`.
pub fn decode_graph<R: Real>(
    tape: &Tape<R>,
    store: &ParamStore<R>,
    prefix: &str,
    cfg: &VaeConfig,
    z: Var,
    segments: usize,
) -> Result<Var> {
    let mut h = conv(tape, store, &format!("{prefix}.dec.conv_in"), z, 1, 0, 0, segments)?;
    h = res_block(tape, store, &format!("{prefix}.dec.res_in"), h, segments, false)?;
    for i in 0..cfg.levels() {
        h = tape.upsample_cols(h, 2)?;
        h = conv(tape, store, &format!("{prefix}.dec.up{i}"), h, 1, 1, 1, segments)?;
        h = res_block(tape, store, &format!("{prefix}.dec.res{i}"), h, segments, false)?;
    }
    h = tape.relu(h)?;
    conv(tape, store, &format!("{prefix}.dec.conv_out"), h, 1, 1, 1, segments)
}

/// `mu + exp(log_var / 2) ⊙ eps` on the tape.
pub fn reparameterize_graph<R: Real>(tape: &Tape<R>, mu: Var, log_var: Var, eps: Tensor<R>) -> Result<Var> {
    let std = tape.affine(log_var, 0.5, 0.0)?;
    let std = tape.exp(std)?;
    let e = tape.constant(eps);
    let noise = tape.mul(std, e)?;
    tape.add(mu, noise)
}

/// `0.5 · mean(mu² + exp(log_var) − 1 − log_var)`.
pub fn kl_graph<R: Real>(tape: &Tape<R>, mu: Var, log_var: Var) -> Result<Var> {
    let m2 = tape.mul(mu, mu)?;
    let ev = tape.exp(log_var)?;
    let s = tape.add(m2, ev)?;
    let s = tape.sub(s, log_var)?;
    let s = tape.affine(s, 1.0, -1.0)?;
    let m = tape.mean(s)?;
    tape.scale(m, 0.5)
}

/// Stacks equal-length `[N × C]` sequences into `[C × S·N]`.
pub fn to_columns<S: Real, R: Real>(seqs: &[&Tensor<S>]) -> Result<Tensor<R>> {
    let first = seqs.first().ok_or_else(|| Error::Contract("no sequences".into()))?;
    let (n, c) = (first.rows(), first.cols());
    if seqs.iter().any(|s| s.rows() != n || s.cols() != c) {
        return Err(Error::Contract("sequences in one batch must share shape".into()));
    }
    let total = seqs.len() * n;
    let mut out = vec![R::ZERO; c * total];
    for (s, seq) in seqs.iter().enumerate() {
        for t in 0..n {
            for (ch, &v) in seq.row(t).iter().enumerate() {
                out[ch * total + s * n + t] = R::from_f64(v.to_f64());
            }
        }
    }
    Tensor::new(vec![c, total], out)
}

/// Inverse of [`to_columns`].
pub fn from_columns<R: Real>(t: &Tensor<R>, segments: usize) -> Result<Vec<Tensor<R>>> {
    let (c, total) = (t.rows(), t.cols());
    if segments == 0 || total % segments != 0 {
        return Err(Error::Contract(format!("{total} columns do not split into {segments} sequences")));
    }
    let n = total / segments;
    (0..segments)
        .map(|s| Tensor::new(vec![n, c], (0..n * c).map(|i| t.at(i % c, s * n + i / c)).collect()))
        .collect()
}

/// Right-pads `[N × C]` by repeating the last frame up to a multiple of `r`;
/// returns the pad length.
pub fn pad_to_multiple<R: Real>(seq: &Tensor<R>, r: usize) -> (Tensor<R>, usize) {
    let n = seq.rows();
    let pad = (r - n % r) % r;
    if pad == 0 {
        return (seq.clone(), 0);
    }
    let mut data = seq.data().to_vec();
    let last = seq.row(n - 1).to_vec();
    for _ in 0..pad {
        data.extend_from_slice(&last);
    }
    (Tensor::new(vec![n + pad, seq.cols()], data).expect("consistent shape"), pad)
}

/// Read-only view of one unit's trained VAE.
pub struct UnitVae<'a, R> {
    pub store: &'a ParamStore<R>,
    pub prefix: String,
    pub cfg: &'a VaeConfig,
}

impl<'a, R: Real> UnitVae<'a, R> {
    pub fn new(store: &'a ParamStore<R>, prefix: impl Into<String>, cfg: &'a VaeConfig) -> Self {
        Self { store, prefix: prefix.into(), cfg }
    }

    /// Posterior of each equal-length `[N × D_k]` sequence.
    pub fn encode_batch(&self, seqs: &[&Tensor<R>]) -> Result<Vec<LatentDist<R>>> {
        let tape = Tape::inference();
        let x = tape.constant(to_columns(seqs)?);
        let (mu, lv) = encode_graph(&tape, self.store, &self.prefix, self.cfg, x, seqs.len())?;
        tape.check()?;
        let mus = from_columns(&tape.value(mu), seqs.len())?;
        let lvs = from_columns(&tape.value(lv), seqs.len())?;
        Ok(mus.into_iter().zip(lvs).map(|(mu, log_var)| LatentDist { mu, log_var }).collect())
    }

    pub fn encode(&self, seq: &Tensor<R>) -> Result<LatentDist<R>> {
        Ok(self.encode_batch(&[seq])?.remove(0))
    }

    /// `[L × d]` tokens of each sequence back to `[L·r × D_k]` frames.
    pub fn decode_batch(&self, zs: &[&Tensor<R>]) -> Result<Vec<Tensor<R>>> {
        let tape = Tape::inference();
        let z = tape.constant(to_columns(zs)?);
        let out = decode_graph(&tape, self.store, &self.prefix, self.cfg, z, zs.len())?;
        tape.check()?;
        from_columns(&tape.value(out), zs.len())
    }

    pub fn decode(&self, z: &Tensor<R>) -> Result<Tensor<R>> {
        Ok(self.decode_batch(&[z])?.remove(0))
    }
}

/// Draws `z = mu + exp(log_var / 2) ⊙ ε`.
pub fn reparameterize<R: Real>(dist: &LatentDist<R>, rng: &mut impl Rng) -> Tensor<R> {
    let mut z = dist.mu.clone();
    for (v, &lv) in z.data_mut().iter_mut().zip(dist.log_var.data()) {
        let e: f64 = StandardNormal.sample(rng);
        *v += (lv * R::from_f64(0.5)).exp() * R::from_f64(e);
    }
    z
}

/// Standard normal noise tensor.
pub fn gaussian<R: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<R> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let e: f64 = StandardNormal.sample(rng);
        R::from_f64(e)
    })
}

/// Objective for one unit on a batch holding both roles:
/// `2 · mean SmoothL1 + β · KL`. Actor and reactor sequences contribute equal
/// element counts, so twice the pooled mean equals the sum of per-role means.
pub struct VaeLossTerms {
    pub loss: Var,
    pub recon: Var,
    pub kl: Var,
}

pub fn unit_loss_graph<R: Real>(
    tape: &Tape<R>,
    store: &ParamStore<R>,
    prefix: &str,
    cfg: &VaeConfig,
    x: Tensor<R>,
    segments: usize,
    rng: &mut impl Rng,
) -> Result<VaeLossTerms> {
    let xv = tape.constant(x);
    let (mu, lv) = encode_graph(tape, store, prefix, cfg, xv, segments)?;
    let eps = gaussian(&tape.shape(mu), rng);
    let z = reparameterize_graph(tape, mu, lv, eps)?;
    let xhat = decode_graph(tape, store, prefix, cfg, z, segments)?;
    let recon = tape.smooth_l1(xhat, xv, cfg.smoothl1_beta)?;
    let kl = kl_graph(tape, mu, lv)?;
    let r2 = tape.scale(recon, 2.0)?;
    let klw = tape.scale(kl, cfg.kl_weight)?;
    let loss = tape.add(r2, klw)?;
    Ok(VaeLossTerms { loss, recon, kl })
}
