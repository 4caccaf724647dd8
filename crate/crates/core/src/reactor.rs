//! Masked reaction transformer.
//!
//! Each unit (body, hands) has its own stack. Per block and unit, the actor
//! stream self-attends, the masked reactor stream self-attends and then
//! cross-attends to the refined actor stream, followed by a feed-forward
//! sublayer; every sublayer is pre-normalised and residual. Mutual unit
//! modulation then lets each unit scale and shift the other's normalised
//! stream. The final reactor streams are the per-token conditioning vectors.
//!
//! Tokens of `S` sequences of length `L` are stacked as `[S·L × width]`.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, init_linear, init_linear_zero, layer_norm, linear, LN_EPS};
use crate::real::Real;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Full context in every attention.
    Offline,
    /// Token `i` attends only to tokens `j ≤ i`.
    Online,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MumDirection {
    /// Body modulates hands only.
    B2h,
    /// Hands modulate body only.
    H2b,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Cross-attention from reactor queries to actor keys and values.
    Acf,
    /// Linear map of the concatenated normalised streams.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReactorConfig {
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Length of the learned positional table.
    pub max_tokens: usize,
    pub mask_ratio_min: f64,
    pub mask_ratio_max: f64,
    pub mum: bool,
    pub mum_direction: MumDirection,
    pub fusion: Fusion,
    pub unit_division: bool,
    pub mode: AttentionMode,
    pub dropout: f64,
}

impl Default for ReactorConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            d_model: 64,
            heads: 4,
            ff_hidden: 256,
            max_tokens: 64,
            mask_ratio_min: 0.7,
            mask_ratio_max: 1.0,
            mum: true,
            mum_direction: MumDirection::Both,
            fusion: Fusion::Acf,
            unit_division: true,
            mode: AttentionMode::Online,
            dropout: 0.0,
        }
    }
}

impl ReactorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("reactor: {m}")));
        if self.blocks == 0 || self.d_model == 0 || self.heads == 0 || self.ff_hidden == 0 || self.max_tokens == 0 {
            return err("blocks, d_model, heads, ff_hidden and max_tokens must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return err(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if !(0.0 <= self.mask_ratio_min && self.mask_ratio_min <= self.mask_ratio_max && self.mask_ratio_max <= 1.0) {
            return err("need 0 ≤ mask_ratio_min ≤ mask_ratio_max ≤ 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Whether mutual modulation runs for a model with `units` units.
    pub fn mum_active(&self, units: usize) -> bool {
        self.mum && units == 2
    }
}

/// Allowed-edge matrix `[L × L]`, row-major: all true offline, `j ≤ i` online.
pub fn attention_mask_for(mode: AttentionMode, len: usize) -> Vec<bool> {
    let mut m = vec![true; len * len];
    if mode == AttentionMode::Online {
        for i in 0..len {
            for j in i + 1..len {
                m[i * len + j] = false;
            }
        }
    }
    m
}

pub fn init_attention<R: Real>(store: &mut ParamStore<R>, name: &str, d: usize, rng: &mut (impl Rng + ?Sized)) {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{name}.{p}"), d, d, rng);
    }
}

/// Multi-head scaled dot-product attention. `mask` is `[L_q × L_k]` and is
/// applied to every sequence; masked logits are excluded and a row with no
/// allowed key yields zeros before the output projection.
pub fn attention<R: Real>(
    tape: &Tape<R>,
    store: &ParamStore<R>,
    name: &str,
    queries: Var,
    keys: Var,
    heads: usize,
    segments: usize,
    mask: &[bool],
) -> Result<Var> {
    let d = tape.shape(queries)[1];
    if d % heads != 0 {
        return Err(Error::dim("attention", format!("width {d} over {heads} heads")));
    }
    let dh = d / heads;
    let q = linear(tape, store, &format!("{name}.q"), queries)?;
    let k = linear(tape, store, &format!("{name}.k"), keys)?;
    let v = linear(tape, store, &format!("{name}.v"), keys)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, h * dh, dh)?, tape.slice_cols(k, h * dh, dh)?, tape.slice_cols(v, h * dh, dh)?)
        };
        let logits = tape.seg_matmul(qh, kh, segments, false, true)?;
        let logits = tape.scale(logits, scale)?;
        let p = tape.masked_softmax(logits, Some(mask))?;
        outs.push(tape.seg_matmul(p, vh, segments, false, false)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    linear(tape, store, &format!("{name}.o"), cat)
}

/// Scale/shift linears for mutual modulation; `from` produces parameters
/// applied to the other unit.
pub fn init_mum<R: Real>(store: &mut ParamStore<R>, name: &str, d: usize) {
    init_linear_zero(store, name, d, 2 * d);
}

/// `scale ⊙ LN(target) + shift` with `(scale, shift) = Linear(source)`.
pub fn modulate<R: Real>(tape: &Tape<R>, store: &ParamStore<R>, name: &str, source: Var, target: Var) -> Result<Var> {
    let d = tape.shape(target)[1];
    let ss = linear(tape, store, name, source)?;
    let scale = tape.slice_cols(ss, 0, d)?;
    let shift = tape.slice_cols(ss, d, d)?;
    let n = tape.layer_norm(target, None, None, LN_EPS)?;
    let m = tape.mul(scale, n)?;
    tape.add(m, shift)
}

/// Mutual modulation of the two fused streams. Both directions read the
/// pre-modulation inputs; a disabled direction returns `None` for its output.
pub fn mum<R: Real>(
    tape: &Tape<R>,
    store: &ParamStore<R>,
    prefix: &str,
    body: Var,
    hands: Var,
    direction: MumDirection,
) -> Result<(Option<Var>, Option<Var>)> {
    let body_out = match direction {
        MumDirection::H2b | MumDirection::Both => Some(modulate(tape, store, &format!("{prefix}.from_hands"), hands, body)?),
        MumDirection::B2h => None,
    };
    let hands_out = match direction {
        MumDirection::B2h | MumDirection::Both => Some(modulate(tape, store, &format!("{prefix}.from_body"), body, hands)?),
        MumDirection::H2b => None,
    };
    Ok((body_out, hands_out))
}

pub fn init_reactor<R: Real>(
    store: &mut ParamStore<R>,
    cfg: &ReactorConfig,
    units: &[String],
    token_dim: usize,
    rng: &mut (impl Rng + ?Sized),
) {
    let d = cfg.d_model;
    store.init_normal("reactor.mask_embedding", &[d], 0.02, rng);
    store.init_normal("reactor.pos_embedding", &[cfg.max_tokens, d], 0.02, rng);
    for u in units {
        init_linear(store, &format!("reactor.{u}.in_actor"), token_dim, d, rng);
        init_linear(store, &format!("reactor.{u}.in_reactor"), token_dim, d, rng);
    }
    for b in 0..cfg.blocks {
        for u in units {
            let p = format!("reactor.block{b}.{u}");
            for ln in ["ln_actor", "ln_self", "ln_cross_q", "ln_cross_kv", "ln_ff"] {
                init_layer_norm(store, &format!("{p}.{ln}"), d);
            }
            init_attention(store, &format!("{p}.actor_attn"), d, rng);
            init_attention(store, &format!("{p}.self_attn"), d, rng);
            match cfg.fusion {
                Fusion::Acf => init_attention(store, &format!("{p}.cross_attn"), d, rng),
                Fusion::Concat => init_linear(store, &format!("{p}.concat"), 2 * d, d, rng),
            }
            init_linear(store, &format!("{p}.ff1"), d, cfg.ff_hidden, rng);
            init_linear(store, &format!("{p}.ff2"), cfg.ff_hidden, d, rng);
        }
        if cfg.mum_active(units.len()) {
            if cfg.mum_direction != MumDirection::H2b {
                init_mum(store, &format!("reactor.block{b}.mum.from_body"), d);
            }
            if cfg.mum_direction != MumDirection::B2h {
                init_mum(store, &format!("reactor.block{b}.mum.from_hands"), d);
            }
        }
    }
}

/// Inputs for one forward pass over `segments` sequences of `len` tokens.
pub struct ReactorBatch<'a, R> {
    /// Per unit, `[S·L × d]` actor tokens.
    pub actor: &'a [Tensor<R>],
    /// Per unit, `[S·L × d]` reactor tokens; rows under `masked` are ignored.
    pub reactor: &'a [Tensor<R>],
    /// `[S·L]` flags; flagged reactor rows are replaced by the mask embedding.
    pub masked: &'a [bool],
    pub segments: usize,
    pub len: usize,
}

/// Dropout on training tapes; inactive when `rng` is `None` or the rate is 0.
fn dropout<R: Real>(tape: &Tape<R>, x: Var, rate: f64, rng: &mut Option<&mut crate::rng::Rng>) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = R::from_f64(1.0 / (1.0 - rate));
    let shape = tape.shape(x);
    let m = Tensor::from_fn(shape, |_| if rng.random::<f64>() < rate { R::ZERO } else { keep });
    let m = tape.constant(m);
    tape.mul(x, m)
}

/// Conditioning vectors `z` per unit, each `[S·L × d_model]`.
pub fn forward<R: Real>(
    tape: &Tape<R>,
    store: &ParamStore<R>,
    cfg: &ReactorConfig,
    units: &[String],
    batch: &ReactorBatch<'_, R>,
    mut dropout_rng: Option<&mut crate::rng::Rng>,
) -> Result<Vec<Var>> {
    let (s, l) = (batch.segments, batch.len);
    if l == 0 || l > cfg.max_tokens {
        return Err(Error::Contract(format!("token count {l} outside 1..={}", cfg.max_tokens)));
    }
    if batch.actor.len() != units.len() || batch.reactor.len() != units.len() {
        return Err(Error::Contract("one actor and one reactor tensor per unit required".into()));
    }
    let rows = s * l;
    if batch.masked.len() != rows {
        return Err(Error::Contract(format!("{} mask flags for {rows} tokens", batch.masked.len())));
    }
    for (a, r) in batch.actor.iter().zip(batch.reactor) {
        if a.rows() != rows || r.rows() != rows {
            return Err(Error::Contract(format!(
                "actor and reactor token counts must both be {rows}, got {} and {}",
                a.rows(),
                r.rows()
            )));
        }
    }
    let mask = attention_mask_for(cfg.mode, l);
    let pos_idx: Vec<usize> = (0..s).flat_map(|_| 0..l).collect();
    let pos_table = tape.param(store, "reactor.pos_embedding")?;
    let pos = tape.gather_rows(pos_table, &pos_idx)?;
    let mask_emb = tape.param(store, "reactor.mask_embedding")?;

    let mut ys = Vec::with_capacity(units.len());
    let mut xs = Vec::with_capacity(units.len());
    for (u, name) in units.iter().enumerate() {
        let a = tape.constant(batch.actor[u].clone());
        let y = linear(tape, store, &format!("reactor.{name}.in_actor"), a)?;
        ys.push(tape.add(y, pos)?);
        let r = tape.constant(batch.reactor[u].clone());
        let x = linear(tape, store, &format!("reactor.{name}.in_reactor"), r)?;
        let x = tape.select_rows(x, mask_emb, batch.masked)?;
        xs.push(tape.add(x, pos)?);
    }

    let h = cfg.heads;
    for b in 0..cfg.blocks {
        for (u, name) in units.iter().enumerate() {
            let p = format!("reactor.block{b}.{name}");
            let (mut x, mut y) = (xs[u], ys[u]);
            let n = layer_norm(tape, store, &format!("{p}.ln_actor"), y)?;
            let a = attention(tape, store, &format!("{p}.actor_attn"), n, n, h, s, &mask)?;
            let a = dropout(tape, a, cfg.dropout, &mut dropout_rng)?;
            y = tape.add(y, a)?;

            let n = layer_norm(tape, store, &format!("{p}.ln_self"), x)?;
            let a = attention(tape, store, &format!("{p}.self_attn"), n, n, h, s, &mask)?;
            let a = dropout(tape, a, cfg.dropout, &mut dropout_rng)?;
            x = tape.add(x, a)?;

            let nq = layer_norm(tape, store, &format!("{p}.ln_cross_q"), x)?;
            let nk = layer_norm(tape, store, &format!("{p}.ln_cross_kv"), y)?;
            let a = match cfg.fusion {
                Fusion::Acf => attention(tape, store, &format!("{p}.cross_attn"), nq, nk, h, s, &mask)?,
                Fusion::Concat => {
                    let cat = tape.concat_cols(&[nq, nk])?;
                    linear(tape, store, &format!("{p}.concat"), cat)?
                }
            };
            let a = dropout(tape, a, cfg.dropout, &mut dropout_rng)?;
            x = tape.add(x, a)?;

            let n = layer_norm(tape, store, &format!("{p}.ln_ff"), x)?;
            let f = linear(tape, store, &format!("{p}.ff1"), n)?;
            let f = tape.gelu(f)?;
            let f = linear(tape, store, &format!("{p}.ff2"), f)?;
            let f = dropout(tape, f, cfg.dropout, &mut dropout_rng)?;
            x = tape.add(x, f)?;
            xs[u] = x;
            ys[u] = y;
        }
        if cfg.mum_active(units.len()) {
            let (mb, mh) = mum(tape, store, &format!("reactor.block{b}.mum"), xs[0], xs[1], cfg.mum_direction)?;
            if let Some(mb) = mb {
                xs[0] = tape.add(xs[0], mb)?;
            }
            if let Some(mh) = mh {
                xs[1] = tape.add(xs[1], mh)?;
            }
        }
    }
    Ok(xs)
}

/// `round(ratio · L)` distinct positions, uniformly chosen.
pub fn random_mask_flags(len: usize, ratio: f64, rng: &mut (impl Rng + ?Sized)) -> Vec<bool> {
    let count = ((ratio.clamp(0.0, 1.0)) * len as f64).round() as usize;
    let mut flags = vec![false; len];
    for i in sample(rng, len, count.min(len)) {
        flags[i] = true;
    }
    flags
}

/// Replaces `round(ratio · L)` random rows of `tokens` by `mask_embedding`.
pub fn apply_random_mask<R: Real>(
    tokens: &Tensor<R>,
    ratio: f64,
    rng: &mut (impl Rng + ?Sized),
    mask_embedding: &Tensor<R>,
) -> Result<(Tensor<R>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Contract(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let c = tokens.cols();
    if mask_embedding.len() != c {
        return Err(Error::dim("apply_random_mask", format!("embedding of {} for width {c}", mask_embedding.len())));
    }
    let flags = random_mask_flags(tokens.rows(), ratio, rng);
    let mut out = tokens.clone();
    for (i, _) in flags.iter().enumerate().filter(|(_, f)| **f) {
        out.data_mut()[i * c..(i + 1) * c].copy_from_slice(mask_embedding.data());
    }
    Ok((out, flags))
}
