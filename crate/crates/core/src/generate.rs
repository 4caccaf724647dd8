//! Iterative masked decoding of reaction tokens.
//!
//! All reactor tokens start masked. Each iteration runs the transformer on
//! the current state, samples the tokens scheduled for that iteration with
//! the diffusion heads, and writes them back as revealed. The remaining
//! masked fraction after iteration `t` follows `cos(πt / 2T)`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffusion::sample_tokens;
use crate::error::{Error, Result};
use crate::model::ReactionModel;
use crate::motion::MotionSequence;
use crate::reactor::{forward, AttentionMode, ReactorBatch};
use crate::real::Real;
use crate::rng::{label, stream, Rng as StreamRng};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub t_iters: usize,
    pub mode: AttentionMode,
    pub num_steps: usize,
    pub seed: u64,
    pub order_seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { t_iters: 8, mode: AttentionMode::Online, num_steps: 100, seed: 0, order_seed: 0 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_iters == 0 || self.num_steps == 0 {
            return Err(Error::Config("generation: t_iters and num_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Fraction of tokens still masked after iteration `t` of `T`: `cos(πt / 2T)`,
/// exactly 1 at `t = 0` and exactly 0 at `t = T`.
pub fn mask_ratio(t: usize, t_iters: usize) -> f64 {
    if t == 0 {
        1.0
    } else if t >= t_iters {
        0.0
    } else {
        (std::f64::consts::PI * t as f64 / (2.0 * t_iters as f64)).cos()
    }
}

/// Number of tokens revealed in each iteration. Cumulative counts are
/// `round(L · (1 − mask_ratio(t, T)))`, so the remaining count after every
/// iteration is within half a token of the cosine curve and the sizes sum to `L`.
pub fn plan_sizes(len: usize, t_iters: usize) -> Vec<usize> {
    let mut prev = 0usize;
    (1..=t_iters)
        .map(|t| {
            let cum = (len as f64 * (1.0 - mask_ratio(t, t_iters))).round() as usize;
            let cum = cum.min(len).max(prev);
            let size = cum - prev;
            prev = cum;
            size
        })
        .collect()
}

/// Ordered partition of token indices into `T` iterations; early batches may
/// be empty when `T > L`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnmaskPlan {
    pub batches: Vec<Vec<usize>>,
}

impl UnmaskPlan {
    fn cut(order: &[usize], sizes: &[usize]) -> Self {
        let mut batches = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            batches.push(order[start..start + s].to_vec());
            start += s;
        }
        Self { batches }
    }

    /// A uniformly random order cut by [`plan_sizes`].
    pub fn random(len: usize, t_iters: usize, rng: &mut StreamRng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self::cut(&order, &plan_sizes(len, t_iters))
    }

    /// Left-to-right order cut for a reference length `len_ref ≥ len`, then
    /// restricted to `0..len`. Token `i` lands in the same iteration, with
    /// the same earlier tokens revealed, for every `len > i`.
    pub fn left_to_right(len: usize, len_ref: usize, t_iters: usize) -> Self {
        let len_ref = len_ref.max(len);
        let order: Vec<usize> = (0..len_ref).collect();
        let mut plan = Self::cut(&order, &plan_sizes(len_ref, t_iters));
        for b in &mut plan.batches {
            b.retain(|&i| i < len);
        }
        plan
    }

    pub fn len(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_unmask_plan(len: usize, t_iters: usize, rng: &mut StreamRng) -> Result<UnmaskPlan> {
    if len == 0 || t_iters == 0 {
        return Err(Error::Contract("unmask plan needs L ≥ 1 and T ≥ 1".into()));
    }
    Ok(UnmaskPlan::random(len, t_iters, rng))
}

/// Plan used for sample `sample` of length `len` under `cfg`.
pub fn plan_for(cfg: &GenerationConfig, len: usize, len_ref: usize, sample: u64) -> UnmaskPlan {
    match cfg.mode {
        AttentionMode::Online => UnmaskPlan::left_to_right(len, len_ref, cfg.t_iters),
        AttentionMode::Offline => {
            let mut rng = stream(cfg.order_seed, &[label("unmask-order"), sample]);
            UnmaskPlan::random(len, cfg.t_iters, &mut rng)
        }
    }
}

/// Random stream of one sampled token.
pub fn token_stream(seed: u64, sample: u64, token: usize, unit: usize) -> StreamRng {
    stream(seed, &[label("token"), sample, token as u64, unit as u64])
}

/// Normalised reaction tokens per sequence and unit, plus the plan used.
pub struct GeneratedTokens<R> {
    pub tokens: Vec<Vec<Tensor<R>>>,
    pub plans: Vec<UnmaskPlan>,
}

/// Generates normalised reactor tokens for equal-length actor token sets.
/// `actor[s][u]` is `[L × d]` (normalised); `samples[s]` keys the sample's
/// random streams and unmask order.
pub fn generate_tokens<R: Real>(
    model: &ReactionModel<R>,
    actor: &[Vec<Tensor<R>>],
    cfg: &GenerationConfig,
    samples: &[u64],
) -> Result<GeneratedTokens<R>> {
    cfg.validate()?;
    let units = model.units();
    let s = actor.len();
    if s == 0 || samples.len() != s {
        return Err(Error::Contract("one sample id per actor sequence is required".into()));
    }
    let len = actor[0][0].rows();
    let d = actor[0][0].cols();
    if actor.iter().any(|a| a.len() != units.len() || a.iter().any(|t| t.rows() != len || t.cols() != d)) {
        return Err(Error::Contract("actor token sets must share unit count and shape".into()));
    }
    let mut rcfg = model.cfg.reactor.clone();
    rcfg.mode = cfg.mode;
    if len > rcfg.max_tokens {
        return Err(Error::Contract(format!("{len} tokens exceed the model's {} positions", rcfg.max_tokens)));
    }
    let plans: Vec<UnmaskPlan> = samples.iter().map(|&id| plan_for(cfg, len, rcfg.max_tokens, id)).collect();
    let actor_cat: Vec<Tensor<R>> = (0..units.len())
        .map(|u| stack_rows(actor.iter().map(|a| &a[u])))
        .collect::<Result<_>>()?;
    let mut reactor: Vec<Tensor<R>> = (0..units.len()).map(|_| Tensor::zeros(vec![s * len, d])).collect();
    let mut masked = vec![true; s * len];

    for it in 0..cfg.t_iters {
        let rows: Vec<(usize, usize)> = plans
            .iter()
            .enumerate()
            .flat_map(|(si, p)| p.batches[it].iter().map(move |&tok| (si, tok)))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let tape = Tape::inference();
        let batch = ReactorBatch { actor: &actor_cat, reactor: &reactor, masked: &masked, segments: s, len };
        let z = forward(&tape, &model.params, &rcfg, &units, &batch, None)?;
        tape.check()?;
        for (u, name) in units.iter().enumerate() {
            let zu = tape.value(z[u]);
            let zc = zu.cols();
            let mut zrows = Vec::with_capacity(rows.len() * zc);
            for &(si, tok) in &rows {
                zrows.extend_from_slice(zu.row(si * len + tok));
            }
            let zsel = Tensor::new(vec![rows.len(), zc], zrows)?;
            let mut rngs: Vec<StreamRng> =
                rows.iter().map(|&(si, tok)| token_stream(cfg.seed, samples[si], tok, u)).collect();
            let new = sample_tokens(
                &model.params,
                &format!("diff.{name}"),
                &model.cfg.diffusion,
                &model.sched,
                &zsel,
                cfg.num_steps,
                &mut rngs,
            )?;
            for (k, &(si, tok)) in rows.iter().enumerate() {
                let r = si * len + tok;
                reactor[u].data_mut()[r * d..(r + 1) * d].copy_from_slice(new.row(k));
            }
        }
        for &(si, tok) in &rows {
            masked[si * len + tok] = false;
        }
    }
    let tokens = (0..s)
        .map(|si| {
            reactor
                .iter()
                .map(|t| Tensor::new(vec![len, d], t.data()[si * len * d..(si + 1) * len * d].to_vec()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(GeneratedTokens { tokens, plans })
}

fn stack_rows<'a, R: Real + 'a>(parts: impl Iterator<Item = &'a Tensor<R>>) -> Result<Tensor<R>> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for p in parts {
        cols = p.cols();
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], data)
}

/// Reactions for equal-length actions; `samples[i]` keys sample `i`'s randomness.
pub fn generate_batch<R: Real>(
    model: &ReactionModel<R>,
    actions: &[&MotionSequence],
    cfg: &GenerationConfig,
    samples: &[u64],
) -> Result<Vec<MotionSequence>> {
    let Some(first) = actions.first() else {
        return Ok(Vec::new());
    };
    let n = first.len();
    for a in actions {
        if a.layout != model.layout {
            return Err(Error::Contract(format!(
                "action has {} joints, model expects {}",
                a.layout.num_joints, model.layout.num_joints
            )));
        }
        if a.len() != n {
            return Err(Error::Contract("batched actions must share a length".into()));
        }
    }
    let units = model.units();
    let frames: Vec<&Tensor<f32>> = actions.iter().map(|a| &a.frames).collect();
    let actor = model
        .encode_means(&frames)?
        .into_iter()
        .map(|seq| seq.iter().zip(&units).map(|(t, u)| model.normalize(u, t)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let gen = generate_tokens(model, &actor, cfg, samples)?;
    decode_reactions(model, &gen.tokens, n, first.fps)
}

pub fn generate<R: Real>(
    model: &ReactionModel<R>,
    action: &MotionSequence,
    cfg: &GenerationConfig,
    sample: u64,
) -> Result<MotionSequence> {
    Ok(generate_batch(model, &[action], cfg, &[sample])?.remove(0))
}

/// Decodes normalised `[sequence][unit]` tokens to motions cropped to `frames`.
pub fn decode_reactions<R: Real>(
    model: &ReactionModel<R>,
    tokens: &[Vec<Tensor<R>>],
    frames: usize,
    fps: f32,
) -> Result<Vec<MotionSequence>> {
    let units = model.units();
    let mut per_unit: Vec<Vec<Tensor<R>>> = Vec::with_capacity(units.len());
    for (u, name) in units.iter().enumerate() {
        let raw: Vec<Tensor<R>> = tokens.iter().map(|seq| model.denormalize(name, &seq[u])).collect::<Result<_>>()?;
        let refs: Vec<&Tensor<R>> = raw.iter().collect();
        per_unit.push(model.vae(name).decode_batch(&refs)?);
    }
    (0..tokens.len())
        .map(|i| {
            let parts: Vec<Tensor<f32>> = per_unit
                .iter()
                .map(|u| {
                    let t = &u[i];
                    let c = t.cols();
                    Tensor::new(vec![frames, c], t.data()[..frames * c].to_vec()).map(|t| t.cast::<f32>())
                })
                .collect::<Result<_>>()?;
            let merged = model.partition.merge(&parts)?;
            MotionSequence::new(model.layout, fps, merged)
        })
        .collect()
}
