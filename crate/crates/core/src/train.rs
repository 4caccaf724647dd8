//! Training loops for the motion tokenizer and the reaction model.
//!
//! Each step draws its batch and noise from a stream keyed by
//! `(seed, stage, step)`, so a run resumed from a saved step continues
//! bit-identically.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::diffusion_loss_graph;
use crate::error::{Error, Result};
use crate::model::ReactionModel;
use crate::motion::{InteractionPair, UnitPartition};
use crate::optim::{AdamW, OptimConfig};
use crate::reactor::{forward, random_mask_flags, ReactorBatch, ReactorConfig};
use crate::real::Real;
use crate::rng::{label, stream};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::vae::{init_unit_vae, to_columns, unit_loss_graph, VaeConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 16, optim: OptimConfig::default(), log_every: 10 }
    }
}

impl TrainConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{what}.batch_size must be positive")));
        }
        self.optim.validate()
    }
}

/// Parameters plus optimizer state; everything needed to resume.
pub struct TrainState<R> {
    pub params: ParamStore<R>,
    pub optim: AdamW<R>,
}

impl<R: Real> TrainState<R> {
    pub fn step(&self) -> usize {
        self.optim.step
    }
}

/// Per-unit `[N × D_k]` tensors of every pair, actor first.
pub struct UnitCache {
    pub actor: Vec<Vec<Tensor<f32>>>,
    pub reactor: Vec<Vec<Tensor<f32>>>,
}

impl UnitCache {
    pub fn new(pairs: &[&InteractionPair], partition: &UnitPartition) -> Result<Self> {
        let mut actor = Vec::with_capacity(pairs.len());
        let mut reactor = Vec::with_capacity(pairs.len());
        for p in pairs {
            actor.push(partition.split(&p.action.frames)?);
            reactor.push(partition.split(&p.reaction.frames)?);
        }
        Ok(Self { actor, reactor })
    }

    pub fn len(&self) -> usize {
        self.actor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actor.is_empty()
    }
}

/// Indices of a training batch for `step`, drawn without replacement.
pub fn batch_indices(seed: u64, stage: &str, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = stream(seed, &[label(stage), step as u64, 0]);
    sample(&mut rng, n, batch.min(n)).into_vec()
}

pub fn init_vae_params<R: Real>(partition: &UnitPartition, cfg: &VaeConfig, seed: u64) -> ParamStore<R> {
    let mut store = ParamStore::new();
    for (name, idx) in &partition.units {
        let mut rng = stream(seed, &[label("vae-init"), label(name)]);
        init_unit_vae(&mut store, &format!("vae.{name}"), idx.len(), cfg, &mut rng);
    }
    store
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    /// Named components, e.g. per-unit reconstruction error.
    pub parts: Vec<(String, f64)>,
}

/// One optimizer step of the tokenizer on the batch for `state.step()`.
pub fn vae_step<R: Real>(
    state: &mut TrainState<R>,
    cache: &UnitCache,
    partition: &UnitPartition,
    cfg: &VaeConfig,
    batch_size: usize,
    seed: u64,
) -> Result<StepReport> {
    let step = state.step();
    let idx = batch_indices(seed, "vae-batch", step, cache.len(), batch_size);
    let tape = Tape::new();
    let mut total = None;
    let mut parts = Vec::new();
    for (u, (name, _)) in partition.units.iter().enumerate() {
        let mut seqs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &cache.actor[i][u]).collect();
        seqs.extend(idx.iter().map(|&i| &cache.reactor[i][u]));
        let x = to_columns::<f32, R>(&seqs)?;
        let mut rng = stream(seed, &[label("vae-noise"), step as u64, u as u64]);
        let terms = unit_loss_graph(&tape, &state.params, &format!("vae.{name}"), cfg, x, seqs.len(), &mut rng)?;
        parts.push((format!("recon.{name}"), tape.value(terms.recon).item().to_f64()));
        parts.push((format!("kl.{name}"), tape.value(terms.kl).item().to_f64()));
        total = Some(match total {
            None => terms.loss,
            Some(t) => tape.add(t, terms.loss)?,
        });
    }
    let loss = total.ok_or_else(|| Error::Contract("partition has no units".into()))?;
    let value = tape.value(loss).item().to_f64();
    let grads = tape.backward(loss).map_err(|e| Error::Training { step, msg: e.to_string() })?;
    if !value.is_finite() {
        return Err(Error::Training { step, msg: format!("loss is {value}") });
    }
    state.optim.update(&mut state.params, &grads.into_named())?;
    Ok(StepReport { step, loss: value, parts })
}

/// Runs the tokenizer until `cfg.steps` optimizer steps have been taken in
/// total, starting from `state` (fresh or resumed).
pub fn train_vae<R: Real>(
    state: &mut TrainState<R>,
    pairs: &[&InteractionPair],
    partition: &UnitPartition,
    vae: &VaeConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepReport),
) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    vae.validate()?;
    cfg.validate("vae_train")?;
    let cache = UnitCache::new(pairs, partition)?;
    while state.step() < cfg.steps {
        let report = vae_step(state, &cache, partition, vae, cfg.batch_size, seed)?;
        on_step(&report);
    }
    Ok(())
}

/// Normalised posterior-mean tokens `[pair][unit]` of actors and reactors.
pub struct TokenCache<R> {
    pub actor: Vec<Vec<Tensor<R>>>,
    pub reactor: Vec<Vec<Tensor<R>>>,
}

impl<R> TokenCache<R> {
    pub fn len(&self) -> usize {
        self.actor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actor.is_empty()
    }
}

/// Encodes every pair with the (frozen) tokenizer. Token statistics are fitted
/// on the pooled actor and reactor tokens unless the model already has them.
pub fn prepare_tokens<R: Real>(model: &mut ReactionModel<R>, pairs: &[&InteractionPair]) -> Result<TokenCache<R>> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    let mut actor = Vec::with_capacity(pairs.len());
    let mut reactor = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(32) {
        let a: Vec<&Tensor<f32>> = chunk.iter().map(|p| &p.action.frames).collect();
        let r: Vec<&Tensor<f32>> = chunk.iter().map(|p| &p.reaction.frames).collect();
        actor.extend(model.encode_means(&a)?);
        reactor.extend(model.encode_means(&r)?);
    }
    let units = model.units();
    if !model.params.contains(&format!("reactor.norm.{}.mean", units[0])) {
        let pooled: Vec<Vec<Tensor<R>>> = actor.iter().chain(&reactor).cloned().collect();
        model.fit_token_norm(&pooled)?;
    }
    let norm = |seqs: Vec<Vec<Tensor<R>>>| -> Result<Vec<Vec<Tensor<R>>>> {
        seqs.into_iter()
            .map(|seq| seq.iter().zip(&units).map(|(t, u)| model.normalize(u, t)).collect())
            .collect()
    };
    Ok(TokenCache { actor: norm(actor)?, reactor: norm(reactor)? })
}

/// Mask flags for one training sequence: ratio ~ U[min, max], at least one token.
pub fn training_mask(cfg: &ReactorConfig, len: usize, rng: &mut crate::rng::Rng) -> Vec<bool> {
    let ratio = if cfg.mask_ratio_max > cfg.mask_ratio_min {
        rng.random_range(cfg.mask_ratio_min..=cfg.mask_ratio_max)
    } else {
        cfg.mask_ratio_min
    };
    let mut flags = random_mask_flags(len, ratio, rng);
    if !flags.iter().any(|&f| f) {
        let i = rng.random_range(0..len);
        flags[i] = true;
    }
    flags
}

fn stack<R: Real>(parts: &[&Tensor<R>]) -> Result<Tensor<R>> {
    let cols = parts[0].cols();
    let mut data = Vec::with_capacity(parts.len() * parts[0].len());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![data.len() / cols, cols], data)
}

/// One optimizer step of the transformer and diffusion heads; the tokenizer
/// and token statistics are not touched.
pub fn reactor_step<R: Real>(
    model: &mut ReactionModel<R>,
    optim: &mut AdamW<R>,
    data: &TokenCache<R>,
    batch_size: usize,
    seed: u64,
) -> Result<StepReport> {
    let step = optim.step;
    let idx = batch_indices(seed, "reactor-batch", step, data.len(), batch_size);
    let units = model.units();
    let len = data.actor[0][0].rows();
    let rcfg = &model.cfg.reactor;
    let mut masked = Vec::with_capacity(idx.len() * len);
    for b in 0..idx.len() {
        let mut rng = stream(seed, &[label("reactor-mask"), step as u64, b as u64]);
        masked.extend(training_mask(rcfg, len, &mut rng));
    }
    let mut actor = Vec::with_capacity(units.len());
    let mut reactor = Vec::with_capacity(units.len());
    for u in 0..units.len() {
        actor.push(stack(&idx.iter().map(|&i| &data.actor[i][u]).collect::<Vec<_>>())?);
        reactor.push(stack(&idx.iter().map(|&i| &data.reactor[i][u]).collect::<Vec<_>>())?);
    }
    let selected: Vec<usize> = if model.cfg.diffusion.loss_on_all_positions {
        (0..masked.len()).collect()
    } else {
        (0..masked.len()).filter(|&i| masked[i]).collect()
    };

    let tape = Tape::new();
    let batch = ReactorBatch { actor: &actor, reactor: &reactor, masked: &masked, segments: idx.len(), len };
    let mut drop_rng = stream(seed, &[label("reactor-dropout"), step as u64]);
    let z = forward(&tape, &model.params, rcfg, &units, &batch, Some(&mut drop_rng))?;
    let mut total = None;
    let mut parts = Vec::new();
    for (u, name) in units.iter().enumerate() {
        let zs = tape.gather_rows(z[u], &selected)?;
        let d = reactor[u].cols();
        let mut x0 = Vec::with_capacity(selected.len() * d);
        for &r in &selected {
            x0.extend_from_slice(reactor[u].row(r));
        }
        let x0 = Tensor::new(vec![selected.len(), d], x0)?;
        let mut rng = stream(seed, &[label("reactor-diff"), step as u64, u as u64]);
        let l = diffusion_loss_graph(&tape, &model.params, &format!("diff.{name}"), &model.cfg.diffusion, &model.sched, &x0, zs, &mut rng)?;
        parts.push((format!("loss.{name}"), tape.value(l).item().to_f64()));
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let loss = total.ok_or_else(|| Error::Contract("model has no units".into()))?;
    let value = tape.value(loss).item().to_f64();
    if !value.is_finite() {
        return Err(Error::Training { step, msg: format!("loss is {value}") });
    }
    let grads = tape.backward(loss).map_err(|e| Error::Training { step, msg: e.to_string() })?;
    optim.update(&mut model.params, &grads.into_named())?;
    Ok(StepReport { step, loss: value, parts })
}

/// Runs reactor training until `optim.step == cfg.steps`.
pub fn train_reactor<R: Real>(
    model: &mut ReactionModel<R>,
    optim: &mut AdamW<R>,
    data: &TokenCache<R>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepReport),
) -> Result<()> {
    cfg.validate("reactor_train")?;
    if data.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    while optim.step < cfg.steps {
        let report = reactor_step(model, optim, data, cfg.batch_size, seed)?;
        on_step(&report);
    }
    Ok(())
}
