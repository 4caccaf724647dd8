//! The two training stages driven by a [`RunConfig`], plus checkpoint
//! conversion with hash and shape validation.

use crate::checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{partition_for, ReactionModel};
use crate::motion::InteractionPair;
use crate::optim::AdamW;
use crate::real::Real;
use crate::tensor::ParamStore;
use crate::train::{init_vae_params, prepare_tokens, train_reactor, train_vae, StepReport, TrainState};

/// Fresh tokenizer parameters and optimizer.
pub fn new_vae_state<R: Real>(cfg: &RunConfig) -> Result<TrainState<R>> {
    let partition = partition_for(&cfg.layout(), cfg.model.reactor.unit_division)?;
    Ok(TrainState {
        params: init_vae_params(&partition, &cfg.model.vae, cfg.seed),
        optim: AdamW::new(cfg.vae_train.optim.clone())?,
    })
}

/// Trains the tokenizer until `cfg.vae_train.steps` total steps.
pub fn run_vae_stage<R: Real>(
    cfg: &RunConfig,
    state: &mut TrainState<R>,
    pairs: &[&InteractionPair],
    on_step: impl FnMut(&StepReport),
) -> Result<()> {
    check_pairs(cfg, pairs)?;
    let partition = partition_for(&cfg.layout(), cfg.model.reactor.unit_division)?;
    train_vae(state, pairs, &partition, &cfg.model.vae, &cfg.vae_train, cfg.seed, on_step)
}

pub fn vae_checkpoint<R: Real>(cfg: &RunConfig, state: &TrainState<R>) -> Checkpoint<R> {
    let header = CheckpointHeader::new(CheckpointKind::Vae, cfg, state.step(), R::DTYPE);
    Checkpoint::new(header, state.params.clone()).with_optimizer(&state.optim)
}

/// Tokenizer state from a checkpoint written under a matching configuration.
pub fn restore_vae<R: Real>(cfg: &RunConfig, ck: &Checkpoint<R>) -> Result<TrainState<R>> {
    ck.expect(CheckpointKind::Vae, &cfg.vae_hash())?;
    let probe = ReactionModel::<R>::new(cfg.model.clone(), cfg.layout(), ParamStore::new())?;
    ck.validate_shapes(&probe.expected_shapes(false))?;
    let mut optim = AdamW::new(cfg.vae_train.optim.clone())?;
    ck.restore_optimizer(&mut optim);
    Ok(TrainState { params: ck.params.clone(), optim })
}

/// A model holding the given tokenizer and a freshly initialised generator.
pub fn new_reaction_model<R: Real>(cfg: &RunConfig, vae_params: ParamStore<R>) -> Result<ReactionModel<R>> {
    let mut params = vae_params;
    params.retain(|n| n.starts_with("vae."));
    let mut model = ReactionModel::new(cfg.model.clone(), cfg.layout(), params)?;
    model.init_generator(cfg.seed);
    Ok(model)
}

/// Trains transformer and diffusion heads until `cfg.reactor_train.steps`
/// total steps; token statistics are fitted on first use.
pub fn run_reactor_stage<R: Real>(
    cfg: &RunConfig,
    model: &mut ReactionModel<R>,
    optim: &mut AdamW<R>,
    pairs: &[&InteractionPair],
    on_step: impl FnMut(&StepReport),
) -> Result<()> {
    check_pairs(cfg, pairs)?;
    let data = prepare_tokens(model, pairs)?;
    train_reactor(model, optim, &data, &cfg.reactor_train, cfg.seed, on_step)
}

pub fn model_checkpoint<R: Real>(cfg: &RunConfig, model: &ReactionModel<R>, optim: &AdamW<R>) -> Checkpoint<R> {
    let header = CheckpointHeader::new(CheckpointKind::Model, cfg, optim.step, R::DTYPE);
    Checkpoint::new(header, model.params.clone()).with_optimizer(optim)
}

/// Full model and its optimizer from a checkpoint written under a matching configuration.
pub fn restore_model<R: Real>(cfg: &RunConfig, ck: &Checkpoint<R>) -> Result<(ReactionModel<R>, AdamW<R>)> {
    ck.expect(CheckpointKind::Model, &cfg.model_hash())?;
    let mut model = ReactionModel::<R>::new(cfg.model.clone(), cfg.layout(), ParamStore::new())?;
    ck.validate_shapes(&model.expected_shapes(true))?;
    model.params = ck.params.clone();
    let mut optim = AdamW::new(cfg.reactor_train.optim.clone())?;
    ck.restore_optimizer(&mut optim);
    Ok((model, optim))
}

fn check_pairs(cfg: &RunConfig, pairs: &[&InteractionPair]) -> Result<()> {
    let layout = cfg.layout();
    if let Some(p) = pairs.iter().find(|p| p.action.layout != layout || p.reaction.layout != layout) {
        return Err(Error::Contract(format!(
            "dataset has {} joints, configuration expects {}",
            p.action.layout.num_joints, layout.num_joints
        )));
    }
    Ok(())
}
