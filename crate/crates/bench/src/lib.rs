//! Shared fixtures for the criterion benches in `benches/`.

use reactsynth_core::config::{Preset, RunConfig};
use reactsynth_core::model::ReactionModel;
use reactsynth_core::motion::{make_synthetic_dataset, DatasetConfig, InteractionPair};
use reactsynth_core::pipeline::{new_reaction_model, new_vae_state};
use reactsynth_core::tensor::Tensor;

/// Desk-scale dataset of `n` pairs.
pub fn pairs(n: usize) -> Vec<InteractionPair> {
    make_synthetic_dataset(&DatasetConfig { num_pairs: n, ..DatasetConfig::default() }).expect("valid dataset config")
}

/// Untrained model of the given preset with token statistics fitted on `pairs`.
pub fn model(preset: Preset, pairs: &[InteractionPair]) -> ReactionModel<f32> {
    let cfg = RunConfig::preset(preset);
    let vae = new_vae_state::<f32>(&cfg).expect("valid preset").params;
    let mut model = new_reaction_model(&cfg, vae).expect("valid preset");
    let frames: Vec<&Tensor<f32>> = pairs.iter().map(|p| &p.action.frames).collect();
    let toks = model.encode_means(&frames).expect("encodable");
    model.fit_token_norm(&toks).expect("nonempty");
    model
}
