//! Run configuration: size presets, TOML overlays and the content hashes
//! that tie checkpoints to the settings that produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::generate::GenerationConfig;
use crate::model::ModelConfig;
use crate::motion::{DatasetConfig, MotionLayout};
use crate::optim::OptimConfig;
use crate::reactor::ReactorConfig;
use crate::train::TrainConfig;
use crate::vae::VaeConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Model size presets. `Small` is the desk-scale default; `Paper` is the
/// full-size configuration, constructible but too large to train on a CPU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    #[default]
    Small,
    Base,
    Paper,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Tiny, Preset::Small, Preset::Base, Preset::Paper];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
            Preset::Base => "base",
            Preset::Paper => "paper",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}` (tiny, small, base, paper)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of parameter initialisation and training batches.
    pub seed: u64,
    pub precision: Precision,
    pub preset: Preset,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub vae_train: TrainConfig,
    pub reactor_train: TrainConfig,
    pub generation: GenerationConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Small)
    }
}

fn desk_optim() -> OptimConfig {
    OptimConfig { lr: 1e-3, warmup_steps: 100, ..OptimConfig::default() }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let desk_train = |steps| TrainConfig { steps, batch_size: 16, optim: desk_optim(), log_every: 10 };
        let (vae, reactor, diffusion) = match preset {
            Preset::Tiny => (
                VaeConfig { latent_dim: 32, width: 32, ..VaeConfig::default() },
                ReactorConfig { blocks: 2, d_model: 32, heads: 2, ff_hidden: 128, max_tokens: 16, ..ReactorConfig::default() },
                DiffusionConfig { hidden: 128, blocks: 2, batch_mul: 1, ..DiffusionConfig::default() },
            ),
            Preset::Small => (
                VaeConfig { latent_dim: 64, width: 64, ..VaeConfig::default() },
                ReactorConfig { blocks: 4, d_model: 64, heads: 4, ff_hidden: 256, max_tokens: 16, ..ReactorConfig::default() },
                DiffusionConfig { hidden: 256, blocks: 3, batch_mul: 1, ..DiffusionConfig::default() },
            ),
            Preset::Base => (
                VaeConfig { latent_dim: 64, width: 128, ..VaeConfig::default() },
                ReactorConfig { blocks: 6, d_model: 128, heads: 4, ff_hidden: 512, max_tokens: 16, ..ReactorConfig::default() },
                DiffusionConfig { hidden: 512, blocks: 3, batch_mul: 1, ..DiffusionConfig::default() },
            ),
            // Heads, feed-forward width, dropout, weight decay and step counts
            // are unspecified at this size; the values here are placeholders.
            Preset::Paper => (
                VaeConfig { latent_dim: 256, width: 256, ..VaeConfig::default() },
                ReactorConfig { blocks: 8, d_model: 384, heads: 6, ff_hidden: 1536, max_tokens: 64, ..ReactorConfig::default() },
                DiffusionConfig { hidden: 1024, blocks: 3, batch_mul: 4, ..DiffusionConfig::default() },
            ),
        };
        let (vae_train, reactor_train) = match preset {
            Preset::Paper => {
                let t = TrainConfig { steps: 100_000, batch_size: 128, optim: OptimConfig::default(), log_every: 100 };
                (t.clone(), t)
            }
            _ => (desk_train(1000), desk_train(1500)),
        };
        let generation = GenerationConfig { mode: reactor.mode, ..GenerationConfig::default() };
        Self {
            seed: 0,
            precision: Precision::F32,
            preset,
            dataset: DatasetConfig::default(),
            model: ModelConfig { vae, reactor, diffusion },
            vae_train,
            reactor_train,
            generation,
            eval: EvalConfig::default(),
        }
    }

    /// Parses TOML text as an overlay on a preset. The preset comes from
    /// `preset` if given, else from the text's own `preset` key, else `small`.
    pub fn from_toml_str(text: &str, preset: Option<Preset>) -> Result<Self> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match (preset, overlay.get("preset")) {
            (Some(p), _) => p,
            (None, Some(toml::Value::String(s))) => s.parse()?,
            (None, Some(v)) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
            (None, None) => Preset::Small,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut base, overlay);
        base.insert("preset".into(), toml::Value::String(preset.name().into()));
        let cfg: Self = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, preset: Option<Preset>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_str(&text, preset)
            }
            None => {
                let cfg = Self::preset(preset.unwrap_or_default());
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets every seed that influences a run to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.seed = seed;
        self.generation.seed = seed;
        self.eval.seed = seed;
    }

    pub fn layout(&self) -> MotionLayout {
        self.dataset.layout()
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.vae_train.validate("vae_train")?;
        self.reactor_train.validate("reactor_train")?;
        self.generation.validate()?;
        self.eval.validate()?;
        if self.generation.mode != self.model.reactor.mode {
            return Err(Error::Config(format!(
                "generation.mode {:?} differs from model.reactor.mode {:?}",
                self.generation.mode, self.model.reactor.mode
            )));
        }
        Ok(())
    }

    /// Hash of everything a tokenizer checkpoint depends on.
    pub fn vae_hash(&self) -> String {
        canonical_hash(&serde_json::json!({
            "num_joints": self.dataset.num_joints,
            "unit_division": self.model.reactor.unit_division,
            "vae": self.model.vae,
        }))
    }

    /// Hash of everything a full model checkpoint depends on.
    pub fn model_hash(&self) -> String {
        canonical_hash(&serde_json::json!({
            "num_joints": self.dataset.num_joints,
            "model": self.model,
        }))
    }
}

/// Recursively overlays `top` onto `base`; tables merge, other values replace.
pub fn merge_tables(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge_tables(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// SHA-256 of the compact JSON form with keys in sorted order.
pub fn canonical_hash(value: &serde_json::Value) -> String {
    // serde_json's default map is ordered, so serialisation is canonical.
    let text = serde_json::to_string(value).expect("json values always serialise");
    sha256_hex(text.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
