//! The full reaction model: tokenizer, reaction transformer, diffusion heads
//! and the frozen token normalisation, all in one parameter store.

use serde::{Deserialize, Serialize};

use crate::diffusion::{init_diffusion_head, DiffusionConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::motion::{MotionLayout, UnitPartition, UnitSplit};
use crate::reactor::{init_reactor, ReactorConfig};
use crate::real::Real;
use crate::rng::{label, stream};
use crate::tensor::{ParamStore, Tensor};
use crate::vae::{pad_to_multiple, UnitVae, VaeConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vae: VaeConfig,
    pub reactor: ReactorConfig,
    pub diffusion: DiffusionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.reactor.validate()?;
        self.diffusion.validate()
    }
}

/// Body/hands split, or a single whole-body unit when unit division is off.
pub fn partition_for(layout: &MotionLayout, unit_division: bool) -> Result<UnitPartition> {
    if unit_division {
        Ok(UnitSplit::default_for(layout)?.partition())
    } else {
        Ok(UnitPartition::whole(layout))
    }
}

pub fn unit_names(partition: &UnitPartition) -> Vec<String> {
    partition.names().map(str::to_owned).collect()
}

fn norm_names(unit: &str) -> (String, String) {
    (format!("reactor.norm.{unit}.mean"), format!("reactor.norm.{unit}.std"))
}

pub struct ReactionModel<R> {
    pub cfg: ModelConfig,
    pub layout: MotionLayout,
    pub partition: UnitPartition,
    pub params: ParamStore<R>,
    pub sched: NoiseSchedule,
}

impl<R: Real> ReactionModel<R> {
    pub fn new(cfg: ModelConfig, layout: MotionLayout, params: ParamStore<R>) -> Result<Self> {
        cfg.validate()?;
        let partition = partition_for(&layout, cfg.reactor.unit_division)?;
        let sched = NoiseSchedule::cosine(cfg.diffusion.t_diff, cfg.diffusion.s)?;
        Ok(Self { cfg, layout, partition, params, sched })
    }

    pub fn units(&self) -> Vec<String> {
        unit_names(&self.partition)
    }

    pub fn vae(&self, unit: &str) -> UnitVae<'_, R> {
        UnitVae::new(&self.params, format!("vae.{unit}"), &self.cfg.vae)
    }

    /// Adds freshly initialised transformer and diffusion-head parameters.
    pub fn init_generator(&mut self, seed: u64) {
        let units = self.units();
        let d = self.cfg.vae.latent_dim;
        let mut rng = stream(seed, &[label("reactor-init")]);
        init_reactor(&mut self.params, &self.cfg.reactor, &units, d, &mut rng);
        for u in &units {
            let mut rng = stream(seed, &[label("diff-init"), label(u)]);
            init_diffusion_head(&mut self.params, &format!("diff.{u}"), d, self.cfg.reactor.d_model, &self.cfg.diffusion, &mut rng);
        }
    }

    /// Token counts of a sequence of `frames` frames.
    pub fn tokens_for(&self, frames: usize) -> usize {
        frames.div_ceil(self.cfg.vae.downsample_rate)
    }

    /// Posterior-mean tokens `[L × d]` per unit for each sequence (equal lengths),
    /// after padding to a multiple of the downsampling rate.
    pub fn encode_means(&self, frames: &[&Tensor<f32>]) -> Result<Vec<Vec<Tensor<R>>>> {
        let r = self.cfg.vae.downsample_rate;
        let mut per_unit: Vec<Vec<Tensor<R>>> = Vec::with_capacity(self.partition.len());
        let parts: Vec<Vec<Tensor<R>>> = frames
            .iter()
            .map(|f| self.partition.split(&f.cast::<R>()))
            .collect::<Result<_>>()?;
        for (u, name) in self.units().iter().enumerate() {
            let padded: Vec<Tensor<R>> = parts.iter().map(|p| pad_to_multiple(&p[u], r).0).collect();
            let refs: Vec<&Tensor<R>> = padded.iter().collect();
            let dists = self.vae(name).encode_batch(&refs)?;
            per_unit.push(dists.into_iter().map(|d| d.mu).collect());
        }
        // transpose to [sequence][unit]
        let n = frames.len();
        let mut out: Vec<Vec<Tensor<R>>> = (0..n).map(|_| Vec::with_capacity(per_unit.len())).collect();
        for unit in per_unit {
            for (i, t) in unit.into_iter().enumerate() {
                out[i].push(t);
            }
        }
        Ok(out)
    }

    /// Sets the per-unit token statistics from `[sequence][unit]` tokens.
    pub fn fit_token_norm(&mut self, tokens: &[Vec<Tensor<R>>]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("no tokens to fit normalisation on".into()));
        }
        for (u, name) in self.units().iter().enumerate() {
            let d = tokens[0][u].cols();
            let mut sum = vec![0.0f64; d];
            let mut sq = vec![0.0f64; d];
            let mut count = 0usize;
            for seq in tokens {
                let t = &seq[u];
                for r in 0..t.rows() {
                    for (c, v) in t.row(r).iter().enumerate() {
                        let v = v.to_f64();
                        sum[c] += v;
                        sq[c] += v * v;
                    }
                }
                count += t.rows();
            }
            let n = count as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let std: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-3)).collect();
            let (mn, sn) = norm_names(name);
            self.params.insert(mn, Tensor::from_f64(vec![d], &mean)?);
            self.params.insert(sn, Tensor::from_f64(vec![d], &std)?);
        }
        Ok(())
    }

    pub fn normalize(&self, unit: &str, t: &Tensor<R>) -> Result<Tensor<R>> {
        self.apply_norm(unit, t, false)
    }

    pub fn denormalize(&self, unit: &str, t: &Tensor<R>) -> Result<Tensor<R>> {
        self.apply_norm(unit, t, true)
    }

    fn apply_norm(&self, unit: &str, t: &Tensor<R>, inverse: bool) -> Result<Tensor<R>> {
        let (mn, sn) = norm_names(unit);
        let (mean, std) = (self.params.get(&mn)?, self.params.get(&sn)?);
        let d = t.cols();
        if mean.len() != d {
            return Err(Error::dim("token normalisation", format!("stats of width {} for tokens of {d}", mean.len())));
        }
        Ok(Tensor::from_fn(t.shape().to_vec(), |i| {
            let (m, s) = (mean.data()[i % d], std.data()[i % d]);
            if inverse {
                t.data()[i] * s + m
            } else {
                (t.data()[i] - m) / s
            }
        }))
    }

    /// Expected tensor names and shapes for this configuration.
    pub fn expected_shapes(&self, with_generator: bool) -> Vec<(String, Vec<usize>)> {
        let mut store = ParamStore::<f32>::new();
        let mut rng = stream(0, &[]);
        let d = self.cfg.vae.latent_dim;
        for (name, idx) in &self.partition.units {
            crate::vae::init_unit_vae(&mut store, &format!("vae.{name}"), idx.len(), &self.cfg.vae, &mut rng);
        }
        if with_generator {
            let units = self.units();
            init_reactor(&mut store, &self.cfg.reactor, &units, d, &mut rng);
            for u in &units {
                init_diffusion_head(&mut store, &format!("diff.{u}"), d, self.cfg.reactor.d_model, &self.cfg.diffusion, &mut rng);
                let (mn, sn) = norm_names(u);
                store.insert(mn, Tensor::zeros(vec![d]));
                store.insert(sn, Tensor::zeros(vec![d]));
            }
        }
        store.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }
}
