//! Versioned named-tensor checkpoints.
//!
//! Layout (little endian): `MRCK`, u16 version, u32 header length, JSON
//! header, u32 entry count, entries, CRC32 of everything before it. An entry
//! is u16 name length, UTF-8 name, u8 dtype code, u8 rank, u32 dims, data.
//! Optimizer moments are stored as `optim.m.<param>` / `optim.v.<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::{append_crc, put_u16, put_u32, read_file, verify_crc, write_file, ByteReader};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::real::{DType, Real};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Tokenizer only.
    Vae,
    /// Tokenizer, transformer, diffusion heads and token statistics.
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub config: RunConfig,
    /// Noise schedule parameters; the table itself is recomputed on load.
    pub t_diff: usize,
    pub s: f64,
    pub num_joints: usize,
    /// Optimizer steps taken by the stage that wrote the file.
    pub step: usize,
    pub dtype: String,
}

impl CheckpointHeader {
    pub fn new(kind: CheckpointKind, config: &RunConfig, step: usize, dtype: DType) -> Self {
        let config_hash = match kind {
            CheckpointKind::Vae => config.vae_hash(),
            CheckpointKind::Model => config.model_hash(),
        };
        Self {
            kind,
            config_hash,
            config: config.clone(),
            t_diff: config.model.diffusion.t_diff,
            s: config.model.diffusion.s,
            num_joints: config.dataset.num_joints,
            step,
            dtype: dtype.name().into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<R> {
    pub header: CheckpointHeader,
    pub params: ParamStore<R>,
    pub optim_m: ParamStore<R>,
    pub optim_v: ParamStore<R>,
}

impl<R: Real> Checkpoint<R> {
    pub fn new(header: CheckpointHeader, params: ParamStore<R>) -> Self {
        Self { header, params, optim_m: ParamStore::new(), optim_v: ParamStore::new() }
    }

    pub fn with_optimizer(mut self, optim: &AdamW<R>) -> Self {
        self.optim_m = optim.m.clone();
        self.optim_v = optim.v.clone();
        self
    }

    /// Moves the stored moments into `optim` and sets its step counter.
    pub fn restore_optimizer(&self, optim: &mut AdamW<R>) {
        optim.m = self.optim_m.clone();
        optim.v = self.optim_v.clone();
        optim.step = self.header.step;
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header).map_err(|e| Error::Contract(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u16(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(&json);
        let entries: Vec<(String, &Tensor<R>)> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v))
            .chain(self.optim_m.iter().map(|(k, v)| (format!("{MOMENT_M}{k}"), v)))
            .chain(self.optim_v.iter().map(|(k, v)| (format!("{MOMENT_V}{k}"), v)))
            .collect();
        put_u32(&mut out, entries.len() as u32);
        for (name, t) in entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("entry name too long: {name}")))?;
            put_u16(&mut out, len);
            out.extend_from_slice(name.as_bytes());
            out.push(R::DTYPE.code());
            out.push(u8::try_from(t.rank()).map_err(|_| Error::Contract(format!("rank too large for `{name}`")))?);
            for &d in t.shape() {
                put_u32(&mut out, u32::try_from(d).map_err(|_| Error::Contract(format!("dimension too large for `{name}`")))?);
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        append_crc(&mut out);
        Ok(out)
    }

    /// Decodes a checkpoint of either stored precision, casting to `R`.
    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Parse { offset: 0, msg: "bad magic, expected MRCK".into() });
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!("checkpoint version {version}, supported {CHECKPOINT_VERSION}")));
        }
        let body = verify_crc(buf)?;
        let mut r = ByteReader::new(body);
        r.take(6, "preamble")?;
        let hlen = r.u32("header length")? as usize;
        let hoff = r.offset();
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, "header")?)
            .map_err(|e| Error::Parse { offset: hoff, msg: format!("checkpoint header: {e}") })?;
        let count = r.u32("entry count")?;
        let mut ck = Self::new(header, ParamStore::new());
        for _ in 0..count {
            let start = r.offset();
            let nlen = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "entry name")?)
                .map_err(|_| Error::Parse { offset: start, msg: "entry name is not UTF-8".into() })?
                .to_owned();
            let code = r.u8("dtype")?;
            let dtype = DType::from_code(code).ok_or_else(|| r.err(format!("unknown dtype code {code}")))?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.err("shape overflows"))?;
            let bytes = r.take(n.checked_mul(dtype.size()).ok_or_else(|| r.err("size overflow"))?, "entry data")?;
            let data: Vec<R> = match dtype {
                DType::F32 => bytes.chunks_exact(4).map(|c| R::from_f64(f32::read_le(c) as f64)).collect(),
                DType::F64 => bytes.chunks_exact(8).map(|c| R::from_f64(f64::read_le(c))).collect(),
            };
            let t = Tensor::new(shape, data).map_err(|e| Error::Parse { offset: start, msg: e.to_string() })?;
            let (store, key) = if let Some(k) = name.strip_prefix(MOMENT_M) {
                (&mut ck.optim_m, k.to_owned())
            } else if let Some(k) = name.strip_prefix(MOMENT_V) {
                (&mut ck.optim_v, k.to_owned())
            } else {
                (&mut ck.params, name.clone())
            };
            if store.contains(&key) {
                return Err(Error::Parse { offset: start, msg: format!("duplicate entry `{name}`") });
            }
            store.insert(key, t);
        }
        if r.remaining() != 0 {
            return Err(r.err("trailing bytes after last entry"));
        }
        Ok(ck)
    }

    /// Rejects the checkpoint unless it is of `kind` and was written under
    /// settings hashing to `hash`.
    pub fn expect(&self, kind: CheckpointKind, hash: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Version(format!("expected a {kind:?} checkpoint, found {:?}", self.header.kind)));
        }
        if self.header.config_hash != hash {
            return Err(Error::Version(format!(
                "checkpoint config hash {} does not match the current configuration ({hash})",
                self.header.config_hash
            )));
        }
        Ok(())
    }

    /// Every expected parameter must be present with its shape, and nothing else.
    pub fn validate_shapes(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in expected {
            let t = self.params.get(name).map_err(|_| Error::Contract(format!("checkpoint is missing `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Contract(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        if self.params.len() != expected.len() {
            let extra: Vec<&String> =
                self.params.names().filter(|n| !expected.iter().any(|(e, _)| e == *n)).take(3).collect();
            return Err(Error::Contract(format!("checkpoint has unexpected entries {extra:?}")));
        }
        for (name, m) in self.optim_m.iter().chain(self.optim_v.iter()) {
            let p = self.params.get(name).map_err(|_| Error::Contract(format!("moment for unknown `{name}`")))?;
            if p.shape() != m.shape() {
                return Err(Error::Contract(format!("moment of `{name}` has shape {:?}", m.shape())));
            }
        }
        Ok(())
    }

    /// Deterministic multi-line description of the entries.
    pub fn summary(&self) -> String {
        use std::fmt::Write;
        let h = &self.header;
        let mut s = String::new();
        let _ = writeln!(s, "kind: {:?}", h.kind);
        let _ = writeln!(s, "config_hash: {}", h.config_hash);
        let _ = writeln!(s, "preset: {}", h.config.preset.name());
        let _ = writeln!(s, "dtype: {}", h.dtype);
        let _ = writeln!(s, "step: {}", h.step);
        let _ = writeln!(s, "schedule: t_diff={} s={}", h.t_diff, h.s);
        let _ = writeln!(s, "num_joints: {}", h.num_joints);
        let mut groups: std::collections::BTreeMap<String, usize> = Default::default();
        for (name, t) in self.params.iter() {
            let _ = writeln!(s, "  {name} {:?} {}", t.shape(), t.len());
            let top = name.split('.').take(2).collect::<Vec<_>>().join(".");
            *groups.entry(top).or_default() += t.len();
        }
        for (g, n) in groups {
            let _ = writeln!(s, "total {g}: {n}");
        }
        let _ = writeln!(s, "total parameters: {}", self.params.num_scalars());
        let _ = writeln!(s, "optimizer moments: {}", self.optim_m.len());
        s
    }
}

pub fn write_checkpoint<R: Real>(path: &Path, ck: &Checkpoint<R>) -> Result<()> {
    write_file(path, &ck.encode()?)
}

pub fn read_checkpoint<R: Real>(path: &Path) -> Result<Checkpoint<R>> {
    Checkpoint::decode(&read_file(path)?)
}
