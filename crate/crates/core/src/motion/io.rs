//! Motion and dataset file formats.
//!
//! Binary motion: `"MRRS"`, u16 version, f32 fps, u32 N, u32 D, u32 K, then
//! N·D little-endian f32. Text motion: a `#MRRS v1 fps=.. N=.. D=.. K=..`
//! header, optional `#` comment lines, then N whitespace-separated rows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetConfig, InteractionPair, MotionLayout, MotionSequence, SplitTag};
use crate::bytes::{append_crc, put_f32s, put_u16, put_u32, read_file, verify_crc, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MOTION_MAGIC: &[u8; 4] = b"MRRS";
const MOTION_VERSION: u16 = 1;
const DATASET_MAGIC: &[u8; 4] = b"MRDS";
const DATASET_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionFormat {
    Binary,
    Text,
}

impl MotionFormat {
    /// `.txt` selects text; anything else is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt") => MotionFormat::Text,
            _ => MotionFormat::Binary,
        }
    }
}

pub fn encode_motion_binary(m: &MotionSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(22 + 4 * m.frames.len());
    out.extend_from_slice(MOTION_MAGIC);
    put_u16(&mut out, MOTION_VERSION);
    out.extend_from_slice(&m.fps.to_le_bytes());
    put_u32(&mut out, m.len() as u32);
    put_u32(&mut out, m.layout.channels() as u32);
    put_u32(&mut out, m.layout.num_joints as u32);
    put_f32s(&mut out, m.frames.data());
    out
}

pub fn encode_motion_text(m: &MotionSequence, comments: &[String]) -> String {
    let mut s = format!(
        "#MRRS v{MOTION_VERSION} fps={} N={} D={} K={}\n",
        m.fps,
        m.len(),
        m.layout.channels(),
        m.layout.num_joints
    );
    for c in comments {
        for line in c.lines() {
            s.push_str("# ");
            s.push_str(line);
            s.push('\n');
        }
    }
    for r in 0..m.len() {
        let row: Vec<String> = m.frames.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_motion(path: &Path, m: &MotionSequence, format: MotionFormat) -> Result<()> {
    match format {
        MotionFormat::Binary => write_file(path, &encode_motion_binary(m)),
        MotionFormat::Text => write_motion_text(path, m, &[]),
    }
}

/// Text format with `# `-prefixed comment lines after the header.
pub fn write_motion_text(path: &Path, m: &MotionSequence, comments: &[String]) -> Result<()> {
    write_file(path, encode_motion_text(m, comments).as_bytes())
}

fn checked_layout(n: usize, d: usize, k: usize, offset: u64) -> Result<MotionLayout> {
    let parse = |msg: String| Error::Parse { offset, msg };
    if n == 0 {
        return Err(parse("motion has zero frames".into()));
    }
    let layout = MotionLayout::new(k).map_err(|_| parse("joint count must be positive".into()))?;
    if layout.channels() != d {
        return Err(parse(format!("D={d} inconsistent with K={k} (expected {})", layout.channels())));
    }
    Ok(layout)
}

pub fn decode_motion_binary(buf: &[u8]) -> Result<MotionSequence> {
    let mut r = ByteReader::new(buf);
    if r.take(4, "magic")? != MOTION_MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad magic, expected MRRS".into() });
    }
    let version = r.u16("version")?;
    if version != MOTION_VERSION {
        return Err(Error::Version(format!("motion file version {version}, supported {MOTION_VERSION}")));
    }
    let fps = r.f32("fps")?;
    let n = r.u32("N")? as usize;
    let d = r.u32("D")? as usize;
    let k = r.u32("K")? as usize;
    let layout = checked_layout(n, d, k, r.offset())?;
    let start = r.offset();
    let data = r.f32_vec(n * d, "frame data")?;
    if r.remaining() != 0 {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    let frames = Tensor::new(vec![n, d], data)?;
    MotionSequence::new(layout, fps, frames).map_err(|e| Error::Parse { offset: start, msg: e.to_string() })
}

pub fn decode_motion_text(text: &str) -> Result<MotionSequence> {
    let mut lines = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        lines.push((offset, line.trim_end_matches(['\n', '\r'])));
        offset += line.len() as u64;
    }
    let Some(&(_, header)) = lines.first() else {
        return Err(Error::Parse { offset: 0, msg: "empty motion file".into() });
    };
    let mut fields = header.split_whitespace();
    if fields.next() != Some("#MRRS") {
        return Err(Error::Parse { offset: 0, msg: "missing #MRRS header".into() });
    }
    let version = fields.next().unwrap_or("");
    if version != format!("v{MOTION_VERSION}") {
        return Err(Error::Version(format!("motion text version `{version}`, supported v{MOTION_VERSION}")));
    }
    let (mut fps, mut n, mut d, mut k) = (None, None, None, None);
    for f in fields {
        let bad = || Error::Parse { offset: 0, msg: format!("bad header field `{f}`") };
        let (key, val) = f.split_once('=').ok_or_else(bad)?;
        match key {
            "fps" => fps = Some(val.parse::<f32>().map_err(|_| bad())?),
            "N" => n = Some(val.parse::<usize>().map_err(|_| bad())?),
            "D" => d = Some(val.parse::<usize>().map_err(|_| bad())?),
            "K" => k = Some(val.parse::<usize>().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    let missing = |what: &str| Error::Parse { offset: 0, msg: format!("header lacks {what}") };
    let fps = fps.ok_or_else(|| missing("fps"))?;
    let (n, d, k) = (n.ok_or_else(|| missing("N"))?, d.ok_or_else(|| missing("D"))?, k.ok_or_else(|| missing("K"))?);
    let layout = checked_layout(n, d, k, 0)?;
    let mut data = Vec::with_capacity(n * d);
    let mut rows = 0;
    for &(off, line) in &lines[1..] {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if rows == n {
            return Err(Error::Parse { offset: off, msg: format!("more than N={n} rows") });
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v = tok
                .parse::<f32>()
                .map_err(|_| Error::Parse { offset: off, msg: format!("row {rows}: bad number `{tok}`") })?;
            data.push(v);
        }
        if data.len() - before != d {
            return Err(Error::Parse { offset: off, msg: format!("row {rows} has {} values, expected {d}", data.len() - before) });
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::Parse { offset, msg: format!("expected {n} rows, found {rows}") });
    }
    let frames = Tensor::new(vec![n, d], data)?;
    MotionSequence::new(layout, fps, frames).map_err(|e| Error::Parse { offset: 0, msg: e.to_string() })
}

/// Reads either format, detected from the leading bytes.
pub fn read_motion(path: &Path) -> Result<MotionSequence> {
    let buf = read_file(path)?;
    if buf.starts_with(MOTION_MAGIC) {
        decode_motion_binary(&buf)
    } else if buf.starts_with(b"#") {
        let text = std::str::from_utf8(&buf)
            .map_err(|e| Error::Parse { offset: e.valid_up_to() as u64, msg: "invalid UTF-8".into() })?;
        decode_motion_text(text)
    } else {
        Err(Error::Parse { offset: 0, msg: "unrecognised motion file (no MRRS magic)".into() })
    }
}

/// Train or test pairs together with the generating configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub config: DatasetConfig,
    pub pairs: Vec<InteractionPair>,
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    config: DatasetConfig,
    num_joints: usize,
    fps: f32,
    frames: usize,
    count: usize,
}

impl DatasetBundle {
    pub fn train(&self) -> impl Iterator<Item = &InteractionPair> {
        self.pairs.iter().filter(|p| p.split == SplitTag::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &InteractionPair> {
        self.pairs.iter().filter(|p| p.split == SplitTag::Test)
    }

    /// Pairs with the given tag, as a new bundle.
    pub fn subset(&self, tag: SplitTag) -> Self {
        Self { config: self.config.clone(), pairs: self.pairs.iter().filter(|p| p.split == tag).cloned().collect() }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let first = self.pairs.first().ok_or_else(|| Error::Contract("cannot write an empty dataset".into()))?;
        let frames = first.action.len();
        let header = BundleHeader {
            config: self.config.clone(),
            num_joints: first.action.layout.num_joints,
            fps: first.action.fps,
            frames,
            count: self.pairs.len(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        put_u16(&mut out, DATASET_VERSION);
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(&json);
        for p in &self.pairs {
            if p.action.len() != frames || p.reaction.len() != frames || p.action.layout != first.action.layout {
                return Err(Error::Contract("dataset pairs must share length and layout".into()));
            }
            put_u32(&mut out, p.class_label as u32);
            out.push(matches!(p.split, SplitTag::Test) as u8);
            put_f32s(&mut out, p.action.frames.data());
            put_f32s(&mut out, p.reaction.frames.data());
        }
        append_crc(&mut out);
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        if r.take(4, "magic")? != DATASET_MAGIC {
            return Err(Error::Parse { offset: 0, msg: "bad magic, expected MRDS".into() });
        }
        let version = r.u16("version")?;
        if version != DATASET_VERSION {
            return Err(Error::Version(format!("dataset version {version}, supported {DATASET_VERSION}")));
        }
        let body = verify_crc(buf)?;
        let mut r = ByteReader::new(body);
        r.take(6, "preamble")?;
        let hlen = r.u32("header length")? as usize;
        let hoff = r.offset();
        let header: BundleHeader = serde_json::from_slice(r.take(hlen, "header")?)
            .map_err(|e| Error::Parse { offset: hoff, msg: format!("dataset header: {e}") })?;
        let layout = checked_layout(header.frames, MotionLayout { num_joints: header.num_joints }.channels(), header.num_joints, hoff)?;
        let d = layout.channels();
        let n = header.frames;
        let mut pairs = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let class_label = r.u32("class label")? as usize;
            let split = match r.u8("split tag")? {
                0 => SplitTag::Train,
                1 => SplitTag::Test,
                t => return Err(r.err(format!("unknown split tag {t}"))),
            };
            let a = r.f32_vec(n * d, "action frames")?;
            let b = r.f32_vec(n * d, "reaction frames")?;
            pairs.push(InteractionPair {
                action: MotionSequence::new(layout, header.fps, Tensor::new(vec![n, d], a)?)?,
                reaction: MotionSequence::new(layout, header.fps, Tensor::new(vec![n, d], b)?)?,
                class_label,
                split,
            });
        }
        if r.remaining() != 0 {
            return Err(r.err("trailing bytes after last pair"));
        }
        Ok(Self { config: header.config, pairs })
    }
}

pub fn write_dataset(path: &Path, bundle: &DatasetBundle) -> Result<()> {
    write_file(path, &bundle.encode()?)
}

pub fn read_dataset(path: &Path) -> Result<DatasetBundle> {
    DatasetBundle::decode(&read_file(path)?)
}
