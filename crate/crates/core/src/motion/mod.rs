//! Motion data model, unit split/merge, synthetic interaction data and file formats.

mod dataset;
mod io;
mod layout;

pub use dataset::{make_synthetic_dataset, DatasetConfig, SplitTag, SyntheticWorld};
pub use io::{
    decode_motion_binary, decode_motion_text, encode_motion_binary, encode_motion_text, read_dataset, read_motion,
    write_dataset, write_motion, write_motion_text, DatasetBundle, MotionFormat,
};
pub use layout::{MotionLayout, UnitPartition, UnitSplit, BODY_JOINTS, FINGER_JOINTS, ROT6D};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames `[N × D]` of one person's motion.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub layout: MotionLayout,
    pub fps: f32,
    pub frames: Tensor<f32>,
}

impl MotionSequence {
    pub fn new(layout: MotionLayout, fps: f32, frames: Tensor<f32>) -> Result<Self> {
        if frames.rank() != 2 || frames.cols() != layout.channels() {
            return Err(Error::Contract(format!(
                "frames {:?} do not match layout with D={}",
                frames.shape(),
                layout.channels()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::Numeric("motion frames contain non-finite values".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Contract(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { layout, fps, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// First `n` frames.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Contract(format!("cannot truncate {} frames to {n}", self.len())));
        }
        let d = self.frames.cols();
        let data = self.frames.data()[..n * d].to_vec();
        Self::new(self.layout, self.fps, Tensor::new(vec![n, d], data)?)
    }
}

/// One actor/reactor pair.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionPair {
    pub action: MotionSequence,
    pub reaction: MotionSequence,
    pub class_label: usize,
    pub split: SplitTag,
}

/// `(body, hands)` column groups of a motion.
pub fn split_units(m: &MotionSequence, s: &UnitSplit) -> Result<(Tensor<f32>, Tensor<f32>)> {
    s.validate(&m.layout)?;
    let mut parts = s.partition().split(&m.frames)?;
    let hands = parts.pop().expect("two units");
    let body = parts.pop().expect("two units");
    Ok((body, hands))
}

/// Inverse of [`split_units`].
pub fn merge_units(
    body: &Tensor<f32>,
    hands: &Tensor<f32>,
    s: &UnitSplit,
    layout: MotionLayout,
    fps: f32,
) -> Result<MotionSequence> {
    s.validate(&layout)?;
    let frames = s.partition().merge(&[body.clone(), hands.clone()])?;
    MotionSequence::new(layout, fps, frames)
}
