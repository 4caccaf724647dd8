use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channels per joint in the 6D rotation representation.
pub const ROT6D: usize = 6;
/// Joints that carry finger articulation in the 54-joint skeleton.
pub const FINGER_JOINTS: usize = 30;
/// Joints routed to the body unit: 21 body joints, jaw and two eyeballs.
pub const BODY_JOINTS: usize = 24;

/// Per-frame channel layout: `K` joints in 6D, then global orientation (6D)
/// and root translation (3).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionLayout {
    pub num_joints: usize,
}

impl Default for MotionLayout {
    fn default() -> Self {
        Self { num_joints: BODY_JOINTS + FINGER_JOINTS }
    }
}

impl MotionLayout {
    pub fn new(num_joints: usize) -> Result<Self> {
        if num_joints == 0 {
            return Err(Error::Config("layout needs at least one joint".into()));
        }
        Ok(Self { num_joints })
    }

    pub fn channels(&self) -> usize {
        ROT6D * self.num_joints + ROT6D + 3
    }

    pub fn joint_offset(&self, joint: usize) -> usize {
        ROT6D * joint
    }

    pub fn orient_offset(&self) -> usize {
        ROT6D * self.num_joints
    }

    pub fn translation_offset(&self) -> usize {
        ROT6D * self.num_joints + ROT6D
    }
}

/// Disjoint body / hands channel index lists covering a layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSplit {
    pub body: Vec<usize>,
    pub hands: Vec<usize>,
}

impl UnitSplit {
    /// Body = first 24 joints plus orientation and translation; hands = the 30 finger joints.
    pub fn default_for(layout: &MotionLayout) -> Result<Self> {
        if layout.num_joints != BODY_JOINTS + FINGER_JOINTS {
            return Err(Error::Config(format!(
                "no default unit split for K={}; supply explicit channel lists",
                layout.num_joints
            )));
        }
        let hands_start = layout.joint_offset(BODY_JOINTS);
        let hands_end = layout.orient_offset();
        let body = (0..hands_start).chain(hands_end..layout.channels()).collect();
        let hands = (hands_start..hands_end).collect();
        Ok(Self { body, hands })
    }

    pub fn validate(&self, layout: &MotionLayout) -> Result<()> {
        let d = layout.channels();
        let mut seen = vec![false; d];
        for list in [&self.body, &self.hands] {
            if list.is_empty() {
                return Err(Error::Contract("unit split has an empty unit".into()));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Contract("unit channel lists must be strictly increasing".into()));
            }
            for &c in list {
                if c >= d {
                    return Err(Error::Contract(format!("channel {c} out of range for D={d}")));
                }
                if seen[c] {
                    return Err(Error::Contract(format!("channel {c} assigned to both units")));
                }
                seen[c] = true;
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("channel {c} assigned to no unit")));
        }
        Ok(())
    }

    pub fn partition(&self) -> UnitPartition {
        UnitPartition {
            units: vec![("body".into(), self.body.clone()), ("hands".into(), self.hands.clone())],
        }
    }
}

/// Named channel groups a motion is tokenised in. Either the body/hands split
/// or a single whole-body group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitPartition {
    pub units: Vec<(String, Vec<usize>)>,
}

impl UnitPartition {
    pub fn whole(layout: &MotionLayout) -> Self {
        Self { units: vec![("whole".into(), (0..layout.channels()).collect())] }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.units.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.units.iter().map(|(_, c)| c.len()).sum()
    }

    /// Column gather of `frames: [N × D]` into one tensor per unit.
    pub fn split<R: crate::Real>(&self, frames: &Tensor<R>) -> Result<Vec<Tensor<R>>> {
        let d = frames.cols();
        let n = frames.rows();
        self.units
            .iter()
            .map(|(name, idx)| {
                if idx.iter().any(|&c| c >= d) {
                    return Err(Error::Contract(format!("unit `{name}` indexes past {d} channels")));
                }
                let mut out = Vec::with_capacity(n * idx.len());
                for r in 0..n {
                    let row = frames.row(r);
                    out.extend(idx.iter().map(|&c| row[c]));
                }
                Tensor::new(vec![n, idx.len()], out)
            })
            .collect()
    }

    /// Exact inverse of [`split`](Self::split).
    pub fn merge<R: crate::Real>(&self, parts: &[Tensor<R>]) -> Result<Tensor<R>> {
        if parts.len() != self.units.len() {
            return Err(Error::Contract(format!("expected {} unit tensors, got {}", self.units.len(), parts.len())));
        }
        let n = parts[0].rows();
        let d = self.channels();
        let mut out = vec![R::ZERO; n * d];
        for ((name, idx), p) in self.units.iter().zip(parts) {
            if p.cols() != idx.len() || p.rows() != n {
                return Err(Error::Contract(format!(
                    "unit `{name}` expects {n}×{}, got {:?}",
                    idx.len(),
                    p.shape()
                )));
            }
            for r in 0..n {
                for (j, &c) in idx.iter().enumerate() {
                    out[r * d + c] = p.at(r, j);
                }
            }
        }
        Tensor::new(vec![n, d], out)
    }
}
