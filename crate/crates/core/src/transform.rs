//! The 16-element flip × rotation group acting on C×T×H×W arrays.
//!
//! An element `(flip, rotation)` acts by flipping first, then rotating every
//! H×W slice counter-clockwise. The spatial part is the dihedral group of the
//! square (left-right flip plus quarter turns); the temporal flip commutes with
//! everything and contributes a Z2 factor.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::clip::VideoClip;
use crate::error::{Result, StcrError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Flip {
    NoFlip = 0,
    LeftRight = 1,
    Temporal = 2,
    TemporalLeftRight = 3,
}

impl Flip {
    pub const ALL: [Flip; 4] = [Flip::NoFlip, Flip::LeftRight, Flip::Temporal, Flip::TemporalLeftRight];

    pub fn from_parts(temporal: bool, left_right: bool) -> Flip {
        match (temporal, left_right) {
            (false, false) => Flip::NoFlip,
            (false, true) => Flip::LeftRight,
            (true, false) => Flip::Temporal,
            (true, true) => Flip::TemporalLeftRight,
        }
    }

    pub fn temporal(self) -> bool {
        matches!(self, Flip::Temporal | Flip::TemporalLeftRight)
    }

    pub fn left_right(self) -> bool {
        matches!(self, Flip::LeftRight | Flip::TemporalLeftRight)
    }
}

/// Counter-clockwise quarter turns in the H×W plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rotation {
    R0 = 0,
    R90 = 1,
    R180 = 2,
    R270 = 3,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn quarter_turns(self) -> usize {
        self as usize
    }

    pub fn from_quarter_turns(k: usize) -> Rotation {
        Rotation::ALL[k % 4]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TransformId {
    pub flip: Flip,
    pub rotation: Rotation,
}

impl TransformId {
    pub const IDENTITY: TransformId = TransformId {
        flip: Flip::NoFlip,
        rotation: Rotation::R0,
    };

    pub fn new(flip: Flip, rotation: Rotation) -> Self {
        TransformId { flip, rotation }
    }

    /// All elements in the fixed enumeration order: flip-major, rotation-minor.
    /// Indices 0..8 carry no temporal flip and `i + 8` is `i` with the temporal
    /// flip added.
    pub fn all() -> [TransformId; 16] {
        std::array::from_fn(Self::from_index)
    }

    pub fn from_index(i: usize) -> TransformId {
        assert!(i < 16, "transform index {i} out of range");
        TransformId::new(Flip::ALL[i / 4], Rotation::ALL[i % 4])
    }

    pub fn index(self) -> usize {
        self.flip as usize * 4 + self.rotation as usize
    }

    /// The serialized `(flip, rotation)` integer pair.
    pub fn as_pair(self) -> (u8, u8) {
        (self.flip as u8, self.rotation as u8)
    }

    pub fn from_pair(flip: u8, rotation: u8) -> Result<TransformId> {
        if flip > 3 || rotation > 3 {
            return Err(StcrError::Argument(format!(
                "transform pair ({flip}, {rotation}) out of range 0..=3"
            )));
        }
        Ok(TransformId::new(Flip::ALL[flip as usize], Rotation::ALL[rotation as usize]))
    }

    pub fn is_spatial_only(self) -> bool {
        !self.flip.temporal()
    }

    /// The element equal to applying `self` and then `next`.
    pub fn then(self, next: TransformId) -> TransformId {
        stt_compose(self, next)
    }

    pub fn inverse(self) -> TransformId {
        stt_inverse(self)
    }
}

impl fmt::Display for TransformId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = self.as_pair();
        write!(f, "{a}:{b}")
    }
}

/// Uniform draw over the 16 elements.
pub fn stt_sample<R: Rng + ?Sized>(rng: &mut R) -> TransformId {
    TransformId::from_index(rng.random_range(0..16))
}

/// `stt_compose(a, b)` acts like `a` followed by `b`.
pub fn stt_compose(a: TransformId, b: TransformId) -> TransformId {
    // Spatial part written as R^k S^s with S the left-right flip; S R^k = R^-k S.
    let (s1, k1) = (a.flip.left_right(), a.rotation.quarter_turns());
    let (s2, k2) = (b.flip.left_right(), b.rotation.quarter_turns());
    let k = if s2 { k2 + 4 - k1 } else { k2 + k1 };
    TransformId::new(
        Flip::from_parts(a.flip.temporal() ^ b.flip.temporal(), s1 ^ s2),
        Rotation::from_quarter_turns(k),
    )
}

pub fn stt_inverse(t: TransformId) -> TransformId {
    if t.flip.left_right() {
        // every R^k S is a reflection, hence an involution
        t
    } else {
        TransformId::new(t.flip, Rotation::from_quarter_turns(4 - t.rotation.quarter_turns()))
    }
}

fn check_rotatable(shape: &[usize], t: TransformId) -> Result<()> {
    if shape.len() != 4 {
        return Err(StcrError::dim("rank", format!("expected C×T×H×W, got {shape:?}")));
    }
    if t.rotation.quarter_turns() % 2 == 1 && shape[2] != shape[3] {
        return Err(StcrError::dim(
            "H/W",
            format!(
                "quarter-turn rotation needs square frames, got {}×{}",
                shape[2], shape[3]
            ),
        ));
    }
    Ok(())
}

/// `map[i]` is the source flat index of output element `i` under `t`.
pub fn source_map(shape: &[usize], t: TransformId) -> Result<Vec<usize>> {
    check_rotatable(shape, t)?;
    let (c, tt, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
    let k = t.rotation.quarter_turns();
    let mut map = Vec::with_capacity(c * tt * hh * ww);
    for ch in 0..c {
        for ti in 0..tt {
            for h in 0..hh {
                for w in 0..ww {
                    // undo the rotation (applied last), then the flip
                    let (h1, w1) = match k {
                        0 => (h, w),
                        1 => (w, hh - 1 - h),
                        2 => (hh - 1 - h, ww - 1 - w),
                        _ => (ww - 1 - w, h),
                    };
                    let w2 = if t.flip.left_right() { ww - 1 - w1 } else { w1 };
                    let t2 = if t.flip.temporal() { tt - 1 - ti } else { ti };
                    map.push(((ch * tt + t2) * hh + h1) * ww + w2);
                }
            }
        }
    }
    Ok(map)
}

fn invert_permutation(map: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; map.len()];
    for (i, &s) in map.iter().enumerate() {
        inv[s] = i;
    }
    inv
}

/// Geometric action of `t` on any C×T×H×W tensor.
pub fn apply_tensor(x: &Tensor, t: TransformId) -> Result<Tensor> {
    let map = source_map(x.shape(), t)?;
    let data = map.iter().map(|&i| x.data()[i]).collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn stt_apply_clip(clip: &VideoClip, t: TransformId) -> Result<VideoClip> {
    VideoClip::new(apply_tensor(clip.tensor(), t)?)
}

/// Undoes the action of `t` on a feature grid.
pub fn stt_apply_feature_inverse(feature: &Tensor, t: TransformId) -> Result<Tensor> {
    let inv = invert_permutation(&source_map(feature.shape(), t)?);
    let data = inv.iter().map(|&i| feature.data()[i]).collect();
    Tensor::new(feature.shape().to_vec(), data)
}

/// Differentiable form of [`stt_apply_feature_inverse`].
pub fn feature_inverse_node(g: &mut Graph, feature: NodeId, t: TransformId) -> Result<NodeId> {
    let shape = g.shape(feature).to_vec();
    let inv = invert_permutation(&source_map(&shape, t)?);
    g.gather(feature, inv, &shape)
}
