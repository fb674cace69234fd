//! Training/evaluation samples: a target frame with temporal neighbors.

use alloc::vec::Vec;

use crate::camera::{CameraIntrinsics, Pose6DoF};
use crate::image::{DepthMap, ImageFrame};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub target: ImageFrame,
    /// Temporal neighbors, usually the previous and next frame.
    pub sources: Vec<ImageFrame>,
    pub intrinsics: CameraIntrinsics,
    pub gt_depth: Option<DepthMap>,
    /// Target-to-source motion for each source, when known.
    pub gt_relative_poses: Option<Vec<Pose6DoF>>,
}

impl SequenceSample {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.target.height(), self.target.width());
        if self.sources.is_empty() {
            return Err(Error::InvalidArgument("sample has no source frames".into()));
        }
        if self.sources.iter().any(|s| s.height() != h || s.width() != w) {
            return Err(Error::shape("SequenceSample", "source frame size differs from target"));
        }
        if self.intrinsics.width != w || self.intrinsics.height != h {
            return Err(Error::shape("SequenceSample", "intrinsics size differs from frames"));
        }
        if let Some(d) = &self.gt_depth {
            if d.height() != h || d.width() != w {
                return Err(Error::shape("SequenceSample", "gt depth size differs from frames"));
            }
        }
        if let Some(p) = &self.gt_relative_poses {
            if p.len() != self.sources.len() {
                return Err(Error::shape("SequenceSample", "one gt pose per source required"));
            }
        }
        Ok(())
    }
}
