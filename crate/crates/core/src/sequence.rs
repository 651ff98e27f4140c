//! A single video: ground-truth poses, 2D observations and camera.

use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::skeleton::{Pose3D, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    pub actor_id: String,
    /// Root-relative joints per frame, mm.
    pub poses3d: Vec<Pose3D>,
    /// World position of the root joint per frame, mm.
    pub root_world: Vec<Vec3>,
    /// Normalized image coordinates in `[-1, 1]`, per frame and joint.
    pub keypoints2d: Vec<Vec<[f64; 2]>>,
    /// Per-keypoint visibility scores in `[0, 1]`.
    pub visibility: Vec<Vec<f64>>,
    pub camera: CameraModel,
}

impl PoseSequence {
    pub fn frames(&self) -> usize {
        self.poses3d.len()
    }

    pub fn num_joints(&self) -> usize {
        self.poses3d.first().map_or(0, Pose3D::num_joints)
    }

    /// Keypoints flattened to `[T, 2j]` rows.
    pub fn keypoint_rows(&self) -> Vec<f64> {
        self.keypoints2d.iter().flatten().flatten().copied().collect()
    }

    /// Visibility flattened to `[T, j]` rows.
    pub fn visibility_rows(&self) -> Vec<f64> {
        self.visibility.iter().flatten().copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames();
        let j = self.num_joints();
        if self.root_world.len() != t || self.keypoints2d.len() != t || self.visibility.len() != t {
            return Err(Error::Shape(format!(
                "video `{}`: per-frame arrays disagree on the frame count {t}",
                self.actor_id
            )));
        }
        for f in 0..t {
            if self.poses3d[f].num_joints() != j || self.keypoints2d[f].len() != j || self.visibility[f].len() != j {
                return Err(Error::Shape(format!("video `{}`: frame {f} has inconsistent joint counts", self.actor_id)));
            }
            if let Some(v) = self.visibility[f].iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Shape(format!("video `{}`: frame {f} visibility {v} outside [0, 1]", self.actor_id)));
            }
        }
        self.camera.validate()
    }
}
