//! Pinhole camera and keypoint normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{Pose3D, Vec3};

/// Points closer than this to the image plane (mm) are rejected.
const MIN_DEPTH_MM: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation, mm.
    pub translation: Vec3,
    pub width: f64,
    pub height: f64,
}

impl CameraModel {
    /// Camera at `position` looking at `target`, with world `z` as up.
    /// Camera axes: x right, y down, z forward.
    pub fn look_at(position: Vec3, target: Vec3, focal: f64, width: f64, height: f64) -> Self {
        let forward = normalize(sub(target, position));
        let right = normalize(cross(forward, [0.0, 0.0, 1.0]));
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let translation = [
            -dot(rotation[0], position),
            -dot(rotation[1], position),
            -dot(rotation[2], position),
        ];
        Self {
            fx: focal,
            fy: focal,
            cx: width / 2.0,
            cy: height / 2.0,
            rotation,
            translation,
            width,
            height,
        }
    }

    pub fn to_camera(&self, world: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            dot(r[0], world) + self.translation[0],
            dot(r[1], world) + self.translation[1],
            dot(r[2], world) + self.translation[2],
        ]
    }

    /// Root-relative pose rotated into camera axes.
    pub fn pose_to_camera(&self, pose: &Pose3D) -> Pose3D {
        let r = &self.rotation;
        Pose3D::new(pose.joints.iter().map(|&p| [dot(r[0], p), dot(r[1], p), dot(r[2], p)]).collect())
    }

    /// Inverse of [`CameraModel::pose_to_camera`].
    pub fn pose_to_world(&self, pose: &Pose3D) -> Pose3D {
        let r = &self.rotation;
        let col = |k: usize| [r[0][k], r[1][k], r[2][k]];
        Pose3D::new(pose.joints.iter().map(|&p| [dot(col(0), p), dot(col(1), p), dot(col(2), p)]).collect())
    }

    /// Pixel coordinates of a camera-space point.
    pub fn camera_to_pixel(&self, p: Vec3, joint: usize) -> Result<[f64; 2]> {
        if !(p[2] > MIN_DEPTH_MM) {
            return Err(Error::BehindCamera { joint, depth: p[2] });
        }
        Ok([self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy])
    }

    /// Maps pixels to `[-1, 1]` by image width and height.
    pub fn normalize_pixel(&self, px: [f64; 2]) -> [f64; 2] {
        [2.0 * px[0] / self.width - 1.0, 2.0 * px[1] / self.height - 1.0]
    }

    /// Checks that the rotation is orthonormal with determinant +1.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 1.0 } else { 0.0 };
                if (dot(r[a], r[b]) - want).abs() > 1e-9 {
                    return Err(Error::Config("camera rotation is not orthonormal".into()));
                }
            }
        }
        if (dot(cross(r[0], r[1]), r[2]) - 1.0).abs() > 1e-9 {
            return Err(Error::Config("camera rotation has determinant -1".into()));
        }
        if self.width <= 0.0 || self.height <= 0.0 {
            return Err(Error::Config("camera image size must be positive".into()));
        }
        Ok(())
    }
}

/// Projects a root-relative pose placed at `root_world` to normalized
/// keypoints.
pub fn project(camera: &CameraModel, pose: &Pose3D, root_world: Vec3) -> Result<Vec<[f64; 2]>> {
    pose.joints
        .iter()
        .enumerate()
        .map(|(k, j)| {
            let world = [root_world[0] + j[0], root_world[1] + j[1], root_world[2] + j[2]];
            let px = camera.camera_to_pixel(camera.to_camera(world), k)?;
            Ok(camera.normalize_pixel(px))
        })
        .collect()
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_camera() -> CameraModel {
        CameraModel {
            fx: 1000.0,
            fy: 1000.0,
            cx: 500.0,
            cy: 500.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            width: 1000.0,
            height: 1000.0,
        }
    }

    #[test]
    fn principal_axis_hits_principal_point() {
        let c = axis_camera();
        assert_eq!(c.camera_to_pixel([0.0, 0.0, 1000.0], 0).unwrap(), [500.0, 500.0]);
        assert_eq!(c.camera_to_pixel([100.0, 0.0, 1000.0], 0).unwrap(), [600.0, 500.0]);
    }

    #[test]
    fn camera_axes_roundtrip() {
        let c = CameraModel::look_at([3000.0, -2000.0, 1500.0], [0.0, 0.0, 900.0], 1100.0, 1000.0, 1000.0);
        let pose = Pose3D::new(vec![[0.0; 3], [120.0, -40.0, 300.0], [-5.0, 80.0, -250.0]]);
        let cam = c.pose_to_camera(&pose);
        let root = c.to_camera([10.0, 20.0, 900.0]);
        for (p, q) in pose.joints.iter().zip(&cam.joints) {
            let direct = c.to_camera([10.0 + p[0], 20.0 + p[1], 900.0 + p[2]]);
            for k in 0..3 {
                assert!((direct[k] - root[k] - q[k]).abs() < 1e-9);
            }
        }
        let back = c.pose_to_world(&cam);
        for (p, q) in pose.joints.iter().zip(&back.joints) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_depth_rejected() {
        let c = axis_camera();
        assert!(matches!(c.camera_to_pixel([1.0, 0.0, 0.0], 3), Err(Error::BehindCamera { joint: 3, .. })));
        let pose = Pose3D::new(vec![[0.0; 3], [0.0, 0.0, -2000.0]]);
        assert!(project(&c, &pose, [0.0, 0.0, 1000.0]).is_err());
    }

    #[test]
    fn projection_normalizes_to_unit_box() {
        let c = axis_camera();
        let pose = Pose3D::new(vec![[0.0; 3], [100.0, -100.0, 0.0]]);
        let kp = project(&c, &pose, [0.0, 0.0, 1000.0]).unwrap();
        assert_eq!(kp[0], [0.0, 0.0]);
        assert!((kp[1][0] - 0.2).abs() < 1e-12 && (kp[1][1] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn projection_is_scale_consistent() {
        let c = axis_camera();
        let p = [123.0, -45.0, 2100.0];
        let base = c.camera_to_pixel(p, 0).unwrap();
        for s in [0.01, 0.5, 3.0, 1e4] {
            let q = c.camera_to_pixel([p[0] * s, p[1] * s, p[2] * s], 0).unwrap();
            assert!((q[0] - base[0]).abs() < 1e-9 && (q[1] - base[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn look_at_centers_target() {
        let c = CameraModel::look_at([4000.0, -3000.0, 1500.0], [0.0, 0.0, 1000.0], 1100.0, 1000.0, 1000.0);
        c.validate().unwrap();
        let px = c.camera_to_pixel(c.to_camera([0.0, 0.0, 1000.0]), 0).unwrap();
        assert!((px[0] - 500.0).abs() < 1e-9 && (px[1] - 500.0).abs() < 1e-9);
        // World up maps to image up (smaller v).
        let above = c.camera_to_pixel(c.to_camera([0.0, 0.0, 1500.0]), 0).unwrap();
        assert!(above[1] < 500.0);
    }
}
