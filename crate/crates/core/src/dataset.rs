//! JSON-lines video files (`bonekin-data-1`): one object per video.
//!
//! Prediction files use the same layout with only `poses3d` present.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::sequence::PoseSequence;
use crate::skeleton::{Pose3D, SkeletonTopology, Vec3};

pub const DATA_FORMAT: &str = "bonekin-data-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub format: String,
    pub actor_id: String,
    pub frames: usize,
    pub topology_hash: String,
    pub image_size: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraModel>,
    pub poses3d: Vec<Pose3D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_world: Option<Vec<Vec3>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints2d: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility: Option<Vec<Vec<f64>>>,
}

impl VideoRecord {
    pub fn from_sequence(video: &PoseSequence, topo: &SkeletonTopology) -> Self {
        Self {
            format: DATA_FORMAT.into(),
            actor_id: video.actor_id.clone(),
            frames: video.frames(),
            topology_hash: topo.hash(),
            image_size: [video.camera.width, video.camera.height],
            camera: Some(video.camera.clone()),
            poses3d: video.poses3d.clone(),
            root_world: Some(video.root_world.clone()),
            keypoints2d: Some(video.keypoints2d.clone()),
            visibility: Some(video.visibility.clone()),
        }
    }

    /// Record carrying predicted poses only.
    pub fn prediction(actor_id: &str, image_size: [f64; 2], poses3d: Vec<Pose3D>, topo: &SkeletonTopology) -> Self {
        Self {
            format: DATA_FORMAT.into(),
            actor_id: actor_id.into(),
            frames: poses3d.len(),
            topology_hash: topo.hash(),
            image_size,
            camera: None,
            poses3d,
            root_world: None,
            keypoints2d: None,
            visibility: None,
        }
    }

    fn check(&self, topo: &SkeletonTopology) -> std::result::Result<(), String> {
        if self.format != DATA_FORMAT {
            return Err(format!("unsupported format `{}`", self.format));
        }
        let j = topo.num_joints();
        let t = self.frames;
        if self.poses3d.len() != t {
            return Err(format!("poses3d has {} frames, header says {t}", self.poses3d.len()));
        }
        if let Some(f) = self.poses3d.iter().position(|p| p.num_joints() != j) {
            return Err(format!("poses3d frame {f} does not have {j} joints"));
        }
        if let Some(r) = &self.root_world {
            if r.len() != t {
                return Err(format!("root_world has {} frames, header says {t}", r.len()));
            }
        }
        if let Some(k) = &self.keypoints2d {
            if k.len() != t || k.iter().any(|f| f.len() != j) {
                return Err(format!("keypoints2d is not {t} x {j}"));
            }
        }
        if let Some(v) = &self.visibility {
            if v.len() != t || v.iter().any(|f| f.len() != j) {
                return Err(format!("visibility is not {t} x {j}"));
            }
        }
        Ok(())
    }

    /// Full video; fails when an observation array is missing.
    pub fn into_sequence(self) -> std::result::Result<PoseSequence, String> {
        let missing = |what: &str| format!("video `{}` lacks `{what}`", self.actor_id);
        let camera = self.camera.clone().ok_or_else(|| missing("camera"))?;
        let root_world = self.root_world.clone().ok_or_else(|| missing("root_world"))?;
        let keypoints2d = self.keypoints2d.clone().ok_or_else(|| missing("keypoints2d"))?;
        let visibility = self.visibility.clone().ok_or_else(|| missing("visibility"))?;
        Ok(PoseSequence { actor_id: self.actor_id, poses3d: self.poses3d, root_world, keypoints2d, visibility, camera })
    }
}

pub fn write_records(records: &[VideoRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(videos: &[PoseSequence], topo: &SkeletonTopology, path: &Path) -> Result<()> {
    let records: Vec<VideoRecord> = videos.iter().map(|v| VideoRecord::from_sequence(v, topo)).collect();
    write_records(&records, path)
}

/// Reads every record, checking format tag, topology hash and array shapes.
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn read_records(path: &Path, topo: &SkeletonTopology) -> Result<Vec<(usize, VideoRecord)>> {
    let expected = topo.hash();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VideoRecord = serde_json::from_str(&line).map_err(|e| Error::Format { line: n, message: e.to_string() })?;
        if rec.topology_hash != expected {
            return Err(Error::TopologyMismatch { expected, found: rec.topology_hash });
        }
        rec.check(topo).map_err(|message| Error::Format { line: n, message })?;
        out.push((n, rec));
    }
    Ok(out)
}

pub fn read_dataset(path: &Path, topo: &SkeletonTopology) -> Result<Vec<PoseSequence>> {
    read_records(path, topo)?
        .into_iter()
        .map(|(n, r)| {
            let v = r.into_sequence().map_err(|message| Error::Format { line: n, message })?;
            v.validate().map_err(|e| Error::Format { line: n, message: e.to_string() })?;
            Ok(v)
        })
        .collect()
}
