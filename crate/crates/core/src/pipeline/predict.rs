//! Per-frame inference, in bulk over a video or streamed frame by frame.

use rand_chacha::ChaCha8Rng;

use crate::config::{Composition, ModelKind, Strategy};
use crate::direction::window_indices;
use crate::error::{Error, Result};
use crate::length::{sample_frames, LengthNet};
use crate::nn::{Graph, Mode, Tensor};
use crate::sequence::PoseSequence;
use crate::skeleton::{compose, BoneRepresentation, Pose3D};
use crate::synth::substream;

use super::model::{Model, MM_PER_UNIT};

/// Windows per direction forward pass in bulk mode.
const CHUNK: usize = 256;
/// Stream family of the length-branch sampling at inference.
const PREDICT_STREAM: u64 = 0x4000_0000;

/// Sampling generator for frame `t` of video `video`.
pub fn frame_rng(seed: u64, video: usize, t: usize) -> ChaCha8Rng {
    substream(seed, PREDICT_STREAM + video as u64, t as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrediction {
    /// Root-relative poses in world axes, mm.
    pub poses: Vec<Pose3D>,
    /// Fused bone lengths in mm per frame; empty for direct regression.
    pub fused_lengths: Vec<Vec<f64>>,
}

/// Raw direction-branch outputs of windows ending or centered at `frames`.
fn direction_rows(model: &Model, video: &PoseSequence, frames: &[usize]) -> Result<Vec<f64>> {
    let cfg = &model.cfg;
    let j = model.num_joints();
    let mut out = Vec::new();
    let mut rng = substream(cfg.seed, PREDICT_STREAM - 1, 0);
    for chunk in frames.chunks(CHUNK) {
        let (mut kp, mut vis) = (Vec::new(), Vec::new());
        for &t in chunk {
            for f in window_indices(t, video.frames(), cfg.d, cfg.causal) {
                kp.extend(video.keypoints2d[f].iter().flatten());
                vis.extend_from_slice(&video.visibility[f]);
            }
        }
        let b = chunk.len();
        let mut g = Graph::new(&model.store);
        let kp = g.input(Tensor::new(vec![b, cfg.d, 2 * j], kp)?);
        let vis = g.input(Tensor::new(vec![b, cfg.d, j], vis)?);
        let dout = model.direction.forward(&mut g, kp, vis, Mode::Eval, &mut rng)?;
        out.extend_from_slice(g.value(dout.final_prediction()));
    }
    Ok(out)
}

/// Final pose of one frame, in camera axes, from fused lengths (training
/// units) and the raw direction-branch output.
pub fn assemble(model: &Model, lengths: &[f64], raw: &[f64]) -> Result<Pose3D> {
    let (j, nb) = (model.num_joints(), model.num_bones());
    let joints_mm = |flat: &[f64]| {
        let r = model.topo.root();
        let root = [flat[3 * r], flat[3 * r + 1], flat[3 * r + 2]];
        Pose3D::new(
            flat.chunks_exact(3)
                .map(|p| [(p[0] - root[0]) * MM_PER_UNIT, (p[1] - root[1]) * MM_PER_UNIT, (p[2] - root[2]) * MM_PER_UNIT])
                .collect(),
        )
    };
    match (model.cfg.model, &model.heads) {
        (ModelKind::Direct, _) => {
            if raw.len() != 3 * j {
                return Err(Error::Shape(format!("direct output of {} values for {j} joints", raw.len())));
            }
            Ok(joints_mm(raw))
        }
        (ModelKind::Decomposed, Some(heads)) if model.cfg.composition == Composition::Heads => {
            let mut g = Graph::new(&model.store);
            let mut features = lengths.to_vec();
            features.extend_from_slice(raw);
            let x = g.input(Tensor::new(vec![1, 4 * nb], features)?);
            let y = g.affine(x, heads.joints.0, Some(heads.joints.1))?;
            Ok(joints_mm(g.value(y)))
        }
        _ => {
            if raw.len() != 3 * nb || lengths.len() != nb {
                return Err(Error::Shape(format!("{} lengths and {} direction values for {nb} bones", lengths.len(), raw.len())));
            }
            let directions = raw.chunks_exact(3).map(|d| [d[0], d[1], d[2]]).collect();
            let lengths = lengths.iter().map(|l| l * MM_PER_UNIT).collect();
            compose(&BoneRepresentation { lengths, directions }, &model.topo)
        }
    }
}

/// Every frame of a video. Per-frame length sampling uses `frame_rng`, so
/// the result does not depend on how frames are batched.
pub fn predict_video(model: &Model, video: &PoseSequence, video_index: usize) -> Result<VideoPrediction> {
    let t_all: Vec<usize> = (0..video.frames()).collect();
    let raw = direction_rows(model, video, &t_all)?;
    let width = raw.len() / video.frames().max(1);
    let Some(length) = &model.length else {
        let poses = raw
            .chunks_exact(width)
            .map(|r| Ok(video.camera.pose_to_world(&assemble(model, &[], r)?)))
            .collect::<Result<_>>()?;
        return Ok(VideoPrediction { poses, fused_lengths: Vec::new() });
    };
    let nb = model.num_bones();
    let cache = length.frame_cache(&model.store, &video.keypoint_rows(), &model.topo)?;
    let cfg = &model.cfg;
    let mut poses = Vec::with_capacity(video.frames());
    let mut fused_lengths = Vec::with_capacity(video.frames());
    for t in t_all {
        let idx = sample_frames(video.frames(), t, cfg.strategy, cfg.l, cfg.frame_budget, &mut frame_rng(cfg.seed, video_index, t))?;
        let fused = length.fuse_cached(&cache, &idx, nb);
        poses.push(video.camera.pose_to_world(&assemble(model, &fused, &raw[t * width..(t + 1) * width])?));
        fused_lengths.push(fused.iter().map(|l| l * MM_PER_UNIT).collect());
    }
    Ok(VideoPrediction { poses, fused_lengths })
}

/// Frame-by-frame inference as frames arrive. With the firstframe strategy
/// the fused lengths are computed once the first `M` frames are in and then
/// reused.
pub struct StreamingPredictor<'m> {
    model: &'m Model,
    video_index: usize,
    frozen: Option<Vec<f64>>,
}

impl<'m> StreamingPredictor<'m> {
    pub fn new(model: &'m Model, video_index: usize) -> Self {
        Self { model, video_index, frozen: None }
    }

    fn lengths(&mut self, length: &LengthNet, video: &PoseSequence, t: usize) -> Result<Vec<f64>> {
        let cfg = &self.model.cfg;
        if let Some(l) = &self.frozen {
            return Ok(l.clone());
        }
        let idx = sample_frames(video.frames(), t, cfg.strategy, cfg.l, cfg.frame_budget, &mut frame_rng(cfg.seed, self.video_index, t))?;
        let j = self.model.num_joints();
        let rows: Vec<f64> = idx.iter().flat_map(|&f| video.keypoints2d[f].iter().flatten().copied()).collect();
        debug_assert_eq!(rows.len(), idx.len() * 2 * j);
        let fused = length.predict(&self.model.store, &rows, &self.model.topo)?.fused_lengths;
        if cfg.strategy == Strategy::Firstframe && t + 1 >= cfg.frame_budget {
            self.frozen = Some(fused.clone());
        }
        Ok(fused)
    }

    /// Pose of frame `t`, reading only the frames the configuration allows.
    pub fn predict(&mut self, video: &PoseSequence, t: usize) -> Result<Pose3D> {
        if t >= video.frames() {
            return Err(Error::Index(format!("frame {t} outside a video of {} frames", video.frames())));
        }
        let raw = direction_rows(self.model, video, &[t])?;
        let lengths = match &self.model.length {
            Some(length) => self.lengths(length, video, t)?,
            None => Vec::new(),
        };
        Ok(video.camera.pose_to_world(&assemble(self.model, &lengths, &raw)?))
    }
}
