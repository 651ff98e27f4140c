//! Bone length branch: a per-frame fully-connected residual network predicts
//! 3D joints for frames sampled across the video, and learned attention
//! fuses the bone lengths derived from each frame.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::project;
use crate::config::{Config, Strategy};
use crate::direction::batch_norm_params;
use crate::error::{Error, Result};
use crate::nn::{attention_pool_values, BatchNormParams, Graph, Init, Mode, NodeId, ParamId, ParameterStore, Tensor};
use crate::sequence::PoseSequence;
use crate::skeleton::{bone_lengths_clamped, decompose, rescale_pose, SkeletonTopology};

/// Per-bone augmentation factors are drawn from this range.
pub const AUGMENT_RANGE: (f64, f64) = (0.8, 1.2);

#[derive(Debug, Clone, PartialEq)]
pub struct LengthNetConfig {
    pub l: usize,
    pub gamma: f64,
    pub channels: usize,
    pub blocks: usize,
    pub strategy: Strategy,
    pub budget: usize,
    pub attention: bool,
    pub dropout: f64,
    pub joints: usize,
}

impl LengthNetConfig {
    pub fn from_config(cfg: &Config, joints: usize) -> Self {
        Self {
            l: cfg.l,
            gamma: cfg.gamma,
            channels: cfg.length_channels,
            blocks: cfg.length_blocks,
            strategy: cfg.strategy,
            budget: cfg.frame_budget,
            attention: cfg.attention,
            dropout: cfg.dropout,
            joints,
        }
    }
}

/// Frame indices feeding the length branch for frame `t` of a `frames`-long
/// video.
pub fn sample_frames(
    frames: usize,
    t: usize,
    strategy: Strategy,
    l: usize,
    budget: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if t >= frames {
        return Err(Error::Index(format!("frame {t} outside a video of {frames} frames")));
    }
    Ok(match strategy {
        Strategy::Random => (0..l).map(|_| rng.random_range(0..frames)).collect(),
        Strategy::CausalRandom => (0..l).map(|_| rng.random_range(0..=t)).collect(),
        Strategy::Firstframe => (0..budget.min(t + 1)).collect(),
        Strategy::Consecutive => {
            let n = budget.min(t + 1);
            (t + 1 - n..=t).collect()
        }
    })
}

/// Affine layer followed by batch norm.
#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
    bn: BatchNormParams,
}

#[derive(Debug, Clone)]
pub struct LengthNet {
    cfg: LengthNetConfig,
    input: Dense,
    blocks: Vec<[Dense; 2]>,
    head: (ParamId, ParamId),
    attention: ParamId,
}

/// Length-branch outputs inside a graph.
#[derive(Debug, Clone)]
pub struct LengthNodes {
    /// Per-frame bone lengths, constant with respect to every parameter.
    pub per_frame_lengths: Vec<f64>,
    pub degenerate: bool,
    pub attention: NodeId,
    /// `[groups, j - 1]`.
    pub fused: NodeId,
}

/// Plain-number view of one fusion, in the units of the network output.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthPrediction {
    pub per_frame_joints: Vec<f64>,
    pub per_frame_lengths: Vec<f64>,
    pub attention: Vec<f64>,
    pub fused_lengths: Vec<f64>,
}

/// Cached per-frame quantities for a whole video.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCache {
    pub joints: Vec<f64>,
    pub lengths: Vec<f64>,
    pub logits: Vec<f64>,
}

fn dense(store: &mut ParameterStore, name: &str, out: usize, inp: usize, rng: &mut impl Rng) -> Result<Dense> {
    Ok(Dense {
        w: store.add(format!("{name}.w"), &[out, inp], Init::HeUniform, rng)?,
        b: store.add(format!("{name}.b"), &[out], Init::Zeros, rng)?,
        bn: batch_norm_params(store, &format!("{name}.bn"), out, rng)?,
    })
}

impl LengthNet {
    /// Parameter-name prefix of the residual network.
    pub const PREFIX: &'static str = "len.";
    /// Name of the attention matrix.
    pub const ATTENTION: &'static str = "att.W";

    pub fn new(store: &mut ParameterStore, cfg: LengthNetConfig, rng: &mut impl Rng) -> Result<Self> {
        let (o, j) = (cfg.channels, cfg.joints);
        let input = dense(store, "len.in", o, 2 * j, rng)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            blocks.push([dense(store, &format!("len.blk{i}.a"), o, o, rng)?, dense(store, &format!("len.blk{i}.b"), o, o, rng)?]);
        }
        let head = (
            store.add("len.head.w", &[3 * j, o], Init::FanInUniform, rng)?,
            store.add("len.head.b", &[3 * j], Init::Zeros, rng)?,
        );
        // Zero start: attention begins as the plain mean.
        let attention = store.add(Self::ATTENTION, &[j - 1, 3 * j], Init::Zeros, rng)?;
        Ok(Self { cfg, input, blocks, head, attention })
    }

    pub fn config(&self) -> &LengthNetConfig {
        &self.cfg
    }

    pub fn attention_param(&self) -> ParamId {
        self.attention
    }

    fn dense_bn_relu(&self, g: &mut Graph<'_>, x: NodeId, p: &Dense, mode: Mode, rng: &mut impl Rng) -> Result<NodeId> {
        let h = g.affine(x, p.w, Some(p.b))?;
        let h = g.batch_norm(h, &p.bn, mode)?;
        let h = g.relu(h);
        g.dropout(h, self.cfg.dropout, mode, rng)
    }

    /// Per-frame joints `[N, 3j]` from keypoint rows `[N, 2j]`. Frames never mix
    /// except through batch statistics in training mode.
    pub fn joints_forward(&self, g: &mut Graph<'_>, kp: NodeId, mode: Mode, rng: &mut impl Rng) -> Result<NodeId> {
        if g.shape(kp).len() != 2 || g.shape(kp)[1] != 2 * self.cfg.joints {
            return Err(Error::Shape(format!("length input {:?}, expected [N, {}]", g.shape(kp), 2 * self.cfg.joints)));
        }
        let mut x = self.dense_bn_relu(g, kp, &self.input, mode, rng)?;
        for [a, b] in &self.blocks {
            let h = self.dense_bn_relu(g, x, a, mode, rng)?;
            let h = self.dense_bn_relu(g, h, b, mode, rng)?;
            x = g.add(x, h)?;
        }
        g.affine(x, self.head.0, Some(self.head.1))
    }

    /// Attention fusion of the bone lengths of `joints` within each row group.
    /// Lengths and logits are computed from the joints behind a gradient
    /// stop, so the fused lengths train only the attention matrix.
    pub fn fuse(&self, g: &mut Graph<'_>, joints: NodeId, groups: &[Range<usize>], topo: &SkeletonTopology) -> Result<LengthNodes> {
        let nb = topo.num_bones();
        let rows = g.shape(joints)[0];
        let mut per_frame_lengths = Vec::with_capacity(rows * nb);
        let mut degenerate = false;
        for r in g.value(joints).chunks_exact(3 * topo.num_joints()) {
            let (l, d) = bone_lengths_clamped(r, topo);
            per_frame_lengths.extend(l);
            degenerate |= d;
        }
        let logits = if self.cfg.attention {
            let frozen = g.stop_grad(joints);
            g.affine(frozen, self.attention, None)?
        } else {
            g.input(Tensor::zeros(vec![rows, nb]))
        };
        let attention = g.softmax_groups(logits, groups, self.cfg.gamma)?;
        let lengths = g.input(Tensor::new(vec![rows, nb], per_frame_lengths.clone())?);
        let fused = g.attention_pool(logits, lengths, groups, self.cfg.gamma)?;
        Ok(LengthNodes { per_frame_lengths, degenerate, attention, fused })
    }

    /// Evaluation-mode prediction for one set of sampled keypoint rows.
    pub fn predict(&self, store: &ParameterStore, kp_rows: &[f64], topo: &SkeletonTopology) -> Result<LengthPrediction> {
        let n = kp_rows.len() / (2 * self.cfg.joints);
        let mut g = Graph::new(store);
        let kp = g.input(Tensor::new(vec![n, 2 * self.cfg.joints], kp_rows.to_vec())?);
        let joints = self.joints_forward(&mut g, kp, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
        let nodes = self.fuse(&mut g, joints, &[0..n], topo)?;
        Ok(LengthPrediction {
            per_frame_joints: g.value(joints).to_vec(),
            per_frame_lengths: nodes.per_frame_lengths,
            attention: g.value(nodes.attention).to_vec(),
            fused_lengths: g.value(nodes.fused).to_vec(),
        })
    }

    /// Evaluation-mode joints, lengths and attention logits of every row.
    pub fn frame_cache(&self, store: &ParameterStore, kp_rows: &[f64], topo: &SkeletonTopology) -> Result<FrameCache> {
        let n = kp_rows.len() / (2 * self.cfg.joints);
        let mut g = Graph::new(store);
        let kp = g.input(Tensor::new(vec![n, 2 * self.cfg.joints], kp_rows.to_vec())?);
        let joints = self.joints_forward(&mut g, kp, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut lengths = Vec::with_capacity(n * topo.num_bones());
        for r in g.value(joints).chunks_exact(3 * topo.num_joints()) {
            lengths.extend(bone_lengths_clamped(r, topo).0);
        }
        let logits = if self.cfg.attention {
            let a = g.affine(joints, self.attention, None)?;
            g.value(a).to_vec()
        } else {
            vec![0.0; n * topo.num_bones()]
        };
        Ok(FrameCache { joints: g.value(joints).to_vec(), lengths, logits })
    }

    /// Fused lengths from cached frames selected by `indices`.
    pub fn fuse_cached(&self, cache: &FrameCache, indices: &[usize], nb: usize) -> Vec<f64> {
        let mut logits = Vec::with_capacity(indices.len() * nb);
        let mut lengths = Vec::with_capacity(indices.len() * nb);
        for &i in indices {
            logits.extend_from_slice(&cache.logits[i * nb..(i + 1) * nb]);
            lengths.extend_from_slice(&cache.lengths[i * nb..(i + 1) * nb]);
        }
        fuse_values(&logits, &lengths, nb, self.cfg.gamma)
    }
}

/// `sum_i softmax_i(gamma * logits) * lengths` per bone over the rows.
pub fn fuse_values(logits: &[f64], lengths: &[f64], nb: usize, gamma: f64) -> Vec<f64> {
    let n = lengths.len() / nb;
    attention_pool_values(logits, lengths, nb, &[0..n], gamma).0
}

/// Mean per-joint Euclidean error of `joints` against `target`, averaged
/// over rows.
pub fn joint_loss(g: &mut Graph<'_>, joints: NodeId, target: &[f64]) -> Result<NodeId> {
    g.euclidean_error(joints, target, true)
}

/// Squared L2 error of fused lengths, averaged over groups.
pub fn length_loss(g: &mut Graph<'_>, fused: NodeId, target: &[f64]) -> Result<NodeId> {
    g.squared_error(fused, target)
}

/// One factor per bone in the augmentation range; mirrored bones share it.
pub fn augmentation_factors(topo: &SkeletonTopology, rng: &mut impl Rng) -> Vec<f64> {
    let mirror = topo.mirror_bones();
    let mut factors: Vec<f64> = vec![0.0; topo.num_bones()];
    for b in 0..topo.num_bones() {
        factors[b] = match mirror[b] {
            Some(m) if m < b => factors[m],
            _ => rng.random_range(AUGMENT_RANGE.0..=AUGMENT_RANGE.1),
        };
    }
    factors
}

/// Rescaled and cleanly reprojected frames of `video` under per-bone factors
/// applied to the lengths of frame 0. Returns `[n, 2j]` keypoint rows and the
/// new bone lengths.
pub fn augment_frames(
    video: &PoseSequence,
    topo: &SkeletonTopology,
    factors: &[f64],
    frames: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, new_lengths, kp) = augment_frames_full(video, topo, factors, frames)?;
    Ok((kp.into_iter().flatten().flatten().collect(), new_lengths))
}

#[allow(clippy::type_complexity)]
fn augment_frames_full(
    video: &PoseSequence,
    topo: &SkeletonTopology,
    factors: &[f64],
    frames: &[usize],
) -> Result<(Vec<crate::skeleton::Pose3D>, Vec<f64>, Vec<Vec<[f64; 2]>>)> {
    let base = decompose(&video.poses3d[0], topo)?;
    let new_lengths: Vec<f64> = base.lengths.iter().zip(factors).map(|(l, f)| l * f).collect();
    let mut poses = Vec::with_capacity(frames.len());
    let mut kps = Vec::with_capacity(frames.len());
    for &f in frames {
        let pose = rescale_pose(&video.poses3d[f], &new_lengths, topo)?;
        kps.push(project(&video.camera, &pose, video.root_world[f])?);
        poses.push(pose);
    }
    Ok((poses, new_lengths, kps))
}

/// Video with a new skeleton: per-bone factors scale the original lengths,
/// every frame keeps its bone directions, and keypoints are reprojected
/// without noise. Visibility is copied unchanged.
pub fn augment_video_with(video: &PoseSequence, topo: &SkeletonTopology, factors: &[f64]) -> Result<PoseSequence> {
    let frames: Vec<usize> = (0..video.frames()).collect();
    let (poses3d, _, keypoints2d) = augment_frames_full(video, topo, factors, &frames)?;
    Ok(PoseSequence {
        actor_id: format!("{}-aug", video.actor_id),
        poses3d,
        root_world: video.root_world.clone(),
        keypoints2d,
        visibility: video.visibility.clone(),
        camera: video.camera.clone(),
    })
}

pub fn augment_video(video: &PoseSequence, topo: &SkeletonTopology, rng: &mut impl Rng) -> Result<PoseSequence> {
    let factors = augmentation_factors(topo, rng);
    augment_video_with(video, topo, &factors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampling_strategies() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_frames(10, 9, Strategy::Consecutive, 50, 50, &mut rng).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(sample_frames(1000, 700, Strategy::Firstframe, 50, 50, &mut rng).unwrap(), (0..50).collect::<Vec<_>>());
        assert_eq!(sample_frames(1000, 3, Strategy::Firstframe, 50, 50, &mut rng).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(sample_frames(1000, 700, Strategy::Consecutive, 50, 50, &mut rng).unwrap(), (651..=700).collect::<Vec<_>>());
        assert_eq!(sample_frames(100, 0, Strategy::CausalRandom, 50, 50, &mut rng).unwrap(), vec![0; 50]);
        let causal = sample_frames(100, 20, Strategy::CausalRandom, 200, 50, &mut rng).unwrap();
        assert!(causal.len() == 200 && causal.iter().all(|&i| i <= 20));
        let random = sample_frames(100, 20, Strategy::Random, 500, 50, &mut rng).unwrap();
        assert!(random.len() == 500 && random.iter().any(|&i| i > 20) && random.iter().all(|&i| i < 100));
        assert!(sample_frames(10, 10, Strategy::Random, 5, 5, &mut rng).is_err());
    }

    #[test]
    fn fuse_values_limits() {
        let lengths = [1.0, 2.0, 3.0, 5.0, 7.0, 11.0];
        let logits = [0.3, -0.2, 0.9, 0.1, 0.4, -0.7];
        let mean = fuse_values(&logits, &lengths, 2, 0.0);
        assert_eq!(mean, vec![(1.0 + 3.0 + 7.0) / 3.0, (2.0 + 5.0 + 11.0) / 3.0]);
        assert_eq!(fuse_values(&logits[..2], &lengths[..2], 2, 10.0), vec![1.0, 2.0]);
    }

    #[test]
    fn length_loss_single_bone_off() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let fused = g.input(Tensor::new(vec![1, 3], vec![100.0, 201.0, 50.0]).unwrap());
        let l = length_loss(&mut g, fused, &[100.0, 200.0, 50.0]).unwrap();
        assert_eq!(g.scalar(l), 1.0);
        let joints = g.input(Tensor::new(vec![1, 6], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap());
        let lj = joint_loss(&mut g, joints, &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.scalar(lj), 0.0);
    }
}
