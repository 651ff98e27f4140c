//! Batch assembly, the per-step loss graph and the epoch loop.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Composition, ModelKind};
use crate::direction::{gather_windows, window_indices};
use crate::error::{Error, Result};
use crate::length::{augment_frames, augmentation_factors, joint_loss, length_loss, sample_frames};
use crate::nn::{Adam, Graph, Mode, NodeId, Tensor};
use crate::sequence::PoseSequence;
use crate::skeleton::{decompose, pose_shifts_flat};
use crate::synth::substream;

use super::evaluate::evaluate;
use super::loss::{analytic_shifts, joint_shift_loss, total_loss, LossTerms, LossValues};
use super::model::{EpochLog, Model, TrainState, MM_PER_UNIT};

/// Per-video training targets in camera axes, precomputed once.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub frames: usize,
    /// `[T, 2j]`.
    pub kp: Vec<f64>,
    /// `[T, j]`.
    pub vis: Vec<f64>,
    /// Root-relative joints in training units, `[T, 3j]`.
    pub joints: Vec<f64>,
    /// Unit bone directions, `[T, 3 (j - 1)]`.
    pub directions: Vec<f64>,
    /// Non-adjacent joint shifts in training units, `[T, 3 |P|]`.
    pub shifts: Vec<f64>,
    /// Bone lengths of frame 0 in training units.
    pub lengths: Vec<f64>,
}

impl PreparedVideo {
    pub fn new(video: &PoseSequence, model: &Model) -> Result<Self> {
        let topo = &model.topo;
        if video.frames() == 0 {
            return Err(Error::EmptyDataset(format!("video `{}` has no frames", video.actor_id)));
        }
        if video.num_joints() != topo.num_joints() {
            return Err(Error::Shape(format!(
                "video `{}` has {} joints, the skeleton {}",
                video.actor_id,
                video.num_joints(),
                topo.num_joints()
            )));
        }
        let mut joints = Vec::new();
        let mut directions = Vec::new();
        let mut shifts = Vec::new();
        for pose in &video.poses3d {
            let pose = video.camera.pose_to_camera(pose);
            joints.extend(pose.flat().iter().map(|v| v / MM_PER_UNIT));
            directions.extend(decompose(&pose, topo)?.flat_directions());
            shifts.extend(pose_shifts_flat(&pose, topo).iter().map(|v| v / MM_PER_UNIT));
        }
        let lengths = decompose(&video.poses3d[0], topo)?.lengths.iter().map(|l| l / MM_PER_UNIT).collect();
        Ok(Self {
            frames: video.frames(),
            kp: video.keypoint_rows(),
            vis: video.visibility_rows(),
            joints,
            directions,
            shifts,
            lengths,
        })
    }

    fn row(data: &[f64], t: usize, width: usize) -> &[f64] {
        &data[t * width..(t + 1) * width]
    }
}

/// One training example: frame `t` of a video plus its length-branch frames.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub video: usize,
    pub t: usize,
    pub sampled: Vec<usize>,
    /// Position within `sampled` of the frame supervised by `L_J`.
    pub chosen: usize,
}

/// Augmented example: fresh bone lengths for the sampled frames of a video.
#[derive(Debug, Clone, PartialEq)]
pub struct AugItem {
    pub video: usize,
    pub t: usize,
    pub sampled: Vec<usize>,
    pub factors: Vec<f64>,
}

/// Draws `batch` items uniformly over all training frames from `rng`, plus
/// `aug_batch` augmented items from `aug_rng` when augmentation is enabled.
/// Each item has its own generator seeded from its stream, so turning
/// augmentation off leaves the regular items unchanged.
pub fn draw_batch(
    model: &Model,
    videos: &[PreparedVideo],
    rng: &mut impl Rng,
    aug_rng: &mut impl Rng,
) -> Result<(Vec<BatchItem>, Vec<AugItem>)> {
    let cfg = &model.cfg;
    let total: usize = videos.iter().map(|v| v.frames).sum();
    if total == 0 {
        return Err(Error::EmptyDataset("no training frames".into()));
    }
    let locate = |mut k: usize| {
        for (i, v) in videos.iter().enumerate() {
            if k < v.frames {
                return (i, k);
            }
            k -= v.frames;
        }
        unreachable!("index below the frame total")
    };
    let decomposed = cfg.model == ModelKind::Decomposed;
    let mut items = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let mut item_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let (video, t) = locate(item_rng.random_range(0..total));
        let (sampled, chosen) = if decomposed {
            let s = sample_frames(videos[video].frames, t, cfg.strategy, cfg.l, cfg.frame_budget, &mut item_rng)?;
            let c = item_rng.random_range(0..s.len());
            (s, c)
        } else {
            (Vec::new(), 0)
        };
        items.push(BatchItem { video, t, sampled, chosen });
    }
    let mut aug = Vec::new();
    if decomposed && cfg.augment {
        for _ in 0..cfg.aug_batch {
            let mut item_rng = ChaCha8Rng::seed_from_u64(aug_rng.random());
            let (video, t) = locate(item_rng.random_range(0..total));
            let sampled = sample_frames(videos[video].frames, t, cfg.strategy, cfg.l, cfg.frame_budget, &mut item_rng)?;
            let factors = augmentation_factors(&model.topo, &mut item_rng);
            aug.push(AugItem { video, t, sampled, factors });
        }
    }
    Ok((items, aug))
}

/// Builds every loss term of one batch inside `g`.
pub fn batch_losses(
    model: &Model,
    g: &mut Graph<'_>,
    raw: &[PoseSequence],
    videos: &[PreparedVideo],
    items: &[BatchItem],
    aug: &[AugItem],
    rng: &mut impl Rng,
) -> Result<LossTerms> {
    let cfg = &model.cfg;
    let (j, nb) = (model.num_joints(), model.num_bones());
    let b = items.len();
    let mut kp_windows = Vec::with_capacity(b * cfg.d * 2 * j);
    let mut vis_windows = Vec::with_capacity(b * cfg.d * j);
    for it in items {
        let v = &videos[it.video];
        let w = window_indices(it.t, v.frames, cfg.d, cfg.causal);
        kp_windows.extend(gather_windows(&v.kp, 2 * j, std::slice::from_ref(&w))?.into_data());
        vis_windows.extend(gather_windows(&v.vis, j, std::slice::from_ref(&w))?.into_data());
    }
    let kp = g.input(Tensor::new(vec![b, cfg.d, 2 * j], kp_windows)?);
    let vis = g.input(Tensor::new(vec![b, cfg.d, j], vis_windows)?);
    let dout = model.direction.forward(g, kp, vis, Mode::Train, rng)?;
    let frame_joints: Vec<f64> =
        items.iter().flat_map(|it| PreparedVideo::row(&videos[it.video].joints, it.t, 3 * j).to_vec()).collect();

    let Some(length) = &model.length else {
        let direction = dout
            .per_subnet
            .iter()
            .map(|o| joint_loss(g, o.prediction, &frame_joints))
            .collect::<Result<Vec<NodeId>>>()?;
        return Ok(LossTerms { direction, ..LossTerms::default() });
    };

    let dir_target: Vec<f64> =
        items.iter().flat_map(|it| PreparedVideo::row(&videos[it.video].directions, it.t, 3 * nb).to_vec()).collect();
    let direction = model.direction.direction_losses(g, &dout, &dir_target)?;

    // Length branch on the sampled frames, original and augmented.
    let mut rows = Vec::new();
    let mut groups = Vec::with_capacity(b + aug.len());
    let mut len_target = Vec::with_capacity((b + aug.len()) * nb);
    for it in items {
        let v = &videos[it.video];
        let start = rows.len() / (2 * j);
        for &f in &it.sampled {
            rows.extend_from_slice(PreparedVideo::row(&v.kp, f, 2 * j));
        }
        groups.push(start..start + it.sampled.len());
        len_target.extend_from_slice(&v.lengths);
    }
    for a in aug {
        let start = rows.len() / (2 * j);
        let (kp_rows, new_lengths) = augment_frames(&raw[a.video], &model.topo, &a.factors, &a.sampled)?;
        rows.extend(kp_rows);
        groups.push(start..start + a.sampled.len());
        len_target.extend(new_lengths.iter().map(|l| l / MM_PER_UNIT));
    }
    let n = rows.len() / (2 * j);
    let sampled_kp = g.input(Tensor::new(vec![n, 2 * j], rows)?);
    let sampled_joints = length.joints_forward(g, sampled_kp, Mode::Eval, rng)?;
    let fusion = length.fuse(g, sampled_joints, &groups, &model.topo)?;
    let l_l = length_loss(g, fusion.fused, &len_target)?;

    let chosen_rows: Vec<f64> = items
        .iter()
        .flat_map(|it| PreparedVideo::row(&videos[it.video].kp, it.sampled[it.chosen], 2 * j).to_vec())
        .collect();
    let chosen_target: Vec<f64> = items
        .iter()
        .flat_map(|it| PreparedVideo::row(&videos[it.video].joints, it.sampled[it.chosen], 3 * j).to_vec())
        .collect();
    let chosen_kp = g.input(Tensor::new(vec![b, 2 * j], chosen_rows)?);
    let chosen_joints = length.joints_forward(g, chosen_kp, Mode::Train, rng)?;
    let l_j = joint_loss(g, chosen_joints, &chosen_target)?;

    let fused: Vec<f64> = g.value(fusion.fused)[..b * nb].to_vec();
    let shift_target: Vec<f64> = items
        .iter()
        .flat_map(|it| {
            let p = videos[it.video].shifts.len() / videos[it.video].frames;
            PreparedVideo::row(&videos[it.video].shifts, it.t, p).to_vec()
        })
        .collect();
    let final_dirs = dout.final_prediction();
    let (shift, joint_head) = match (&model.heads, cfg.composition) {
        (Some(heads), Composition::Heads) => {
            let lengths = g.input(Tensor::new(vec![b, nb], fused)?);
            let features = g.concat(lengths, final_dirs)?;
            let shifts = g.affine(features, heads.shift.0, Some(heads.shift.1))?;
            let frozen = g.stop_grad(final_dirs);
            let joint_features = g.concat(lengths, frozen)?;
            let joints = g.affine(joint_features, heads.joints.0, Some(heads.joints.1))?;
            (joint_shift_loss(g, shifts, &shift_target)?, Some(joint_loss(g, joints, &frame_joints)?))
        }
        _ => {
            let shifts = analytic_shifts(g, &fused, final_dirs, model.shift_matrix())?;
            (joint_shift_loss(g, shifts, &shift_target)?, None)
        }
    };
    Ok(LossTerms { direction, length: Some(l_l), joints: Some(l_j), shift: Some(shift), joint_head })
}

/// One optimizer step on a drawn batch. Returns the loss values.
pub fn train_step(
    model: &mut Model,
    raw: &[PoseSequence],
    videos: &[PreparedVideo],
    items: &[BatchItem],
    aug: &[AugItem],
    lr: f64,
    rng: &mut impl Rng,
) -> Result<LossValues> {
    let (values, grads, stats) = {
        let mut g = Graph::new(&model.store);
        let terms = batch_losses(model, &mut g, raw, videos, items, aug, rng)?;
        let total = total_loss(&mut g, &terms, &model.cfg)?;
        let grads = g.backward(total)?;
        (terms.values(&g, total), grads, g.stat_updates().to_vec())
    };
    model.store.accumulate(&grads);
    model.store.apply_updates(&stats);
    Adam::default().step(&mut model.store, lr)?;
    Ok(values)
}

/// Where training writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoint directory, rewritten after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines log, one object per epoch.
    pub log: Option<PathBuf>,
    /// Evaluate on the validation videos after every epoch.
    pub validate: bool,
}

pub fn steps_per_epoch(model: &Model, videos: &[PreparedVideo]) -> usize {
    if model.cfg.steps_per_epoch > 0 {
        return model.cfg.steps_per_epoch;
    }
    let total: usize = videos.iter().map(|v| v.frames).sum();
    total.div_ceil(model.cfg.batch).max(1)
}

/// Runs the remaining epochs of `state`. Epoch `e` draws from the streams
/// `(seed, 1, e)` and `(seed, 2, e)` for augmentation, so resuming from a
/// checkpoint continues bitwise.
pub fn train(
    model: &mut Model,
    state: &mut TrainState,
    train_videos: &[PoseSequence],
    val_videos: &[PoseSequence],
    opts: &TrainOptions,
) -> Result<()> {
    if train_videos.is_empty() {
        return Err(Error::EmptyDataset("no training videos".into()));
    }
    let prepared = train_videos.iter().map(|v| PreparedVideo::new(v, model)).collect::<Result<Vec<_>>>()?;
    let steps = steps_per_epoch(model, &prepared);
    while state.epoch < model.cfg.epochs {
        let e = state.epoch;
        let lr = model.cfg.lr * model.cfg.lr_decay.powi(e as i32);
        let mut rng = substream(model.cfg.seed, 1, e as u64);
        let mut aug_rng = substream(model.cfg.seed, 2, e as u64);
        let mut sum = LossValues::default();
        for _ in 0..steps {
            let (items, aug) = draw_batch(model, &prepared, &mut rng, &mut aug_rng)?;
            let mut step_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let v = train_step(model, train_videos, &prepared, &items, &aug, lr, &mut step_rng)?;
            sum.d += v.d;
            sum.l += v.l;
            sum.j += v.j;
            sum.js += v.js;
            sum.total += v.total;
        }
        let n = steps as f64;
        let report = if opts.validate && !val_videos.is_empty() { Some(evaluate(model, val_videos)?) } else { None };
        let log = EpochLog {
            epoch: e,
            lr,
            steps,
            loss_d: sum.d / n,
            loss_l: sum.l / n,
            loss_j: sum.j / n,
            loss_js: sum.js / n,
            total: sum.total / n,
            val_mpjpe_mm: report.as_ref().map(|r| r.mpjpe_mm),
            val_p_mpjpe_mm: report.as_ref().map(|r| r.p_mpjpe_mm),
        };
        if let Some(m) = log.val_mpjpe_mm {
            state.best_val_mpjpe_mm = Some(state.best_val_mpjpe_mm.map_or(m, |b| b.min(m)));
        }
        if let Some(path) = &opts.log {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(&log)?)?;
        }
        state.history.push(log);
        state.epoch += 1;
        if let Some(dir) = &opts.checkpoint {
            model.save(dir, state)?;
        }
    }
    Ok(())
}
