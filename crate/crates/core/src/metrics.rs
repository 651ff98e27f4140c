//! Pose estimation metrics: MPJPE (protocol 1), P-MPJPE (protocol 2),
//! MPJVE, PCK and AUC.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{norm3, sub3, Pose3D};

/// PCK threshold, mm.
pub const PCK_THRESHOLD_MM: f64 = 150.0;

/// AUC averages PCK over 0, 5, ..., 150 mm.
pub const AUC_STEP_MM: f64 = 5.0;
pub const AUC_POINTS: usize = 31;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    /// Absent when no sequence has two or more frames.
    pub mpjve_mm: Option<f64>,
    pub pck150: f64,
    pub auc: f64,
    pub frames: usize,
    pub per_frame_errors: Vec<f64>,
}

impl MetricReport {
    /// Aggregates over several `(prediction, ground truth)` sequences. Every
    /// frame weighs equally; velocity errors are pooled over the sequences
    /// long enough to have them.
    pub fn from_sequences(pairs: &[(&[Pose3D], &[Pose3D])]) -> Result<Self> {
        let mut per_frame_errors = Vec::new();
        let mut aligned_sum = 0.0;
        let mut joint_errors = Vec::new();
        let mut vel_sum = 0.0;
        let mut vel_frames = 0usize;
        for (pred, gt) in pairs {
            check_shapes(pred, gt)?;
            for (t, (p, g)) in pred.iter().zip(gt.iter()).enumerate() {
                let errs = joint_distances(p, g);
                per_frame_errors.push(mean(&errs));
                joint_errors.extend(errs);
                let aligned = align_similarity(p, g).map_err(|e| match e {
                    Error::DegenerateFrame(_) => Error::DegenerateFrame(t),
                    other => other,
                })?;
                aligned_sum += mean(&joint_distances(&aligned, g));
            }
            if pred.len() >= 2 {
                vel_sum += mpjve(pred, gt)? * (pred.len() - 1) as f64;
                vel_frames += pred.len() - 1;
            }
        }
        if per_frame_errors.is_empty() {
            return Err(Error::EmptyDataset("no frames to evaluate".into()));
        }
        let n = per_frame_errors.len() as f64;
        Ok(Self {
            mpjpe_mm: per_frame_errors.iter().sum::<f64>() / n,
            p_mpjpe_mm: aligned_sum / n,
            mpjve_mm: (vel_frames > 0).then(|| vel_sum / vel_frames as f64),
            pck150: fraction_within(&joint_errors, PCK_THRESHOLD_MM),
            auc: auc_from_errors(&joint_errors),
            frames: per_frame_errors.len(),
            per_frame_errors,
        })
    }
}

fn check_shapes(pred: &[Pose3D], gt: &[Pose3D]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted frames vs {} ground-truth frames", pred.len(), gt.len())));
    }
    for (t, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.num_joints() != g.num_joints() {
            return Err(Error::Shape(format!(
                "frame {t}: {} predicted joints vs {} ground-truth joints",
                p.num_joints(),
                g.num_joints()
            )));
        }
    }
    Ok(())
}

fn joint_distances(p: &Pose3D, g: &Pose3D) -> Vec<f64> {
    p.joints.iter().zip(&g.joints).map(|(a, b)| norm3(sub3(*a, *b))).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn all_distances(pred: &[Pose3D], gt: &[Pose3D]) -> Result<Vec<f64>> {
    check_shapes(pred, gt)?;
    Ok(pred.iter().zip(gt).flat_map(|(p, g)| joint_distances(p, g)).collect())
}

/// Mean Euclidean joint error over all frames and joints.
pub fn mpjpe(pred: &[Pose3D], gt: &[Pose3D]) -> Result<f64> {
    let d = all_distances(pred, gt)?;
    if d.is_empty() {
        return Err(Error::Shape("empty sequence".into()));
    }
    Ok(mean(&d))
}

/// Similarity transform `c * R * p + t` (no reflections) that best maps
/// `pred` onto `gt` in the least-squares sense, applied to `pred`.
pub fn align_similarity(pred: &Pose3D, gt: &Pose3D) -> Result<Pose3D> {
    let n = pred.num_joints() as f64;
    let to_v = |a: &[f64; 3]| Vector3::new(a[0], a[1], a[2]);
    let mu_p = pred.joints.iter().map(to_v).sum::<Vector3<f64>>() / n;
    let mu_g = gt.joints.iter().map(to_v).sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    let mut var_g = 0.0;
    for (p, g) in pred.joints.iter().zip(&gt.joints) {
        let dp = to_v(p) - mu_p;
        let dg = to_v(g) - mu_g;
        cov += dg * dp.transpose();
        var_p += dp.norm_squared();
        var_g += dg.norm_squared();
    }
    if var_g <= f64::MIN_POSITIVE {
        return Err(Error::DegenerateFrame(0));
    }
    if var_p <= f64::MIN_POSITIVE {
        // A collapsed prediction aligns best to the ground-truth centroid.
        return Ok(Pose3D::new(vec![[mu_g.x, mu_g.y, mu_g.z]; pred.num_joints()]));
    }
    cov /= n;
    var_p /= n;

    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rot = u * s * v_t;
    let trace_ds = svd.singular_values[0] + svd.singular_values[1] + s[(2, 2)] * svd.singular_values[2];
    let scale = trace_ds / var_p;
    let shift = mu_g - scale * rot * mu_p;

    Ok(Pose3D::new(
        pred.joints
            .iter()
            .map(|p| {
                let q = scale * rot * to_v(p) + shift;
                [q.x, q.y, q.z]
            })
            .collect(),
    ))
}

/// MPJPE after per-frame similarity alignment of the prediction.
pub fn p_mpjpe(pred: &[Pose3D], gt: &[Pose3D]) -> Result<f64> {
    check_shapes(pred, gt)?;
    if pred.is_empty() {
        return Err(Error::Shape("empty sequence".into()));
    }
    let mut total = 0.0;
    for (t, (p, g)) in pred.iter().zip(gt).enumerate() {
        let aligned = align_similarity(p, g).map_err(|_| Error::DegenerateFrame(t))?;
        total += mean(&joint_distances(&aligned, g));
    }
    Ok(total / pred.len() as f64)
}

fn velocities(seq: &[Pose3D]) -> Vec<Pose3D> {
    seq.windows(2)
        .map(|w| Pose3D::new(w[1].joints.iter().zip(&w[0].joints).map(|(a, b)| sub3(*a, *b)).collect()))
        .collect()
}

/// MPJPE between the first temporal differences of the two sequences.
pub fn mpjve(pred: &[Pose3D], gt: &[Pose3D]) -> Result<f64> {
    check_shapes(pred, gt)?;
    if pred.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: pred.len() });
    }
    mpjpe(&velocities(pred), &velocities(gt))
}

fn fraction_within(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e <= threshold).count() as f64 / errors.len() as f64
}

fn auc_from_errors(errors: &[f64]) -> f64 {
    (0..AUC_POINTS)
        .map(|i| fraction_within(errors, AUC_STEP_MM * i as f64))
        .sum::<f64>()
        / AUC_POINTS as f64
}

/// Fraction of (frame, joint) errors at or below `threshold_mm`.
pub fn pck(pred: &[Pose3D], gt: &[Pose3D], threshold_mm: f64) -> Result<f64> {
    if threshold_mm.is_nan() || threshold_mm < 0.0 {
        return Err(Error::Config(format!("PCK threshold must be >= 0, got {threshold_mm}")));
    }
    Ok(fraction_within(&all_distances(pred, gt)?, threshold_mm))
}

/// Mean PCK over the 31-point grid 0, 5, ..., 150 mm.
pub fn auc(pred: &[Pose3D], gt: &[Pose3D]) -> Result<f64> {
    Ok(auc_from_errors(&all_distances(pred, gt)?))
}
