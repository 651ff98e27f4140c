//! Synthetic motion capture: actors with constant bone lengths, smooth
//! bone-direction trajectories, a pool of cameras, and detector-like 2D
//! noise correlated with simulated visibility scores.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::{project, CameraModel};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::sequence::PoseSequence;
use crate::skeleton::{compose, BoneRepresentation, SkeletonPreset, Vec3};

/// Height of the root joint above the floor, mm.
const ROOT_HEIGHT_MM: f64 = 950.0;
/// Peak horizontal wander of the root, mm.
const ROOT_DRIFT_MM: f64 = 400.0;
/// Focal length for a 1000-pixel-wide image.
const FOCAL_PER_1000PX: f64 = 1145.0;

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub preset: SkeletonPreset,
    pub actors: usize,
    pub videos_per_actor: usize,
    pub frames: usize,
    pub length_jitter: f64,
    pub min_sinusoids: usize,
    pub max_sinusoids: usize,
    pub min_freq: f64,
    pub max_freq: f64,
    pub noise_sigma: f64,
    pub occlusion_prob: f64,
    pub occlusion_noise_scale: f64,
    pub cameras: usize,
    pub width: f64,
    pub height: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(Self {
            preset: SkeletonPreset::by_name(&cfg.skeleton)?,
            actors: cfg.actors,
            videos_per_actor: cfg.videos_per_actor,
            frames: cfg.frames_per_video,
            length_jitter: cfg.length_jitter,
            min_sinusoids: cfg.min_sinusoids,
            max_sinusoids: cfg.max_sinusoids,
            min_freq: cfg.min_freq,
            max_freq: cfg.max_freq,
            noise_sigma: cfg.noise_sigma,
            occlusion_prob: cfg.occlusion_prob,
            occlusion_noise_scale: cfg.occlusion_noise_scale,
            cameras: cfg.cameras,
            width: cfg.image_width,
            height: cfg.image_height,
            seed: cfg.data_seed,
        })
    }
}

/// Independent generator stream for `(seed, a, b)`.
pub fn substream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((a << 32) ^ b);
    rng
}

pub fn actor_id(index: usize) -> String {
    format!("A{index}")
}

/// Per-actor bone lengths: base lengths scaled by `1 + u`, `u` uniform in
/// `[-jitter, jitter]`, with mirrored bones sharing `u`.
pub fn generate_actor(preset: &SkeletonPreset, jitter: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n = preset.base_lengths.len();
    let mut u: Vec<f64> = vec![0.0; n];
    for b in 0..n {
        u[b] = match preset.mirror[b] {
            Some(m) if m < b => u[m],
            _ if jitter == 0.0 => 0.0,
            _ => rng.random_range(-jitter..=jitter),
        };
    }
    preset.base_lengths.iter().zip(&u).map(|(l, u)| l * (1.0 + u)).collect()
}

/// Cameras spread around the capture volume, all looking at the root.
pub fn camera_pool(n: usize, width: f64, height: f64, rng: &mut impl Rng) -> Vec<CameraModel> {
    (0..n)
        .map(|k| {
            let angle = TAU * k as f64 / n as f64 + rng.random_range(-0.3..0.3);
            let dist = rng.random_range(4500.0..5500.0);
            let h = rng.random_range(1200.0..1800.0);
            let focal = FOCAL_PER_1000PX * width / 1000.0;
            CameraModel::look_at([dist * angle.cos(), dist * angle.sin(), h], [0.0, 0.0, ROOT_HEIGHT_MM], focal, width, height)
        })
        .collect()
}

/// Sum of sinusoids with unit peak amplitude.
#[derive(Debug, Clone)]
struct Oscillator {
    terms: Vec<(f64, f64, f64)>,
}

impl Oscillator {
    fn new(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let n = rng.random_range(cfg.min_sinusoids..=cfg.max_sinusoids);
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let terms = weights
            .into_iter()
            .map(|w| (w / total, rng.random_range(cfg.min_freq..=cfg.max_freq), rng.random_range(0.0..TAU)))
            .collect();
        Self { terms }
    }

    fn at(&self, t: f64) -> f64 {
        self.terms.iter().map(|(a, f, p)| a * (TAU * f * t + p).sin()).sum()
    }
}

fn rotate(v: Vec3, axis: Vec3, angle: f64) -> Vec3 {
    // Rodrigues' formula for a unit axis.
    let (s, c) = angle.sin_cos();
    let d = axis[0] * v[0] + axis[1] * v[1] + axis[2] * v[2];
    let x = [axis[1] * v[2] - axis[2] * v[1], axis[2] * v[0] - axis[0] * v[2], axis[0] * v[1] - axis[1] * v[0]];
    [
        v[0] * c + x[0] * s + axis[0] * d * (1.0 - c),
        v[1] * c + x[1] * s + axis[1] * d * (1.0 - c),
        v[2] * c + x[2] * s + axis[2] * d * (1.0 - c),
    ]
}

fn unit(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Two unit axes orthogonal to `d` and to each other.
fn perpendicular_axes(d: Vec3) -> (Vec3, Vec3) {
    let helper = if d[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let u = unit([d[1] * helper[2] - d[2] * helper[1], d[2] * helper[0] - d[0] * helper[2], d[0] * helper[1] - d[1] * helper[0]]);
    let v = [d[1] * u[2] - d[2] * u[1], d[2] * u[0] - d[0] * u[2], d[0] * u[1] - d[1] * u[0]];
    (u, v)
}

/// Ground-truth motion only: root-relative poses and root trajectory.
pub fn generate_motion(
    preset: &SkeletonPreset,
    lengths: &[f64],
    cfg: &GeneratorConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<crate::skeleton::Pose3D>, Vec<Vec3>)> {
    let nb = preset.topology.num_bones();
    let swings: Vec<(Oscillator, Oscillator)> = (0..nb).map(|_| (Oscillator::new(cfg, rng), Oscillator::new(cfg, rng))).collect();
    let heading = Oscillator::new(cfg, rng);
    let heading0 = rng.random_range(0.0..TAU);
    let drift = [Oscillator::new(cfg, rng), Oscillator::new(cfg, rng)];
    let axes: Vec<(Vec3, Vec3)> = preset.rest_directions.iter().map(|&d| perpendicular_axes(unit(d))).collect();
    let mut poses = Vec::with_capacity(cfg.frames);
    let mut roots = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let t = f as f64;
        let yaw = heading0 + 0.8 * heading.at(t);
        let directions = (0..nb)
            .map(|b| {
                let amp = preset.motion_amplitude[b];
                let rest = unit(preset.rest_directions[b]);
                let (u, v) = axes[b];
                let d = rotate(rest, u, amp * swings[b].0.at(t));
                let d = rotate(d, v, amp * swings[b].1.at(t));
                unit(rotate(d, [0.0, 0.0, 1.0], yaw))
            })
            .collect();
        let rep = BoneRepresentation { lengths: lengths.to_vec(), directions };
        poses.push(compose(&rep, &preset.topology)?);
        roots.push([ROOT_DRIFT_MM * drift[0].at(t), ROOT_DRIFT_MM * drift[1].at(t), ROOT_HEIGHT_MM]);
    }
    Ok((poses, roots))
}

/// One video of an actor seen by `camera`.
pub fn generate_video(
    preset: &SkeletonPreset,
    lengths: &[f64],
    cfg: &GeneratorConfig,
    camera: &CameraModel,
    actor_id: &str,
    rng: &mut impl Rng,
) -> Result<PoseSequence> {
    let (poses3d, root_world) = generate_motion(preset, lengths, cfg, rng)?;
    let j = preset.topology.num_joints();
    let mut keypoints2d = Vec::with_capacity(cfg.frames);
    let mut visibility = Vec::with_capacity(cfg.frames);
    let unit_normal = Normal::new(0.0, 1.0).expect("valid normal");
    for (pose, root) in poses3d.iter().zip(&root_world) {
        let clean = project(camera, pose, *root)?;
        let mut kp = Vec::with_capacity(j);
        let mut vis = Vec::with_capacity(j);
        for p in clean {
            let occluded = rng.random::<f64>() < cfg.occlusion_prob;
            let (sigma, v) = if occluded {
                (cfg.noise_sigma * cfg.occlusion_noise_scale, rng.random_range(0.0..=0.3))
            } else {
                (cfg.noise_sigma, rng.random_range(0.7..=1.0))
            };
            let nx: f64 = unit_normal.sample(rng);
            let ny: f64 = unit_normal.sample(rng);
            kp.push([p[0] + sigma * nx, p[1] + sigma * ny]);
            vis.push(v);
        }
        keypoints2d.push(kp);
        visibility.push(vis);
    }
    Ok(PoseSequence { actor_id: actor_id.to_string(), poses3d, root_world, keypoints2d, visibility, camera: camera.clone() })
}

/// Every video of every actor, in actor-major order. Actor `a` draws its
/// lengths from stream `(seed, a, 0)`, its video `v` from `(seed, a, v + 1)`.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<PoseSequence>> {
    if cfg.frames == 0 || cfg.actors == 0 || cfg.videos_per_actor == 0 {
        return Err(Error::Config("generator needs at least one actor, video and frame".into()));
    }
    let cameras = camera_pool(cfg.cameras, cfg.width, cfg.height, &mut substream(cfg.seed, u32::MAX as u64, 0));
    let mut videos = Vec::with_capacity(cfg.actors * cfg.videos_per_actor);
    for a in 0..cfg.actors {
        let lengths = generate_actor(&cfg.preset, cfg.length_jitter, &mut substream(cfg.seed, a as u64, 0));
        for v in 0..cfg.videos_per_actor {
            let mut rng = substream(cfg.seed, a as u64, v as u64 + 1);
            let camera = &cameras[rng.random_range(0..cameras.len())];
            videos.push(generate_video(&cfg.preset, &lengths, cfg, camera, &actor_id(a), &mut rng)?);
        }
    }
    Ok(videos)
}

/// Splits videos into training and validation sets; the last `val_actors`
/// actors (by first appearance) are held out.
pub fn split_by_actor(videos: Vec<PoseSequence>, val_actors: usize) -> (Vec<PoseSequence>, Vec<PoseSequence>) {
    let mut actors: Vec<String> = Vec::new();
    for v in &videos {
        if !actors.contains(&v.actor_id) {
            actors.push(v.actor_id.clone());
        }
    }
    let held: Vec<String> = actors.iter().rev().take(val_actors).cloned().collect();
    videos.into_iter().partition(|v| !held.contains(&v.actor_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::decompose;

    fn small() -> GeneratorConfig {
        let mut c = GeneratorConfig::from_config(&Config::default()).unwrap();
        c.actors = 2;
        c.videos_per_actor = 1;
        c.frames = 60;
        c
    }

    #[test]
    fn actor_lengths() {
        let p = SkeletonPreset::h36m17();
        assert_eq!(generate_actor(&p, 0.0, &mut substream(1, 0, 0)), p.base_lengths);
        let a = generate_actor(&p, 0.1, &mut substream(1, 0, 0));
        let b = generate_actor(&p, 0.1, &mut substream(1, 1, 0));
        assert_ne!(a, b);
        for l in [&a, &b] {
            for (x, y) in p.mirror.iter().enumerate() {
                if let Some(y) = y {
                    assert_eq!(l[x], l[*y]);
                }
            }
            for (l, base) in l.iter().zip(&p.base_lengths) {
                assert!((l / base - 1.0).abs() <= 0.1 + 1e-12);
            }
        }
    }

    #[test]
    fn lengths_constant_per_video() {
        let cfg = small();
        for v in generate_dataset(&cfg).unwrap() {
            v.validate().unwrap();
            let first = decompose(&v.poses3d[0], &cfg.preset.topology).unwrap().lengths;
            for p in &v.poses3d {
                let l = decompose(p, &cfg.preset.topology).unwrap().lengths;
                for (a, b) in l.iter().zip(&first) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn clean_limit() {
        let mut cfg = small();
        cfg.noise_sigma = 0.0;
        cfg.occlusion_prob = 0.0;
        let v = &generate_dataset(&cfg).unwrap()[0];
        for f in 0..v.frames() {
            let exact = project(&v.camera, &v.poses3d[f], v.root_world[f]).unwrap();
            assert_eq!(v.keypoints2d[f], exact);
            assert!(v.visibility[f].iter().all(|&s| s >= 0.7));
        }
    }

    #[test]
    fn deterministic() {
        let cfg = small();
        assert_eq!(generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
    }

    #[test]
    fn motion_is_smooth() {
        let mut cfg = small();
        cfg.frames = 400;
        cfg.actors = 3;
        for v in generate_dataset(&cfg).unwrap() {
            for (p, r) in v.poses3d.windows(2).zip(v.root_world.windows(2)) {
                for (a, b) in p[0].joints.iter().zip(&p[1].joints) {
                    let step: f64 = (0..3).map(|i| (b[i] + r[1][i] - a[i] - r[0][i]).powi(2)).sum::<f64>().sqrt();
                    assert!(step < 50.0, "per-frame displacement {step} mm");
                }
            }
            let shifted = crate::metrics::mpjve(&v.poses3d[1..], &v.poses3d[..v.frames() - 1]).unwrap();
            assert!(shifted < 50.0, "{shifted}");
        }
    }

    #[test]
    fn occluded_keypoints_are_noisier() {
        let mut cfg = small();
        cfg.frames = 200;
        cfg.occlusion_prob = 0.2;
        let (mut occluded, mut visible) = ((0.0, 0usize), (0.0, 0usize));
        for v in generate_dataset(&cfg).unwrap() {
            for f in 0..v.frames() {
                let exact = project(&v.camera, &v.poses3d[f], v.root_world[f]).unwrap();
                for (k, e) in exact.iter().enumerate() {
                    let err = ((v.keypoints2d[f][k][0] - e[0]).powi(2) + (v.keypoints2d[f][k][1] - e[1]).powi(2)).sqrt();
                    let bucket = if v.visibility[f][k] < 0.5 { &mut occluded } else { &mut visible };
                    bucket.0 += err;
                    bucket.1 += 1;
                }
            }
        }
        assert!(occluded.1 > 0 && visible.1 > 0);
        assert!(occluded.0 / occluded.1 as f64 > visible.0 / visible.1 as f64);
    }

    #[test]
    fn split_holds_out_last_actors() {
        let mut cfg = small();
        cfg.actors = 3;
        let (train, val) = split_by_actor(generate_dataset(&cfg).unwrap(), 1);
        assert!(train.iter().all(|v| v.actor_id != "A2"));
        assert!(val.iter().all(|v| v.actor_id == "A2") && !val.is_empty());
    }
}
