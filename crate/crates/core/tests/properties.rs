use bonekin::config::Strategy as Sampling;
use bonekin::length::{fuse_values, sample_frames};
use bonekin::metrics::{align_similarity, mpjpe, p_mpjpe, pck};
use bonekin::nn::attention_pool_values;
use bonekin::skeleton::{compose, decompose, pose_shifts_flat, rescale_pose, BoneRepresentation, Pose3D, SkeletonPreset, Vec3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit() -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-1.0..1.0f64)
        .prop_filter("away from zero", |v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() > 0.1)
        .prop_map(|v| {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        })
}

fn bones() -> impl Strategy<Value = BoneRepresentation> {
    let nb = SkeletonPreset::h36m17().topology.num_bones();
    (prop::collection::vec(20.0..500.0f64, nb), prop::collection::vec(unit(), nb))
        .prop_map(|(lengths, directions)| BoneRepresentation { lengths, directions })
}

fn poses(frames: usize) -> impl Strategy<Value = Vec<Pose3D>> {
    prop::collection::vec(prop::collection::vec(prop::array::uniform3(-900.0..900.0f64), 17), frames)
        .prop_map(|v| v.into_iter().map(Pose3D::new).collect())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn decompose_inverts_compose(rep in bones()) {
        let topo = SkeletonPreset::h36m17().topology;
        let pose = compose(&rep, &topo).unwrap();
        let back = decompose(&pose, &topo).unwrap();
        prop_assert!(max_diff(&back.lengths, &rep.lengths) < 1e-9);
        prop_assert!(max_diff(&back.flat_directions(), &rep.flat_directions()) < 1e-12);
        let again = compose(&back, &topo).unwrap();
        prop_assert!(max_diff(&again.flat(), &pose.flat()) < 1e-9);
    }

    #[test]
    fn rescaling_keeps_directions(rep in bones(), scale in prop::collection::vec(0.5..2.0f64, 16)) {
        let topo = SkeletonPreset::h36m17().topology;
        let pose = compose(&rep, &topo).unwrap();
        let lengths: Vec<f64> = rep.lengths.iter().zip(&scale).map(|(l, s)| l * s).collect();
        let out = decompose(&rescale_pose(&pose, &lengths, &topo).unwrap(), &topo).unwrap();
        prop_assert!(max_diff(&out.flat_directions(), &rep.flat_directions()) < 1e-9);
        prop_assert!(max_diff(&out.lengths, &lengths) < 1e-9);
    }

    #[test]
    fn shifts_follow_bone_paths(rep in bones()) {
        let topo = SkeletonPreset::h36m17().topology;
        let pose = compose(&rep, &topo).unwrap();
        let shifts = pose_shifts_flat(&pose, &topo);
        for (p, &(a, b)) in topo.nonadjacent_pairs().iter().enumerate() {
            let coef = topo.shift_coefficients(a, b);
            for x in 0..3 {
                let via_bones: f64 = coef.iter().enumerate().map(|(k, c)| c * rep.lengths[k] * rep.directions[k][x]).sum();
                prop_assert!((via_bones - shifts[3 * p + x]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_weights_are_a_distribution(
        logits in prop::collection::vec(-5.0..5.0f64, 4 * 6),
        lengths in prop::collection::vec(0.05..0.6f64, 4 * 6),
        gamma in 0.0..20.0f64,
    ) {
        let (fused, weights) = attention_pool_values(&logits, &lengths, 4, &[0..6], gamma);
        for c in 0..4 {
            let col: Vec<f64> = (0..6).map(|r| weights[r * 4 + c]).collect();
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(col.iter().all(|&w| w > 0.0));
            let vals: Vec<f64> = (0..6).map(|r| lengths[r * 4 + c]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(fused[c] >= lo - 1e-15 && fused[c] <= hi + 1e-15);
        }
    }

    #[test]
    fn fused_lengths_ignore_frame_order_and_logit_offsets(
        logits in prop::collection::vec(-5.0..5.0f64, 3 * 8),
        lengths in prop::collection::vec(0.05..0.6f64, 3 * 8),
        offset in prop::collection::vec(-50.0..50.0f64, 3),
        seed in any::<u64>(),
    ) {
        let base = fuse_values(&logits, &lengths, 3, 10.0);
        let mut order: Vec<usize> = (0..8).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let permute = |v: &[f64]| order.iter().flat_map(|&r| v[r * 3..r * 3 + 3].to_vec()).collect::<Vec<f64>>();
        let shuffled = fuse_values(&permute(&logits), &permute(&lengths), 3, 10.0);
        prop_assert!(max_diff(&base, &shuffled) < 1e-12);
        let shifted: Vec<f64> = logits.iter().enumerate().map(|(i, v)| v + offset[i % 3] / 10.0).collect();
        prop_assert!(max_diff(&base, &fuse_values(&shifted, &lengths, 3, 10.0)) < 1e-12);
    }

    #[test]
    fn sampled_frames_respect_the_strategy(frames in 1usize..400, t_frac in 0.0..1.0f64, l in 1usize..60, budget in 1usize..60, seed in any::<u64>()) {
        let t = ((frames as f64 * t_frac) as usize).min(frames - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for strategy in [Sampling::Random, Sampling::CausalRandom, Sampling::Firstframe, Sampling::Consecutive] {
            let idx = sample_frames(frames, t, strategy, l, budget, &mut rng).unwrap();
            prop_assert!(!idx.is_empty());
            prop_assert!(idx.iter().all(|&f| f < frames));
            if strategy.is_causal() {
                prop_assert!(idx.iter().all(|&f| f <= t));
            }
            match strategy {
                Sampling::Random | Sampling::CausalRandom => prop_assert_eq!(idx.len(), l),
                _ => prop_assert_eq!(idx.len(), budget.min(t + 1)),
            }
        }
    }

    #[test]
    fn aligned_error_ignores_similarity_transforms(
        gt in poses(3),
        axis in unit(),
        angle in -3.1..3.1f64,
        scale in 0.2..5.0f64,
        shift in prop::array::uniform3(-2000.0..2000.0f64),
    ) {
        let (s, c) = angle.sin_cos();
        let [x, y, z] = axis;
        let r = [
            [c + x * x * (1.0 - c), x * y * (1.0 - c) - z * s, x * z * (1.0 - c) + y * s],
            [y * x * (1.0 - c) + z * s, c + y * y * (1.0 - c), y * z * (1.0 - c) - x * s],
            [z * x * (1.0 - c) - y * s, z * y * (1.0 - c) + x * s, c + z * z * (1.0 - c)],
        ];
        let moved: Vec<Pose3D> = gt
            .iter()
            .map(|p| {
                Pose3D::new(
                    p.joints
                        .iter()
                        .map(|v| {
                            let mut o = [0.0; 3];
                            for i in 0..3 {
                                o[i] = scale * (r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2]) + shift[i];
                            }
                            o
                        })
                        .collect(),
                )
            })
            .collect();
        prop_assert!(p_mpjpe(&moved, &gt).unwrap() < 1e-6);
        let aligned = align_similarity(&moved[0], &gt[0]).unwrap();
        prop_assert!(max_diff(&aligned.flat(), &gt[0].flat()) < 1e-6);
    }

    #[test]
    fn error_metrics_are_bounded(pred in poses(4), gt in poses(4)) {
        let e = mpjpe(&pred, &gt).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert!((e - mpjpe(&gt, &pred).unwrap()).abs() < 1e-9);
        prop_assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let p = pck(&pred, &gt, 150.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(pck(&gt, &gt, 150.0).unwrap(), 1.0);
    }
}
