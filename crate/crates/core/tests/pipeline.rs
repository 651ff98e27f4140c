use bonekin::config::{Composition, Config, ModelKind, Strategy};
use bonekin::metrics::MetricReport;
use bonekin::nn::Graph;
use bonekin::pipeline::gradcheck::{tiny_config, SuiteDims};
use bonekin::pipeline::{
    assemble, batch_losses, draw_batch, evaluate, predict_video, total_loss, train, Model, PreparedVideo,
    StreamingPredictor, TrainOptions, TrainState, MM_PER_UNIT,
};
use bonekin::sequence::PoseSequence;
use bonekin::skeleton::decompose;
use bonekin::synth::{generate_dataset, GeneratorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> Config {
    tiny_config(SuiteDims::Tiny, Composition::Analytic)
}

fn videos(cfg: &Config) -> Vec<PoseSequence> {
    generate_dataset(&GeneratorConfig::from_config(cfg).unwrap()).unwrap()
}

fn max_joint_diff(a: &bonekin::skeleton::Pose3D, b: &bonekin::skeleton::Pose3D) -> f64 {
    a.flat().iter().zip(b.flat()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn ground_truth_lengths_and_directions_reassemble_the_pose() {
    let cfg = tiny();
    let model = Model::new(&cfg).unwrap();
    for video in videos(&cfg) {
        for pose in &video.poses3d {
            let bones = decompose(&video.camera.pose_to_camera(pose), &model.topo).unwrap();
            let lengths: Vec<f64> = bones.lengths.iter().map(|l| l / MM_PER_UNIT).collect();
            let out = video.camera.pose_to_world(&assemble(&model, &lengths, &bones.flat_directions()).unwrap());
            let root = pose.joints[model.topo.root()];
            let rel: Vec<f64> = pose.joints.iter().flat_map(|p| [p[0] - root[0], p[1] - root[1], p[2] - root[2]]).collect();
            let err = out.flat().iter().zip(&rel).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{err}");
        }
    }
}

#[test]
fn bulk_and_streaming_inference_agree() {
    for strategy in [Strategy::CausalRandom, Strategy::Firstframe] {
        let cfg = Config { causal: true, strategy, ..tiny() };
        let model = Model::new(&cfg).unwrap();
        let video = &videos(&cfg)[0];
        let bulk = predict_video(&model, video, 3).unwrap();
        let mut stream = StreamingPredictor::new(&model, 3);
        for t in 0..video.frames() {
            let pose = stream.predict(video, t).unwrap();
            assert!(max_joint_diff(&pose, &bulk.poses[t]) < 1e-9, "{strategy:?} frame {t}");
        }
    }
}

#[test]
fn causal_prediction_ignores_future_frames() {
    let cfg = Config { causal: true, strategy: Strategy::CausalRandom, ..tiny() };
    let model = Model::new(&cfg).unwrap();
    let video = videos(&cfg).swap_remove(0);
    let t = 17;
    let mut changed = video.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for f in t + 1..changed.frames() {
        for (kp, v) in changed.keypoints2d[f].iter_mut().zip(&mut changed.visibility[f]) {
            kp[0] += rand::Rng::random_range(&mut rng, -0.5..0.5);
            kp[1] += rand::Rng::random_range(&mut rng, -0.5..0.5);
            *v = 1.0 - *v;
        }
    }
    let a = StreamingPredictor::new(&model, 0).predict(&video, t).unwrap();
    let b = StreamingPredictor::new(&model, 0).predict(&changed, t).unwrap();
    assert_eq!(a, b);
    let bulk_a = predict_video(&model, &video, 0).unwrap();
    let bulk_b = predict_video(&model, &changed, 0).unwrap();
    assert_eq!(bulk_a.poses[..=t], bulk_b.poses[..=t]);
    assert_ne!(bulk_a.poses[t + 1..], bulk_b.poses[t + 1..]);
}

#[test]
fn firstframe_lengths_freeze_after_the_budget() {
    let cfg = Config { causal: true, strategy: Strategy::Firstframe, ..tiny() };
    let model = Model::new(&cfg).unwrap();
    let video = &videos(&cfg)[1];
    let fused = predict_video(&model, video, 1).unwrap().fused_lengths;
    let m = cfg.frame_budget;
    for t in m..video.frames() {
        assert_eq!(fused[t], fused[m - 1], "frame {t}");
    }
}

#[test]
fn direct_model_predicts_root_relative_joints() {
    let cfg = Config { model: ModelKind::Direct, ..tiny() };
    let model = Model::new(&cfg).unwrap();
    let pred = predict_video(&model, &videos(&cfg)[0], 0).unwrap();
    assert!(pred.fused_lengths.is_empty());
    for pose in &pred.poses {
        assert_eq!(pose.joints[model.topo.root()], [0.0; 3]);
    }
}

#[test]
fn total_gradient_is_the_weighted_sum_of_term_gradients() {
    let cfg = Config { lambda_d: 0.3, lambda_l: 0.7, lambda_j: 1.9, lambda_js: 0.4, ..tiny() };
    let model = Model::new(&cfg).unwrap();
    let raw = videos(&cfg);
    let prepared: Vec<_> = raw.iter().map(|v| PreparedVideo::new(v, &model).unwrap()).collect();
    let (items, aug) =
        draw_batch(&model, &prepared, &mut ChaCha8Rng::seed_from_u64(1), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut g = Graph::new(&model.store);
    let terms = batch_losses(&model, &mut g, &raw, &prepared, &items, &aug, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let total = total_loss(&mut g, &terms, &cfg).unwrap();
    let grads = g.backward(total).unwrap();
    let mut weighted: Vec<(_, f64)> = terms.direction.iter().map(|&n| (n, cfg.lambda_d)).collect();
    weighted.push((terms.length.unwrap(), cfg.lambda_l));
    weighted.push((terms.joints.unwrap(), cfg.lambda_j));
    weighted.push((terms.shift.unwrap(), cfg.lambda_js));
    let parts: Vec<_> = weighted.iter().map(|&(n, w)| (g.backward(n).unwrap(), w)).collect();
    for id in model.store.ids().filter(|&id| model.store.entry(id).trainable) {
        let total_grad = grads.get(id).map(<[f64]>::to_vec).unwrap_or_default();
        let mut expected = vec![0.0; model.store.value(id).len()];
        for (grad, w) in &parts {
            if let Some(gr) = grad.get(id) {
                expected.iter_mut().zip(gr).for_each(|(e, v)| *e += w * v);
            }
        }
        if total_grad.is_empty() {
            assert!(expected.iter().all(|&v| v == 0.0));
            continue;
        }
        for (a, b) in total_grad.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{}: {a} vs {b}", model.store.entry(id).name);
        }
    }
}

#[test]
fn resuming_from_a_checkpoint_matches_uninterrupted_training() {
    let cfg = Config { epochs: 2, steps_per_epoch: 3, ..tiny() };
    let data = videos(&cfg);
    let (train_v, val_v) = bonekin::synth::split_by_actor(data, cfg.val_actors);

    let mut straight = Model::new(&cfg).unwrap();
    let mut state = TrainState::default();
    train(&mut straight, &mut state, &train_v, &val_v, &TrainOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Model::new(&Config { epochs: 1, ..cfg.clone() }).unwrap();
    let mut first_state = TrainState::default();
    let opts = TrainOptions { checkpoint: Some(dir.path().to_path_buf()), ..TrainOptions::default() };
    train(&mut first, &mut first_state, &train_v, &val_v, &opts).unwrap();
    let (mut resumed, mut resumed_state) = Model::load(dir.path()).unwrap();
    assert_eq!(resumed_state.epoch, 1);
    resumed.cfg.epochs = 2;
    train(&mut resumed, &mut resumed_state, &train_v, &val_v, &TrainOptions::default()).unwrap();
    assert_eq!(resumed.store, straight.store);
    assert_eq!(resumed_state.history, state.history);
}

#[test]
fn training_writes_one_log_line_per_epoch() {
    let cfg = Config { epochs: 2, steps_per_epoch: 2, ..tiny() };
    let (train_v, val_v) = bonekin::synth::split_by_actor(videos(&cfg), cfg.val_actors);
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let opts = TrainOptions { log: Some(log.clone()), validate: true, ..TrainOptions::default() };
    let mut model = Model::new(&cfg).unwrap();
    let mut state = TrainState::default();
    train(&mut model, &mut state, &train_v, &val_v, &opts).unwrap();
    let text = std::fs::read_to_string(log).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert!((lines[1]["lr"].as_f64().unwrap() - cfg.lr * cfg.lr_decay).abs() < 1e-18);
    assert!(lines[1]["val_mpjpe_mm"].as_f64().unwrap().is_finite());
    assert_eq!(state.best_val_mpjpe_mm, state.history.iter().filter_map(|h| h.val_mpjpe_mm).reduce(f64::min));
}

#[test]
fn single_frame_video_has_no_velocity_error() {
    let cfg = tiny();
    let model = Model::new(&cfg).unwrap();
    let mut video = videos(&cfg).swap_remove(0);
    video.poses3d.truncate(1);
    video.root_world.truncate(1);
    video.keypoints2d.truncate(1);
    video.visibility.truncate(1);
    let report: MetricReport = evaluate(&model, &[video]).unwrap();
    assert_eq!(report.frames, 1);
    assert_eq!(report.mpjve_mm, None);
    assert!(report.mpjpe_mm.is_finite());
}

#[test]
fn evaluation_does_not_depend_on_thread_count() {
    let cfg = tiny();
    let model = Model::new(&cfg).unwrap();
    let data = videos(&cfg);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| evaluate(&model, &data)).unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| evaluate(&model, &data)).unwrap();
    assert_eq!(one, four);
}
