//! Finite-difference audit of every graph kernel and of the full networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Composition, Config};
use crate::direction::batch_norm_params;
use crate::error::Result;
use crate::nn::{grad_check, GradCheckReport, input_grad_check, Graph, Init, Mode, NodeId, ParameterStore, Tensor};
use crate::synth::{generate_dataset, GeneratorConfig};

use super::model::Model;
use super::train::{batch_losses, draw_batch, PreparedVideo};

/// Tolerance for affine and convolution kernels.
pub const LINEAR_TOLERANCE: f64 = 1e-6;
/// Tolerance for every other kernel and the full networks.
pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteDims {
    Tiny,
    Small,
}

impl SuiteDims {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tiny" => Some(Self::Tiny),
            "small" => Some(Self::Small),
            _ => None,
        }
    }

    fn channels(self) -> usize {
        match self {
            Self::Tiny => 6,
            Self::Small => 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Parameter element with the largest mismatch, with analytic and
    /// numeric gradient.
    pub worst: Option<String>,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn describe(report: &GradCheckReport) -> Option<String> {
    let (a, n) = report.worst_values;
    report.worst.as_ref().map(|(name, i)| format!("{name}[{i}] analytic {a:.6e} numeric {n:.6e}"))
}

fn random(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn squared_to_pattern(g: &mut Graph<'_>, y: NodeId) -> Result<NodeId> {
    let target: Vec<f64> = (0..g.value(y).len()).map(|i| 0.3 * (1.7 * i as f64).sin()).collect();
    g.squared_error(y, &target)
}

/// Checks `op` with respect to its input and every parameter in `store`.
fn kernel(name: &str, tolerance: f64, store: &mut ParameterStore, shape: Vec<usize>, op: &dyn Fn(&mut Graph<'_>, NodeId) -> Result<NodeId>) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let x = random(shape.iter().product(), &mut rng);
    let worst_input = input_grad_check(store, &x, EPS, |g, xv| {
        let xi = g.input_var(Tensor::new(shape.clone(), xv.to_vec())?);
        let y = op(g, xi)?;
        Ok((xi, squared_to_pattern(g, y)?))
    })?;
    let mut entry = SuiteEntry { name: name.into(), max_rel_error: worst_input, tolerance, checked: x.len(), worst: Some("input".into()) };
    if store.ids().any(|id| store.entry(id).trainable) {
        let report = grad_check(store, EPS, |g| {
            let xi = g.input(Tensor::new(shape.clone(), x.clone())?);
            let y = op(g, xi)?;
            squared_to_pattern(g, y)
        })?;
        if report.max_rel_error > entry.max_rel_error {
            entry.max_rel_error = report.max_rel_error;
            entry.worst = describe(&report);
        }
        entry.checked += report.checked;
    }
    Ok(entry)
}

fn kernels(dims: SuiteDims) -> Result<Vec<SuiteEntry>> {
    let c = dims.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();

    let mut s = ParameterStore::new();
    let w = s.add("w", &[c, 5], Init::HeUniform, &mut rng)?;
    let b = s.add("b", &[c], Init::HeUniform, &mut rng)?;
    out.push(kernel("affine", LINEAR_TOLERANCE, &mut s, vec![4, 5], &|g, x| g.affine(x, w, Some(b)))?);

    let mut s = ParameterStore::new();
    let w = s.add("w", &[c, 4, 3], Init::HeUniform, &mut rng)?;
    let b = s.add("b", &[c], Init::HeUniform, &mut rng)?;
    out.push(kernel("conv1d", LINEAR_TOLERANCE, &mut s, vec![2, 9, 4], &|g, x| g.conv1d(x, w, Some(b), 3))?);

    let mut s = ParameterStore::new();
    let bn = batch_norm_params(&mut s, "bn", c, &mut rng)?;
    for id in [bn.gamma, bn.beta] {
        let v = random(c, &mut rng);
        s.value_mut(id).iter_mut().zip(v).for_each(|(p, r)| *p += 0.5 * r);
    }
    out.push(kernel("batch_norm", TOLERANCE, &mut s, vec![6, c], &|g, x| g.batch_norm(x, &bn, Mode::Train))?);
    out.push(kernel("batch_norm_eval", TOLERANCE, &mut s, vec![3, c], &|g, x| g.batch_norm(x, &bn, Mode::Eval))?);

    let mut s = ParameterStore::new();
    out.push(kernel("relu", TOLERANCE, &mut s, vec![5, c], &|g, x| Ok(g.relu(x)))?);
    out.push(kernel("dropout", TOLERANCE, &mut s, vec![5, c], &|g, x| {
        g.dropout(x, 0.25, Mode::Train, &mut ChaCha8Rng::seed_from_u64(5))
    })?);
    let other = random(5 * c, &mut rng);
    out.push(kernel("mul_add_sub_scale", TOLERANCE, &mut s, vec![5, c], &|g, x| {
        let o = g.input(Tensor::new(vec![5, c], other.clone())?);
        let m = g.mul(x, o)?;
        let a = g.add(m, x)?;
        let d = g.sub(a, o)?;
        Ok(g.scale(d, 1.5))
    })?);
    out.push(kernel("concat", TOLERANCE, &mut s, vec![2, 3, c], &|g, x| {
        let sq = g.mul(x, x)?;
        g.concat(x, sq)
    })?);
    out.push(kernel("center_slice", TOLERANCE, &mut s, vec![2, 9, c], &|g, x| g.center_slice(x, 3, 3))?);
    out.push(kernel("repeat_time", TOLERANCE, &mut s, vec![2, c], &|g, x| g.repeat_time(x, 3))?);
    out.push(kernel("reshape", TOLERANCE, &mut s, vec![2, 1, c], &|g, x| g.reshape(x, vec![2, c]))?);
    let groups = vec![0..3, 3..7];
    out.push(kernel("softmax_groups", TOLERANCE, &mut s, vec![7, 4], &|g, x| g.softmax_groups(x, &groups, 2.0))?);
    let values = random(7 * 4, &mut rng);
    out.push(kernel("group_weighted_sum", TOLERANCE, &mut s, vec![7, 4], &|g, x| {
        let v = g.input(Tensor::new(vec![7, 4], values.clone())?);
        let a = g.softmax_groups(x, &groups, 1.0)?;
        let p = g.group_weighted_sum(a, v, &groups)?;
        let q = g.group_weighted_sum(a, x, &groups)?;
        g.add(p, q)
    })?);
    out.push(kernel("attention_pool", TOLERANCE, &mut s, vec![7, 4], &|g, x| {
        let v = g.input(Tensor::new(vec![7, 4], values.clone())?);
        let p = g.attention_pool(x, v, &groups, 10.0)?;
        let q = g.attention_pool(v, x, &groups, 3.0)?;
        g.add(p, q)
    })?);
    out.push(kernel("normalize3", TOLERANCE, &mut s, vec![3, 6], &|g, x| g.normalize3(x))?);
    let matrix = random(4 * 6, &mut rng);
    out.push(kernel("fixed_linear", TOLERANCE, &mut s, vec![3, 6], &|g, x| g.fixed_linear(x, matrix.clone(), 4))?);
    let target = random(3 * 6, &mut rng);
    out.push(kernel("euclidean_error", TOLERANCE, &mut s, vec![3, 6], &|g, x| {
        let a = g.euclidean_error(x, &target, false)?;
        let b = g.euclidean_error(x, &target, true)?;
        g.weighted_sum(&[(a, 0.7), (b, 1.3)])
    })?);
    out.push(kernel("squared_error", TOLERANCE, &mut s, vec![3, 6], &|g, x| {
        let a = g.squared_error(x, &target)?;
        g.weighted_sum(&[(a, 2.0)])
    })?);
    let stopped = random(3 * 6, &mut rng);
    out.push(kernel("stop_grad", TOLERANCE, &mut s, vec![3, 6], &|g, x| {
        let o = g.input_var(Tensor::new(vec![3, 6], stopped.clone())?);
        let frozen = g.stop_grad(o);
        g.mul(x, frozen)
    })?);
    Ok(out)
}

/// Tiny training configuration shared by the full-network checks.
pub fn tiny_config(dims: SuiteDims, composition: Composition) -> Config {
    let c = dims.channels();
    Config {
        actors: 2,
        val_actors: 1,
        videos_per_actor: 1,
        frames_per_video: 30,
        d: 9,
        channels: c,
        length_channels: c,
        length_blocks: 1,
        l: 4,
        frame_budget: 4,
        batch: 4,
        aug_batch: 2,
        composition,
        ..Config::default()
    }
}

/// Which scalar of the batch loss a full-network check differentiates.
#[derive(Debug, Clone, Copy)]
enum Term {
    Direction(usize),
    Length,
    Joints,
    Shift,
    JointHead,
}

/// One loss term of a fixed batch against every parameter it reaches. The
/// terms are checked one at a time: each sees its inputs from the other
/// branch as constants, which is exactly what its gradient stops encode.
fn full_model(name: &str, cfg: &Config, term: Term) -> Result<SuiteEntry> {
    let model = Model::new(cfg)?;
    let videos = generate_dataset(&GeneratorConfig::from_config(cfg)?)?;
    let prepared = videos.iter().map(|v| PreparedVideo::new(v, &model)).collect::<Result<Vec<_>>>()?;
    let (items, aug) = draw_batch(&model, &prepared, &mut ChaCha8Rng::seed_from_u64(3), &mut ChaCha8Rng::seed_from_u64(5))?;
    let mut store = model.store.clone();
    let report = grad_check(&mut store, EPS, |g| {
        let terms = batch_losses(&model, g, &videos, &prepared, &items, &aug, &mut ChaCha8Rng::seed_from_u64(4))?;
        let node = match term {
            Term::Direction(k) => Some(terms.direction[k]),
            Term::Length => terms.length,
            Term::Joints => terms.joints,
            Term::Shift => terms.shift,
            Term::JointHead => terms.joint_head,
        };
        Ok(node.expect("term present for this model"))
    })?;
    Ok(SuiteEntry { name: name.into(), max_rel_error: report.max_rel_error, tolerance: TOLERANCE, checked: report.checked, worst: describe(&report) })
}

/// Every kernel check followed by each loss term of the full model, in
/// analytic and learned-heads composition.
pub fn gradient_suite(dims: SuiteDims) -> Result<Vec<SuiteEntry>> {
    let mut out = kernels(dims)?;
    let analytic = tiny_config(dims, Composition::Analytic);
    for k in 0..analytic.subnets {
        out.push(full_model(&format!("direction net L_D[{k}]"), &analytic, Term::Direction(k))?);
    }
    out.push(full_model("direction net L_JS", &analytic, Term::Shift)?);
    out.push(full_model("length net L_J", &analytic, Term::Joints)?);
    out.push(full_model("length net L_L", &analytic, Term::Length)?);
    let heads = tiny_config(dims, Composition::Heads);
    out.push(full_model("shift head L_JS", &heads, Term::Shift)?);
    out.push(full_model("joint head", &heads, Term::JointHead)?);
    Ok(out)
}
