//! Tape of differentiable kernels with explicit backward rules.
//!
//! Nodes are appended in execution order, so the tape is topologically
//! sorted by construction and `backward` simply walks it in reverse.
//! `stop_grad` nodes cut the backward flow: nothing upstream of one
//! receives gradient through it.

use std::ops::Range;

use rand::Rng;

use super::params::{ParamId, ParameterStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter handles of one batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    StopGrad,
    Reshape(NodeId),
    Affine { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv1d { x: NodeId, w: NodeId, b: Option<NodeId>, width: usize, stride: usize, cols: Vec<f64> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu(NodeId),
    Dropout { x: NodeId, mask: Vec<f64> },
    Mul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat(NodeId, NodeId),
    CenterSlice { x: NodeId, width: usize, stride: usize },
    RepeatTime { x: NodeId, times: usize },
    SoftmaxGroups { x: NodeId, groups: Vec<Range<usize>>, gamma: f64 },
    GroupWeightedSum { weights: NodeId, values: NodeId, groups: Vec<Range<usize>> },
    AttentionPool { logits: NodeId, values: NodeId, groups: Vec<Range<usize>>, gamma: f64, weights: Vec<f64> },
    Normalize3 { x: NodeId, norms: Vec<f64> },
    FixedLinear { x: NodeId, matrix: Vec<f64>, out_dim: usize },
    SquaredError { x: NodeId, target: Vec<f64> },
    EuclideanError { x: NodeId, target: Vec<f64>, per_group_mean: bool },
    WeightedSum(Vec<(NodeId, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether gradient flows from this node into trainable parameters.
    flows: bool,
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.index()].as_deref()
    }

    /// True if some unblocked path connects the loss to this parameter.
    pub fn reached(&self, id: ParamId) -> bool {
        self.grads[id.index()].is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}

pub struct Graph<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    stat_updates: Vec<(ParamId, Vec<f64>)>,
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self { store, nodes: Vec::new(), stat_updates: Vec::new() }
    }

    pub fn store(&self) -> &ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, flows: bool) -> NodeId {
        self.nodes.push(Node { value, op, flows });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        match self.nodes[id.0].op {
            Op::Param(p) => self.store.value(p),
            _ => self.nodes[id.0].value.data(),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        match self.nodes[id.0].op {
            Op::Param(p) => &self.store.entry(p).shape,
            _ => self.nodes[id.0].value.shape(),
        }
    }

    fn cols(&self, id: NodeId) -> usize {
        *self.shape(id).last().unwrap_or(&1)
    }

    fn rows(&self, id: NodeId) -> usize {
        let c = self.cols(id);
        if c == 0 {
            0
        } else {
            self.value(id).len() / c
        }
    }

    fn flows(&self, id: NodeId) -> bool {
        self.nodes[id.0].flows
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec()).expect("consistent node")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[0]
    }

    /// Batch-norm running statistics computed by training-mode passes.
    pub fn stat_updates(&self) -> &[(ParamId, Vec<f64>)] {
        &self.stat_updates
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient can be read back with `input_gradient`.
    pub fn input_var(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let flows = self.store.entry(id).trainable;
        self.push(Tensor::default(), Op::Param(id), flows)
    }

    /// Identity in the forward pass; blocks every gradient in the backward pass.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let t = self.tensor(x);
        self.push(t, Op::StopGrad, false)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = Tensor::new(shape, self.value(x).to_vec())?;
        let flows = self.flows(x);
        Ok(self.push(t, Op::Reshape(x), flows))
    }

    /// `x * W^T + b` over the last axis. `W` is `out x in`.
    pub fn affine(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> Result<NodeId> {
        let wn = self.param(w);
        let bn = b.map(|b| self.param(b));
        let wshape = self.shape(wn).to_vec();
        if wshape.len() != 2 || wshape[1] != self.cols(x) {
            return Err(shape_err(format!("affine: input {:?} vs weight {:?}", self.shape(x), wshape)));
        }
        let (m, n) = (wshape[0], wshape[1]);
        let rows = self.rows(x);
        let mut out = vec![0.0; rows * m];
        if let Some(bn) = bn {
            let bias = self.value(bn);
            if bias.len() != m {
                return Err(shape_err(format!("affine: bias {} vs {m} outputs", bias.len())));
            }
            for r in out.chunks_exact_mut(m) {
                r.copy_from_slice(bias);
            }
        }
        gemm(rows, n, m, 1.0, self.value(x), false, self.value(wn), true, 1.0, &mut out);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = m;
        let flows = self.flows(x) || self.flows(wn) || bn.is_some_and(|b| self.flows(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Affine { x, w: wn, b: bn }, flows))
    }

    /// Valid (unpadded) strided cross-correlation over time.
    /// `x` is `[batch, time, c_in]`, the kernel `[c_out, c_in, width]`.
    pub fn conv1d(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>, stride: usize) -> Result<NodeId> {
        let wn = self.param(w);
        let bn = b.map(|b| self.param(b));
        let xs = self.shape(x).to_vec();
        let ws = self.shape(wn).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] {
            return Err(shape_err(format!("conv1d: input {xs:?} vs kernel {ws:?}")));
        }
        let (batch, t_in, c_in) = (xs[0], xs[1], xs[2]);
        let (c_out, width) = (ws[0], ws[2]);
        if stride == 0 || width == 0 || t_in < width {
            return Err(shape_err(format!("conv1d: time {t_in} too short for width {width} / stride {stride}")));
        }
        let t_out = (t_in - width) / stride + 1;
        let patch = c_in * width;
        let xv = self.value(x);
        let mut cols = vec![0.0; batch * t_out * patch];
        for bi in 0..batch {
            for t in 0..t_out {
                let row = &mut cols[(bi * t_out + t) * patch..][..patch];
                for k in 0..width {
                    let src = &xv[(bi * t_in + t * stride + k) * c_in..][..c_in];
                    for (c, &v) in src.iter().enumerate() {
                        row[c * width + k] = v;
                    }
                }
            }
        }
        let rows = batch * t_out;
        let mut out = vec![0.0; rows * c_out];
        if let Some(bn) = bn {
            let bias = self.value(bn);
            for r in out.chunks_exact_mut(c_out) {
                r.copy_from_slice(bias);
            }
        }
        gemm(rows, patch, c_out, 1.0, &cols, false, self.value(wn), true, 1.0, &mut out);
        let flows = self.flows(x) || self.flows(wn) || bn.is_some_and(|b| self.flows(b));
        let t = Tensor::new(vec![batch, t_out, c_out], out)?;
        Ok(self.push(t, Op::Conv1d { x, w: wn, b: bn, width, stride, cols }, flows))
    }

    /// Per-channel normalization over every row. Training mode uses batch
    /// statistics and records updated running statistics.
    pub fn batch_norm(&mut self, x: NodeId, p: &BatchNormParams, mode: Mode) -> Result<NodeId> {
        let gamma = self.param(p.gamma);
        let beta = self.param(p.beta);
        let c = self.cols(x);
        let rows = self.rows(x);
        if self.value(gamma).len() != c {
            return Err(shape_err(format!("batch_norm: {c} channels vs {} gains", self.value(gamma).len())));
        }
        let train = mode == Mode::Train;
        let (mean, var) = if train {
            if rows < 2 {
                return Err(Error::BatchTooSmall(rows));
            }
            let xv = self.value(x);
            let mut mean = vec![0.0; c];
            for r in xv.chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for r in xv.chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            let unbiased = rows as f64 / (rows as f64 - 1.0);
            let rm: Vec<f64> = self
                .store
                .value(p.running_mean)
                .iter()
                .zip(&mean)
                .map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
                .collect();
            let rv: Vec<f64> = self
                .store
                .value(p.running_var)
                .iter()
                .zip(&var)
                .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbiased)
                .collect();
            self.stat_updates.push((p.running_mean, rm));
            self.stat_updates.push((p.running_var, rv));
            (mean, var)
        } else {
            (self.store.value(p.running_mean).to_vec(), self.store.value(p.running_var).to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ((xr, hr), orow) in xv.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)) {
            for k in 0..c {
                hr[k] = (xr[k] - mean[k]) * inv_std[k];
                orow[k] = gv[k] * hr[k] + bv[k];
            }
        }
        let flows = self.flows(x) || self.flows(gamma) || self.flows(beta);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, flows))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let flows = self.flows(x);
        self.push(t, Op::Relu(x), flows)
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`. Identity in
    /// evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let flows = self.flows(x);
        Ok(self.push(t, Op::Dropout { x, mask }, flows))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("elementwise: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let flows = self.flows(a) || self.flows(b);
        Ok(self.push(t, op, flows))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let flows = self.flows(x);
        self.push(t, Op::Scale(x, c), flows)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err(format!("concat: {sa:?} vs {sb:?}")));
        }
        let (ca, cb) = (self.cols(a), self.cols(b));
        let rows = self.rows(a);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&self.value(a)[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.value(b)[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let flows = self.flows(a) || self.flows(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(a, b), flows))
    }

    /// Picks the center frame of every convolution window, matching the
    /// output length of a conv with the same width and stride.
    pub fn center_slice(&mut self, x: NodeId, width: usize, stride: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] < width || stride == 0 {
            return Err(shape_err(format!("center_slice: input {xs:?}, width {width}")));
        }
        let (batch, t_in, c) = (xs[0], xs[1], xs[2]);
        let t_out = (t_in - width) / stride + 1;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(batch * t_out * c);
        for bi in 0..batch {
            for t in 0..t_out {
                let src = bi * t_in + t * stride + width / 2;
                out.extend_from_slice(&xv[src * c..(src + 1) * c]);
            }
        }
        let flows = self.flows(x);
        Ok(self.push(Tensor::new(vec![batch, t_out, c], out)?, Op::CenterSlice { x, width, stride }, flows))
    }

    /// `[batch, c]` (or `[batch, 1, c]`) duplicated to `[batch, times, c]`.
    pub fn repeat_time(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        let c = self.cols(x);
        let batch = self.rows(x);
        let mut out = Vec::with_capacity(batch * times * c);
        for r in self.value(x).chunks_exact(c) {
            for _ in 0..times {
                out.extend_from_slice(r);
            }
        }
        let flows = self.flows(x);
        Ok(self.push(Tensor::new(vec![batch, times, c], out)?, Op::RepeatTime { x, times }, flows))
    }

    /// Softmax of `gamma * x` over the rows of each group, independently per
    /// column. Stabilized by subtracting the per-column group maximum.
    pub fn softmax_groups(&mut self, x: NodeId, groups: &[Range<usize>], gamma: f64) -> Result<NodeId> {
        let k = self.cols(x);
        let rows = self.rows(x);
        check_groups(groups, rows)?;
        let out = softmax_groups_values(self.value(x), k, groups, gamma);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let flows = self.flows(x);
        Ok(self.push(t, Op::SoftmaxGroups { x, groups: groups.to_vec(), gamma }, flows))
    }

    /// `out[g, c] = sum over rows i of group g of weights[i, c] * values[i, c]`.
    pub fn group_weighted_sum(&mut self, weights: NodeId, values: NodeId, groups: &[Range<usize>]) -> Result<NodeId> {
        if self.shape(weights) != self.shape(values) {
            return Err(shape_err(format!(
                "group_weighted_sum: {:?} vs {:?}",
                self.shape(weights),
                self.shape(values)
            )));
        }
        let k = self.cols(values);
        check_groups(groups, self.rows(values))?;
        let (wv, vv) = (self.value(weights), self.value(values));
        let mut out = vec![0.0; groups.len() * k];
        for (g, range) in groups.iter().enumerate() {
            let o = &mut out[g * k..(g + 1) * k];
            for i in range.clone() {
                for c in 0..k {
                    o[c] += wv[i * k + c] * vv[i * k + c];
                }
            }
        }
        let flows = self.flows(weights) || self.flows(values);
        let t = Tensor::new(vec![groups.len(), k], out)?;
        Ok(self.push(t, Op::GroupWeightedSum { weights, values, groups: groups.to_vec() }, flows))
    }

    /// Softmax-weighted pooling within each row group, per column:
    /// `out[g, c] = sum_i e_ic * values[i, c] / sum_i e_ic` with
    /// `e_ic = exp(gamma * (logits[i, c] - max))`. Normalizing after the sum
    /// makes `gamma = 0` reproduce the plain mean exactly.
    pub fn attention_pool(&mut self, logits: NodeId, values: NodeId, groups: &[Range<usize>], gamma: f64) -> Result<NodeId> {
        if self.shape(logits) != self.shape(values) {
            return Err(shape_err(format!("attention_pool: {:?} vs {:?}", self.shape(logits), self.shape(values))));
        }
        let k = self.cols(values);
        check_groups(groups, self.rows(values))?;
        let (out, weights) = attention_pool_values(self.value(logits), self.value(values), k, groups, gamma);
        let flows = self.flows(logits) || self.flows(values);
        let t = Tensor::new(vec![groups.len(), k], out)?;
        Ok(self.push(t, Op::AttentionPool { logits, values, groups: groups.to_vec(), gamma, weights }, flows))
    }

    /// Scales every consecutive triple of the last axis to unit length.
    pub fn normalize3(&mut self, x: NodeId) -> Result<NodeId> {
        if self.cols(x) % 3 != 0 {
            return Err(shape_err(format!("normalize3: last axis {} not a multiple of 3", self.cols(x))));
        }
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(xv.len() / 3);
        let mut out = Vec::with_capacity(xv.len());
        for v in xv.chunks_exact(3) {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
            norms.push(n);
            out.extend(v.iter().map(|c| c / n));
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let flows = self.flows(x);
        Ok(self.push(t, Op::Normalize3 { x, norms }, flows))
    }

    /// Multiplies every row by a constant `out_dim x in` matrix.
    pub fn fixed_linear(&mut self, x: NodeId, matrix: Vec<f64>, out_dim: usize) -> Result<NodeId> {
        let n = self.cols(x);
        if matrix.len() != out_dim * n {
            return Err(shape_err(format!("fixed_linear: matrix of {} values for {out_dim} x {n}", matrix.len())));
        }
        let rows = self.rows(x);
        let mut out = vec![0.0; rows * out_dim];
        gemm(rows, n, out_dim, 1.0, self.value(x), false, &matrix, true, 0.0, &mut out);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let flows = self.flows(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::FixedLinear { x, matrix, out_dim }, flows))
    }

    /// Mean over rows of the squared L2 distance to `target`.
    pub fn squared_error(&mut self, x: NodeId, target: &[f64]) -> Result<NodeId> {
        if target.len() != self.value(x).len() {
            return Err(shape_err(format!("squared_error: {} targets for {} values", target.len(), self.value(x).len())));
        }
        let rows = self.rows(x).max(1);
        let s: f64 = self.value(x).iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        let flows = self.flows(x);
        Ok(self.push(Tensor::scalar(s / rows as f64), Op::SquaredError { x, target: target.to_vec() }, flows))
    }

    /// Mean over rows of the summed (or group-averaged) Euclidean distances
    /// between consecutive triples of `x` and `target`.
    pub fn euclidean_error(&mut self, x: NodeId, target: &[f64], per_group_mean: bool) -> Result<NodeId> {
        let c = self.cols(x);
        if target.len() != self.value(x).len() || c % 3 != 0 {
            return Err(shape_err(format!("euclidean_error: {} targets for {:?}", target.len(), self.shape(x))));
        }
        let rows = self.rows(x).max(1);
        let groups = (c / 3) as f64;
        let total: f64 = self
            .value(x)
            .chunks_exact(3)
            .zip(target.chunks_exact(3))
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
            .sum();
        let scale = if per_group_mean { 1.0 / groups } else { 1.0 };
        let flows = self.flows(x);
        let t = Tensor::scalar(total * scale / rows as f64);
        Ok(self.push(t, Op::EuclideanError { x, target: target.to_vec(), per_group_mean }, flows))
    }

    /// `sum_i weight_i * term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = 0.0;
        let mut flows = false;
        for &(id, w) in terms {
            if self.value(id).len() != 1 {
                return Err(shape_err("weighted_sum expects scalar terms".into()));
            }
            total += w * self.value(id)[0];
            flows |= self.flows(id);
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), flows))
    }

    /// Reverse pass from a scalar node. Parameters reached only through
    /// `stop_grad` edges get no entry at all.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        Ok(self.run_backward(loss, None)?.0)
    }

    /// Gradient of `loss` with respect to a node created by `input_var`.
    pub fn input_gradient(&self, loss: NodeId, input: NodeId) -> Result<Vec<f64>> {
        let len = self.value(input).len();
        Ok(self.run_backward(loss, Some(input))?.1.unwrap_or_else(|| vec![0.0; len]))
    }

    fn run_backward(&self, loss: NodeId, capture: Option<NodeId>) -> Result<(Gradients, Option<Vec<f64>>)> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!("backward from non-scalar node of shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut param_grads: Vec<Option<Vec<f64>>> = vec![None; self.store.len()];
        let mut captured = None;

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.flows {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            if capture == Some(NodeId(i)) {
                captured = Some(gout);
                continue;
            }
            self.backward_node(node, &gout, &mut grads, &mut param_grads);
        }
        Ok((Gradients { grads: param_grads }, captured))
    }

    fn backward_node(
        &self,
        node: &Node,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
        param_grads: &mut [Option<Vec<f64>>],
    ) {
        macro_rules! acc {
            ($id:expr, $len:expr) => {
                slot(&self.nodes, grads, $id, $len)
            };
        }
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Param(p) => {
                let dst = param_grads[p.index()].get_or_insert_with(|| vec![0.0; gout.len()]);
                add_into(dst, gout);
            }
            Op::Reshape(x) => {
                if let Some(g) = acc!(*x, gout.len()) {
                    add_into(g, gout);
                }
            }
            Op::Affine { x, w, b } => {
                let (m, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = gout.len() / m;
                if let Some(g) = acc!(*w, m * n) {
                    gemm(m, rows, n, 1.0, gout, true, self.value(*x), false, 1.0, g);
                }
                if let Some(b) = b {
                    if let Some(g) = acc!(*b, m) {
                        for r in gout.chunks_exact(m) {
                            add_into(g, r);
                        }
                    }
                }
                if let Some(g) = acc!(*x, rows * n) {
                    gemm(rows, m, n, 1.0, gout, false, self.value(*w), false, 1.0, g);
                }
            }
            Op::Conv1d { x, w, b, width, stride, cols } => {
                let ws = self.shape(*w);
                let (c_out, c_in) = (ws[0], ws[1]);
                let patch = c_in * width;
                let rows = gout.len() / c_out;
                if let Some(g) = acc!(*w, c_out * patch) {
                    gemm(c_out, rows, patch, 1.0, gout, true, cols, false, 1.0, g);
                }
                if let Some(b) = b {
                    if let Some(g) = acc!(*b, c_out) {
                        for r in gout.chunks_exact(c_out) {
                            add_into(g, r);
                        }
                    }
                }
                let xs = self.shape(*x).to_vec();
                let x_len = self.value(*x).len();
                if let Some(g) = acc!(*x, x_len) {
                    let mut dcols = vec![0.0; rows * patch];
                    gemm(rows, c_out, patch, 1.0, gout, false, self.value(*w), false, 0.0, &mut dcols);
                    let (batch, t_in) = (xs[0], xs[1]);
                    let t_out = rows / batch;
                    for bi in 0..batch {
                        for t in 0..t_out {
                            let row = &dcols[(bi * t_out + t) * patch..][..patch];
                            for k in 0..*width {
                                let dst = &mut g[(bi * t_in + t * stride + k) * c_in..][..c_in];
                                for (c, d) in dst.iter_mut().enumerate() {
                                    *d += row[c * width + k];
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let c = inv_std.len();
                let rows = gout.len() / c;
                let gv = self.value(*gamma);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (dr, hr) in gout.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for k in 0..c {
                        sum_dy[k] += dr[k];
                        sum_dy_xhat[k] += dr[k] * hr[k];
                    }
                }
                if let Some(g) = acc!(*gamma, c) {
                    add_into(g, &sum_dy_xhat);
                }
                if let Some(g) = acc!(*beta, c) {
                    add_into(g, &sum_dy);
                }
                if let Some(g) = acc!(*x, rows * c) {
                    let n = rows as f64;
                    for ((dst, dr), hr) in g.chunks_exact_mut(c).zip(gout.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                        for k in 0..c {
                            dst[k] += if *train {
                                gv[k] * inv_std[k] / n * (n * dr[k] - sum_dy[k] - hr[k] * sum_dy_xhat[k])
                            } else {
                                gv[k] * inv_std[k] * dr[k]
                            };
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(g) = acc!(*x, gout.len()) {
                    for ((d, &go), &v) in g.iter_mut().zip(gout).zip(xv) {
                        if v > 0.0 {
                            *d += go;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(g) = acc!(*x, gout.len()) {
                    for ((d, go), m) in g.iter_mut().zip(gout).zip(mask) {
                        *d += go * m;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(g) = acc!(*a, gout.len()) {
                    for ((d, go), y) in g.iter_mut().zip(gout).zip(bv) {
                        *d += go * y;
                    }
                }
                if let Some(g) = acc!(*b, gout.len()) {
                    for ((d, go), y) in g.iter_mut().zip(gout).zip(av) {
                        *d += go * y;
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(g) = acc!(*a, gout.len()) {
                    add_into(g, gout);
                }
                if let Some(g) = acc!(*b, gout.len()) {
                    add_into(g, gout);
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = acc!(*a, gout.len()) {
                    add_into(g, gout);
                }
                if let Some(g) = acc!(*b, gout.len()) {
                    for (d, go) in g.iter_mut().zip(gout) {
                        *d -= go;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(g) = acc!(*x, gout.len()) {
                    for (d, go) in g.iter_mut().zip(gout) {
                        *d += c * go;
                    }
                }
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.cols(*a), self.cols(*b));
                let rows = gout.len() / (ca + cb);
                if let Some(g) = acc!(*a, rows * ca) {
                    for (dst, src) in g.chunks_exact_mut(ca).zip(gout.chunks_exact(ca + cb)) {
                        add_into(dst, &src[..ca]);
                    }
                }
                if let Some(g) = acc!(*b, rows * cb) {
                    for (dst, src) in g.chunks_exact_mut(cb).zip(gout.chunks_exact(ca + cb)) {
                        add_into(dst, &src[ca..]);
                    }
                }
            }
            Op::CenterSlice { x, width, stride } => {
                let xs = self.shape(*x).to_vec();
                let (batch, t_in, c) = (xs[0], xs[1], xs[2]);
                let t_out = gout.len() / (batch * c);
                if let Some(g) = acc!(*x, batch * t_in * c) {
                    for bi in 0..batch {
                        for t in 0..t_out {
                            let src = bi * t_in + t * stride + width / 2;
                            add_into(&mut g[src * c..(src + 1) * c], &gout[(bi * t_out + t) * c..][..c]);
                        }
                    }
                }
            }
            Op::RepeatTime { x, times } => {
                let c = self.cols(*x);
                let len = self.value(*x).len();
                if let Some(g) = acc!(*x, len) {
                    for (dst, src) in g.chunks_exact_mut(c).zip(gout.chunks_exact(c * times)) {
                        for r in src.chunks_exact(c) {
                            add_into(dst, r);
                        }
                    }
                }
            }
            Op::SoftmaxGroups { x, groups, gamma } => {
                let k = self.cols(*x);
                let a = node.value.data();
                if let Some(g) = acc!(*x, gout.len()) {
                    for range in groups {
                        for c in 0..k {
                            let s: f64 = range.clone().map(|i| a[i * k + c] * gout[i * k + c]).sum();
                            for i in range.clone() {
                                g[i * k + c] += gamma * a[i * k + c] * (gout[i * k + c] - s);
                            }
                        }
                    }
                }
            }
            Op::GroupWeightedSum { weights, values, groups } => {
                let k = self.cols(*values);
                let (wv, vv) = (self.value(*weights), self.value(*values));
                let len = vv.len();
                if let Some(g) = acc!(*weights, len) {
                    for (gi, range) in groups.iter().enumerate() {
                        for i in range.clone() {
                            for c in 0..k {
                                g[i * k + c] += gout[gi * k + c] * vv[i * k + c];
                            }
                        }
                    }
                }
                if let Some(g) = acc!(*values, len) {
                    for (gi, range) in groups.iter().enumerate() {
                        for i in range.clone() {
                            for c in 0..k {
                                g[i * k + c] += gout[gi * k + c] * wv[i * k + c];
                            }
                        }
                    }
                }
            }
            Op::AttentionPool { logits, values, groups, gamma, weights } => {
                let k = self.cols(*values);
                let vv = self.value(*values);
                let out = node.value.data();
                let len = vv.len();
                if let Some(g) = acc!(*logits, len) {
                    for (gi, range) in groups.iter().enumerate() {
                        for i in range.clone() {
                            for c in 0..k {
                                g[i * k + c] += gamma * weights[i * k + c] * (vv[i * k + c] - out[gi * k + c]) * gout[gi * k + c];
                            }
                        }
                    }
                }
                if let Some(g) = acc!(*values, len) {
                    for (gi, range) in groups.iter().enumerate() {
                        for i in range.clone() {
                            for c in 0..k {
                                g[i * k + c] += weights[i * k + c] * gout[gi * k + c];
                            }
                        }
                    }
                }
            }
            Op::Normalize3 { x, norms } => {
                let y = node.value.data();
                if let Some(g) = acc!(*x, gout.len()) {
                    for (((dst, yv), go), n) in
                        g.chunks_exact_mut(3).zip(y.chunks_exact(3)).zip(gout.chunks_exact(3)).zip(norms)
                    {
                        let dot = yv[0] * go[0] + yv[1] * go[1] + yv[2] * go[2];
                        for a in 0..3 {
                            dst[a] += (go[a] - yv[a] * dot) / n;
                        }
                    }
                }
            }
            Op::FixedLinear { x, matrix, out_dim } => {
                let n = self.cols(*x);
                let rows = gout.len() / out_dim;
                if let Some(g) = acc!(*x, rows * n) {
                    gemm(rows, *out_dim, n, 1.0, gout, false, matrix, false, 1.0, g);
                }
            }
            Op::SquaredError { x, target } => {
                let rows = self.rows(*x).max(1) as f64;
                let xv = self.value(*x);
                if let Some(g) = acc!(*x, xv.len()) {
                    for ((d, a), b) in g.iter_mut().zip(xv).zip(target) {
                        *d += gout[0] * 2.0 * (a - b) / rows;
                    }
                }
            }
            Op::EuclideanError { x, target, per_group_mean } => {
                let rows = self.rows(*x).max(1) as f64;
                let groups = (self.cols(*x) / 3) as f64;
                let scale = gout[0] / rows * if *per_group_mean { 1.0 / groups } else { 1.0 };
                let xv = self.value(*x);
                if let Some(g) = acc!(*x, xv.len()) {
                    for ((dst, a), b) in g.chunks_exact_mut(3).zip(xv.chunks_exact(3)).zip(target.chunks_exact(3)) {
                        let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                        if n > 0.0 {
                            for k in 0..3 {
                                dst[k] += scale * d[k] / n;
                            }
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    if let Some(g) = acc!(id, 1) {
                        g[0] += w * gout[0];
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id.0].flows {
        return None;
    }
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_groups(groups: &[Range<usize>], rows: usize) -> Result<()> {
    for g in groups {
        if g.is_empty() || g.end > rows {
            return Err(shape_err(format!("group {g:?} invalid for {rows} rows")));
        }
    }
    Ok(())
}

/// Pooled values and the normalized weights used, see `Graph::attention_pool`.
pub fn attention_pool_values(logits: &[f64], values: &[f64], k: usize, groups: &[Range<usize>], gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; groups.len() * k];
    let mut weights = vec![0.0; values.len()];
    for (gi, range) in groups.iter().enumerate() {
        for c in 0..k {
            let max = range.clone().map(|i| gamma * logits[i * k + c]).fold(f64::NEG_INFINITY, f64::max);
            let mut num = 0.0;
            let mut den = 0.0;
            for i in range.clone() {
                let e = (gamma * logits[i * k + c] - max).exp();
                weights[i * k + c] = e;
                num += e * values[i * k + c];
                den += e;
            }
            out[gi * k + c] = num / den;
            for i in range.clone() {
                weights[i * k + c] /= den;
            }
        }
    }
    (out, weights)
}

/// Column-wise softmax of `gamma * x` within each row group.
pub fn softmax_groups_values(x: &[f64], k: usize, groups: &[Range<usize>], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for range in groups {
        for c in 0..k {
            let max = range.clone().map(|i| gamma * x[i * k + c]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for i in range.clone() {
                let e = (gamma * x[i * k + c] - max).exp();
                out[i * k + c] = e;
                denom += e;
            }
            for i in range.clone() {
                out[i * k + c] /= denom;
            }
        }
    }
    out
}
