//! Bone direction branch: a stack of temporal convolution sub-networks.
//!
//! Sub-network 0 reads a `d`-frame keypoint window (optionally gated by
//! visibility scores) and shrinks it by the stride `s` per block down to a
//! single frame. Every following sub-network starts from the previous
//! prediction, duplicated over time, and concatenates the previous
//! sub-network's block outputs at matching temporal lengths. All edges from
//! a lower into an upper sub-network carry a gradient stop, so each
//! sub-network is trained only by its own loss.

use std::collections::BTreeMap;

use rand::Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{BatchNormParams, Graph, Init, Mode, NodeId, ParamId, ParameterStore, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionNetConfig {
    pub d: usize,
    pub s: usize,
    pub channels: usize,
    pub subnets: usize,
    pub vis_fusion: bool,
    pub dropout: f64,
    pub joints: usize,
    /// Width of every sub-network's prediction: `3 (j - 1)` for bone
    /// directions, `3 j` when regressing joints directly.
    pub out_dim: usize,
}

impl DirectionNetConfig {
    pub fn from_config(cfg: &Config, joints: usize, out_dim: usize) -> Self {
        Self {
            d: cfg.d,
            s: cfg.s,
            channels: cfg.channels,
            subnets: cfg.subnets,
            vis_fusion: cfg.vis_fusion,
            dropout: cfg.dropout,
            joints,
            out_dim,
        }
    }

    /// Block count `m` with `d = s^m`; also checks the sub-network count.
    pub fn levels(&self) -> Result<usize> {
        let probe = Config { d: self.d, s: self.s, ..Config::default() };
        let m = probe.levels()?;
        if self.subnets == 0 || self.subnets > m {
            return Err(Error::Config(format!("{} sub-networks do not fit d = {} (at most {m})", self.subnets, self.d)));
        }
        Ok(m)
    }
}

/// Convolution (no bias) followed by batch norm.
#[derive(Debug, Clone)]
struct ConvBn {
    w: ParamId,
    bn: BatchNormParams,
}

#[derive(Debug, Clone)]
enum InputLayer {
    Plain(ConvBn),
    Fused { kp: ConvBn, vis: ConvBn },
}

#[derive(Debug, Clone)]
struct Block {
    conv: ConvBn,
    /// Shortcut projection when the block changes the channel count.
    proj: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct Subnet {
    input: Option<InputLayer>,
    lift: Option<(ParamId, ParamId)>,
    blocks: Vec<Block>,
    head: (ParamId, ParamId),
}

/// Outputs of one sub-network: its prediction and block activations keyed
/// by temporal length.
#[derive(Debug, Clone)]
pub struct SubnetOutput {
    pub prediction: NodeId,
    pub activations: BTreeMap<usize, NodeId>,
}

#[derive(Debug, Clone)]
pub struct DirectionOutput {
    pub per_subnet: Vec<SubnetOutput>,
}

impl DirectionOutput {
    pub fn final_prediction(&self) -> NodeId {
        self.per_subnet.last().expect("at least one sub-network").prediction
    }
}

#[derive(Debug, Clone)]
pub struct DirectionNet {
    cfg: DirectionNetConfig,
    levels: usize,
    subnets: Vec<Subnet>,
}

pub fn batch_norm_params(store: &mut ParameterStore, name: &str, c: usize, rng: &mut impl Rng) -> Result<BatchNormParams> {
    Ok(BatchNormParams {
        gamma: store.add(format!("{name}.gamma"), &[c], Init::Ones, rng)?,
        beta: store.add(format!("{name}.beta"), &[c], Init::Zeros, rng)?,
        running_mean: store.add_buffer(format!("{name}.running_mean"), &[c], 0.0)?,
        running_var: store.add_buffer(format!("{name}.running_var"), &[c], 1.0)?,
    })
}

fn conv_bn(store: &mut ParameterStore, name: &str, c_out: usize, c_in: usize, w: usize, rng: &mut impl Rng) -> Result<ConvBn> {
    Ok(ConvBn {
        w: store.add(format!("{name}.w"), &[c_out, c_in, w], Init::HeUniform, rng)?,
        bn: batch_norm_params(store, &format!("{name}.bn"), c_out, rng)?,
    })
}

impl DirectionNet {
    /// Parameter-name prefix of sub-network `k`.
    pub fn prefix(k: usize) -> String {
        format!("dir.s{k}.")
    }

    pub fn new(store: &mut ParameterStore, cfg: DirectionNetConfig, rng: &mut impl Rng) -> Result<Self> {
        let m = cfg.levels()?;
        let (o, s, j) = (cfg.channels, cfg.s, cfg.joints);
        let mut subnets = Vec::with_capacity(cfg.subnets);
        // Channel count of the lower sub-network's activation at each length.
        let mut lower_channels: BTreeMap<usize, usize> = BTreeMap::new();
        for k in 0..cfg.subnets {
            let p = Self::prefix(k);
            let mut own_channels = BTreeMap::new();
            let mut len = cfg.d / s.pow(k as u32 + 1);
            let (input, lift, mut c) = if k == 0 {
                let input = if cfg.vis_fusion {
                    InputLayer::Fused {
                        kp: conv_bn(store, &format!("{p}in.kp"), o, 2 * j, s, rng)?,
                        vis: conv_bn(store, &format!("{p}in.vis"), o, j, s, rng)?,
                    }
                } else {
                    InputLayer::Plain(conv_bn(store, &format!("{p}in"), o, 2 * j, s, rng)?)
                };
                let c = if cfg.vis_fusion { 2 * o } else { o };
                (Some(input), None, c)
            } else {
                let w = store.add(format!("{p}lift.w"), &[o, cfg.out_dim], Init::HeUniform, rng)?;
                let b = store.add(format!("{p}lift.b"), &[o], Init::Zeros, rng)?;
                len = cfg.d / s.pow(k as u32);
                (None, Some((w, b)), o)
            };
            own_channels.insert(len, c);
            let mut blocks = Vec::new();
            while len > 1 {
                let skip = if k == 0 { 0 } else { lower_channels[&len] };
                let conv = conv_bn(store, &format!("{p}blk{}", blocks.len()), o, c + skip, s, rng)?;
                let proj = if c != o {
                    Some(store.add(format!("{p}blk{}.proj", blocks.len()), &[o, c], Init::HeUniform, rng)?)
                } else {
                    None
                };
                blocks.push(Block { conv, proj });
                c = o;
                len /= s;
                own_channels.insert(len, c);
            }
            let head_in = if k == 0 { c } else { c + lower_channels[&1] };
            let head = (
                store.add(format!("{p}head.w"), &[cfg.out_dim, head_in], Init::FanInUniform, rng)?,
                store.add(format!("{p}head.b"), &[cfg.out_dim], Init::Zeros, rng)?,
            );
            subnets.push(Subnet { input, lift, blocks, head });
            lower_channels = own_channels;
        }
        Ok(Self { cfg, levels: m, subnets })
    }

    pub fn config(&self) -> &DirectionNetConfig {
        &self.cfg
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    fn conv_bn_relu(&self, g: &mut Graph<'_>, x: NodeId, p: &ConvBn, mode: Mode) -> Result<NodeId> {
        let h = g.conv1d(x, p.w, None, self.cfg.s)?;
        let h = g.batch_norm(h, &p.bn, mode)?;
        Ok(g.relu(h))
    }

    /// Visibility gating of the input: `[C(x) * C(v); C(x)]` where each `C`
    /// is a strided convolution, batch norm and ReLU.
    pub fn fuse_visibility(&self, g: &mut Graph<'_>, kp: NodeId, vis: NodeId, mode: Mode) -> Result<NodeId> {
        match &self.subnets[0].input {
            Some(InputLayer::Fused { kp: pk, vis: pv }) => {
                let hk = self.conv_bn_relu(g, kp, pk, mode)?;
                let hv = self.conv_bn_relu(g, vis, pv, mode)?;
                let gated = g.mul(hk, hv)?;
                g.concat(gated, hk)
            }
            _ => Err(Error::Config("visibility fusion is disabled".into())),
        }
    }

    fn residual_block(
        &self,
        g: &mut Graph<'_>,
        x: NodeId,
        skip: Option<NodeId>,
        block: &Block,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        let input = match skip {
            Some(sk) => g.concat(x, sk)?,
            None => x,
        };
        let h = self.conv_bn_relu(g, input, &block.conv, mode)?;
        let h = g.dropout(h, self.cfg.dropout, mode, rng)?;
        let mut shortcut = g.center_slice(x, self.cfg.s, self.cfg.s)?;
        if let Some(proj) = block.proj {
            shortcut = g.affine(shortcut, proj, None)?;
        }
        g.add(h, shortcut)
    }

    fn head(&self, g: &mut Graph<'_>, x: NodeId, head: (ParamId, ParamId)) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        let flat = g.reshape(x, vec![shape[0], shape[2]])?;
        g.affine(flat, head.0, Some(head.1))
    }

    /// Sub-network 0 on keypoints `[B, d, 2j]` and visibility `[B, d, j]`.
    pub fn forward_bottom(
        &self,
        g: &mut Graph<'_>,
        kp: NodeId,
        vis: NodeId,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<SubnetOutput> {
        let expected = [self.cfg.d, 2 * self.cfg.joints];
        if g.shape(kp).len() != 3 || g.shape(kp)[1..] != expected {
            return Err(Error::Shape(format!("keypoint window {:?}, expected [B, {}, {}]", g.shape(kp), expected[0], expected[1])));
        }
        let net = &self.subnets[0];
        let mut x = match net.input.as_ref().expect("bottom sub-network has an input layer") {
            InputLayer::Fused { .. } => self.fuse_visibility(g, kp, vis, mode)?,
            InputLayer::Plain(p) => self.conv_bn_relu(g, kp, p, mode)?,
        };
        x = g.dropout(x, self.cfg.dropout, mode, rng)?;
        let mut activations = BTreeMap::new();
        activations.insert(g.shape(x)[1], x);
        for block in &net.blocks {
            x = self.residual_block(g, x, None, block, mode, rng)?;
            activations.insert(g.shape(x)[1], x);
        }
        let prediction = self.head(g, x, net.head)?;
        Ok(SubnetOutput { prediction, activations })
    }

    /// Sub-network `k >= 1` fed by the previous sub-network's prediction and
    /// activations. Everything coming from below passes a gradient stop.
    pub fn forward_upper(
        &self,
        g: &mut Graph<'_>,
        k: usize,
        lower: &SubnetOutput,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<SubnetOutput> {
        let net = &self.subnets[k];
        let (lw, lb) = net.lift.expect("upper sub-network has a lift layer");
        let pred = g.stop_grad(lower.prediction);
        let lifted = g.affine(pred, lw, Some(lb))?;
        let lifted = g.relu(lifted);
        let len = self.cfg.d / self.cfg.s.pow(k as u32);
        let mut x = g.repeat_time(lifted, len)?;
        let mut activations = BTreeMap::new();
        activations.insert(len, x);
        for block in &net.blocks {
            let skip = self.lower_activation(g, lower, g.shape(x)[1])?;
            x = self.residual_block(g, x, Some(skip), block, mode, rng)?;
            activations.insert(g.shape(x)[1], x);
        }
        let skip = self.lower_activation(g, lower, 1)?;
        let joined = g.concat(x, skip)?;
        let prediction = self.head(g, joined, net.head)?;
        Ok(SubnetOutput { prediction, activations })
    }

    fn lower_activation(&self, g: &mut Graph<'_>, lower: &SubnetOutput, len: usize) -> Result<NodeId> {
        let a = *lower
            .activations
            .get(&len)
            .ok_or_else(|| Error::Shape(format!("lower sub-network has no activation of length {len}")))?;
        Ok(g.stop_grad(a))
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        kp: NodeId,
        vis: NodeId,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<DirectionOutput> {
        let mut per_subnet = vec![self.forward_bottom(g, kp, vis, mode, rng)?];
        for k in 1..self.subnets.len() {
            let out = self.forward_upper(g, k, per_subnet.last().unwrap(), mode, rng)?;
            per_subnet.push(out);
        }
        Ok(DirectionOutput { per_subnet })
    }

    /// Squared L2 loss of every sub-network against the same target,
    /// averaged over the batch.
    pub fn direction_losses(&self, g: &mut Graph<'_>, out: &DirectionOutput, target: &[f64]) -> Result<Vec<NodeId>> {
        out.per_subnet.iter().map(|o| g.squared_error(o.prediction, target)).collect()
    }
}

/// Frame indices of the direction window for frame `t`: centered on `t`, or
/// ending at `t` in causal mode. Indices past either end repeat the boundary
/// frame.
pub fn window_indices(t: usize, frames: usize, d: usize, causal: bool) -> Vec<usize> {
    let start = if causal { t as i64 - d as i64 + 1 } else { t as i64 - (d / 2) as i64 };
    (0..d as i64).map(|i| (start + i).clamp(0, frames as i64 - 1) as usize).collect()
}

/// Stacks per-frame rows `[T, c]` into a `[B, d, c]` window tensor.
pub fn gather_windows(rows: &[f64], c: usize, windows: &[Vec<usize>]) -> Result<Tensor> {
    let d = windows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(windows.len() * d * c);
    for w in windows {
        for &f in w {
            data.extend_from_slice(&rows[f * c..(f + 1) * c]);
        }
    }
    Tensor::new(vec![windows.len(), d, c], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(vis_fusion: bool, subnets: usize) -> DirectionNetConfig {
        DirectionNetConfig { d: 9, s: 3, channels: 4, subnets, vis_fusion, dropout: 0.0, joints: 3, out_dim: 6 }
    }

    fn inputs(b: usize, d: usize, j: usize, seed: u64) -> (Tensor, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let kp = (0..b * d * 2 * j).map(|_| r.random_range(-1.0..1.0)).collect();
        let vis = (0..b * d * j).map(|_| r.random_range(0.0..1.0)).collect();
        (Tensor::new(vec![b, d, 2 * j], kp).unwrap(), Tensor::new(vec![b, d, j], vis).unwrap())
    }

    #[test]
    fn fused_shape() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DirectionNetConfig { d: 9, s: 3, channels: 8, subnets: 1, vis_fusion: true, dropout: 0.0, joints: 17, out_dim: 48 };
        let net = DirectionNet::new(&mut store, cfg, &mut rng).unwrap();
        let (kp, vis) = inputs(1, 9, 17, 1);
        let mut g = Graph::new(&store);
        let (kp, vis) = (g.input(kp), g.input(vis));
        let fused = net.fuse_visibility(&mut g, kp, vis, Mode::Eval).unwrap();
        assert_eq!(g.shape(fused), &[1, 3, 16]);
    }

    fn force_visibility_hidden(store: &mut ParameterStore, level: f64) {
        let id = |s: &ParameterStore, n: &str| s.id(n).unwrap();
        let w = id(store, "dir.s0.in.vis.w");
        store.value_mut(w).iter_mut().for_each(|v| *v = 0.0);
        let gamma = id(store, "dir.s0.in.vis.bn.gamma");
        store.value_mut(gamma).iter_mut().for_each(|v| *v = 0.0);
        let beta = id(store, "dir.s0.in.vis.bn.beta");
        store.value_mut(beta).iter_mut().for_each(|v| *v = level);
    }

    #[test]
    fn visibility_gate_identity_and_annihilator() {
        for level in [1.0, 0.0] {
            let mut store = ParameterStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let net = DirectionNet::new(&mut store, tiny(true, 1), &mut rng).unwrap();
            force_visibility_hidden(&mut store, level);
            let (kp, vis) = inputs(2, 9, 3, 3);
            let mut g = Graph::new(&store);
            let (kp, vis) = (g.input(kp), g.input(vis));
            let fused = net.fuse_visibility(&mut g, kp, vis, Mode::Eval).unwrap();
            let o = 4;
            for row in g.value(fused).chunks_exact(2 * o) {
                if level == 1.0 {
                    assert_eq!(row[..o], row[o..]);
                } else {
                    assert!(row[..o].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn pyramid_lengths() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = DirectionNetConfig { d: 27, s: 3, channels: 4, subnets: 2, vis_fusion: true, dropout: 0.0, joints: 3, out_dim: 6 };
        let net = DirectionNet::new(&mut store, cfg, &mut rng).unwrap();
        let (kp, vis) = inputs(2, 27, 3, 5);
        let mut g = Graph::new(&store);
        let (kp, vis) = (g.input(kp), g.input(vis));
        let out = net.forward(&mut g, kp, vis, Mode::Train, &mut rng).unwrap();
        let lens: Vec<usize> = out.per_subnet[0].activations.keys().rev().copied().collect();
        assert_eq!(lens, vec![9, 3, 1]);
        let lens: Vec<usize> = out.per_subnet[1].activations.keys().rev().copied().collect();
        assert_eq!(lens, vec![9, 3, 1]);
        assert_eq!(g.shape(out.final_prediction()), &[2, 6]);
        assert_eq!(store.entries().iter().filter(|e| e.name.starts_with("dir.s0.blk") && e.name.ends_with(".w")).count(), 2);
        assert_eq!(store.entries().iter().filter(|e| e.name.starts_with("dir.s1.blk") && e.name.ends_with(".w")).count(), 2);
    }

    #[test]
    fn inconsistent_pyramid_rejected() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = tiny(true, 3);
        assert!(DirectionNet::new(&mut store, cfg.clone(), &mut rng).is_err());
        cfg.subnets = 1;
        cfg.d = 12;
        assert!(DirectionNet::new(&mut store, cfg, &mut rng).is_err());
    }

    #[test]
    fn single_subnet_is_plain_backbone() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = DirectionNet::new(&mut store, tiny(false, 1), &mut rng).unwrap();
        let (kp, vis) = inputs(2, 9, 3, 7);
        let mut g = Graph::new(&store);
        let (kpn, visn) = (g.input(kp.clone()), g.input(vis));
        let out = net.forward(&mut g, kpn, visn, Mode::Eval, &mut rng).unwrap();
        assert_eq!(out.per_subnet.len(), 1);
        // Without fusion the visibility input is ignored.
        let (_, vis2) = inputs(2, 9, 3, 99);
        let mut g2 = Graph::new(&store);
        let (kpn, visn) = (g2.input(kp), g2.input(vis2));
        let out2 = net.forward(&mut g2, kpn, visn, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(out.final_prediction()), g2.value(out2.final_prediction()));
    }

    #[test]
    fn upper_subnet_reads_only_prediction_after_surgery() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = DirectionNet::new(&mut store, tiny(true, 2), &mut rng).unwrap();
        // Zero every weight that reads a skip channel in sub-network 1.
        let o = 4;
        for name in ["dir.s1.blk0.w"] {
            let id = store.id(name).unwrap();
            let shape = store.entry(id).shape.clone();
            let v = store.value_mut(id);
            for co in 0..shape[0] {
                for ci in o..shape[1] {
                    for k in 0..shape[2] {
                        v[(co * shape[1] + ci) * shape[2] + k] = 0.0;
                    }
                }
            }
        }
        let head = store.id("dir.s1.head.w").unwrap();
        let cols = store.entry(head).shape[1];
        for (i, v) in store.value_mut(head).iter_mut().enumerate() {
            if i % cols >= o {
                *v = 0.0;
            }
        }
        let (kp, vis) = inputs(2, 9, 3, 9);
        let run = |seed: u64| {
            let mut g = Graph::new(&store);
            let (kpn, visn) = (g.input(kp.clone()), g.input(vis.clone()));
            let lower = net.forward_bottom(&mut g, kpn, visn, Mode::Eval, &mut rng.clone()).unwrap();
            // Same prediction, scrambled skip activations.
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut acts = BTreeMap::new();
            for (&len, &node) in &lower.activations {
                let t = g.tensor(node);
                let noise: Vec<f64> = t.data().iter().map(|_| r.random_range(-5.0..5.0)).collect();
                acts.insert(len, g.input(Tensor::new(t.shape().to_vec(), noise).unwrap()));
            }
            let fake = SubnetOutput { prediction: lower.prediction, activations: acts };
            let up = net.forward_upper(&mut g, 1, &fake, Mode::Eval, &mut rng.clone()).unwrap();
            g.value(up.prediction).to_vec()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn subnet_losses_route_to_their_own_parameters() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = DirectionNet::new(&mut store, tiny(true, 2), &mut rng).unwrap();
        let (kp, vis) = inputs(3, 9, 3, 11);
        let target = vec![0.5; 3 * 6];
        for k in 0..2 {
            let report = grad_check(&mut store, 1e-5, |g| {
                let (kpn, visn) = (g.input(kp.clone()), g.input(vis.clone()));
                let out = net.forward(g, kpn, visn, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0))?;
                Ok(net.direction_losses(g, &out, &target)?[k])
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
            let other = DirectionNet::prefix(1 - k);
            assert!(report.blocked.iter().all(|n| n.starts_with(&other)), "{:?}", report.blocked);
            assert_eq!(report.blocked.len(), store.entries().iter().filter(|e| e.trainable && e.name.starts_with(&other)).count());
        }
    }

    #[test]
    fn windows_replicate_edges() {
        assert_eq!(window_indices(0, 10, 5, false), vec![0, 0, 0, 1, 2]);
        assert_eq!(window_indices(9, 10, 5, false), vec![7, 8, 9, 9, 9]);
        assert_eq!(window_indices(1, 10, 3, true), vec![0, 0, 1]);
        assert_eq!(window_indices(5, 10, 3, true), vec![3, 4, 5]);
    }
}
