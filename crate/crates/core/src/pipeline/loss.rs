//! Joint-shift loss and the weighted total.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, Tensor};
use crate::skeleton::SkeletonTopology;

/// Constant `[3 |P|, 3 (j - 1)]` map from length-scaled bone vectors to the
/// shifts of every non-adjacent joint pair.
pub fn shift_matrix(topo: &SkeletonTopology) -> Vec<f64> {
    let nb = topo.num_bones();
    let pairs = topo.nonadjacent_pairs();
    let mut m = vec![0.0; 9 * pairs.len() * nb];
    for (p, &(a, b)) in pairs.iter().enumerate() {
        for (bone, c) in topo.shift_coefficients(a, b).into_iter().enumerate() {
            for x in 0..3 {
                m[(3 * p + x) * 3 * nb + 3 * bone + x] = c;
            }
        }
    }
    m
}

/// Shifts composed from constant lengths `[B, j - 1]` and predicted
/// directions `[B, 3 (j - 1)]`, which are normalized first.
pub fn analytic_shifts(g: &mut Graph<'_>, lengths: &[f64], directions: NodeId, matrix: &[f64]) -> Result<NodeId> {
    let rows = g.shape(directions)[0];
    let nb = lengths.len() / rows.max(1);
    if lengths.len() != rows * nb || g.shape(directions)[1] != 3 * nb {
        return Err(Error::Shape(format!("{} lengths for directions {:?}", lengths.len(), g.shape(directions))));
    }
    let unit = g.normalize3(directions)?;
    let scale: Vec<f64> = lengths.iter().flat_map(|&l| [l, l, l]).collect();
    let scale = g.input(Tensor::new(vec![rows, 3 * nb], scale)?);
    let bones = g.mul(unit, scale)?;
    let out = matrix.len() / (3 * nb);
    g.fixed_linear(bones, matrix.to_vec(), out)
}

/// Summed Euclidean distance over pairs, averaged over the batch.
pub fn joint_shift_loss(g: &mut Graph<'_>, shifts: NodeId, target: &[f64]) -> Result<NodeId> {
    g.euclidean_error(shifts, target, false)
}

/// Scalar loss nodes of one batch. Absent terms do not apply to the model.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    /// One per direction sub-network.
    pub direction: Vec<NodeId>,
    pub length: Option<NodeId>,
    pub joints: Option<NodeId>,
    pub shift: Option<NodeId>,
    /// Joint-head regression in learned-heads mode.
    pub joint_head: Option<NodeId>,
}

/// Plain values of the terms, summed over sub-networks for `d`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub d: f64,
    pub l: f64,
    pub j: f64,
    pub js: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values(&self, g: &Graph<'_>, total: NodeId) -> LossValues {
        let get = |n: Option<NodeId>| n.map_or(0.0, |n| g.scalar(n));
        LossValues {
            d: self.direction.iter().map(|&n| g.scalar(n)).sum(),
            l: get(self.length),
            j: get(self.joints) + get(self.joint_head),
            js: get(self.shift),
            total: g.scalar(total),
        }
    }
}

/// `lambda_D * sum L_D + lambda_L * L_L + lambda_J * L_J + lambda_JS * L_JS`.
/// Fails on the first non-finite term.
pub fn total_loss(g: &mut Graph<'_>, terms: &LossTerms, cfg: &Config) -> Result<NodeId> {
    let mut weighted = Vec::new();
    for (k, &n) in terms.direction.iter().enumerate() {
        weighted.push((format!("L_D[{k}]"), n, cfg.lambda_d));
    }
    let optional = [
        ("L_L", terms.length, cfg.lambda_l),
        ("L_J", terms.joints, cfg.lambda_j),
        ("L_J[head]", terms.joint_head, cfg.lambda_j),
        ("L_JS", terms.shift, cfg.lambda_js),
    ];
    for (name, n, w) in optional {
        if let Some(n) = n {
            weighted.push((name.to_string(), n, w));
        }
    }
    for (name, n, _) in &weighted {
        if !g.scalar(*n).is_finite() {
            return Err(Error::NonFiniteLoss(name.clone()));
        }
    }
    let pairs: Vec<(NodeId, f64)> = weighted.iter().map(|(_, n, w)| (*n, *w)).collect();
    g.weighted_sum(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParameterStore;
    use crate::skeleton::{compose, pose_shifts_flat, BoneRepresentation, SkeletonPreset};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chain_single_pair() {
        let topo = SkeletonTopology::build(&[-1, 0, 1], &["a", "b", "c"], 0).unwrap();
        assert_eq!(topo.nonadjacent_pairs(), &[(0, 2)]);
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let dirs = g.input(Tensor::new(vec![1, 6], vec![0.0, 2.0, 0.0, 0.0, 0.5, 0.0]).unwrap());
        let shifts = analytic_shifts(&mut g, &[100.0, 100.0], dirs, &shift_matrix(&topo)).unwrap();
        assert_eq!(g.value(shifts), &[0.0, 200.0, 0.0]);
        let loss = joint_shift_loss(&mut g, shifts, &[0.0, 199.0, 0.0]).unwrap();
        assert_eq!(g.scalar(loss), 1.0);
        let exact = joint_shift_loss(&mut g, shifts, &[0.0, 200.0, 0.0]).unwrap();
        assert_eq!(g.scalar(exact), 0.0);
    }

    #[test]
    fn matrix_matches_composed_shifts() {
        let preset = SkeletonPreset::h36m17();
        let topo = &preset.topology;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nb = topo.num_bones();
        let lengths: Vec<f64> = (0..nb).map(|_| rng.random_range(50.0..400.0)).collect();
        let raw: Vec<f64> = (0..3 * nb).map(|_| rng.random_range(-1.0..1.0)).collect();
        let directions = raw
            .chunks_exact(3)
            .map(|v| {
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                [v[0] / n, v[1] / n, v[2] / n]
            })
            .collect();
        let pose = compose(&BoneRepresentation { lengths: lengths.clone(), directions }, topo).unwrap();
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let d = g.input(Tensor::new(vec![1, 3 * nb], raw).unwrap());
        let shifts = analytic_shifts(&mut g, &lengths, d, &shift_matrix(topo)).unwrap();
        for (a, b) in g.value(shifts).iter().zip(pose_shifts_flat(&pose, topo)) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn unit_terms_give_weighted_sum() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let one = |g: &mut Graph<'_>| g.input(Tensor::scalar(1.0));
        let terms = LossTerms {
            direction: vec![one(&mut g)],
            length: Some(one(&mut g)),
            joints: Some(one(&mut g)),
            shift: Some(one(&mut g)),
            joint_head: None,
        };
        let total = total_loss(&mut g, &terms, &Config::default()).unwrap();
        assert!((g.scalar(total) - 1.17).abs() < 1e-15);
        let zero = g.input(Tensor::scalar(0.0));
        let zeros = LossTerms { direction: vec![zero], length: Some(zero), joints: Some(zero), shift: Some(zero), joint_head: None };
        let t = total_loss(&mut g, &zeros, &Config::default()).unwrap();
        assert_eq!(g.scalar(t), 0.0);
        let bad = g.input(Tensor::scalar(f64::NAN));
        let err = total_loss(&mut g, &LossTerms { shift: Some(bad), ..zeros }, &Config::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss(ref n) if n == "L_JS"));
    }
}
