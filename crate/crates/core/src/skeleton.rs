//! Skeleton topology and the bone-based pose representation.
//!
//! A pose over `j` joints is equivalently described by `j - 1` bone lengths
//! and unit bone directions. Every joint is the sum of the length-scaled
//! directions of the bones on its path from the root, so the two
//! representations convert losslessly in both directions.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Bones shorter than this (in mm) have no well-defined direction.
pub const DEGENERATE_BONE_MM: f64 = 1e-6;

/// Direction vectors whose norm deviates from one by more than this are renormalized.
const UNIT_TOLERANCE: f64 = 1e-9;

pub type Vec3 = [f64; 3];

/// Rooted tree over `j` joints with `j - 1` directed bones (parent -> child).
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    joint_names: Vec<String>,
    parent: Vec<i64>,
    root: usize,
    bones: Vec<(usize, usize)>,
    bone_of_child: Vec<Option<usize>>,
    bone_paths: Vec<Vec<usize>>,
    nonadjacent_pairs: Vec<(usize, usize)>,
    /// Joints in breadth-first order from the root.
    order: Vec<usize>,
}

impl SkeletonTopology {
    /// Validates a parent table and derives bones, root paths and the
    /// non-adjacent pair set.
    pub fn build(parent: &[i64], names: &[impl AsRef<str>], root: usize) -> Result<Self> {
        let j = parent.len();
        if names.len() != j {
            return Err(Error::Shape(format!(
                "{} joint names for {} parent entries",
                names.len(),
                j
            )));
        }
        if j < 2 {
            return Err(Error::Shape(format!("a skeleton needs at least 2 joints, got {j}")));
        }
        if root >= j {
            return Err(Error::Index(format!("root {root} out of range for {j} joints")));
        }
        for (k, &p) in parent.iter().enumerate() {
            if p < -1 || p >= j as i64 {
                return Err(Error::Index(format!("parent[{k}] = {p} out of range")));
            }
        }
        if parent[root] != -1 {
            // Either the walk upwards from the declared root loops, or the
            // declared root is not the root at all.
            let mut seen = vec![false; j];
            let mut k = root;
            loop {
                if seen[k] {
                    return Err(Error::Cycle(k));
                }
                seen[k] = true;
                match parent[k] {
                    -1 => break,
                    p => k = p as usize,
                }
            }
            return Err(Error::Index(format!(
                "declared root {root} has parent {}",
                parent[root]
            )));
        }
        if let Some(other) = (0..j).find(|&k| k != root && parent[k] == -1) {
            return Err(Error::Forest(other));
        }

        let mut children = vec![Vec::new(); j];
        for (k, &p) in parent.iter().enumerate() {
            if p >= 0 {
                children[p as usize].push(k);
            }
        }
        let mut order = Vec::with_capacity(j);
        let mut visited = vec![false; j];
        let mut queue = VecDeque::from([root]);
        visited[root] = true;
        while let Some(k) = queue.pop_front() {
            order.push(k);
            for &c in &children[k] {
                if visited[c] {
                    return Err(Error::Cycle(c));
                }
                visited[c] = true;
                queue.push_back(c);
            }
        }
        if let Some(unreached) = visited.iter().position(|v| !v) {
            return Err(Error::Forest(unreached));
        }

        let mut bones = Vec::with_capacity(j - 1);
        let mut bone_of_child = vec![None; j];
        for (k, &p) in parent.iter().enumerate() {
            if p >= 0 {
                bone_of_child[k] = Some(bones.len());
                bones.push((p as usize, k));
            }
        }

        let mut bone_paths = vec![Vec::new(); j];
        for &k in &order {
            if let Some(b) = bone_of_child[k] {
                let mut path = bone_paths[bones[b].0].clone();
                path.push(b);
                bone_paths[k] = path;
            }
        }

        let mut nonadjacent_pairs = Vec::new();
        for a in 0..j {
            for b in a + 1..j {
                let adjacent = parent[b] == a as i64 || parent[a] == b as i64;
                if !adjacent {
                    nonadjacent_pairs.push((a, b));
                }
            }
        }

        Ok(Self {
            joint_names: names.iter().map(|n| n.as_ref().to_string()).collect(),
            parent: parent.to_vec(),
            root,
            bones,
            bone_of_child,
            bone_paths,
            nonadjacent_pairs,
            order,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.parent.len()
    }

    pub fn num_bones(&self) -> usize {
        self.bones.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self) -> &[i64] {
        &self.parent
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    /// `(parent, child)` pairs ordered by child index.
    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    pub fn bone_of_child(&self, joint: usize) -> Option<usize> {
        self.bone_of_child[joint]
    }

    /// Bones on the path from the root to `joint`, root side first.
    pub fn bone_path(&self, joint: usize) -> &[usize] {
        &self.bone_paths[joint]
    }

    /// Joint pairs `(a, b)`, `a < b`, not directly connected by a bone.
    pub fn nonadjacent_pairs(&self) -> &[(usize, usize)] {
        &self.nonadjacent_pairs
    }

    /// Signed bone membership for the shift from `from` to `to`: `+1` for
    /// bones only on the path to `to`, `-1` for bones only on the path to
    /// `from`. Shared path prefixes cancel.
    pub fn shift_coefficients(&self, from: usize, to: usize) -> Vec<f64> {
        let mut coeff = vec![0.0; self.num_bones()];
        for &b in self.bone_path(to) {
            coeff[b] += 1.0;
        }
        for &b in self.bone_path(from) {
            coeff[b] -= 1.0;
        }
        coeff
    }

    /// Mirror partner of each bone: bones whose child joints are named alike
    /// except for a leading `L` / `R`.
    pub fn mirror_bones(&self) -> Vec<Option<usize>> {
        let flip = |name: &str| match name.as_bytes().first() {
            Some(b'L') => Some(format!("R{}", &name[1..])),
            Some(b'R') => Some(format!("L{}", &name[1..])),
            _ => None,
        };
        self.bones
            .iter()
            .map(|&(_, c)| {
                let target = flip(&self.joint_names[c])?;
                let k = self.joint_names.iter().position(|n| *n == target)?;
                self.bone_of_child(k)
            })
            .collect()
    }

    /// Stable identifier used to tag dataset files.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in self.joint_names.iter().zip(&self.parent) {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            hasher.update(p.to_le_bytes());
        }
        hasher.update((self.root as u64).to_le_bytes());
        hex::encode(&hasher.finalize()[..8])
    }
}

/// Root-relative 3D joint positions in millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose3D {
    pub joints: Vec<Vec3>,
}

impl Pose3D {
    pub fn new(joints: Vec<Vec3>) -> Self {
        Self { joints }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    /// Flattened `[x0, y0, z0, x1, ...]`.
    pub fn flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self { joints: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() }
    }
}

/// Per-bone lengths (mm) and unit directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneRepresentation {
    pub lengths: Vec<f64>,
    pub directions: Vec<Vec3>,
}

impl BoneRepresentation {
    pub fn flat_directions(&self) -> Vec<f64> {
        self.directions.iter().flatten().copied().collect()
    }
}

#[inline]
pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn norm3(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn check_joint_count(pose: &Pose3D, topo: &SkeletonTopology) -> Result<()> {
    if pose.num_joints() != topo.num_joints() {
        return Err(Error::Shape(format!(
            "pose has {} joints, topology has {}",
            pose.num_joints(),
            topo.num_joints()
        )));
    }
    Ok(())
}

/// Converts joint positions into bone lengths and unit directions.
pub fn decompose(pose: &Pose3D, topo: &SkeletonTopology) -> Result<BoneRepresentation> {
    check_joint_count(pose, topo)?;
    let mut lengths = Vec::with_capacity(topo.num_bones());
    let mut directions = Vec::with_capacity(topo.num_bones());
    for (b, &(p, c)) in topo.bones().iter().enumerate() {
        let v = sub3(pose.joints[c], pose.joints[p]);
        let len = norm3(v);
        if len < DEGENERATE_BONE_MM {
            return Err(Error::DegenerateBone { bone: b, length: len });
        }
        lengths.push(len);
        directions.push([v[0] / len, v[1] / len, v[2] / len]);
    }
    Ok(BoneRepresentation { lengths, directions })
}

/// Bone lengths of a pose with degenerate bones clamped instead of rejected.
/// Returns the lengths and whether any bone was clamped.
pub fn bone_lengths_clamped(joints: &[f64], topo: &SkeletonTopology) -> (Vec<f64>, bool) {
    let mut degenerate = false;
    let lengths = topo
        .bones()
        .iter()
        .map(|&(p, c)| {
            let v = [
                joints[3 * c] - joints[3 * p],
                joints[3 * c + 1] - joints[3 * p + 1],
                joints[3 * c + 2] - joints[3 * p + 2],
            ];
            let len = norm3(v);
            if len < DEGENERATE_BONE_MM {
                degenerate = true;
                DEGENERATE_BONE_MM
            } else {
                len
            }
        })
        .collect();
    (lengths, degenerate)
}

fn unit_direction(bone: usize, d: Vec3) -> Result<Vec3> {
    let n = norm3(d);
    if n < 1e-6 {
        return Err(Error::ZeroDirection(bone));
    }
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        Ok([d[0] / n, d[1] / n, d[2] / n])
    } else {
        Ok(d)
    }
}

/// Recomposes joint positions: each joint is the sum of `direction * length`
/// over the bones on its root path. The root lands at the origin.
pub fn compose(bones: &BoneRepresentation, topo: &SkeletonTopology) -> Result<Pose3D> {
    let nb = topo.num_bones();
    if bones.lengths.len() != nb || bones.directions.len() != nb {
        return Err(Error::Shape(format!(
            "expected {nb} bones, got {} lengths and {} directions",
            bones.lengths.len(),
            bones.directions.len()
        )));
    }
    let mut vectors = Vec::with_capacity(nb);
    for b in 0..nb {
        let d = unit_direction(b, bones.directions[b])?;
        let l = bones.lengths[b];
        vectors.push([d[0] * l, d[1] * l, d[2] * l]);
    }
    // Breadth-first accumulation sums each root path in root-to-leaf order.
    let mut joints = vec![[0.0; 3]; topo.num_joints()];
    for &k in &topo.order {
        if let Some(b) = topo.bone_of_child(k) {
            let p = topo.bones()[b].0;
            let v = vectors[b];
            joints[k] = [joints[p][0] + v[0], joints[p][1] + v[1], joints[p][2] + v[2]];
        }
    }
    Ok(Pose3D { joints })
}

/// Relative shift `J_b - J_a` for every requested pair `(a, b)`, derived from
/// the bone representation.
pub fn joint_shifts(
    bones: &BoneRepresentation,
    topo: &SkeletonTopology,
    pairs: &[(usize, usize)],
) -> Result<Vec<((usize, usize), Vec3)>> {
    let pose = compose(bones, topo)?;
    pairs
        .iter()
        .map(|&(a, b)| {
            if a >= topo.num_joints() || b >= topo.num_joints() {
                return Err(Error::Index(format!("pair ({a}, {b}) out of range")));
            }
            Ok(((a, b), sub3(pose.joints[b], pose.joints[a])))
        })
        .collect()
}

/// Ground-truth shifts over the topology's non-adjacent pairs, flattened.
pub fn pose_shifts_flat(pose: &Pose3D, topo: &SkeletonTopology) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * topo.nonadjacent_pairs().len());
    for &(a, b) in topo.nonadjacent_pairs() {
        out.extend_from_slice(&sub3(pose.joints[b], pose.joints[a]));
    }
    out
}

/// Keeps every bone direction of `pose` and replaces the lengths.
pub fn rescale_pose(pose: &Pose3D, new_lengths: &[f64], topo: &SkeletonTopology) -> Result<Pose3D> {
    if new_lengths.len() != topo.num_bones() {
        return Err(Error::Shape(format!(
            "expected {} lengths, got {}",
            topo.num_bones(),
            new_lengths.len()
        )));
    }
    if let Some(b) = new_lengths.iter().position(|&l| l.is_nan() || l <= 0.0) {
        return Err(Error::DegenerateBone { bone: b, length: new_lengths[b] });
    }
    let mut rep = decompose(pose, topo)?;
    rep.lengths.copy_from_slice(new_lengths);
    compose(&rep, topo)
}

/// Topology together with the anthropometric defaults the synthetic
/// generator needs.
#[derive(Debug, Clone)]
pub struct SkeletonPreset {
    pub name: &'static str,
    pub topology: SkeletonTopology,
    /// Mean bone lengths in mm, indexed by bone.
    pub base_lengths: Vec<f64>,
    /// Rest-pose bone directions in world coordinates (z up).
    pub rest_directions: Vec<Vec3>,
    /// Mirror partner of each bone, if any.
    pub mirror: Vec<Option<usize>>,
    /// Peak angular deflection from the rest direction, radians.
    pub motion_amplitude: Vec<f64>,
}

impl SkeletonPreset {
    /// 17-joint layout: pelvis root, spine/thorax/neck/head chain, legs
    /// (hip-knee-ankle) and arms (shoulder-elbow-wrist) on both sides.
    pub fn h36m17() -> Self {
        let names = [
            "Pelvis", "RHip", "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle", "Spine", "Thorax",
            "Neck", "Head", "LShoulder", "LElbow", "LWrist", "RShoulder", "RElbow", "RWrist",
        ];
        let parent = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];
        let topology = SkeletonTopology::build(&parent, &names, 0).expect("static topology");
        // Bone b has child joint b + 1.
        let base_lengths = vec![
            132.0, 442.0, 454.0, 132.0, 442.0, 454.0, 233.0, 257.0, 121.0, 115.0, 151.0, 278.0,
            251.0, 151.0, 278.0, 251.0,
        ];
        let down = [0.0, 0.0, -1.0];
        let up = [0.0, 0.0, 1.0];
        let rest_directions = vec![
            [-1.0, 0.0, 0.0],
            down,
            down,
            [1.0, 0.0, 0.0],
            down,
            down,
            up,
            up,
            [0.0, -0.287, 0.958],
            up,
            [1.0, 0.0, 0.0],
            down,
            down,
            [-1.0, 0.0, 0.0],
            down,
            down,
        ];
        let mut mirror = vec![None; 16];
        for (a, b) in [(0, 3), (1, 4), (2, 5), (10, 13), (11, 14), (12, 15)] {
            mirror[a] = Some(b);
            mirror[b] = Some(a);
        }
        let motion_amplitude = vec![
            0.15, 0.6, 0.7, 0.15, 0.6, 0.7, 0.3, 0.25, 0.35, 0.35, 0.15, 1.0, 1.1, 0.15, 1.0, 1.1,
        ];
        Self {
            name: "h36m17",
            topology,
            base_lengths,
            rest_directions,
            mirror,
            motion_amplitude,
        }
    }

    /// 14-joint variant without spine and head joints.
    pub fn mpi14() -> Self {
        let names = [
            "Pelvis", "RHip", "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle", "Thorax",
            "LShoulder", "LElbow", "LWrist", "RShoulder", "RElbow", "RWrist",
        ];
        let parent = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 7, 11, 12];
        let topology = SkeletonTopology::build(&parent, &names, 0).expect("static topology");
        let base_lengths = vec![
            132.0, 442.0, 454.0, 132.0, 442.0, 454.0, 490.0, 151.0, 278.0, 251.0, 151.0, 278.0,
            251.0,
        ];
        let down = [0.0, 0.0, -1.0];
        let rest_directions = vec![
            [-1.0, 0.0, 0.0],
            down,
            down,
            [1.0, 0.0, 0.0],
            down,
            down,
            [0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0],
            down,
            down,
            [-1.0, 0.0, 0.0],
            down,
            down,
        ];
        let mut mirror = vec![None; 13];
        for (a, b) in [(0, 3), (1, 4), (2, 5), (7, 10), (8, 11), (9, 12)] {
            mirror[a] = Some(b);
            mirror[b] = Some(a);
        }
        let motion_amplitude =
            vec![0.15, 0.6, 0.7, 0.15, 0.6, 0.7, 0.3, 0.15, 1.0, 1.1, 0.15, 1.0, 1.1];
        Self {
            name: "mpi14",
            topology,
            base_lengths,
            rest_directions,
            mirror,
            motion_amplitude,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "h36m17" => Ok(Self::h36m17()),
            "mpi14" => Ok(Self::mpi14()),
            other => Err(Error::Config(format!("unknown skeleton preset `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> SkeletonTopology {
        SkeletonTopology::build(&[-1, 0, 1], &["Pelvis", "Spine", "Head"], 0).unwrap()
    }

    fn fork() -> SkeletonTopology {
        SkeletonTopology::build(&[-1, 0, 0], &["Pelvis", "A", "B"], 0).unwrap()
    }

    #[test]
    fn chain_topology() {
        let t = chain();
        assert_eq!(t.bones(), &[(0, 1), (1, 2)]);
        assert_eq!(t.nonadjacent_pairs(), &[(0, 2)]);
        assert!(t.bone_path(0).is_empty());
        assert_eq!(t.bone_path(2), &[0, 1]);
    }

    #[test]
    fn fork_topology() {
        let t = fork();
        assert_eq!(t.bones(), &[(0, 1), (0, 2)]);
        assert_eq!(t.nonadjacent_pairs(), &[(1, 2)]);
    }

    #[test]
    fn disconnected_cycle_is_a_forest() {
        let err = SkeletonTopology::build(&[-1, 2, 1], &["a", "b", "c"], 0).unwrap_err();
        assert!(matches!(err, Error::Forest(_)), "{err}");
    }

    #[test]
    fn second_root_is_a_forest() {
        let err = SkeletonTopology::build(&[-1, 0, -1], &["a", "b", "c"], 0).unwrap_err();
        assert!(matches!(err, Error::Forest(2)));
    }

    #[test]
    fn root_inside_cycle() {
        let err = SkeletonTopology::build(&[1, 0, 0], &["a", "b", "c"], 0).unwrap_err();
        assert!(matches!(err, Error::Cycle(_)));
    }

    #[test]
    fn out_of_range_parent() {
        let err = SkeletonTopology::build(&[-1, 5, 0], &["a", "b", "c"], 0).unwrap_err();
        assert!(matches!(err, Error::Index(_)));
    }

    #[test]
    fn preset_pair_counts() {
        let h = SkeletonPreset::h36m17();
        assert_eq!(h.topology.num_bones(), 16);
        // 17 choose 2 minus 16 bones.
        assert_eq!(h.topology.nonadjacent_pairs().len(), 136 - 16);
        let m = SkeletonPreset::mpi14();
        assert_eq!(m.topology.num_bones(), 13);
        for p in [&h, &m] {
            assert_eq!(p.base_lengths.len(), p.topology.num_bones());
            assert_eq!(p.rest_directions.len(), p.topology.num_bones());
            assert_eq!(p.topology.mirror_bones(), p.mirror);
            for (a, b) in p.mirror.iter().enumerate() {
                if let Some(b) = b {
                    assert_eq!(p.mirror[*b], Some(a));
                    assert_eq!(p.base_lengths[a], p.base_lengths[*b]);
                }
            }
        }
    }

    #[test]
    fn decompose_chain() {
        let pose = Pose3D::new(vec![[0.0; 3], [0.0, 100.0, 0.0], [0.0, 200.0, 0.0]]);
        let rep = decompose(&pose, &chain()).unwrap();
        assert_eq!(rep.lengths, vec![100.0, 100.0]);
        assert_eq!(rep.directions, vec![[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(compose(&rep, &chain()).unwrap(), pose);
    }

    #[test]
    fn decompose_three_four_five() {
        let pose = Pose3D::new(vec![[0.0; 3], [30.0, 40.0, 0.0], [30.0, 40.0, 10.0]]);
        let rep = decompose(&pose, &chain()).unwrap();
        assert_eq!(rep.lengths[0], 50.0);
        assert!((rep.directions[0][0] - 0.6).abs() < 1e-15);
        assert!((rep.directions[0][1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_length_bone_rejected() {
        let pose = Pose3D::new(vec![[0.0; 3], [0.0; 3], [0.0, 1.0, 0.0]]);
        assert!(matches!(
            decompose(&pose, &chain()),
            Err(Error::DegenerateBone { bone: 0, .. })
        ));
    }

    #[test]
    fn compose_two_term_sum() {
        let rep = BoneRepresentation {
            lengths: vec![50.0, 50.0],
            directions: vec![[0.6, 0.8, 0.0], [0.0, 0.0, 1.0]],
        };
        let pose = compose(&rep, &chain()).unwrap();
        let j2 = pose.joints[2];
        for (got, want) in j2.iter().zip([30.0, 40.0, 50.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_renormalizes_and_rejects_zero() {
        let rep = BoneRepresentation {
            lengths: vec![10.0, 10.0],
            directions: vec![[0.0, 2.0, 0.0], [0.0, 0.0, 1.0]],
        };
        assert_eq!(compose(&rep, &chain()).unwrap().joints[1], [0.0, 10.0, 0.0]);
        let rep = BoneRepresentation {
            lengths: vec![10.0, 10.0],
            directions: vec![[0.0, 1e-9, 0.0], [0.0, 0.0, 1.0]],
        };
        assert!(matches!(compose(&rep, &chain()), Err(Error::ZeroDirection(0))));
    }

    #[test]
    fn shifts_chain_and_fork() {
        let pose = Pose3D::new(vec![[0.0; 3], [0.0, 100.0, 0.0], [0.0, 200.0, 0.0]]);
        let rep = decompose(&pose, &chain()).unwrap();
        let s = joint_shifts(&rep, &chain(), &[(0, 2)]).unwrap();
        assert_eq!(s[0].1, [0.0, 200.0, 0.0]);

        let pose = Pose3D::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let rep = decompose(&pose, &fork()).unwrap();
        let s = joint_shifts(&rep, &fork(), &[(1, 2)]).unwrap();
        assert_eq!(s[0].1, [-1.0, 1.0, 0.0]);
    }

    #[test]
    fn shift_coefficients_cancel_shared_prefix() {
        let t = SkeletonPreset::h36m17().topology;
        // LWrist (13) from RWrist (16): both paths share pelvis->spine->thorax.
        let c = t.shift_coefficients(16, 13);
        assert_eq!(c[6], 0.0);
        assert_eq!(c[7], 0.0);
        assert_eq!(c[12], 1.0);
        assert_eq!(c[15], -1.0);
    }

    #[test]
    fn rescale_single_bone() {
        let pose = Pose3D::new(vec![[0.0; 3], [0.0, 100.0, 0.0], [0.0, 200.0, 0.0]]);
        let out = rescale_pose(&pose, &[200.0, 100.0], &chain()).unwrap();
        assert_eq!(out.joints, vec![[0.0; 3], [0.0, 200.0, 0.0], [0.0, 300.0, 0.0]]);
        assert_eq!(rescale_pose(&pose, &[100.0, 100.0], &chain()).unwrap(), pose);
    }

    #[test]
    fn topology_hash_distinguishes_layouts() {
        assert_ne!(
            SkeletonPreset::h36m17().topology.hash(),
            SkeletonPreset::mpi14().topology.hash()
        );
        assert_eq!(chain().hash(), chain().hash());
    }
}
