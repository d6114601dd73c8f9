//! Parametric 22-joint kinematic model: shape-blended bone offsets, forward
//! kinematics with analytic gradients, proxy surface vertices, body
//! measurements, and head-anchored root recovery.
//!
//! The default model ships as an embedded, versioned JSON document (see
//! `assets/default_skeleton.json`). Shape is a 16-vector β deforming bone
//! offsets linearly: β[0] scales every offset (overall size), β[1] the
//! arm-chain offsets, β[2] the leg chain plus the root elevation; the
//! remaining 13 columns are zero in the shipped model and exist so the
//! estimator has inactive coordinates to regularize.

use serde::Deserialize;
use thiserror::Error;

use crate::math::{compose, Vec3};
use crate::{Mat3d, Vec3d, NUM_JOINTS, NUM_LOCAL_JOINTS, SHAPE_DIM};

const DEFAULT_SKELETON_JSON: &str = include_str!("../assets/default_skeleton.json");
const SKELETON_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("unsupported skeleton version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("malformed skeleton document: {0}")]
    Malformed(String),
    #[error("skeleton file: {0}")]
    Io(#[from] std::io::Error),
}

/// 16 shape coefficients, unitless.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ShapeParams {
    pub beta: [f64; SHAPE_DIM],
}

impl ShapeParams {
    pub fn new(beta: [f64; SHAPE_DIM]) -> Self {
        Self { beta }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.beta.iter().all(|b| b.is_finite())
    }
}

/// Full-body pose: root transform plus one local rotation per non-root joint,
/// indexed by `joint − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyPose {
    pub root_position: Vec3d,
    pub root_orientation: Mat3d,
    pub local_rotations: [Mat3d; NUM_LOCAL_JOINTS],
}

impl BodyPose {
    pub fn t_pose(root_position: Vec3d) -> Self {
        Self {
            root_position,
            root_orientation: Mat3d::identity(),
            local_rotations: [Mat3d::identity(); NUM_LOCAL_JOINTS],
        }
    }
}

/// Global joint transforms produced by [`forward_kinematics`].
#[derive(Clone, Debug)]
pub struct FkResult {
    pub joint_position: [Vec3d; NUM_JOINTS],
    pub joint_orientation: [Mat3d; NUM_JOINTS],
}

#[derive(Deserialize)]
struct SkeletonDoc {
    version: u32,
    joint_names: Vec<String>,
    parents: Vec<i32>,
    head_joint: usize,
    left_hand: usize,
    right_hand: usize,
    mean_offsets: Vec<[f64; 3]>,
    blend: Vec<[[f64; SHAPE_DIM]; 3]>,
    proxies: Vec<Vec<[f64; 3]>>,
}

/// Immutable kinematic model. All operations are pure.
#[derive(Clone, Debug)]
pub struct SkeletonModel {
    pub joint_names: Vec<String>,
    /// Parent of each joint; the root carries `-1`.
    pub parents: [i32; NUM_JOINTS],
    /// T-pose bone vector from parent, in the parent frame. Entry 0 is the
    /// root's rest elevation, used by T-pose measurements only (FK places the
    /// root at the pose's root position).
    pub mean_offsets: [Vec3d; NUM_JOINTS],
    /// Per-joint 3x16 shape blend, meters per β unit.
    pub blend: [[[f64; SHAPE_DIM]; 3]; NUM_JOINTS],
    /// Surface proxy offsets in each bone's local frame.
    pub proxies: Vec<Vec<Vec3d>>,
    pub head_joint: usize,
    pub left_hand: usize,
    pub right_hand: usize,
}

impl SkeletonModel {
    /// Loads the embedded default model.
    pub fn load_default() -> Result<Self, SkeletonError> {
        Self::from_json(DEFAULT_SKELETON_JSON)
    }

    pub fn load_from_path(path: &std::path::Path) -> Result<Self, SkeletonError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, SkeletonError> {
        let doc: SkeletonDoc = serde_json::from_str(text)
            .map_err(|e| SkeletonError::Malformed(e.to_string()))?;
        if doc.version != SKELETON_VERSION {
            return Err(SkeletonError::UnsupportedVersion {
                found: doc.version,
                expected: SKELETON_VERSION,
            });
        }
        let bad = |m: &str| SkeletonError::Malformed(m.to_string());
        if doc.joint_names.len() != NUM_JOINTS
            || doc.parents.len() != NUM_JOINTS
            || doc.mean_offsets.len() != NUM_JOINTS
            || doc.blend.len() != NUM_JOINTS
            || doc.proxies.len() != NUM_JOINTS
        {
            return Err(bad("expected exactly 22 joints in every per-joint list"));
        }

        let mut parents = [0i32; NUM_JOINTS];
        parents.copy_from_slice(&doc.parents);
        let mut roots = 0;
        for (j, &p) in parents.iter().enumerate() {
            if p < 0 {
                roots += 1;
            } else if p as usize >= j {
                // Parents must precede children so one forward pass is a
                // topological order; this also rules out cycles.
                return Err(bad("parent indices must be smaller than the joint index"));
            }
        }
        if roots != 1 || parents[0] != -1 {
            return Err(bad("expected exactly one root at joint 0"));
        }
        for &idx in &[doc.head_joint, doc.left_hand, doc.right_hand] {
            if idx == 0 || idx >= NUM_JOINTS {
                return Err(bad("head/hand joint index out of range"));
            }
        }
        for p in &doc.proxies {
            if p.len() < 2 {
                return Err(bad("every joint needs at least 2 proxy vertices"));
            }
        }

        let mut mean_offsets = [Vec3d::zero(); NUM_JOINTS];
        for (dst, src) in mean_offsets.iter_mut().zip(&doc.mean_offsets) {
            *dst = Vec3::from_array(*src);
        }
        let mut blend = [[[0.0; SHAPE_DIM]; 3]; NUM_JOINTS];
        for (dst, src) in blend.iter_mut().zip(&doc.blend) {
            *dst = *src;
        }
        let proxies = doc
            .proxies
            .iter()
            .map(|list| list.iter().map(|a| Vec3::from_array(*a)).collect())
            .collect();

        let model = Self {
            joint_names: doc.joint_names,
            parents,
            mean_offsets,
            blend,
            proxies,
            head_joint: doc.head_joint,
            left_hand: doc.left_hand,
            right_hand: doc.right_hand,
        };
        let (height, _) = t_pose_measurements(&model, &ShapeParams::zero());
        if !(1.4..=2.1).contains(&height) {
            return Err(bad(&format!(
                "mean T-pose height {height:.3} m outside the sane range [1.4, 2.1]"
            )));
        }
        Ok(model)
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        let p = self.parents[joint];
        (p >= 0).then_some(p as usize)
    }

    pub fn proxy_count(&self) -> usize {
        self.proxies.iter().map(Vec::len).sum()
    }
}

/// Shape-blended bone offsets: `offset_j = mean_j + blend_j · β`.
pub fn bone_offsets(model: &SkeletonModel, shape: &ShapeParams) -> [Vec3d; NUM_JOINTS] {
    let mut out = [Vec3d::zero(); NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        let b = &model.blend[j];
        let mut o = model.mean_offsets[j];
        for k in 0..SHAPE_DIM {
            o.x += b[0][k] * shape.beta[k];
            o.y += b[1][k] * shape.beta[k];
            o.z += b[2][k] * shape.beta[k];
        }
        out[j] = o;
    }
    out
}

/// Pose the skeleton: the root takes the pose's transform directly, every
/// child `j` gets `G_j = G_parent · L_j` and
/// `p_j = p_parent + G_parent · offset_j(β)`.
pub fn forward_kinematics(model: &SkeletonModel, pose: &BodyPose, shape: &ShapeParams) -> FkResult {
    let offsets = bone_offsets(model, shape);
    let mut pos = [Vec3d::zero(); NUM_JOINTS];
    let mut ori = [Mat3d::identity(); NUM_JOINTS];
    pos[0] = pose.root_position;
    ori[0] = pose.root_orientation;
    for j in 1..NUM_JOINTS {
        let p = model.parents[j] as usize;
        pos[j] = pos[p] + ori[p].apply(offsets[j]);
        ori[j] = compose(&ori[p], &pose.local_rotations[j - 1]);
    }
    FkResult {
        joint_position: pos,
        joint_orientation: ori,
    }
}

/// Root position that places the head joint exactly at
/// `tracked_head_position` under the given rotations and shape.
pub fn root_from_head(
    model: &SkeletonModel,
    tracked_head_position: Vec3d,
    root_orientation: &Mat3d,
    local_rotations: &[Mat3d; NUM_LOCAL_JOINTS],
    shape: &ShapeParams,
) -> Vec3d {
    let pose = BodyPose {
        root_position: Vec3d::zero(),
        root_orientation: *root_orientation,
        local_rotations: *local_rotations,
    };
    let fk0 = forward_kinematics(model, &pose, shape);
    tracked_head_position - fk0.joint_position[model.head_joint]
}

/// T-pose body measurements: height is the proxy-vertex z extent, arm length
/// the shoulder→hand bone-length sum (left chain; the blend keeps both arms
/// equal).
pub fn t_pose_measurements(model: &SkeletonModel, shape: &ShapeParams) -> (f64, f64) {
    let offsets = bone_offsets(model, shape);
    let pose = BodyPose::t_pose(offsets[0]);
    let fk = forward_kinematics(model, &pose, shape);
    let verts = proxy_vertices(model, &fk, shape);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in &verts {
        lo = lo.min(v.z);
        hi = hi.max(v.z);
    }
    // left_hand is the wrist; its parent is the elbow.
    let elbow = model.parents[model.left_hand] as usize;
    let arm = offsets[elbow].norm() + offsets[model.left_hand].norm();
    (hi - lo, arm)
}

/// Uniformly scaled copy of a skeleton: bone offsets, shape blend and proxy
/// offsets all multiply by `scale`, so every T-pose measurement scales
/// linearly.
pub fn scaled_model(model: &SkeletonModel, scale: f64) -> SkeletonModel {
    let mut m = model.clone();
    for o in &mut m.mean_offsets {
        *o = o.scale(scale);
    }
    for joint in &mut m.blend {
        for row in joint.iter_mut() {
            for b in row.iter_mut() {
                *b *= scale;
            }
        }
    }
    for joint in &mut m.proxies {
        for p in joint.iter_mut() {
            *p = p.scale(scale);
        }
    }
    m
}

/// Surface proxy vertices for one posed frame. Each offset rides its bone's
/// global transform and scales with the bone's length ratio
/// `‖offset(β)‖ / ‖mean_offset‖`.
pub fn proxy_vertices(model: &SkeletonModel, fk: &FkResult, shape: &ShapeParams) -> Vec<Vec3d> {
    let offsets = bone_offsets(model, shape);
    let mut out = Vec::with_capacity(model.proxy_count());
    for j in 0..NUM_JOINTS {
        let mean_len = model.mean_offsets[j].norm();
        let s = if mean_len > 0.0 {
            offsets[j].norm() / mean_len
        } else {
            1.0
        };
        for q in &model.proxies[j] {
            out.push(fk.joint_position[j] + fk.joint_orientation[j].apply(q.scale(s)));
        }
    }
    out
}

/// Adjoints of [`forward_kinematics`] inputs given adjoints of the joint
/// positions.
#[derive(Clone, Debug)]
pub struct FkGrad {
    pub d_root_position: Vec3d,
    /// Row-major adjoint of the root orientation matrix.
    pub d_root_orientation: [f64; 9],
    pub d_local_rotations: [[f64; 9]; NUM_LOCAL_JOINTS],
    pub d_beta: [f64; SHAPE_DIM],
}

fn outer_add(acc: &mut [f64; 9], a: Vec3d, b: Vec3d) {
    let (av, bv) = (a.to_array(), b.to_array());
    for r in 0..3 {
        for c in 0..3 {
            acc[3 * r + c] += av[r] * bv[c];
        }
    }
}

// Adjoint of C = A · B into A: Ā += C̄ · Bᵀ.
fn matmul_bt_add(acc: &mut [f64; 9], cbar: &[f64; 9], b: &Mat3d) {
    for r in 0..3 {
        for c in 0..3 {
            let mut s = 0.0;
            for k in 0..3 {
                s += cbar[3 * r + k] * b.m[3 * c + k];
            }
            acc[3 * r + c] += s;
        }
    }
}

// Adjoint of C = A · B into B: B̄ = Aᵀ · C̄.
fn at_matmul(a: &Mat3d, cbar: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            let mut s = 0.0;
            for k in 0..3 {
                s += a.m[3 * k + r] * cbar[3 * k + c];
            }
            out[3 * r + c] = s;
        }
    }
    out
}

/// Reverse-mode FK: propagates position adjoints back to the pose inputs and
/// the shape vector. Orientation adjoints of the FK result itself are not
/// taken (the losses read orientations straight from the network outputs).
pub fn fk_backward(
    model: &SkeletonModel,
    pose: &BodyPose,
    shape: &ShapeParams,
    d_positions: &[Vec3d; NUM_JOINTS],
) -> FkGrad {
    let offsets = bone_offsets(model, shape);
    // Re-run the forward pass for the intermediate global transforms.
    let fk = forward_kinematics(model, pose, shape);

    let mut d_pos = *d_positions;
    let mut d_ori = [[0.0f64; 9]; NUM_JOINTS];
    let mut d_offsets = [Vec3d::zero(); NUM_JOINTS];
    let mut grad = FkGrad {
        d_root_position: Vec3d::zero(),
        d_root_orientation: [0.0; 9],
        d_local_rotations: [[0.0; 9]; NUM_LOCAL_JOINTS],
        d_beta: [0.0; SHAPE_DIM],
    };

    // Children have larger indices than parents, so one reverse sweep visits
    // every child before its parent.
    for j in (1..NUM_JOINTS).rev() {
        let p = model.parents[j] as usize;
        let pbar = d_pos[j];
        // p_j = p_parent + G_parent · o_j
        d_pos[p] += pbar;
        outer_add(&mut d_ori[p], pbar, offsets[j]);
        d_offsets[j] += fk.joint_orientation[p].apply_transpose(pbar);
        // G_j = G_parent · L_j
        let gbar = d_ori[j];
        matmul_bt_add(&mut d_ori[p], &gbar, &pose.local_rotations[j - 1]);
        grad.d_local_rotations[j - 1] = at_matmul(&fk.joint_orientation[p], &gbar);
    }
    grad.d_root_position = d_pos[0];
    grad.d_root_orientation = d_ori[0];
    for j in 1..NUM_JOINTS {
        let ob = d_offsets[j].to_array();
        for k in 0..SHAPE_DIM {
            grad.d_beta[k] += model.blend[j][0][k] * ob[0]
                + model.blend[j][1][k] * ob[1]
                + model.blend[j][2][k] * ob[2];
        }
    }
    grad
}
