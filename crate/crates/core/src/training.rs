//! Loss stack, Adam optimizer, deterministic training loop, and the two
//! shape-personalization paths (measured-scale calibration and median of
//! per-frame shape estimates).
//!
//! The position loss runs forward kinematics on both the prediction and the
//! ground truth, with the predicted root placed by [`root_from_head`], so
//! shape errors surface as joint-position errors instead of needing direct
//! shape supervision. Gradients flow back through FK and the 6D decode.
//!
//! Determinism contract: given the same seed, dataset and config, training
//! produces bit-identical weights. Epoch shuffles are seeded by
//! `(seed, epoch)`, random hand masks by `(seed, iteration, batch slot)`,
//! and batch gradients accumulate in slot order, so no state depends on
//! timing. A resumed run replays the identical stream from its iteration.

use std::io::Read as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{build_window_features_in_mode, FeatureError, FEATURE_LAYOUT_VERSION};
use crate::fov::{random_mask, visibility_mask, FovConfig, VisibilityMask};
use crate::ingest::{extract_three_point, IngestError, MotionSequence, ThreePointTrack};
use crate::math::{matrix_to_rot6d, rot6d_to_matrix, rot6d_to_matrix_vjp, MathError};
use crate::network::{
    Layout, ModelConfig, Network, NetworkError, Params, PoseOutput, WeightSet, OUTPUT_DIM,
};
use crate::skeleton::{
    fk_backward, forward_kinematics, root_from_head, BodyPose, ShapeParams, SkeletonModel,
};
use crate::{Vec3d, NUM_JOINTS, NUM_LOCAL_JOINTS, SHAPE_DIM};

const CHECKPOINT_MAGIC: &[u8; 4] = b"EPCK";
const CHECKPOINT_VERSION: u32 = 1;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset contains no usable training windows")]
    EmptyDataset,
    #[error("calibration measurements must be positive")]
    NonPositiveMeasurement,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate rotation output: {0}")]
    Math(#[from] MathError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match this run: {0}")]
    ConfigMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn default_lambda_ori() -> f64 {
    0.05
}
fn default_lambda_rot() -> f64 {
    1.0
}
fn default_lambda_pos() -> f64 {
    1.0
}
fn default_lambda_beta() -> f64 {
    0.01
}

/// Loss term weights. The rotation and position terms are per-element means,
/// the shape term is a plain L1 norm of the 16 coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(default = "default_lambda_ori")]
    pub lambda_ori: f64,
    #[serde(default = "default_lambda_rot")]
    pub lambda_rot: f64,
    #[serde(default = "default_lambda_pos")]
    pub lambda_pos: f64,
    #[serde(default = "default_lambda_beta")]
    pub lambda_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ori: default_lambda_ori(),
            lambda_rot: default_lambda_rot(),
            lambda_pos: default_lambda_pos(),
            lambda_beta: default_lambda_beta(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        let all = [self.lambda_ori, self.lambda_rot, self.lambda_pos, self.lambda_beta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TrainError::ShapeMismatch(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn default_batch_size() -> usize {
    256
}
fn default_lr0() -> f64 {
    1e-4
}
fn default_decay_factor() -> f64 {
    0.5
}
fn default_decay_every() -> u64 {
    20_000
}
fn default_max_iters() -> u64 {
    2000
}
fn default_stride() -> usize {
    1
}
fn default_checkpoint_every() -> u64 {
    0
}
fn default_log_every() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: u64,
    #[serde(default = "default_max_iters")]
    pub max_iters: u64,
    #[serde(default)]
    pub seed: u64,
    /// Window start stride within each sequence.
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Checkpoint cadence in iterations; 0 disables periodic checkpoints.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Keep every n-th log entry (the last iteration is always kept).
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            lr0: default_lr0(),
            decay_factor: default_decay_factor(),
            decay_every: default_decay_every(),
            max_iters: default_max_iters(),
            seed: 0,
            stride: default_stride(),
            checkpoint_every: default_checkpoint_every(),
            log_every: default_log_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0
            || self.stride == 0
            || self.max_iters == 0
            || self.decay_every == 0
            || !(self.lr0 > 0.0)
            || !(self.decay_factor > 0.0)
        {
            return Err(TrainError::ShapeMismatch(
                "batch_size, stride, max_iters, decay_every, lr0 and decay_factor must be positive"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Hand-visibility corruption applied to training windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MaskStrategy {
    /// Track visibility used as-is.
    None,
    /// Each hand hidden independently per frame with probability `p`.
    Random { p: f64 },
    /// Geometric visibility under a simulated headset frustum.
    Fov { config: FovConfig },
}

/// One training run configuration; this struct is the JSON run-config schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default = "default_strategy")]
    pub strategy: MaskStrategy,
}

fn default_strategy() -> MaskStrategy {
    MaskStrategy::None
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub ori: f64,
    pub rot: f64,
    pub pos: f64,
    pub beta: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ori: f64,
    pub rot: f64,
    pub pos: f64,
    pub beta: f64,
}

/// Supervision target for one window: the pose of its last frame plus the
/// tracked head position that anchors the predicted root.
pub struct LossTarget<'a> {
    pub gt_pose: &'a BodyPose,
    pub gt_shape: &'a ShapeParams,
    pub tracked_head: Vec3d,
}

/// Mean L1 joint-position error between the predicted and ground-truth
/// bodies, both through forward kinematics. The predicted root is placed so
/// the predicted head lands on `tracked_head`, so a shared world offset with
/// a matched head contributes nothing.
pub fn loss_pos(
    model: &SkeletonModel,
    pred: &PoseOutput,
    target: &LossTarget,
) -> Result<f64, TrainError> {
    let (loss, _) = loss_and_grad(model, pred, target, &LossWeights {
        lambda_ori: 0.0,
        lambda_rot: 0.0,
        lambda_pos: 1.0,
        lambda_beta: 0.0,
    })?;
    Ok(loss.pos)
}

/// Weighted total loss with its component breakdown.
pub fn loss_total(
    model: &SkeletonModel,
    pred: &PoseOutput,
    target: &LossTarget,
    weights: &LossWeights,
) -> Result<LossBreakdown, TrainError> {
    Ok(loss_and_grad(model, pred, target, weights)?.0)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Total loss plus its gradient with respect to the 148 network outputs
/// (layout: 6 root 6D, 21×6 local 6D, 16 shape).
pub fn loss_and_grad(
    model: &SkeletonModel,
    pred: &PoseOutput,
    target: &LossTarget,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
    let mut grad = vec![0.0f64; OUTPUT_DIM];

    // Decode predicted rotations.
    let pred_root = rot6d_to_matrix(&pred.root_orientation)?;
    let mut pred_locals = [crate::Mat3d::identity(); NUM_LOCAL_JOINTS];
    for j in 0..NUM_LOCAL_JOINTS {
        pred_locals[j] = rot6d_to_matrix(&pred.local_rotations[j])?;
    }

    // Ground-truth rotations in 6D for the direct rotation losses.
    let gt_root6 = matrix_to_rot6d(&target.gt_pose.root_orientation);
    let mut l_ori = 0.0;
    for c in 0..6 {
        let d = pred.root_orientation.v[c] - gt_root6.v[c];
        l_ori += d.abs();
        grad[c] += weights.lambda_ori * sign(d) / 6.0;
    }
    l_ori /= 6.0;

    let mut l_rot = 0.0;
    let rot_n = (NUM_LOCAL_JOINTS * 6) as f64;
    for j in 0..NUM_LOCAL_JOINTS {
        let gt6 = matrix_to_rot6d(&target.gt_pose.local_rotations[j]);
        for c in 0..6 {
            let d = pred.local_rotations[j].v[c] - gt6.v[c];
            l_rot += d.abs();
            grad[6 + 6 * j + c] += weights.lambda_rot * sign(d) / rot_n;
        }
    }
    l_rot /= rot_n;

    // Position loss through FK. The prediction runs with the root at the
    // origin; head anchoring is a pure translation folded in afterwards.
    let pose0 = BodyPose {
        root_position: Vec3d::zero(),
        root_orientation: pred_root,
        local_rotations: pred_locals,
    };
    let fk_pred = forward_kinematics(model, &pose0, &pred.shape);
    let fk_gt = forward_kinematics(model, target.gt_pose, target.gt_shape);
    let shift = target.tracked_head - fk_pred.joint_position[model.head_joint];

    let pos_n = (NUM_JOINTS * 3) as f64;
    let mut l_pos = 0.0;
    let mut d_positions = [Vec3d::zero(); NUM_JOINTS];
    let mut head_pull = Vec3d::zero();
    for j in 0..NUM_JOINTS {
        let pred_p = fk_pred.joint_position[j] + shift;
        let diff = pred_p - fk_gt.joint_position[j];
        l_pos += diff.x.abs() + diff.y.abs() + diff.z.abs();
        let s = Vec3d::new(sign(diff.x), sign(diff.y), sign(diff.z))
            .scale(weights.lambda_pos / pos_n);
        d_positions[j] += s;
        head_pull += s;
    }
    l_pos /= pos_n;
    // shift depends on the predicted head position: d shift = -d fk_head.
    d_positions[model.head_joint] += -head_pull;

    let fk_grad = fk_backward(model, &pose0, &pred.shape, &d_positions);

    // Route matrix gradients through the 6D decode.
    let g6 = rot6d_to_matrix_vjp(&pred.root_orientation, &fk_grad.d_root_orientation)?;
    for c in 0..6 {
        grad[c] += g6[c];
    }
    for j in 0..NUM_LOCAL_JOINTS {
        let gj = rot6d_to_matrix_vjp(&pred.local_rotations[j], &fk_grad.d_local_rotations[j])?;
        for c in 0..6 {
            grad[6 + 6 * j + c] += gj[c];
        }
    }

    let mut l_beta = 0.0;
    for k in 0..SHAPE_DIM {
        let b = pred.shape.beta[k];
        l_beta += b.abs();
        grad[6 + 6 * NUM_LOCAL_JOINTS + k] += fk_grad.d_beta[k] + weights.lambda_beta * sign(b);
    }

    let breakdown = LossBreakdown {
        ori: l_ori,
        rot: l_rot,
        pos: l_pos,
        beta: l_beta,
        total: weights.lambda_ori * l_ori
            + weights.lambda_rot * l_rot
            + weights.lambda_pos * l_pos
            + weights.lambda_beta * l_beta,
    };
    Ok((breakdown, grad))
}

/// Adam first/second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> AdamState {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "params {} / grads {} / state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Step-decay schedule: `lr0 · factor^⌊iter / every⌋`.
pub fn lr_schedule(iteration: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((iteration / cfg.decay_every) as i32)
}

/// Resumable optimizer snapshot: full-precision parameters and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub setup: TrainSetup,
    pub iter: u64,
    pub params: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let json = serde_json::to_vec(&self.setup).map_err(|e| TrainError::Format(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&FEATURE_LAYOUT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        buf.extend_from_slice(&self.iter.to_le_bytes());
        for arr in [&self.params, &self.m, &self.v] {
            buf.extend_from_slice(&(arr.len() as u64).to_le_bytes());
            for v in arr.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("epck.tmp");
        std::fs::write(&tmp, &buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], TrainError> {
            let s = bytes
                .get(*pos..*pos + n)
                .ok_or_else(|| TrainError::Format("unexpected end of file".into()))?;
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Format("bad magic, not an .epck file".into()));
        }
        let u32_at = |pos: &mut usize| -> Result<u32, TrainError> {
            let b = take(pos, 4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let version = u32_at(&mut pos)?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::ConfigMismatch(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let flv = u32_at(&mut pos)?;
        if flv != FEATURE_LAYOUT_VERSION {
            return Err(TrainError::ConfigMismatch(format!(
                "checkpoint built for feature layout {flv}, this build uses {FEATURE_LAYOUT_VERSION}"
            )));
        }
        let json_len = u32_at(&mut pos)? as usize;
        let setup: TrainSetup = serde_json::from_slice(take(&mut pos, json_len)?)
            .map_err(|e| TrainError::Format(format!("bad setup json: {e}")))?;
        let iter = {
            let b = take(&mut pos, 8)?;
            u64::from_le_bytes(b.try_into().expect("8 bytes"))
        };
        let read_arr = |pos: &mut usize| -> Result<Vec<f64>, TrainError> {
            let n = {
                let b = take(pos, 8)?;
                u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize
            };
            let raw = take(pos, n * 8)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let params = read_arr(&mut pos)?;
        let m = read_arr(&mut pos)?;
        let v = read_arr(&mut pos)?;
        if pos != bytes.len() {
            return Err(TrainError::Format(format!(
                "{} trailing bytes",
                bytes.len() - pos
            )));
        }
        let want = Layout::new(&setup.model).total;
        if params.len() != want || m.len() != want || v.len() != want {
            return Err(TrainError::ConfigMismatch(format!(
                "checkpoint arrays have {} values, config layout needs {want}",
                params.len()
            )));
        }
        Ok(Checkpoint { setup, iter, params, m, v })
    }
}

pub struct TrainOutcome {
    pub weights: WeightSet,
    pub log: Vec<TrainLogEntry>,
    pub final_state: Checkpoint,
}

struct SeqData {
    track: ThreePointTrack,
    /// Full-track FoV mask, precomputed when the strategy needs it.
    fov_mask: Option<VisibilityMask>,
}

fn mask_seed(seed: u64, iter: u64, slot: usize) -> u64 {
    seed.wrapping_add((iter + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((slot as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ (epoch + 1).wrapping_mul(0x5851_F42D_4C95_7F2D)
}

/// Runs (or resumes) one training job. Deterministic in the setup seed.
pub fn train(
    setup: &TrainSetup,
    model: &SkeletonModel,
    dataset: &[MotionSequence],
    resume: Option<Checkpoint>,
    mut on_checkpoint: Option<&mut dyn FnMut(&Checkpoint) -> Result<(), TrainError>>,
) -> Result<TrainOutcome, TrainError> {
    setup.model.validate()?;
    setup.train.validate()?;
    setup.loss.validate()?;
    let tau = setup.model.tau;
    let cfg = &setup.train;

    // Per-sequence tracks, plus window index (sequence, start).
    let mut seqs = Vec::new();
    let mut windows: Vec<(u32, u32)> = Vec::new();
    for seq in dataset {
        let track = extract_three_point(seq, model);
        let fov_mask = match &setup.strategy {
            MaskStrategy::Fov { config } => Some(visibility_mask(config, &track)),
            _ => None,
        };
        let si = seqs.len() as u32;
        if seq.len() >= tau {
            let mut start = 0usize;
            while start + tau <= seq.len() {
                windows.push((si, start as u32));
                start += cfg.stride;
            }
        }
        seqs.push(SeqData { track, fov_mask });
    }
    if windows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let (mut params_vec, mut adam, start_iter) = match resume {
        Some(ckpt) => {
            if ckpt.setup != *setup {
                return Err(TrainError::ConfigMismatch(
                    "checkpoint setup differs from the requested run".into(),
                ));
            }
            let adam = AdamState { m: ckpt.m, v: ckpt.v, t: ckpt.iter };
            (ckpt.params, adam, ckpt.iter)
        }
        None => {
            let params: Params<f64> = crate::network::init_params(&setup.model)?;
            let n = params.data.len();
            (params.data, AdamState::new(n), 0)
        }
    };

    let mut net: Network<f64> = Network::new(setup.model.clone(), Params { data: params_vec })?;
    let n_windows = windows.len() as u64;
    let mut perm: Vec<u32> = (0..windows.len() as u32).collect();
    let mut perm_epoch = u64::MAX;

    let mut log = Vec::new();
    let started = Instant::now();
    let mut grads = Params::zeros(&net.layout);

    for iter in start_iter..cfg.max_iters {
        let lr = lr_schedule(iter, cfg);
        grads.data.iter_mut().for_each(|g| *g = 0.0);
        let mut sums = LossBreakdown { total: 0.0, ori: 0.0, rot: 0.0, pos: 0.0, beta: 0.0 };

        for slot in 0..cfg.batch_size {
            // Global position in the shuffled window stream; batches may
            // straddle an epoch boundary.
            let cursor = iter * cfg.batch_size as u64 + slot as u64;
            let epoch = cursor / n_windows;
            if epoch != perm_epoch {
                let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
                perm = (0..windows.len() as u32).collect();
                perm.shuffle(&mut rng);
                perm_epoch = epoch;
            }
            let (si, start) = windows[perm[(cursor % n_windows) as usize] as usize];
            let (si, start) = (si as usize, start as usize);
            let sd = &seqs[si];

            let mode = setup.model.feature_mode;
            let window = match &setup.strategy {
                MaskStrategy::None => {
                    build_window_features_in_mode(&sd.track, start, tau, None, mode)?
                }
                MaskStrategy::Random { p } => {
                    let m = random_mask(*p, mask_seed(cfg.seed, iter, slot), tau);
                    build_window_features_in_mode(
                        &sd.track,
                        start,
                        tau,
                        Some((&m.left, &m.right)),
                        mode,
                    )?
                }
                MaskStrategy::Fov { .. } => {
                    let m = sd.fov_mask.as_ref().expect("fov mask precomputed");
                    build_window_features_in_mode(
                        &sd.track,
                        start,
                        tau,
                        Some((&m.left[start..start + tau], &m.right[start..start + tau])),
                        mode,
                    )?
                }
            };

            let end = start + tau - 1;
            let target = LossTarget {
                gt_pose: &dataset[si].frames[end],
                gt_shape: &dataset[si].shape,
                tracked_head: sd.track.head[end].position,
            };

            let (out, cache) = net.forward_cached(&window.frames)?;
            let pred = crate::network::split_output(&out);
            let (bd, d_out) = loss_and_grad(model, &pred, &target, &setup.loss)?;
            sums.total += bd.total;
            sums.ori += bd.ori;
            sums.rot += bd.rot;
            sums.pos += bd.pos;
            sums.beta += bd.beta;
            net.backward(&cache, &d_out, &mut grads);
        }

        let inv_b = 1.0 / cfg.batch_size as f64;
        grads.data.iter_mut().for_each(|g| *g *= inv_b);
        adam_step(&mut net.params.data, &grads.data, &mut adam, lr)?;

        let done = iter + 1;
        if done % cfg.log_every.max(1) == 0 || done == cfg.max_iters {
            log.push(TrainLogEntry {
                iteration: done,
                lr,
                loss: sums.total * inv_b,
                ori: sums.ori * inv_b,
                rot: sums.rot * inv_b,
                pos: sums.pos * inv_b,
                beta: sums.beta * inv_b,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }

        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.max_iters {
            if let Some(sink) = on_checkpoint.as_mut() {
                let ckpt = Checkpoint {
                    setup: setup.clone(),
                    iter: done,
                    params: net.params.data.clone(),
                    m: adam.m.clone(),
                    v: adam.v.clone(),
                };
                sink(&ckpt)?;
            }
        }
    }

    params_vec = net.params.data;
    let weights = WeightSet::from_params(&setup.model, &Params { data: params_vec.clone() });
    let final_state = Checkpoint {
        setup: setup.clone(),
        iter: cfg.max_iters,
        params: params_vec,
        m: adam.m,
        v: adam.v,
    };
    Ok(TrainOutcome { weights, log, final_state })
}

/// Uniform skeleton scale from measured height and arm length: the mean of
/// the two measured/mean-shape ratios.
pub fn calibrate_scale(
    measured_height: f64,
    measured_arm: f64,
    model: &SkeletonModel,
) -> Result<f64, TrainError> {
    if !(measured_height > 0.0) || !(measured_arm > 0.0) {
        return Err(TrainError::NonPositiveMeasurement);
    }
    let (mean_height, mean_arm) = crate::skeleton::t_pose_measurements(model, &ShapeParams::zero());
    Ok(0.5 * (measured_height / mean_height + measured_arm / mean_arm))
}

/// Coordinate-wise median of per-frame shape estimates. Even counts take the
/// mean of the two middle values.
pub fn median_shape(estimates: &[ShapeParams]) -> ShapeParams {
    assert!(!estimates.is_empty(), "median_shape needs at least one estimate");
    let mut beta = [0.0f64; SHAPE_DIM];
    let mut column = Vec::with_capacity(estimates.len());
    for (k, out) in beta.iter_mut().enumerate() {
        column.clear();
        column.extend(estimates.iter().map(|e| e.beta[k]));
        column.sort_by(|a, b| a.partial_cmp(b).expect("finite shape estimates"));
        let n = column.len();
        *out = if n % 2 == 1 {
            column[n / 2]
        } else {
            0.5 * (column[n / 2 - 1] + column[n / 2])
        };
    }
    ShapeParams::new(beta)
}

/// Convenience wrapper used by loss tests and evaluation: prediction joint
/// positions with the root anchored to the tracked head.
pub fn anchored_joint_positions(
    model: &SkeletonModel,
    pred: &PoseOutput,
    tracked_head: Vec3d,
) -> Result<[Vec3d; NUM_JOINTS], TrainError> {
    let root_orientation = rot6d_to_matrix(&pred.root_orientation)?;
    let mut local_rotations = [crate::Mat3d::identity(); NUM_LOCAL_JOINTS];
    for j in 0..NUM_LOCAL_JOINTS {
        local_rotations[j] = rot6d_to_matrix(&pred.local_rotations[j])?;
    }
    let root_position = root_from_head(
        model,
        tracked_head,
        &root_orientation,
        &local_rotations,
        &pred.shape,
    );
    let pose = BodyPose { root_position, root_orientation, local_rotations };
    Ok(forward_kinematics(model, &pose, &pred.shape).joint_position)
}
