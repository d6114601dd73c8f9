//! Sequence storage, synthetic motion generation, 3-point track extraction,
//! positional-offset augmentation, and dataset splitting.
//!
//! Sequences are stored as `.epsq` files: a JSON header for humans, then flat
//! little-endian 64-bit floats for bit-exact round-trips (layout documented
//! in the repo README).

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::snap_position;
use crate::math::compose;
use crate::skeleton::{
    forward_kinematics, proxy_vertices, BodyPose, ShapeParams, SkeletonModel,
};
use crate::{Mat3d, Vec3d, NUM_LOCAL_JOINTS};

const MAGIC: &[u8; 4] = b"EPSQ";
const FORMAT_VERSION: u32 = 1;
/// Scalars per stored frame: root position + root orientation + 21 locals.
const FRAME_SCALARS: usize = 3 + 9 + NUM_LOCAL_JOINTS * 9;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("sequence too short: {got} frames (need at least 2)")]
    TooShort { got: usize },
    #[error("invalid motion profile '{0}' (expected walk|reach|idle|mixed)")]
    InvalidProfile(String),
    #[error("too few sequences to split: {0} (need at least 2)")]
    TooFewSequences(usize),
}

/// A full-body motion clip with one constant body shape.
#[derive(Clone, Debug)]
pub struct MotionSequence {
    pub fps: f64,
    pub subject_id: u32,
    pub sequence_id: u32,
    /// β is constant across the clip (one subject per sequence).
    pub shape: ShapeParams,
    pub frames: Vec<BodyPose>,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Shifts every global position; rotations and shape are untouched.
    pub fn apply_offset(&self, offset: Vec3d) -> Self {
        let mut out = self.clone();
        for f in &mut out.frames {
            f.root_position += offset;
        }
        out
    }
}

/// One tracked device pose.
#[derive(Clone, Copy, Debug)]
pub struct TrackedPoint {
    pub position: Vec3d,
    pub orientation: Mat3d,
}

/// The observable input: head and both hands, with per-frame hand visibility.
/// The head is always visible.
#[derive(Clone, Debug)]
pub struct ThreePointTrack {
    pub fps: f64,
    pub head: Vec<TrackedPoint>,
    pub left: Vec<TrackedPoint>,
    pub right: Vec<TrackedPoint>,
    pub left_visible: Vec<bool>,
    pub right_visible: Vec<bool>,
}

impl ThreePointTrack {
    pub fn len(&self) -> usize {
        self.head.len()
    }

    pub fn is_empty(&self) -> bool {
        self.head.is_empty()
    }

    pub fn apply_offset(&self, offset: Vec3d) -> Self {
        let mut out = self.clone();
        for list in [&mut out.head, &mut out.left, &mut out.right] {
            for p in list {
                p.position += offset;
            }
        }
        out
    }
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn save_sequence(seq: &MotionSequence, path: &Path) -> Result<(), IngestError> {
    let header = serde_json::json!({
        "fps": seq.fps,
        "frame_count": seq.frames.len(),
        "subject_id": seq.subject_id,
        "sequence_id": seq.sequence_id,
    })
    .to_string();

    let mut buf = Vec::with_capacity(16 + header.len() + seq.frames.len() * FRAME_SCALARS * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for b in seq.shape.beta {
        push_f64(&mut buf, b);
    }
    for f in &seq.frames {
        for v in f.root_position.to_array() {
            push_f64(&mut buf, v);
        }
        for v in f.root_orientation.m {
            push_f64(&mut buf, v);
        }
        for rot in &f.local_rotations {
            for v in rot.m {
                push_f64(&mut buf, v);
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8], IngestError> {
    if *at + n > bytes.len() {
        return Err(IngestError::Format(format!(
            "truncated file: wanted {n} bytes at offset {at}, have {}",
            bytes.len()
        )));
    }
    let s = &bytes[*at..*at + n];
    *at += n;
    Ok(s)
}

pub fn load_sequence(path: &Path) -> Result<MotionSequence, IngestError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| take(&bytes, &mut pos, n);

    if take(4)? != MAGIC {
        return Err(IngestError::Format("bad magic (not an .epsq file)".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(IngestError::Format(format!(
            "unsupported .epsq version {version} (reader supports {FORMAT_VERSION})"
        )));
    }
    let header_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(take(header_len)?)
        .map_err(|e| IngestError::Format(format!("bad header JSON: {e}")))?;
    let fps = header["fps"]
        .as_f64()
        .ok_or_else(|| IngestError::Format("header missing fps".into()))?;
    let frame_count = header["frame_count"]
        .as_u64()
        .ok_or_else(|| IngestError::Format("header missing frame_count".into()))?
        as usize;
    let subject_id = header["subject_id"].as_u64().unwrap_or(0) as u32;
    let sequence_id = header["sequence_id"].as_u64().unwrap_or(0) as u32;
    if fps <= 0.0 {
        return Err(IngestError::Format("fps must be positive".into()));
    }

    let mut shape = ShapeParams::zero();
    for b in shape.beta.iter_mut() {
        *b = f64::from_le_bytes(take(8)?.try_into().unwrap());
    }
    let mut frames = Vec::with_capacity(frame_count);
    for _ in 0..frame_count {
        let mut scalars = [0.0f64; FRAME_SCALARS];
        for s in scalars.iter_mut() {
            *s = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        let root_position = Vec3d::new(scalars[0], scalars[1], scalars[2]);
        let mut root_orientation = Mat3d::identity();
        root_orientation.m.copy_from_slice(&scalars[3..12]);
        let mut local_rotations = [Mat3d::identity(); NUM_LOCAL_JOINTS];
        for (j, rot) in local_rotations.iter_mut().enumerate() {
            rot.m.copy_from_slice(&scalars[12 + 9 * j..21 + 9 * j]);
        }
        frames.push(BodyPose {
            root_position,
            root_orientation,
            local_rotations,
        });
    }
    if frames.len() < 2 {
        return Err(IngestError::TooShort { got: frames.len() });
    }
    Ok(MotionSequence {
        fps,
        subject_id,
        sequence_id,
        shape,
        frames,
    })
}

/// Synthetic motion family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionProfile {
    Walk,
    Reach,
    Idle,
    Mixed,
}

impl std::str::FromStr for MotionProfile {
    type Err = IngestError;
    fn from_str(s: &str) -> Result<Self, IngestError> {
        match s {
            "walk" => Ok(Self::Walk),
            "reach" => Ok(Self::Reach),
            "idle" => Ok(Self::Idle),
            "mixed" => Ok(Self::Mixed),
            other => Err(IngestError::InvalidProfile(other.to_string())),
        }
    }
}

impl std::fmt::Display for MotionProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Walk => "walk",
            Self::Reach => "reach",
            Self::Idle => "idle",
            Self::Mixed => "mixed",
        };
        f.write_str(s)
    }
}

/// Smooth seeded oscillator.
#[derive(Clone, Copy)]
struct Osc {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Osc {
    fn draw(rng: &mut ChaCha8Rng, amp: std::ops::Range<f64>, freq: std::ops::Range<f64>) -> Self {
        Self {
            amp: rng.gen_range(amp),
            freq: rng.gen_range(freq),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amp * (std::f64::consts::TAU * self.freq * t + self.phase).sin()
    }
}

struct Rig {
    // Locomotion.
    speed: f64,
    speed_mod: Osc,
    heading0: f64,
    heading1: Osc,
    heading2: Osc,
    sway_x: Osc,
    sway_y: Osc,
    // Gait.
    gait_freq: f64,
    gait_phase: f64,
    hip_amp: f64,
    knee_amp: f64,
    arm_swing: f64,
    // Reaching.
    reach_x: [Osc; 2],
    reach_y: [Osc; 2],
    reach_z: [Osc; 2],
    elbow: [Osc; 2],
    // Torso and gaze.
    spine_yaw: Osc,
    spine_pitch: Osc,
    gaze_yaw: Osc,
    gaze_pitch: Osc,
    root_roll: Osc,
    root_pitch: Osc,
    // Profile mixing envelope (walk share in [0,1]).
    mix: Option<Osc>,
    walk_base: f64,
}

impl Rig {
    fn draw(rng: &mut ChaCha8Rng, profile: MotionProfile) -> Self {
        use MotionProfile::*;
        let locomotion = matches!(profile, Walk | Mixed);
        let reaching = matches!(profile, Reach | Mixed);
        let idle = profile == Idle;

        let scale = |on: bool, v: f64| if on { v } else { 0.0 };
        let speed = scale(locomotion, rng.gen_range(0.7..1.3));
        let rx = || if reaching { 0.35..0.60 } else { 0.0..1e-9 };

        Self {
            speed,
            speed_mod: Osc::draw(rng, if locomotion { 0.0..0.15 } else { 0.0..1e-9 }, 0.05..0.12),
            heading0: rng.gen_range(0.0..std::f64::consts::TAU),
            heading1: Osc::draw(rng, 0.3..0.8, 0.02..0.06),
            heading2: Osc::draw(rng, 0.1..0.3, 0.08..0.15),
            sway_x: Osc::draw(rng, if idle { 0.005..0.015 } else { 0.0..1e-9 }, 0.05..0.15),
            sway_y: Osc::draw(rng, if idle { 0.005..0.015 } else { 0.0..1e-9 }, 0.05..0.15),
            gait_freq: rng.gen_range(0.8..1.1),
            gait_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            hip_amp: scale(locomotion, rng.gen_range(0.30..0.50)),
            knee_amp: scale(locomotion, rng.gen_range(0.40..0.60)),
            arm_swing: scale(locomotion, rng.gen_range(0.25..0.45)),
            reach_x: [Osc::draw(rng, rx(), 0.15..0.30), Osc::draw(rng, rx(), 0.15..0.30)],
            reach_y: [
                Osc::draw(rng, if reaching { 0.4..0.7 } else { 0.0..1e-9 }, 0.10..0.25),
                Osc::draw(rng, if reaching { 0.4..0.7 } else { 0.0..1e-9 }, 0.10..0.25),
            ],
            reach_z: [
                Osc::draw(rng, if reaching { 0.4..0.7 } else { 0.0..1e-9 }, 0.08..0.20),
                Osc::draw(rng, if reaching { 0.4..0.7 } else { 0.0..1e-9 }, 0.08..0.20),
            ],
            elbow: [
                Osc::draw(rng, 0.15..0.35, 0.20..0.40),
                Osc::draw(rng, 0.15..0.35, 0.20..0.40),
            ],
            spine_yaw: Osc::draw(rng, 0.02..0.06, 0.10..0.30),
            spine_pitch: Osc::draw(
                rng,
                if reaching { 0.06..0.14 } else { 0.01..0.04 },
                0.05..0.15,
            ),
            gaze_yaw: Osc::draw(
                rng,
                if reaching { 0.45..0.70 } else { 0.15..0.30 },
                0.06..0.15,
            ),
            gaze_pitch: Osc::draw(
                rng,
                if reaching { 0.25..0.40 } else { 0.08..0.18 },
                0.05..0.12,
            ),
            root_roll: Osc::draw(rng, 0.01..0.03, 0.3..0.7),
            root_pitch: Osc::draw(rng, 0.01..0.03, 0.2..0.5),
            mix: (profile == Mixed).then(|| Osc::draw(rng, 1.0..1.0001, 0.05..0.10)),
            walk_base: match profile {
                Reach => 0.0,
                Mixed => 0.5,
                Walk | Idle => 1.0,
            },
        }
    }

    /// Walk share at time t (1 = full gait, 0 = full reach) for mixed clips.
    fn walk_gain(&self, t: f64) -> f64 {
        match self.mix {
            Some(m) => (self.walk_base + 0.5 * m.at(t)).clamp(0.0, 1.0),
            None => self.walk_base,
        }
    }
}

/// Deterministic synthetic clip. Profiles: `walk` (locomotion with gait),
/// `reach` (stationary, hands sweeping through and past the FoV), `idle`
/// (standing, small sway), `mixed` (walk and reach blended by a slow
/// envelope).
pub fn synthesize_sequence(
    seed: u64,
    profile: MotionProfile,
    duration_s: f64,
    fps: f64,
    shape: ShapeParams,
    model: &SkeletonModel,
) -> Result<MotionSequence, IngestError> {
    let n = (duration_s * fps).round() as usize;
    if n < 2 {
        return Err(IngestError::TooShort { got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rig = Rig::draw(&mut rng, profile);
    let offsets0 = crate::skeleton::bone_offsets(model, &shape);
    let rest_z = offsets0[0].z;

    let dt = 1.0 / fps;
    let mut xy = (0.0f64, 0.0f64);
    let mut frames = Vec::with_capacity(n);

    for i in 0..n {
        let t = i as f64 * dt;
        let wg = rig.walk_gain(t);
        let rg = 1.0 - wg;

        // Root path: integrate a smoothly wandering heading.
        let heading = rig.heading0 + rig.heading1.at(t) + rig.heading2.at(t);
        let v = (rig.speed + rig.speed_mod.at(t)).max(0.0) * wg;
        if i > 0 {
            xy.0 += v * heading.cos() * dt;
            xy.1 += v * heading.sin() * dt;
        }
        let root_position = Vec3d::new(
            xy.0 + rig.sway_x.at(t),
            xy.1 + rig.sway_y.at(t),
            rest_z,
        );
        let root_orientation = compose(
            &compose(&Mat3d::rot_z(heading), &Mat3d::rot_y(rig.root_pitch.at(t))),
            &Mat3d::rot_x(rig.root_roll.at(t)),
        );

        let gait = std::f64::consts::TAU * rig.gait_freq * t + rig.gait_phase;
        let mut local = [Mat3d::identity(); NUM_LOCAL_JOINTS];

        // Legs: antiphase hip swing with one-sided knee flexion.
        let hip = rig.hip_amp * wg;
        let knee = rig.knee_amp * wg;
        local[0] = Mat3d::rot_y(hip * gait.sin()); // left hip
        local[1] = Mat3d::rot_y(-hip * gait.sin()); // right hip
        local[3] = Mat3d::rot_y(0.5 * knee * (1.0 - gait.cos())); // left knee
        local[4] = Mat3d::rot_y(0.5 * knee * (1.0 + gait.cos())); // right knee
        // Ankles counter the hip a little so feet stay plausible.
        local[6] = Mat3d::rot_y(-0.3 * hip * gait.sin());
        local[7] = Mat3d::rot_y(0.3 * hip * gait.sin());

        // Torso.
        let syaw = rig.spine_yaw.at(t);
        let spitch = rig.spine_pitch.at(t);
        local[2] = compose(&Mat3d::rot_z(syaw), &Mat3d::rot_y(spitch)); // spine1
        local[5] = Mat3d::rot_z(syaw * 0.6); // spine2
        local[8] = Mat3d::rot_y(spitch * 0.5); // spine3

        // Gaze: the head's local x axis is the viewing direction.
        local[11] = Mat3d::rot_y(rig.gaze_pitch.at(t) * 0.4); // neck
        local[14] = compose(
            &Mat3d::rot_z(rig.gaze_yaw.at(t)),
            &Mat3d::rot_y(rig.gaze_pitch.at(t)),
        ); // head

        // Arms: a resting hang plus gait swing, blended with reach sweeps.
        // T-pose arms point along ±y; rot_x drops them toward −z.
        let hang = 1.35;
        for side in 0..2 {
            let sgn = if side == 0 { 1.0 } else { -1.0 }; // left, right
            let swing = rig.arm_swing * wg * (gait + std::f64::consts::PI * side as f64).sin();
            let ax = -sgn * (hang * (wg + rg * 0.3) + rg * rig.reach_x[side].at(t));
            let ay = swing + rg * rig.reach_y[side].at(t);
            // Reaching biases the arm forward of the chest, then sweeps
            // around that point so hands cross the frustum boundary.
            let az = rg * (-sgn * 0.9 + rig.reach_z[side].at(t));
            let shoulder = compose(
                &compose(&Mat3d::rot_z(az), &Mat3d::rot_y(ay)),
                &Mat3d::rot_x(ax),
            );
            local[15 + side] = shoulder;
            // Elbow flexion about the vertical axis folds the forearm forward.
            let flex = 0.25 + rig.elbow[side].at(t).abs();
            local[17 + side] = Mat3d::rot_z(sgn * flex);
        }

        let mut pose = BodyPose {
            root_position,
            root_orientation,
            local_rotations: local,
        };

        // Ground contact: drop the root so the lowest proxy touches z = 0.
        let fk = forward_kinematics(model, &pose, &shape);
        let min_z = proxy_vertices(model, &fk, &shape)
            .iter()
            .map(|v| v.z)
            .fold(f64::INFINITY, f64::min);
        pose.root_position.z -= min_z;
        frames.push(pose);
    }

    Ok(MotionSequence {
        fps,
        subject_id: (seed >> 16) as u32,
        sequence_id: seed as u32,
        shape,
        frames,
    })
}

/// Builds the observable 3-point input from ground truth: FK poses of the
/// head and both wrists. Positions are snapped to the feature grid (see
/// [`crate::features::snap_position`]); all visibility bits start true.
pub fn extract_three_point(seq: &MotionSequence, model: &SkeletonModel) -> ThreePointTrack {
    let n = seq.frames.len();
    let mut track = ThreePointTrack {
        fps: seq.fps,
        head: Vec::with_capacity(n),
        left: Vec::with_capacity(n),
        right: Vec::with_capacity(n),
        left_visible: vec![true; n],
        right_visible: vec![true; n],
    };
    for pose in &seq.frames {
        let fk = forward_kinematics(model, pose, &seq.shape);
        let grab = |j: usize| TrackedPoint {
            position: snap_position(fk.joint_position[j]),
            orientation: fk.joint_orientation[j],
        };
        track.head.push(grab(model.head_joint));
        track.left.push(grab(model.left_hand));
        track.right.push(grab(model.right_hand));
    }
    track
}

/// Deterministic 90/10-style split: shuffles with the seed, takes
/// `⌈fraction·n⌉` sequences for training, the rest for testing.
pub fn split_dataset(
    seqs: Vec<MotionSequence>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<MotionSequence>, Vec<MotionSequence>), IngestError> {
    let n = seqs.len();
    if n < 2 {
        return Err(IngestError::TooFewSequences(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_n = ((train_fraction * n as f64).ceil() as usize).min(n);
    let mut seqs: Vec<Option<MotionSequence>> = seqs.into_iter().map(Some).collect();
    let mut train = Vec::with_capacity(train_n);
    let mut test = Vec::with_capacity(n - train_n);
    for (k, &idx) in order.iter().enumerate() {
        let s = seqs[idx].take().unwrap();
        if k < train_n {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::relative_rotation;

    fn model() -> SkeletonModel {
        SkeletonModel::load_default().unwrap()
    }

    fn sample_seq(seed: u64, profile: MotionProfile, secs: f64) -> MotionSequence {
        synthesize_sequence(seed, profile, secs, 60.0, ShapeParams::zero(), &model()).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.epsq");
        let seq = sample_seq(11, MotionProfile::Walk, 3.0);
        save_sequence(&seq, &path).unwrap();
        let back = load_sequence(&path).unwrap();
        assert_eq!(back.fps, seq.fps);
        assert_eq!(back.subject_id, seq.subject_id);
        assert_eq!(back.sequence_id, seq.sequence_id);
        assert_eq!(back.shape, seq.shape);
        assert_eq!(back.frames.len(), seq.frames.len());
        for (a, b) in back.frames.iter().zip(&seq.frames) {
            assert_eq!(a.root_position, b.root_position);
            assert_eq!(a.root_orientation, b.root_orientation);
            assert_eq!(a.local_rotations, b.local_rotations);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.epsq");
        let seq = sample_seq(3, MotionProfile::Idle, 2.0);
        save_sequence(&seq, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_sequence(&path) {
            Err(IngestError::Format(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_rejected_with_detail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.epsq");
        let seq = sample_seq(4, MotionProfile::Idle, 2.0);
        save_sequence(&seq, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_sequence(&path) {
            Err(IngestError::Format(msg)) => assert!(msg.contains("99"), "{msg}"),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        for profile in [
            MotionProfile::Walk,
            MotionProfile::Reach,
            MotionProfile::Idle,
            MotionProfile::Mixed,
        ] {
            let a = sample_seq(7, profile, 2.0);
            let b = sample_seq(7, profile, 2.0);
            for (x, y) in a.frames.iter().zip(&b.frames) {
                assert_eq!(x.root_position, y.root_position);
                assert_eq!(x.local_rotations, y.local_rotations);
            }
        }
    }

    #[test]
    fn idle_stays_put() {
        let seq = sample_seq(21, MotionProfile::Idle, 10.0);
        let start = seq.frames[0].root_position;
        for f in &seq.frames {
            let d = f.root_position - start;
            let horiz = (d.x * d.x + d.y * d.y).sqrt();
            assert!(horiz < 0.1, "idle drifted {horiz} m");
        }
    }

    #[test]
    fn walk_actually_travels() {
        let seq = sample_seq(5, MotionProfile::Walk, 10.0);
        let d = seq.frames.last().unwrap().root_position - seq.frames[0].root_position;
        assert!((d.x * d.x + d.y * d.y).sqrt() > 2.0);
    }

    #[test]
    fn rotations_stay_smooth() {
        let limit = 15f64.to_radians();
        for (seed, profile) in [
            (1, MotionProfile::Walk),
            (2, MotionProfile::Reach),
            (3, MotionProfile::Mixed),
        ] {
            let seq = sample_seq(seed, profile, 5.0);
            for w in seq.frames.windows(2) {
                let dr = relative_rotation(&w[0].root_orientation, &w[1].root_orientation);
                assert!(dr.angle() <= limit);
                for j in 0..NUM_LOCAL_JOINTS {
                    let d = relative_rotation(&w[0].local_rotations[j], &w[1].local_rotations[j]);
                    assert!(
                        d.angle() <= limit,
                        "joint {j} moved {:.1}° in one frame",
                        d.angle().to_degrees()
                    );
                }
            }
        }
    }

    #[test]
    fn ground_truth_feet_stay_on_the_ground() {
        let m = model();
        for (seed, profile) in [(9, MotionProfile::Walk), (10, MotionProfile::Reach)] {
            let seq = sample_seq(seed, profile, 3.0);
            for pose in &seq.frames {
                let fk = forward_kinematics(&m, pose, &seq.shape);
                let min_z = proxy_vertices(&m, &fk, &seq.shape)
                    .iter()
                    .map(|v| v.z)
                    .fold(f64::INFINITY, f64::min);
                assert!(min_z > -0.01 && min_z < 0.02, "min proxy z {min_z}");
            }
        }
    }

    #[test]
    fn reach_profile_exits_the_fov_in_band() {
        let m = model();
        for seed in [1u64, 2, 3, 4] {
            let seq = sample_seq(seed, MotionProfile::Reach, 60.0);
            let track = extract_three_point(&seq, &m);
            let mask = crate::fov::visibility_mask(&crate::fov::FovConfig::quest2(), &track);
            let outside = 1.0 - mask.visible_fraction();
            assert!(
                (0.1..=0.9).contains(&outside),
                "seed {seed}: {:.1}% of hand frames outside 120° FoV",
                outside * 100.0
            );
        }
    }

    #[test]
    fn extract_matches_fk_and_commutes_with_offset() {
        let m = model();
        let seq = sample_seq(13, MotionProfile::Walk, 2.0);
        let track = extract_three_point(&seq, &m);
        for (i, pose) in seq.frames.iter().enumerate() {
            let fk = forward_kinematics(&m, pose, &seq.shape);
            assert!((track.head[i].position - fk.joint_position[m.head_joint]).norm() < 1e-9);
            assert!((track.left[i].position - fk.joint_position[m.left_hand]).norm() < 1e-9);
            assert!((track.right[i].position - fk.joint_position[m.right_hand]).norm() < 1e-9);
        }
        assert!(track.left_visible.iter().all(|&v| v));

        let off = Vec3d::new(2.0, -1.0, 0.0);
        let a = extract_three_point(&seq.apply_offset(off), &m);
        let b = extract_three_point(&seq, &m).apply_offset(off);
        for i in 0..track.len() {
            assert!((a.head[i].position - b.head[i].position).norm() < 1e-9);
            assert!((a.left[i].position - b.left[i].position).norm() < 1e-9);
        }
    }

    #[test]
    fn offset_round_trip_and_exactness() {
        let seq = sample_seq(2, MotionProfile::Walk, 2.0);
        let m = model();
        let track = extract_three_point(&seq, &m);
        let zero = track.apply_offset(Vec3d::zero());
        for i in 0..track.len() {
            assert_eq!(zero.head[i].position, track.head[i].position);
        }
        let shifted = track.apply_offset(Vec3d::new(2.0, 0.0, 0.0));
        for i in 0..track.len() {
            assert_eq!(shifted.head[i].position.x, track.head[i].position.x + 2.0);
            assert_eq!(shifted.head[i].orientation, track.head[i].orientation);
        }
        let back = shifted.apply_offset(Vec3d::new(-2.0, 0.0, 0.0));
        for i in 0..track.len() {
            assert!((back.head[i].position - track.head[i].position).norm() < 1e-9);
        }
    }

    #[test]
    fn split_is_deterministic_disjoint_exhaustive() {
        let seqs: Vec<MotionSequence> = (0..10)
            .map(|s| sample_seq(s, MotionProfile::Idle, 1.0))
            .collect();
        let ids = |v: &[MotionSequence]| {
            let mut out: Vec<u32> = v.iter().map(|s| s.sequence_id).collect();
            out.sort();
            out
        };
        let all = ids(&seqs);
        let (tr1, te1) = split_dataset(seqs.clone(), 0.9, 77).unwrap();
        let (tr2, te2) = split_dataset(seqs, 0.9, 77).unwrap();
        assert_eq!(tr1.len(), 9);
        assert_eq!(te1.len(), 1);
        assert_eq!(ids(&tr1), ids(&tr2));
        assert_eq!(ids(&te1), ids(&te2));
        let mut union = ids(&tr1);
        union.extend(ids(&te1));
        union.sort();
        assert_eq!(union, all);
    }

    #[test]
    fn too_few_sequences_rejected() {
        let seqs = vec![sample_seq(1, MotionProfile::Idle, 1.0)];
        assert!(matches!(
            split_dataset(seqs, 0.9, 1),
            Err(IngestError::TooFewSequences(1))
        ));
    }
}

