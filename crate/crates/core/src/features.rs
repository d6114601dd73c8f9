//! Input feature assembly: global motion decomposition (temporal + spatial
//! normalization), velocities, 6D orientation encoding, and FoV zero-masking
//! over a τ-frame window.
//!
//! The layout is frozen and version-stamped into weight files:
//!
//! | slots    | content                                   |
//! |----------|-------------------------------------------|
//! | 0..18    | head/left/right orientation, 6D each      |
//! | 18..36   | head/left/right angular velocity, 6D each |
//! | 36..45   | head/left/right linear velocity, m/s      |
//! | 45..54   | head/left/right TN position, m            |
//! | 54..58   | left/right SN horizontal hand position, m |
//! | 58       | head global height, m                     |
//!
//! Every feature that must be invariant to a constant horizontal offset is a
//! difference of two tracked positions. Tracked positions are snapped to a
//! dyadic grid (2⁻³⁴ m, about 0.06 nm), which makes those differences exact:
//! grid values shifted by a whole number of meters stay on the grid with no
//! rounding, so an offset track produces bit-identical windows rather than
//! merely close ones.

use thiserror::Error;

use crate::ingest::ThreePointTrack;
use crate::math::{matrix_to_rot6d, relative_rotation};
use crate::{Mat3d, Rot6d, Vec3d};

pub const FEATURE_DIM: usize = 59;
/// Bumped whenever the slot layout changes; weight files reject mismatches.
pub const FEATURE_LAYOUT_VERSION: u32 = 1;

/// Slot ranges of the frozen layout.
pub mod layout {
    use std::ops::Range;

    pub const HEAD_ORI: Range<usize> = 0..6;
    pub const LEFT_ORI: Range<usize> = 6..12;
    pub const RIGHT_ORI: Range<usize> = 12..18;
    pub const HEAD_ANGVEL: Range<usize> = 18..24;
    pub const LEFT_ANGVEL: Range<usize> = 24..30;
    pub const RIGHT_ANGVEL: Range<usize> = 30..36;
    pub const HEAD_LINVEL: Range<usize> = 36..39;
    pub const LEFT_LINVEL: Range<usize> = 39..42;
    pub const RIGHT_LINVEL: Range<usize> = 42..45;
    pub const HEAD_TN: Range<usize> = 45..48;
    pub const LEFT_TN: Range<usize> = 48..51;
    pub const RIGHT_TN: Range<usize> = 51..54;
    pub const LEFT_SN: Range<usize> = 54..56;
    pub const RIGHT_SN: Range<usize> = 56..58;
    pub const HEAD_Z: usize = 58;
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("window [{start}, {start}+{tau}) does not fit a track of {len} frames")]
    WindowLengthMismatch { start: usize, tau: usize, len: usize },
    #[error("override mask length {got} does not match window length {tau}")]
    MaskLengthMismatch { got: usize, tau: usize },
}

/// Position-feature variant. `Global` is the ablation that feeds raw world
/// positions into the TN/SN slots instead of the decomposition; it keeps the
/// same 59-slot layout but loses offset invariance by construction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    #[default]
    Decomposed,
    Global,
}

const GRID: f64 = (1u64 << 34) as f64;

/// Snaps a position to the 2⁻³⁴ m grid (displacement under 6e-11 m). See the
/// module docs for why tracked positions live on this grid.
pub fn snap_position(p: Vec3d) -> Vec3d {
    Vec3d::new(
        (p.x * GRID).round() / GRID,
        (p.y * GRID).round() / GRID,
        (p.z * GRID).round() / GRID,
    )
}

/// One 59-feature input frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureFrame(pub [f64; FEATURE_DIM]);

impl Default for FeatureFrame {
    fn default() -> Self {
        Self([0.0; FEATURE_DIM])
    }
}

/// τ assembled frames plus the anchors they were normalized against.
#[derive(Clone, Debug)]
pub struct FeatureWindow {
    /// Index of the window's first frame within the source track.
    pub start: usize,
    pub frames: Vec<FeatureFrame>,
    pub head_anchor: Vec3d,
    /// First visible position per hand; `None` if never visible in-window.
    pub left_anchor: Option<Vec3d>,
    pub right_anchor: Option<Vec3d>,
}

impl FeatureWindow {
    pub fn tau(&self) -> usize {
        self.frames.len()
    }

    /// Bitwise equality, stricter than `==` (distinguishes -0.0 from 0.0).
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.frames.len() == other.frames.len()
            && self.frames.iter().zip(&other.frames).all(|(a, b)| {
                a.0.iter()
                    .zip(b.0.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// TN: positions relative to the anchor frame's position.
pub fn temporal_normalize(positions: &[Vec3d], anchor: Vec3d) -> Vec<Vec3d> {
    positions.iter().map(|p| *p - anchor).collect()
}

/// SN: hand position relative to the head in the horizontal plane; the head's
/// global height is kept as its own feature.
pub fn spatial_normalize(head: Vec3d, hand: Vec3d) -> ([f64; 2], f64) {
    ([hand.x - head.x, hand.y - head.y], head.z)
}

/// Forward-difference velocity in m/s; the first frame gets zero.
pub fn linear_velocity(positions: &[Vec3d], fps: f64) -> Vec<Vec3d> {
    let mut out = Vec::with_capacity(positions.len());
    for (i, p) in positions.iter().enumerate() {
        if i == 0 {
            out.push(Vec3d::zero());
        } else {
            out.push((*p - positions[i - 1]).scale(fps));
        }
    }
    out
}

/// Per-frame rotation delta `prevᵀ·cur` in 6D; the first frame gets the 6D
/// identity.
pub fn angular_velocity(orientations: &[Mat3d]) -> Vec<Rot6d> {
    let mut out = Vec::with_capacity(orientations.len());
    for (i, r) in orientations.iter().enumerate() {
        if i == 0 {
            out.push(Rot6d::identity());
        } else {
            out.push(matrix_to_rot6d(&relative_rotation(&orientations[i - 1], r)));
        }
    }
    out
}

fn put(frame: &mut FeatureFrame, range: std::ops::Range<usize>, values: &[f64]) {
    frame.0[range].copy_from_slice(values);
}

/// Assembles the 59-feature window `[start, start+tau)` from a track.
///
/// Hand visibility is the AND of the track's own bits and the optional
/// window-aligned override mask. Velocities are computed from the raw tracked
/// values first; a masked hand then has its 20 slots zeroed. TN anchors:
/// head = window start, hand = its first visible frame (a never-visible hand
/// keeps zeroed TN).
pub fn build_window_features(
    track: &ThreePointTrack,
    start: usize,
    tau: usize,
    override_mask: Option<(&[bool], &[bool])>,
) -> Result<FeatureWindow, FeatureError> {
    build_window_features_in_mode(track, start, tau, override_mask, FeatureMode::Decomposed)
}

/// [`build_window_features`] with an explicit position-feature mode.
pub fn build_window_features_in_mode(
    track: &ThreePointTrack,
    start: usize,
    tau: usize,
    override_mask: Option<(&[bool], &[bool])>,
    mode: FeatureMode,
) -> Result<FeatureWindow, FeatureError> {
    if tau == 0 || start + tau > track.len() {
        return Err(FeatureError::WindowLengthMismatch {
            start,
            tau,
            len: track.len(),
        });
    }
    let mut vis_l = Vec::with_capacity(tau);
    let mut vis_r = Vec::with_capacity(tau);
    for k in 0..tau {
        vis_l.push(track.left_visible[start + k]);
        vis_r.push(track.right_visible[start + k]);
    }
    if let Some((l, r)) = override_mask {
        if l.len() != tau {
            return Err(FeatureError::MaskLengthMismatch { got: l.len(), tau });
        }
        if r.len() != tau {
            return Err(FeatureError::MaskLengthMismatch { got: r.len(), tau });
        }
        for k in 0..tau {
            vis_l[k] &= l[k];
            vis_r[k] &= r[k];
        }
    }

    let grab = |list: &[crate::ingest::TrackedPoint]| -> (Vec<Vec3d>, Vec<Mat3d>) {
        let mut pos = Vec::with_capacity(tau);
        let mut ori = Vec::with_capacity(tau);
        for k in 0..tau {
            pos.push(snap_position(list[start + k].position));
            ori.push(list[start + k].orientation);
        }
        (pos, ori)
    };
    let (hpos, hori) = grab(&track.head);
    let (lpos, lori) = grab(&track.left);
    let (rpos, rori) = grab(&track.right);

    let head_anchor = hpos[0];
    let left_anchor = vis_l.iter().position(|&v| v).map(|k| lpos[k]);
    let right_anchor = vis_r.iter().position(|&v| v).map(|k| rpos[k]);

    let head_tn = temporal_normalize(&hpos, head_anchor);
    let left_tn = match left_anchor {
        Some(a) => temporal_normalize(&lpos, a),
        None => vec![Vec3d::zero(); tau],
    };
    let right_tn = match right_anchor {
        Some(a) => temporal_normalize(&rpos, a),
        None => vec![Vec3d::zero(); tau],
    };

    let head_v = linear_velocity(&hpos, track.fps);
    let left_v = linear_velocity(&lpos, track.fps);
    let right_v = linear_velocity(&rpos, track.fps);
    let head_w = angular_velocity(&hori);
    let left_w = angular_velocity(&lori);
    let right_w = angular_velocity(&rori);

    let mut frames = Vec::with_capacity(tau);
    for k in 0..tau {
        let mut f = FeatureFrame::default();
        put(&mut f, layout::HEAD_ORI, &matrix_to_rot6d(&hori[k]).v);
        put(&mut f, layout::LEFT_ORI, &matrix_to_rot6d(&lori[k]).v);
        put(&mut f, layout::RIGHT_ORI, &matrix_to_rot6d(&rori[k]).v);
        put(&mut f, layout::HEAD_ANGVEL, &head_w[k].v);
        put(&mut f, layout::LEFT_ANGVEL, &left_w[k].v);
        put(&mut f, layout::RIGHT_ANGVEL, &right_w[k].v);
        put(&mut f, layout::HEAD_LINVEL, &head_v[k].to_array());
        put(&mut f, layout::LEFT_LINVEL, &left_v[k].to_array());
        put(&mut f, layout::RIGHT_LINVEL, &right_v[k].to_array());
        match mode {
            FeatureMode::Decomposed => {
                put(&mut f, layout::HEAD_TN, &head_tn[k].to_array());
                put(&mut f, layout::LEFT_TN, &left_tn[k].to_array());
                put(&mut f, layout::RIGHT_TN, &right_tn[k].to_array());
                let (sn_l, _) = spatial_normalize(hpos[k], lpos[k]);
                let (sn_r, head_z) = spatial_normalize(hpos[k], rpos[k]);
                put(&mut f, layout::LEFT_SN, &sn_l);
                put(&mut f, layout::RIGHT_SN, &sn_r);
                f.0[layout::HEAD_Z] = head_z;
            }
            FeatureMode::Global => {
                put(&mut f, layout::HEAD_TN, &hpos[k].to_array());
                put(&mut f, layout::LEFT_TN, &lpos[k].to_array());
                put(&mut f, layout::RIGHT_TN, &rpos[k].to_array());
                put(&mut f, layout::LEFT_SN, &[lpos[k].x, lpos[k].y]);
                put(&mut f, layout::RIGHT_SN, &[rpos[k].x, rpos[k].y]);
                f.0[layout::HEAD_Z] = hpos[k].z;
            }
        }

        if !vis_l[k] {
            for range in [
                layout::LEFT_ORI,
                layout::LEFT_ANGVEL,
                layout::LEFT_LINVEL,
                layout::LEFT_TN,
                layout::LEFT_SN,
            ] {
                f.0[range].fill(0.0);
            }
        }
        if !vis_r[k] {
            for range in [
                layout::RIGHT_ORI,
                layout::RIGHT_ANGVEL,
                layout::RIGHT_LINVEL,
                layout::RIGHT_TN,
                layout::RIGHT_SN,
            ] {
                f.0[range].fill(0.0);
            }
        }
        frames.push(f);
    }

    Ok(FeatureWindow {
        start,
        frames,
        head_anchor,
        left_anchor,
        right_anchor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{extract_three_point, synthesize_sequence, MotionProfile, TrackedPoint};
    use crate::skeleton::{ShapeParams, SkeletonModel};

    fn static_track(n: usize) -> ThreePointTrack {
        let head = TrackedPoint {
            position: Vec3d::new(1.0, 2.0, 1.6),
            orientation: Mat3d::rot_z(0.3),
        };
        let left = TrackedPoint {
            position: Vec3d::new(1.2, 2.4, 1.1),
            orientation: Mat3d::rot_x(0.2),
        };
        let right = TrackedPoint {
            position: Vec3d::new(0.8, 1.6, 1.1),
            orientation: Mat3d::rot_y(-0.4),
        };
        ThreePointTrack {
            fps: 60.0,
            head: vec![head; n],
            left: vec![left; n],
            right: vec![right; n],
            left_visible: vec![true; n],
            right_visible: vec![true; n],
        }
    }

    fn walk_track(seed: u64) -> ThreePointTrack {
        let model = SkeletonModel::load_default().unwrap();
        let seq =
            synthesize_sequence(seed, MotionProfile::Walk, 4.0, 60.0, ShapeParams::zero(), &model)
                .unwrap();
        extract_three_point(&seq, &model)
    }

    #[test]
    fn static_track_features_are_constant_and_normalized() {
        let track = static_track(16);
        let w = build_window_features(&track, 0, 16, None).unwrap();
        let first = w.frames[0];
        for f in &w.frames {
            // Orientations and SN identical across frames.
            assert_eq!(f.0[layout::HEAD_ORI], first.0[layout::HEAD_ORI]);
            assert_eq!(f.0[layout::LEFT_SN], first.0[layout::LEFT_SN]);
            // Velocities and TN all zero.
            for i in layout::HEAD_LINVEL.start..layout::RIGHT_TN.end {
                assert_eq!(f.0[i], 0.0, "slot {i}");
            }
            // Angular velocities are the 6D identity.
            assert_eq!(f.0[layout::HEAD_ANGVEL.clone()], [1., 0., 0., 0., 1., 0.]);
            assert!((f.0[layout::HEAD_Z] - 1.6).abs() < 1e-9);
        }
        let (sn, _) = spatial_normalize(track.head[0].position, track.left[0].position);
        assert!((sn[0] - 0.2).abs() < 1e-9 && (sn[1] - 0.4).abs() < 1e-9);
    }

    #[test]
    fn tn_anchor_frame_is_zero_and_offset_invariant() {
        let ps = vec![
            Vec3d::new(3.0, 4.0, 1.0),
            Vec3d::new(3.5, 4.5, 1.2),
            Vec3d::new(2.5, 3.5, 0.8),
        ];
        let tn = temporal_normalize(&ps, ps[0]);
        assert_eq!(tn[0], Vec3d::zero());
        let c = Vec3d::new(7.0, -2.0, 0.0);
        let shifted: Vec<Vec3d> = ps.iter().map(|p| *p + c).collect();
        let tn2 = temporal_normalize(&shifted, shifted[0]);
        for (a, b) in tn.iter().zip(&tn2) {
            assert!((*a - *b).norm() < 1e-12);
        }
    }

    #[test]
    fn spatial_normalize_examples() {
        let (sn, z) = spatial_normalize(Vec3d::new(3.0, 4.0, 1.7), Vec3d::new(3.5, 4.2, 1.2));
        assert!((sn[0] - 0.5).abs() < 1e-12);
        assert!((sn[1] - 0.2).abs() < 1e-12);
        assert_eq!(z, 1.7);
        let (same, _) = spatial_normalize(Vec3d::new(1.0, 2.0, 3.0), Vec3d::new(1.0, 2.0, 3.0));
        assert_eq!(same, [0.0, 0.0]);
    }

    #[test]
    fn linear_velocity_examples() {
        let fps = 60.0;
        let ps: Vec<Vec3d> = (0..5).map(|t| Vec3d::new(t as f64 / fps, 0.0, 0.0)).collect();
        let v = linear_velocity(&ps, fps);
        assert_eq!(v[0], Vec3d::zero());
        for vel in &v[1..] {
            assert!((vel.x - 1.0).abs() < 1e-9 && vel.y == 0.0);
        }
    }

    #[test]
    fn angular_velocity_constant_yaw_rate() {
        let step = 1f64.to_radians();
        let rs: Vec<Mat3d> = (0..10).map(|t| Mat3d::rot_z(step * t as f64)).collect();
        let w = angular_velocity(&rs);
        assert_eq!(w[0], Rot6d::identity());
        let expect = matrix_to_rot6d(&Mat3d::rot_z(step));
        for a in &w[1..] {
            for i in 0..6 {
                assert!((a.v[i] - expect.v[i]).abs() < 1e-12);
            }
        }
        // World pre-rotation leaves deltas unchanged.
        let pre = Mat3d::rot_y(0.7);
        let rs2: Vec<Mat3d> = rs.iter().map(|r| crate::math::compose(&pre, r)).collect();
        let w2 = angular_velocity(&rs2);
        for (a, b) in w.iter().zip(&w2).skip(1) {
            for i in 0..6 {
                assert!((a.v[i] - b.v[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn horizontal_offsets_give_bit_identical_windows() {
        let track = walk_track(31);
        let tau = 32;
        for off in [
            Vec3d::new(2.0, 0.0, 0.0),
            Vec3d::new(5.0, 0.0, 0.0),
            Vec3d::new(10.0, -10.0, 0.0),
            Vec3d::new(50.0, 50.0, 0.0),
        ] {
            let shifted = track.apply_offset(off);
            for start in [0usize, 40, 150] {
                let a = build_window_features(&track, start, tau, None).unwrap();
                let b = build_window_features(&shifted, start, tau, None).unwrap();
                assert!(a.bits_eq(&b), "offset {off:?} start {start}");
            }
        }
    }

    #[test]
    fn vertical_offset_moves_only_head_z() {
        let track = walk_track(8);
        let dz = 0.25; // dyadic so the shift is exact
        let shifted = track.apply_offset(Vec3d::new(0.0, 0.0, dz));
        let a = build_window_features(&track, 10, 16, None).unwrap();
        let b = build_window_features(&shifted, 10, 16, None).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            for i in 0..FEATURE_DIM {
                if i == layout::HEAD_Z {
                    assert_eq!(fb.0[i], fa.0[i] + dz);
                } else {
                    assert_eq!(fb.0[i].to_bits(), fa.0[i].to_bits(), "slot {i}");
                }
            }
        }
    }

    #[test]
    fn masking_zeroes_exactly_the_hand_slots() {
        let track = walk_track(5);
        let tau = 24;
        let plain = build_window_features(&track, 6, tau, None).unwrap();
        let mut left = vec![true; tau];
        for v in left.iter_mut().take(20).skip(10) {
            *v = false;
        }
        let right = vec![true; tau];
        let masked = build_window_features(&track, 6, tau, Some((&left, &right))).unwrap();
        for k in 0..tau {
            let (a, b) = (&plain.frames[k], &masked.frames[k]);
            for i in 0..FEATURE_DIM {
                let left_slot = layout::LEFT_ORI.contains(&i)
                    || layout::LEFT_ANGVEL.contains(&i)
                    || layout::LEFT_LINVEL.contains(&i)
                    || layout::LEFT_TN.contains(&i)
                    || layout::LEFT_SN.contains(&i);
                if (10..20).contains(&k) && left_slot {
                    assert_eq!(b.0[i], 0.0);
                } else {
                    assert_eq!(a.0[i].to_bits(), b.0[i].to_bits(), "frame {k} slot {i}");
                }
            }
        }
    }

    #[test]
    fn hand_anchor_is_first_visible_frame() {
        let track = walk_track(9);
        let tau = 16;
        let mut left = vec![true; tau];
        left[0] = false;
        left[1] = false;
        let right = vec![true; tau];
        let w = build_window_features(&track, 0, tau, Some((&left, &right))).unwrap();
        let expected = snap_position(track.left[2].position);
        assert_eq!(w.left_anchor.unwrap(), expected);
        // TN at the anchor frame is zero.
        assert_eq!(w.frames[2].0[layout::LEFT_TN.clone()], [0.0, 0.0, 0.0]);

        // Never-visible hand: anchor absent, TN slots zero throughout.
        let none = vec![false; tau];
        let w2 = build_window_features(&track, 0, tau, Some((&none, &right))).unwrap();
        assert!(w2.left_anchor.is_none());
        for f in &w2.frames {
            assert_eq!(f.0[layout::LEFT_TN.clone()], [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn window_bounds_checked() {
        let track = static_track(10);
        assert!(matches!(
            build_window_features(&track, 5, 10, None),
            Err(FeatureError::WindowLengthMismatch { .. })
        ));
        let short = vec![true; 3];
        assert!(matches!(
            build_window_features(&track, 0, 8, Some((&short, &short))),
            Err(FeatureError::MaskLengthMismatch { .. })
        ));
    }
}
