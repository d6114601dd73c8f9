//! Headset field-of-view simulation: pyramidal frustum visibility tests for
//! hands plus the random-masking baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ingest::ThreePointTrack;
use crate::{Mat3d, Vec3d};

#[derive(Debug, Error)]
pub enum FovError {
    #[error("field of view out of range: horizontal {h}°, vertical {v}°")]
    OutOfRange { h: f64, v: f64 },
}

/// Pyramidal camera frustum. Angles in degrees; the test is two independent
/// half-angle comparisons (horizontal and vertical), not a cone.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FovConfig {
    pub alpha_h_deg: f64,
    pub alpha_v_deg: f64,
}

impl FovConfig {
    pub fn new(alpha_h_deg: f64, alpha_v_deg: f64) -> Result<Self, FovError> {
        if alpha_h_deg <= 0.0 || alpha_h_deg >= 360.0 || alpha_v_deg <= 0.0 || alpha_v_deg >= 180.0
        {
            return Err(FovError::OutOfRange {
                h: alpha_h_deg,
                v: alpha_v_deg,
            });
        }
        Ok(Self {
            alpha_h_deg,
            alpha_v_deg,
        })
    }

    /// Square frustum: vertical equals horizontal.
    pub fn square(alpha_deg: f64) -> Result<Self, FovError> {
        Self::new(alpha_deg, alpha_deg)
    }

    /// 180° fisheye coverage. The vertical angle is capped at 170° (the
    /// frustum model needs it below the hemisphere bound); horizontally the
    /// `x > 0` condition makes 180° the full front hemisphere.
    pub fn fisheye180() -> Self {
        Self::new(180.0, 170.0).unwrap()
    }

    /// 120° square frustum (Quest 2 class).
    pub fn quest2() -> Self {
        Self::square(120.0).unwrap()
    }

    /// 90° square frustum (HoloLens 2 class).
    pub fn hololens2() -> Self {
        Self::square(90.0).unwrap()
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "fisheye180" => Some(Self::fisheye180()),
            "quest2" => Some(Self::quest2()),
            "hololens2" => Some(Self::hololens2()),
            _ => None,
        }
    }
}

/// Expresses a world point in the head frame: `Rᵀ·(p − head)`. The head's
/// local x axis is the viewing direction.
pub fn to_head_frame(head_position: Vec3d, head_orientation: &Mat3d, point: Vec3d) -> Vec3d {
    head_orientation.apply_transpose(point - head_position)
}

/// Frustum containment for a point already in the head frame. Boundary
/// equality counts as inside; anything behind the image plane (`x ≤ 0`) is
/// out.
pub fn is_in_fov(cfg: &FovConfig, hand_in_head_frame: Vec3d) -> bool {
    let p = hand_in_head_frame;
    p.x > 0.0
        && p.y.atan2(p.x).abs() <= (cfg.alpha_h_deg / 2.0).to_radians()
        && p.z.atan2(p.x).abs() <= (cfg.alpha_v_deg / 2.0).to_radians()
}

/// Per-frame, per-hand visibility.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityMask {
    pub left: Vec<bool>,
    pub right: Vec<bool>,
}

impl VisibilityMask {
    pub fn all_visible(n: usize) -> Self {
        Self {
            left: vec![true; n],
            right: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    /// Elementwise AND with another mask.
    pub fn and(&self, other: &Self) -> Self {
        Self {
            left: self.left.iter().zip(&other.left).map(|(a, b)| a & b).collect(),
            right: self
                .right
                .iter()
                .zip(&other.right)
                .map(|(a, b)| a & b)
                .collect(),
        }
    }

    /// Copy of the track with this mask ANDed into its visibility bits.
    pub fn apply_to(&self, track: &ThreePointTrack) -> ThreePointTrack {
        let mut out = track.clone();
        for (dst, src) in out.left_visible.iter_mut().zip(&self.left) {
            *dst &= *src;
        }
        for (dst, src) in out.right_visible.iter_mut().zip(&self.right) {
            *dst &= *src;
        }
        out
    }

    pub fn visible_fraction(&self) -> f64 {
        let total = self.left.len() + self.right.len();
        if total == 0 {
            return 1.0;
        }
        let vis = self.left.iter().filter(|&&v| v).count()
            + self.right.iter().filter(|&&v| v).count();
        vis as f64 / total as f64
    }
}

/// Geometric visibility of each hand under the frame's own head pose.
pub fn visibility_mask(cfg: &FovConfig, track: &ThreePointTrack) -> VisibilityMask {
    let n = track.len();
    let mut mask = VisibilityMask {
        left: Vec::with_capacity(n),
        right: Vec::with_capacity(n),
    };
    for i in 0..n {
        let head = &track.head[i];
        let see = |hand: Vec3d| {
            is_in_fov(cfg, to_head_frame(head.position, &head.orientation, hand))
        };
        mask.left.push(see(track.left[i].position));
        mask.right.push(see(track.right[i].position));
    }
    mask
}

/// Random-masking baseline: each hand is independently hidden per frame with
/// probability `p`, deterministic per seed.
pub fn random_mask(p: f64, seed: u64, n: usize) -> VisibilityMask {
    assert!((0.0..=1.0).contains(&p), "probability out of range: {p}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = VisibilityMask {
        left: Vec::with_capacity(n),
        right: Vec::with_capacity(n),
    };
    for _ in 0..n {
        mask.left.push(rng.gen::<f64>() >= p);
        mask.right.push(rng.gen::<f64>() >= p);
    }
    mask
}
