//! Full-body pose estimation from the sparse tracking signals a mixed-reality
//! headset provides: head pose plus two hand poses that drop out whenever a
//! hand leaves the camera frustum.
//!
//! The pipeline maps a window of three-point tracking frames onto per-frame
//! full-body joint rotations and body shape:
//!
//! * [`math`]: rotation representations (matrices, continuous 6D encoding).
//! * [`skeleton`]: parametric 22-joint kinematic model with shape-blended
//!   bone offsets, forward kinematics, and proxy surface vertices.
//! * [`ingest`]: sequence file I/O, synthetic motion generation, dataset
//!   splits, and positional-offset augmentation.
//! * [`fov`]: camera-frustum visibility simulation and random-masking
//!   baseline.
//! * [`features`]: global motion decomposition into the 59-value
//!   position-invariant network input.
//! * [`network`]: SlowFast fusion, transformer encoder, output heads, and
//!   hand-rolled reverse-mode gradients.
//! * [`training`]: loss stack, Adam, schedule, training loop, and shape
//!   calibration.
//! * [`evaluation`]: pose/shape/ground-contact metrics and comparison
//!   harnesses.
//! * [`cli`]: the `sparsebody` command-line entry point.
//!
//! Core math is generic over the scalar type via [`Real`]: geometry, losses,
//! and metrics run in `f64`, network weights and activations in `f32`, and
//! gradient checks instantiate the same network code at `f64`.

pub mod cli;
pub mod evaluation;
pub mod features;
pub mod fov;
pub mod ingest;
pub mod math;
pub mod network;
pub mod real;
pub mod skeleton;
pub mod training;

pub use real::Real;

/// Single-precision 3-vector (network-side math).
pub type Vec3f = math::Vec3<f32>;
/// Double-precision 3-vector (geometry, metrics, training targets).
pub type Vec3d = math::Vec3<f64>;
/// Single-precision rotation matrix.
pub type Mat3f = math::RotationMatrix<f32>;
/// Double-precision rotation matrix.
pub type Mat3d = math::RotationMatrix<f64>;
/// Single-precision 6D rotation encoding.
pub type Rot6f = math::Rot6D<f32>;
/// Double-precision 6D rotation encoding.
pub type Rot6d = math::Rot6D<f64>;

/// Joints in the kinematic tree (root plus 21 articulated joints).
pub const NUM_JOINTS: usize = 22;
/// Articulated (non-root) joints carrying a local rotation.
pub const NUM_LOCAL_JOINTS: usize = NUM_JOINTS - 1;
/// Dimension of the body shape parameter vector.
pub const SHAPE_DIM: usize = 16;
