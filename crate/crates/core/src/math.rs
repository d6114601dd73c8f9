//! Rotation representations and conversions used by every other module.
//!
//! Conventions: right-handed coordinates with `+z` up and the ground plane at
//! `z = 0`. Rotation matrices are row-major 3x3 with orthonormal columns and
//! determinant `+1`. The 6D encoding stores the first two *columns* of a
//! rotation matrix and is decoded with Gram-Schmidt, which makes it
//! continuous and insensitive to scale in the raw values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;

/// Error raised by rotation conversions.
#[derive(Debug, Error, PartialEq)]
pub enum MathError {
    /// The 6D input cannot be orthonormalized: near-zero first column or
    /// near-parallel columns.
    #[error("degenerate 6D rotation input: {0}")]
    DegenerateInput(&'static str),
}

/// 3-vector in meters (or unitless for directions). `z` is up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn splat(v: T) -> Self {
        Self::new(v, v, v)
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Componentwise cast through `f64`.
    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::new(
            U::of(self.x.as_f64()),
            U::of(self.y.as_f64()),
            U::of(self.z.as_f64()),
        )
    }
}

impl<T: Real> std::ops::Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> std::ops::Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> std::ops::Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> std::ops::AddAssign for Vec3<T> {
    fn add_assign(&mut self, o: Self) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

/// Row-major 3x3 rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix<T> {
    /// Entries `m[r][c]` flattened row-major.
    pub m: [T; 9],
}

impl<T: Real> Default for RotationMatrix<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> RotationMatrix<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { m: [o, z, z, z, o, z, z, z, o] }
    }

    /// Builds from three column vectors.
    pub fn from_columns(c0: Vec3<T>, c1: Vec3<T>, c2: Vec3<T>) -> Self {
        Self {
            m: [c0.x, c1.x, c2.x, c0.y, c1.y, c2.y, c0.z, c1.z, c2.z],
        }
    }

    pub fn col(&self, c: usize) -> Vec3<T> {
        Vec3::new(self.m[c], self.m[3 + c], self.m[6 + c])
    }

    pub fn row(&self, r: usize) -> Vec3<T> {
        Vec3::new(self.m[3 * r], self.m[3 * r + 1], self.m[3 * r + 2])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.m;
        Self {
            m: [m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]],
        }
    }

    /// Rotates a vector: `R * v`.
    pub fn apply(&self, v: Vec3<T>) -> Vec3<T> {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    /// Rotates by the inverse: `R^T * v`.
    pub fn apply_transpose(&self, v: Vec3<T>) -> Vec3<T> {
        Vec3::new(self.col(0).dot(v), self.col(1).dot(v), self.col(2).dot(v))
    }

    pub fn det(&self) -> T {
        let m = &self.m;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn trace(&self) -> T {
        self.m[0] + self.m[4] + self.m[8]
    }

    /// Geodesic rotation angle in radians, from the trace formula.
    pub fn angle(&self) -> T {
        let half = (self.trace() - T::one()) / T::of(2.0);
        half.min(T::one()).max(-T::one()).acos()
    }

    /// Orthonormal columns and determinant `+1` within `tol`.
    pub fn is_valid(&self, tol: T) -> bool {
        let c = [self.col(0), self.col(1), self.col(2)];
        for i in 0..3 {
            if (c[i].norm() - T::one()).abs() > tol {
                return false;
            }
            for j in (i + 1)..3 {
                if c[i].dot(c[j]).abs() > tol {
                    return false;
                }
            }
        }
        (self.det() - T::one()).abs() <= tol
    }

    /// Rotation about the `x` axis by `angle` radians.
    pub fn rot_x(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self { m: [o, z, z, z, c, -s, z, s, c] }
    }

    /// Rotation about the `y` axis by `angle` radians.
    pub fn rot_y(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self { m: [c, z, s, z, o, z, -s, z, c] }
    }

    /// Rotation about the `z` (up) axis by `angle` radians; positive yaw
    /// turns `+x` toward `+y`.
    pub fn rot_z(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self { m: [c, -s, z, s, c, z, z, z, o] }
    }

    /// Entrywise cast through `f64`.
    pub fn cast<U: Real>(&self) -> RotationMatrix<U> {
        let mut m = [U::zero(); 9];
        for (dst, src) in m.iter_mut().zip(self.m.iter()) {
            *dst = U::of(src.as_f64());
        }
        RotationMatrix { m }
    }
}

/// Matrix product `a * b`.
pub fn compose<T: Real>(a: &RotationMatrix<T>, b: &RotationMatrix<T>) -> RotationMatrix<T> {
    let mut m = [T::zero(); 9];
    for r in 0..3 {
        for c in 0..3 {
            m[3 * r + c] = a.row(r).dot(b.col(c));
        }
    }
    RotationMatrix { m }
}

/// Rotation carrying `prev` onto `cur`: `prev^T * cur`.
pub fn relative_rotation<T: Real>(
    prev: &RotationMatrix<T>,
    cur: &RotationMatrix<T>,
) -> RotationMatrix<T> {
    compose(&prev.transpose(), cur)
}

/// 6D rotation encoding: the first two columns of a rotation matrix, stored
/// column-major as `[c0x, c0y, c0z, c1x, c1y, c1z]`.
///
/// Raw values carry no invariants; network outputs land here unconstrained
/// and [`rot6d_to_matrix`] re-orthonormalizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rot6D<T> {
    pub v: [T; 6],
}

impl<T: Real> Rot6D<T> {
    pub fn new(v: [T; 6]) -> Self {
        Self { v }
    }

    /// Encoding of the identity rotation: `(1,0,0,0,1,0)`.
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { v: [o, z, z, z, o, z] }
    }

    pub fn col0(&self) -> Vec3<T> {
        Vec3::new(self.v[0], self.v[1], self.v[2])
    }

    pub fn col1(&self) -> Vec3<T> {
        Vec3::new(self.v[3], self.v[4], self.v[5])
    }

    pub fn cast<U: Real>(&self) -> Rot6D<U> {
        let mut v = [U::zero(); 6];
        for (dst, src) in v.iter_mut().zip(self.v.iter()) {
            *dst = U::of(src.as_f64());
        }
        Rot6D { v }
    }
}

const DEGENERATE_TOL: f64 = 1e-9;

/// Decodes a 6D value into a rotation matrix via Gram-Schmidt.
///
/// The first column is normalized, the second is made orthonormal to it, and
/// the third is their cross product, so the result always has determinant
/// `+1`.
pub fn rot6d_to_matrix<T: Real>(r: &Rot6D<T>) -> Result<RotationMatrix<T>, MathError> {
    let a = r.col0();
    let b = r.col1();
    let n1 = a.norm();
    if n1 <= T::of(DEGENERATE_TOL) {
        return Err(MathError::DegenerateInput("first column norm is ~0"));
    }
    let b1 = a.scale(T::one() / n1);
    let u = b - b1.scale(b1.dot(b));
    let n2 = u.norm();
    if n2 <= T::of(DEGENERATE_TOL) {
        return Err(MathError::DegenerateInput("columns are ~parallel"));
    }
    let b2 = u.scale(T::one() / n2);
    let b3 = b1.cross(b2);
    Ok(RotationMatrix::from_columns(b1, b2, b3))
}

/// Inverse of the 6D encoding: reads off the first two columns.
pub fn matrix_to_rot6d<T: Real>(r: &RotationMatrix<T>) -> Rot6D<T> {
    let c0 = r.col(0);
    let c1 = r.col(1);
    Rot6D::new([c0.x, c0.y, c0.z, c1.x, c1.y, c1.z])
}

/// Vector-Jacobian product of [`rot6d_to_matrix`]: given the adjoint of the
/// output matrix (`d_matrix`, row-major like [`RotationMatrix::m`]), returns
/// the adjoint of the 6D input.
///
/// `r` must be the same (non-degenerate) input that produced the forward
/// matrix.
pub fn rot6d_to_matrix_vjp<T: Real>(
    r: &Rot6D<T>,
    d_matrix: &[T; 9],
) -> Result<[T; 6], MathError> {
    let a = r.col0();
    let b = r.col1();
    let n1 = a.norm();
    if n1 <= T::of(DEGENERATE_TOL) {
        return Err(MathError::DegenerateInput("first column norm is ~0"));
    }
    let b1 = a.scale(T::one() / n1);
    let s = b1.dot(b);
    let u = b - b1.scale(s);
    let n2 = u.norm();
    if n2 <= T::of(DEGENERATE_TOL) {
        return Err(MathError::DegenerateInput("columns are ~parallel"));
    }
    let b2 = u.scale(T::one() / n2);

    // Adjoint columns of the output.
    let c0b = Vec3::new(d_matrix[0], d_matrix[3], d_matrix[6]);
    let c1b = Vec3::new(d_matrix[1], d_matrix[4], d_matrix[7]);
    let c2b = Vec3::new(d_matrix[2], d_matrix[5], d_matrix[8]);

    // b3 = b1 x b2.
    let mut g1 = c0b + b2.cross(c2b);
    let g2 = c1b + c2b.cross(b1);

    // b2 = u / |u|.
    let u_bar = (g2 - b2.scale(b2.dot(g2))).scale(T::one() / n2);

    // u = b - (b1 . b) b1.
    let b_bar = u_bar - b1.scale(b1.dot(u_bar));
    g1 = g1 - b.scale(b1.dot(u_bar)) - u_bar.scale(s);

    // b1 = a / |a|.
    let a_bar = (g1 - b1.scale(b1.dot(g1))).scale(T::one() / n1);

    Ok([a_bar.x, a_bar.y, a_bar.z, b_bar.x, b_bar.y, b_bar.z])
}
