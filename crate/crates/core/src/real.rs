//! Scalar abstraction: the numeric code is written once and instantiated at
//! `f32` (network weights/activations) or `f64` (geometry, metrics, gradient
//! checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64` (identity for `f64`).
    fn of(v: f64) -> Self;

    /// Widen to `f64` (identity for `f64`).
    fn as_f64(self) -> f64;

    /// Dot-product reduction behind [`crate::network::tensor::dot`]. The
    /// default runs the portable fixed-schedule loop; a scalar type may
    /// override it with a host-accelerated kernel. Results are deterministic
    /// for a given build on a given host, but may differ in the last bits
    /// across hosts or types (fused multiply-add has no intermediate
    /// rounding), which every consumer tolerates.
    fn dot_slices(a: &[Self], b: &[Self]) -> Self {
        dot_generic(a, b)
    }

    /// Eight dot products sharing one right-hand side: `out[r] = x_r · w`
    /// where `x_r = x[r*stride .. r*stride + w.len()]`. Batching lets an
    /// accelerated kernel load each `w` element once for all eight rows,
    /// which matters when `w` rows stream from cache. Same determinism
    /// contract as [`Real::dot_slices`]; the per-row sums may differ in the
    /// last bits from `dot_slices` because the accumulator grouping differs.
    fn dot_rows8(x: &[Self], stride: usize, w: &[Self], out: &mut [Self; 8]) {
        debug_assert!(x.len() >= 7 * stride + w.len());
        for (r, o) in out.iter_mut().enumerate() {
            *o = Self::dot_slices(&x[r * stride..r * stride + w.len()], w);
        }
    }

    /// Applies [`gelu`] elementwise: `act[i] = gelu(pre[i])`. The default is
    /// the exact scalar path; an accelerated override may evaluate tanh by a
    /// rational approximation that stays within a couple of ulps, under the
    /// same determinism contract as [`Real::dot_slices`].
    fn gelu_map(pre: &[Self], act: &mut [Self]) {
        for (a, p) in act.iter_mut().zip(pre) {
            *a = gelu(*p);
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u = c * (x + a * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let half = T::of(0.5);
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Portable dot product: 32-element chunks holding four independent 8-lane
/// accumulator groups, folded in a fixed order.
pub(crate) fn dot_generic<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc0 = [T::zero(); 8];
    let mut acc1 = [T::zero(); 8];
    let mut acc2 = [T::zero(); 8];
    let mut acc3 = [T::zero(); 8];
    let mut ca = a.chunks_exact(32);
    let mut cb = b.chunks_exact(32);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc0[k] += xa[k] * xb[k];
        }
        for k in 0..8 {
            acc1[k] += xa[8 + k] * xb[8 + k];
        }
        for k in 0..8 {
            acc2[k] += xa[16 + k] * xb[16 + k];
        }
        for k in 0..8 {
            acc3[k] += xa[24 + k] * xb[24 + k];
        }
    }
    let tail_at = a.len() - ca.remainder().len();
    let mut ta = ca.remainder().chunks_exact(8);
    let mut tb = cb.remainder().chunks_exact(8);
    for (xa, xb) in (&mut ta).zip(&mut tb) {
        for k in 0..8 {
            acc0[k] += xa[k] * xb[k];
        }
    }
    for k in 0..8 {
        acc0[k] += acc1[k];
        acc2[k] += acc3[k];
    }
    let mut s = T::zero();
    for k in 0..8 {
        s += acc0[k] + acc2[k];
    }
    let done = tail_at + (ca.remainder().len() & !7);
    for (x, y) in a[done..].iter().zip(&b[done..]) {
        s += *x * *y;
    }
    s
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn dot_slices(a: &[f32], b: &[f32]) -> f32 {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                // SAFETY: the required CPU features were just detected.
                return unsafe { dot_f32_fma(a, b) };
            }
        }
        dot_generic(a, b)
    }

    fn dot_rows8(x: &[f32], stride: usize, w: &[f32], out: &mut [f32; 8]) {
        debug_assert!(x.len() >= 7 * stride + w.len());
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                // SAFETY: features detected; the length bound is asserted above
                // and rechecked inside the kernel.
                unsafe { dot_rows8_f32_fma(x, stride, w, out) };
                return;
            }
        }
        for (r, o) in out.iter_mut().enumerate() {
            *o = Self::dot_slices(&x[r * stride..r * stride + w.len()], w);
        }
    }

    fn gelu_map(pre: &[f32], act: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                // SAFETY: the required CPU features were just detected.
                unsafe { gelu_f32_fma(pre, act) };
                return;
            }
        }
        for (a, p) in act.iter_mut().zip(pre) {
            *a = gelu(*p);
        }
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// f32 dot product as four 8-lane fused-multiply-add chains, folded in a
/// fixed order. Same chunk schedule as [`dot_generic`]; bit-differences come
/// only from FMA skipping the intermediate rounding.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn dot_f32_fma(a: &[f32], b: &[f32]) -> f32 {
    use std::arch::x86_64::*;
    let n = a.len().min(b.len());
    let mut pa = a.as_ptr();
    let mut pb = b.as_ptr();
    let mut acc0 = _mm256_setzero_ps();
    let mut acc1 = _mm256_setzero_ps();
    let mut acc2 = _mm256_setzero_ps();
    let mut acc3 = _mm256_setzero_ps();
    let mut left = n;
    // SAFETY: the pointers advance together and every load stays within the
    // first n elements.
    while left >= 32 {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(pa), _mm256_loadu_ps(pb), acc0);
        acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(pa.add(8)), _mm256_loadu_ps(pb.add(8)), acc1);
        acc2 = _mm256_fmadd_ps(_mm256_loadu_ps(pa.add(16)), _mm256_loadu_ps(pb.add(16)), acc2);
        acc3 = _mm256_fmadd_ps(_mm256_loadu_ps(pa.add(24)), _mm256_loadu_ps(pb.add(24)), acc3);
        pa = pa.add(32);
        pb = pb.add(32);
        left -= 32;
    }
    while left >= 8 {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(pa), _mm256_loadu_ps(pb), acc0);
        pa = pa.add(8);
        pb = pb.add(8);
        left -= 8;
    }
    acc0 = _mm256_add_ps(acc0, acc1);
    acc2 = _mm256_add_ps(acc2, acc3);
    let mut lanes = [0.0f32; 8];
    _mm256_storeu_ps(lanes.as_mut_ptr(), _mm256_add_ps(acc0, acc2));
    let mut s = 0.0f32;
    for v in lanes {
        s += v;
    }
    for i in n - left..n {
        s += a[i] * b[i];
    }
    s
}

/// Eight f32 dot products against one shared vector. One fused-multiply-add
/// chain per row over 8-lane chunks; each `w` chunk is loaded once and reused
/// by all eight rows, so the weight stream runs at one eighth of the per-row
/// rate.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn dot_rows8_f32_fma(x: &[f32], stride: usize, w: &[f32], out: &mut [f32; 8]) {
    use std::arch::x86_64::*;
    let n = w.len();
    assert!(x.len() >= 7 * stride + n);
    let px = x.as_ptr();
    let mut pw = w.as_ptr();
    let mut rows: [*const f32; 8] = [px; 8];
    for (r, p) in rows.iter_mut().enumerate() {
        *p = px.add(r * stride);
    }
    let mut acc = [_mm256_setzero_ps(); 8];
    let mut left = n;
    // SAFETY: row pointers advance in lockstep with pw and stop with at
    // least 8 readable elements, inside the bound asserted above.
    while left >= 8 {
        let wv = _mm256_loadu_ps(pw);
        for (p, a) in rows.iter_mut().zip(&mut acc) {
            *a = _mm256_fmadd_ps(_mm256_loadu_ps(*p), wv, *a);
            *p = p.add(8);
        }
        pw = pw.add(8);
        left -= 8;
    }
    let i = n - left;
    let mut lanes = [0.0f32; 8];
    for (r, a) in acc.iter().enumerate() {
        _mm256_storeu_ps(lanes.as_mut_ptr(), *a);
        let mut s = 0.0f32;
        for v in lanes {
            s += v;
        }
        for j in i..n {
            s += x[r * stride + j] * w[j];
        }
        out[r] = s;
    }
}

/// Vectorized f32 GELU. tanh is a 13/6-degree rational in the odd/even
/// polynomial form, clamped at ±7.90531110763549805 where it saturates to ±1
/// in f32; the error against the exact scalar path stays within a few ulps
/// of the input magnitude. NaN and ±inf inputs propagate through the final
/// multiply by `x` as in the scalar formula.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gelu_f32_fma(pre: &[f32], act: &mut [f32]) {
    use std::arch::x86_64::*;
    let n = pre.len().min(act.len());
    let c = _mm256_set1_ps(GELU_C as f32);
    let ca = _mm256_set1_ps((GELU_C * GELU_A) as f32);
    let half = _mm256_set1_ps(0.5);
    let hi = _mm256_set1_ps(7.905_311_1);
    let lo = _mm256_set1_ps(-7.905_311_1);
    let a1 = _mm256_set1_ps(4.893_524_6e-3);
    let a3 = _mm256_set1_ps(6.372_619_3e-4);
    let a5 = _mm256_set1_ps(1.485_722_4e-5);
    let a7 = _mm256_set1_ps(5.122_297_1e-8);
    let a9 = _mm256_set1_ps(-8.604_671_5e-11);
    let a11 = _mm256_set1_ps(2.000_187_9e-13);
    let a13 = _mm256_set1_ps(-2.760_768_5e-16);
    let b0 = _mm256_set1_ps(4.893_525_2e-3);
    let b2 = _mm256_set1_ps(2.268_434_6e-3);
    let b4 = _mm256_set1_ps(1.185_347_1e-4);
    let b6 = _mm256_set1_ps(1.198_258_4e-6);
    let mut i = 0usize;
    // SAFETY: all loads and stores stay within the first n elements.
    while i + 8 <= n {
        let x = _mm256_loadu_ps(pre.as_ptr().add(i));
        let x2 = _mm256_mul_ps(x, x);
        let u = _mm256_mul_ps(x, _mm256_fmadd_ps(ca, x2, c));
        // min/max order clamps NaN to the bound; the final multiply by x
        // restores the NaN.
        let s = _mm256_max_ps(_mm256_min_ps(u, hi), lo);
        let z = _mm256_mul_ps(s, s);
        let mut p = a13;
        p = _mm256_fmadd_ps(p, z, a11);
        p = _mm256_fmadd_ps(p, z, a9);
        p = _mm256_fmadd_ps(p, z, a7);
        p = _mm256_fmadd_ps(p, z, a5);
        p = _mm256_fmadd_ps(p, z, a3);
        p = _mm256_fmadd_ps(p, z, a1);
        p = _mm256_mul_ps(p, s);
        let mut q = b6;
        q = _mm256_fmadd_ps(q, z, b4);
        q = _mm256_fmadd_ps(q, z, b2);
        q = _mm256_fmadd_ps(q, z, b0);
        let t = _mm256_div_ps(p, q);
        let hx = _mm256_mul_ps(half, x);
        let g = _mm256_fmadd_ps(hx, t, hx);
        _mm256_storeu_ps(act.as_mut_ptr().add(i), g);
        i += 8;
    }
    for j in i..n {
        act[j] = gelu(pre[j]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip() {
        assert_eq!(f32::of(1.5).as_f64(), 1.5);
        assert_eq!(f64::of(-2.25), -2.25);
        assert_eq!(<f32 as Real>::of(1e300), f32::INFINITY);
    }

    #[test]
    fn dispatched_dot_matches_generic_closely() {
        // The accelerated path may fuse multiply-adds; agreement is checked
        // to a tolerance, not bitwise.
        for n in [0usize, 1, 7, 8, 31, 32, 33, 59, 256, 1000] {
            let a: Vec<f32> = (0..n).map(|i| ((i as f32) * 0.37).sin()).collect();
            let b: Vec<f32> = (0..n).map(|i| ((i as f32) * 0.53).cos()).collect();
            let fast = f32::dot_slices(&a, &b);
            let slow = dot_generic(&a, &b);
            let scale = 1.0f32.max(slow.abs());
            assert!(
                (fast - slow).abs() / scale < 1e-5,
                "n={n}: {fast} vs {slow}"
            );
            let exact: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| *x as f64 * *y as f64)
                .sum();
            assert!(((fast as f64) - exact).abs() / (1.0 + exact.abs()) < 1e-5);
        }
    }

    #[test]
    fn f64_dot_is_the_generic_schedule() {
        let a: Vec<f64> = (0..100).map(|i| (i as f64 * 0.1).sin()).collect();
        let b: Vec<f64> = (0..100).map(|i| (i as f64 * 0.2).cos()).collect();
        assert_eq!(f64::dot_slices(&a, &b), dot_generic(&a, &b));
    }

    #[test]
    fn gelu_map_matches_exact_scalar() {
        let mut pre: Vec<f32> = (-12000..=12000).map(|i| i as f32 * 1e-3).collect();
        pre.extend_from_slice(&[
            0.0,
            -0.0,
            f32::MIN_POSITIVE,
            -f32::MIN_POSITIVE,
            30.0,
            -30.0,
            1e30,
            -1e30,
        ]);
        let mut act = vec![0.0f32; pre.len()];
        f32::gelu_map(&pre, &mut act);
        for (x, got) in pre.iter().zip(&act) {
            let want = gelu(*x as f64);
            // The tanh factor carries a few-ulp error and the closing
            // multiply scales it by x, so the bound scales with |x|.
            let bound = 3e-7 * (1.0 + (*x as f64).abs());
            assert!(
                ((*got as f64) - want).abs() <= bound,
                "x={x}: {got} vs {want}"
            );
        }
        // f64 stays on the exact scalar path bitwise.
        let pre64: Vec<f64> = (-100..=100).map(|i| i as f64 * 0.1).collect();
        let mut act64 = vec![0.0f64; pre64.len()];
        f64::gelu_map(&pre64, &mut act64);
        for (x, got) in pre64.iter().zip(&act64) {
            assert_eq!(*got, gelu(*x));
        }
    }

    #[test]
    fn dot_rows8_matches_per_row_dots() {
        for n in [1usize, 8, 17, 32, 59, 256] {
            let stride = n + 3;
            let x: Vec<f32> =
                (0..7 * stride + n).map(|i| ((i as f32) * 0.29).sin()).collect();
            let w: Vec<f32> = (0..n).map(|i| ((i as f32) * 0.41).cos()).collect();
            let mut got = [0.0f32; 8];
            f32::dot_rows8(&x, stride, &w, &mut got);
            for r in 0..8 {
                let row = &x[r * stride..r * stride + n];
                let want: f64 = row.iter().zip(&w).map(|(a, b)| *a as f64 * *b as f64).sum();
                let scale = 1.0f64.max(want.abs());
                assert!(
                    ((got[r] as f64) - want).abs() / scale < 1e-5,
                    "n={n} r={r}: {} vs {want}",
                    got[r]
                );
            }
        }
        // f64 keeps the exact per-row schedule.
        let n = 70;
        let stride = n;
        let x: Vec<f64> = (0..7 * stride + n).map(|i| (i as f64 * 0.13).sin()).collect();
        let w: Vec<f64> = (0..n).map(|i| (i as f64 * 0.07).cos()).collect();
        let mut got = [0.0f64; 8];
        f64::dot_rows8(&x, stride, &w, &mut got);
        for r in 0..8 {
            assert_eq!(got[r], dot_generic(&x[r * stride..r * stride + n], &w));
        }
    }
}
