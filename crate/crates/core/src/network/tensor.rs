//! Dense numeric kernels for the transformer, generic over the scalar type.
//!
//! Matrices are row-major `[out × in]` so every inner loop walks contiguous
//! memory. Reductions go through [`Real::dot_slices`], which runs a fixed
//! accumulator schedule per scalar type (vectorized with fused multiply-add
//! for `f32` where the host supports it) so results are deterministic for a
//! given build on a given host.

use crate::real::Real;

/// Dot product with a fixed accumulator schedule, dispatched through
/// [`Real::dot_slices`] so `f32` can use the host's fused-multiply-add
/// vectors. Deterministic per build and host.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    T::dot_slices(a, b)
}

/// `y += a · x`.
pub fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// `out = W·x + b` with `W` row-major `[out_dim × in_dim]`.
pub fn linear_fwd<T: Real>(w: &[T], b: &[T], x: &[T], out: &mut [T]) {
    let in_dim = x.len();
    debug_assert_eq!(w.len(), b.len() * in_dim);
    for (o, (out_o, b_o)) in out.iter_mut().zip(b).enumerate() {
        *out_o = dot(&w[o * in_dim..(o + 1) * in_dim], x) + *b_o;
    }
}

/// `out[t] = W·x[t] + b` over `rows` packed input rows. Rows are processed
/// eight at a time through [`Real::dot_rows8`] so each weight row streams
/// from cache once per block instead of once per row; leftover rows fall back
/// to [`linear_fwd`].
pub fn linear_fwd_batch<T: Real>(w: &[T], b: &[T], x: &[T], out: &mut [T], rows: usize) {
    let out_dim = b.len();
    debug_assert_eq!(out.len(), rows * out_dim);
    if rows == 0 {
        return;
    }
    let in_dim = x.len() / rows;
    debug_assert_eq!(x.len(), rows * in_dim);
    debug_assert_eq!(w.len(), out_dim * in_dim);
    let mut t = 0usize;
    while t + 8 <= rows {
        let xs = &x[t * in_dim..(t + 8) * in_dim];
        let mut acc = [T::zero(); 8];
        for (o, b_o) in b.iter().enumerate() {
            T::dot_rows8(xs, in_dim, &w[o * in_dim..(o + 1) * in_dim], &mut acc);
            for r in 0..8 {
                out[(t + r) * out_dim + o] = acc[r] + *b_o;
            }
        }
        t += 8;
    }
    for t in t..rows {
        linear_fwd(w, b, &x[t * in_dim..(t + 1) * in_dim], &mut out[t * out_dim..(t + 1) * out_dim]);
    }
}

/// Accumulates parameter gradients of a linear layer: `dW += dy ⊗ x`,
/// `db += dy`.
pub fn linear_bwd_params<T: Real>(dw: &mut [T], db: &mut [T], x: &[T], dy: &[T]) {
    let in_dim = x.len();
    for (o, dy_o) in dy.iter().enumerate() {
        axpy(&mut dw[o * in_dim..(o + 1) * in_dim], *dy_o, x);
        db[o] += *dy_o;
    }
}

/// Accumulates the input gradient of a linear layer: `dx += Wᵀ·dy`.
pub fn linear_bwd_input<T: Real>(w: &[T], dy: &[T], dx: &mut [T]) {
    let in_dim = dx.len();
    for (o, dy_o) in dy.iter().enumerate() {
        axpy(dx, *dy_o, &w[o * in_dim..(o + 1) * in_dim]);
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// LayerNorm forward. Writes `y = γ·(x−μ)/σ + β` and returns the normalized
/// values and the inverse standard deviation needed by the backward pass.
pub fn layernorm_fwd<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    y: &mut [T],
    xhat: &mut [T],
) -> T {
    let n = T::of(x.len() as f64);
    let mut mean = T::zero();
    for v in x {
        mean += *v;
    }
    mean /= n;
    let mut var = T::zero();
    for v in x {
        let d = *v - mean;
        var += d * d;
    }
    var /= n;
    let inv_std = T::one() / (var + T::of(LAYERNORM_EPS)).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv_std;
        y[i] = gamma[i] * xhat[i] + beta[i];
    }
    inv_std
}

/// LayerNorm backward. `dx` is overwritten; `dgamma`/`dbeta` accumulate.
pub fn layernorm_bwd<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: T,
    gamma: &[T],
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let n = T::of(dy.len() as f64);
    let mut sum_dxhat = T::zero();
    let mut sum_dxhat_xhat = T::zero();
    for i in 0..dy.len() {
        dgamma[i] += dy[i] * xhat[i];
        dbeta[i] += dy[i];
        let dxhat = dy[i] * gamma[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat[i];
    }
    let m1 = sum_dxhat / n;
    let m2 = sum_dxhat_xhat / n;
    for i in 0..dy.len() {
        let dxhat = dy[i] * gamma[i];
        dx[i] = inv_std * (dxhat - m1 - xhat[i] * m2);
    }
}

/// In-place numerically stable softmax over one row.
pub fn softmax_row<T: Real>(row: &mut [T]) {
    let mut max = row[0];
    for v in row.iter() {
        if *v > max {
            max = *v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax backward for one row: `ds = p ∘ (dp − ⟨dp, p⟩)`.
pub fn softmax_row_bwd<T: Real>(p: &[T], dp: &[T], ds: &mut [T]) {
    let inner = dot(dp, p);
    for i in 0..p.len() {
        ds[i] = p[i] * (dp[i] - inner);
    }
}

pub use crate::real::{gelu, gelu_grad};
