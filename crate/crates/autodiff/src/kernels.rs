//! Graph-free numeric kernels shared by the tape ops and the cached decoding path.

use crate::float::{lit, Float};

/// `c = op(a)·op(b) + beta·c` where `op(a)` is m×k and `op(b)` is k×n.
///
/// A transposed operand is stored row-major in its *untransposed* shape, i.e. `a`
/// holds a k×m buffer when `trans_a` is set.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(m: usize, k: usize, n: usize, a: &[T], trans_a: bool, b: &[T], trans_b: bool, beta: T, c: &mut [T]) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_strided(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c);
}

/// In-place softmax over one row, with max subtraction. Entries equal to -inf map to 0.
pub fn softmax_row<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn softmax_rows<T: Float>(data: &mut [T], width: usize) {
    for row in data.chunks_mut(width) {
        softmax_row(row);
    }
}

/// log Σ exp(row), stable.
pub fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

/// Row-wise layer normalization. Writes the normalized-and-affine output to `out` and,
/// when given, the per-row mean and reciprocal std.
pub fn layer_norm_rows<T: Float>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
    mut stats: Option<(&mut [T], &mut [T])>,
) {
    let d = gamma.len();
    let inv_d = T::one() / T::from_f64(d as f64);
    for (r, (xr, yr)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for i in 0..d {
            yr[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
        }
        if let Some((means, rstds)) = stats.as_mut() {
            means[r] = mean;
            rstds[r] = rstd;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU, evaluated as `x·σ(2u)` with `u = c·(x + a·x³)`.
#[inline]
pub fn gelu<T: Float>(x: T) -> T {
    let u = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
    x / (T::one() + (-(u + u)).exp())
}

#[inline]
pub fn gelu_grad<T: Float>(x: T) -> T {
    gelu_with_grad(x).1
}

/// GELU and its derivative from a single exponential.
#[inline]
pub fn gelu_with_grad<T: Float>(x: T) -> (T, T) {
    let a = lit::<T>(GELU_A);
    let c = lit::<T>(GELU_C);
    let u = c * (x + a * x * x * x);
    let s = T::one() / (T::one() + (-(u + u)).exp());
    let du = c * (T::one() + lit::<T>(3.0) * a * x * x);
    (x * s, s + lit::<T>(2.0) * x * s * (T::one() - s) * du)
}
