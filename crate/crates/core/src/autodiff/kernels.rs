//! Dense kernels shared by the tape ops.
//!
//! Every reduction runs in a fixed order: dot products use eight interleaved
//! partial sums combined pairwise, everything else accumulates sequentially
//! over the leading index. Results are therefore bitwise reproducible.

use super::tensor::Real;

const LANES: usize = 8;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        let (xa, xb) = (&a[base..base + LANES], &b[base..base + LANES]);
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[n,m] = a[n,k] · b[k,m]`
pub fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            if s != T::zero() {
                axpy(s, &b[p * m..(p + 1) * m], row);
            }
        }
    }
    out
}

/// `out[n,m] = a[n,k] · w[m,k]ᵀ`, the linear-layer product.
pub fn matmul_nt<T: Real>(a: &[T], w: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let x = &a[i * k..(i + 1) * k];
        let row = &mut out[i * m..(i + 1) * m];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(x, &w[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out[k,m] += a[n,k]ᵀ · g[n,m]`
pub fn matmul_tn_acc<T: Real>(a: &[T], g: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            if s != T::zero() {
                axpy(s, grow, &mut out[p * m..(p + 1) * m]);
            }
        }
    }
}

/// `out[n,k] += g[n,m] · w[m,k]`
pub fn matmul_acc<T: Real>(g: &[T], w: &[T], n: usize, m: usize, k: usize, out: &mut [T]) {
    for i in 0..n {
        let orow = &mut out[i * k..(i + 1) * k];
        for j in 0..m {
            let s = g[i * m + j];
            if s != T::zero() {
                axpy(s, &w[j * k..(j + 1) * k], orow);
            }
        }
    }
}

/// `out[n,k] += g[n,m] · b[k,m]ᵀ`
pub fn matmul_nt_acc<T: Real>(g: &[T], b: &[T], n: usize, m: usize, k: usize, out: &mut [T]) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] += dot(grow, &b[p * m..(p + 1) * m]);
        }
    }
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
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

pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, b| a + b);
    max + sum.ln()
}
