//! Raw slice kernels shared by forward ops and their VJPs.
//!
//! All matrices are row-major. The `acc` flag switches between overwrite and
//! accumulate so backward passes can sum into existing gradient buffers.

use super::real::Real;

/// out[m,n] (+)= a[m,k] · b[k,n]
pub fn matmul_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !acc {
        out.fill(T::zero());
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_ip * bv;
            }
        }
    }
}

/// out[m,n] (+)= a[m,k] · b[n,k]ᵀ
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot = a_row.iter().zip(b_row.iter()).map(|(&x, &y)| x * y).sum::<T>();
            let o = &mut out[i * n + j];
            *o = if acc { *o + dot } else { dot };
        }
    }
}

/// out[m,n] (+)= a[k,m]ᵀ · b[k,n]
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !acc {
        out.fill(T::zero());
    }
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_pi * bv;
            }
        }
    }
}

/// out (+)= x, elementwise.
pub fn add_assign<T: Real>(out: &mut [T], x: &[T]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o += v;
    }
}

/// out (+)= c · x, elementwise.
pub fn axpy<T: Real>(out: &mut [T], c: T, x: &[T]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = *o + c * v;
    }
}

/// Inclusive prefix sum along the leading axis; `row` is the trailing size.
pub fn cumsum_lead<T: Real>(x: &[T], out: &mut [T], row: usize) {
    debug_assert_eq!(x.len(), out.len());
    debug_assert_eq!(x.len() % row.max(1), 0);
    out[..row].copy_from_slice(&x[..row]);
    let t = x.len() / row;
    for s in 1..t {
        for j in 0..row {
            out[s * row + j] = out[(s - 1) * row + j] + x[s * row + j];
        }
    }
}

/// Inclusive suffix sum along the leading axis (backward of cumsum_lead).
pub fn suffix_sum_lead<T: Real>(x: &[T], out: &mut [T], row: usize) {
    debug_assert_eq!(x.len(), out.len());
    let t = x.len() / row.max(1);
    out[(t - 1) * row..].copy_from_slice(&x[(t - 1) * row..]);
    for s in (0..t - 1).rev() {
        for j in 0..row {
            out[s * row + j] = out[(s + 1) * row + j] + x[s * row + j];
        }
    }
}

/// Softmax over `x`, written into `out` (same length).
pub fn softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let m = x.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// log(sum(exp(x))) computed stably.
pub fn log_sum_exp<T: Real>(x: &[T]) -> T {
    let m = x.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let s = x.iter().map(|&v| (v - m).exp()).sum::<T>();
    m + s.ln()
}

/// In-place rotation of interleaved pairs: for each pair index k,
/// (x1, x2) ← (x1·cos − s·x2·sin, s·x1·sin + x2·cos) with s = ±1.
pub fn rotate_pairs_row<T: Real>(x: &mut [T], theta: &[T], sign: T) {
    debug_assert_eq!(x.len(), 2 * theta.len());
    for (k, &th) in theta.iter().enumerate() {
        let (c, s) = (th.cos(), sign * th.sin());
        let x1 = x[2 * k];
        let x2 = x[2 * k + 1];
        x[2 * k] = x1 * c - x2 * s;
        x[2 * k + 1] = x1 * s + x2 * c;
    }
}
