//! Small dense linear algebra: skew-symmetric bases, the matrix exponential,
//! and associative scans of matrix products.

use super::kernels as kn;
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{MfError, Result};

/// Basis of the skew-symmetric b x b matrices: K = b(b-1)/2 generators.
///
/// Generators are ordered by axis pair (p, q), p < q, with S[p][q] = -1 and
/// S[q][p] = +1, so for b = 2 the single generator is [[0, -1], [1, 0]].
#[derive(Clone, Debug)]
pub struct SkewBasis<T: Real> {
    block_size: usize,
    generators: Vec<Tensor<T>>,
}

impl<T: Real> SkewBasis<T> {
    pub fn new(block_size: usize) -> Self {
        assert!(block_size >= 2, "skew basis needs block size >= 2");
        let mut generators = Vec::new();
        for p in 0..block_size {
            for q in p + 1..block_size {
                let mut m = vec![T::zero(); block_size * block_size];
                m[p * block_size + q] = -T::one();
                m[q * block_size + p] = T::one();
                generators.push(Tensor::new(&[block_size, block_size], m));
            }
        }
        Self { block_size, generators }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Number of generators, b(b-1)/2.
    pub fn k(&self) -> usize {
        self.generators.len()
    }

    pub fn generators(&self) -> &[Tensor<T>] {
        &self.generators
    }

    /// Linear combination sum_i theta_i S_i.
    pub fn combine(&self, theta: &[T]) -> Result<Tensor<T>> {
        if theta.len() != self.k() {
            return Err(MfError::Shape(format!(
                "expected {} coefficients for block size {}, got {}",
                self.k(),
                self.block_size,
                theta.len()
            )));
        }
        let b = self.block_size;
        let mut out = vec![T::zero(); b * b];
        for (c, gen) in theta.iter().zip(&self.generators) {
            kn::axpy(&mut out, *c, gen.data());
        }
        Ok(Tensor::new(&[b, b], out))
    }
}

/// exp(sum_i theta_i S_i) for a skew basis; the result lies in SO(b).
///
/// b = 2 uses the closed-form rotation; larger blocks go through
/// scaling-and-squaring.
pub fn matrix_exp_skew<T: Real>(theta: &[T], basis: &SkewBasis<T>) -> Result<Tensor<T>> {
    if basis.block_size() == 2 {
        if theta.len() != 1 {
            return Err(MfError::Shape(format!(
                "block size 2 takes 1 coefficient, got {}",
                theta.len()
            )));
        }
        let (c, s) = (theta[0].cos(), theta[0].sin());
        return Ok(Tensor::new(&[2, 2], vec![c, -s, s, c]));
    }
    let a = basis.combine(theta)?;
    Ok(matrix_exp(&a))
}

/// Dense matrix exponential by scaling-and-squaring with a Taylor core.
///
/// Squaring count is ceil(log2(max(1, ||A||_inf))) + 6.
pub fn matrix_exp<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let b = a.shape()[0];
    assert_eq!(a.shape(), &[b, b], "matrix_exp needs a square matrix");
    let norm = inf_norm(a);
    let squarings = norm.f64().max(1.0).log2().ceil() as u32 + 6;
    let scale = T::of((2.0f64).powi(-(squarings as i32)));
    let scaled = a.map(|x| x * scale);

    let mut result = exp_taylor(&scaled, b);
    for _ in 0..squarings {
        let mut sq = vec![T::zero(); b * b];
        kn::matmul_nn(result.data(), result.data(), &mut sq, b, b, b, false);
        result = Tensor::new(&[b, b], sq);
    }
    result
}

/// Phi(A) = sum_{k>=0} A^k / (k+1)!, so that exp(A) = I + A Phi(A).
///
/// Used by the zero-order-hold discretization: B_bar = Phi(dt A) dt B.
/// Doubled up from the scaled core via Phi(2X) = (exp(X) + I) Phi(X) / 2.
pub fn matrix_phi<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let b = a.shape()[0];
    assert_eq!(a.shape(), &[b, b], "matrix_phi needs a square matrix");
    let norm = inf_norm(a);
    let squarings = norm.f64().max(1.0).log2().ceil() as u32 + 6;
    let scale = T::of((2.0f64).powi(-(squarings as i32)));
    let scaled = a.map(|x| x * scale);

    let mut phi = phi_taylor(&scaled, b);
    let mut ex = exp_taylor(&scaled, b);
    let half = T::of(0.5);
    for _ in 0..squarings {
        // Phi(2X) = (exp(X) + I) Phi(X) / 2; exp(2X) = exp(X)^2
        let mut expi = ex.clone();
        for i in 0..b {
            expi.data_mut()[i * b + i] += T::one();
        }
        let mut next = vec![T::zero(); b * b];
        kn::matmul_nn(expi.data(), phi.data(), &mut next, b, b, b, false);
        phi = Tensor::new(&[b, b], next.iter().map(|&x| x * half).collect());
        let mut sq = vec![T::zero(); b * b];
        kn::matmul_nn(ex.data(), ex.data(), &mut sq, b, b, b, false);
        ex = Tensor::new(&[b, b], sq);
    }
    phi
}

fn exp_taylor<T: Real>(a: &Tensor<T>, b: usize) -> Tensor<T> {
    let mut result = identity(b);
    let mut term = identity(b);
    for k in 1..=12 {
        let mut next = vec![T::zero(); b * b];
        kn::matmul_nn(term.data(), a.data(), &mut next, b, b, b, false);
        let inv = T::of(1.0 / k as f64);
        term = Tensor::new(&[b, b], next.iter().map(|&x| x * inv).collect());
        kn::add_assign(result.data_mut(), term.data());
    }
    result
}

fn phi_taylor<T: Real>(a: &Tensor<T>, b: usize) -> Tensor<T> {
    // Phi = sum_k A^k / (k+1)!
    let mut result = identity(b);
    let mut power = identity(b);
    let mut fact = 1.0f64;
    for k in 1..=12 {
        let mut next = vec![T::zero(); b * b];
        kn::matmul_nn(power.data(), a.data(), &mut next, b, b, b, false);
        power = Tensor::new(&[b, b], next);
        fact *= (k + 1) as f64;
        let inv = T::of(1.0 / fact);
        kn::axpy(result.data_mut(), inv, power.data());
    }
    result
}

pub fn identity<T: Real>(b: usize) -> Tensor<T> {
    Tensor::from_fn(&[b, b], |i| if i / b == i % b { T::one() } else { T::zero() })
}

pub fn inf_norm<T: Real>(a: &Tensor<T>) -> T {
    let b = a.shape()[1];
    (0..a.shape()[0])
        .map(|i| a.data()[i * b..(i + 1) * b].iter().map(|x| x.abs()).sum::<T>())
        .fold(T::zero(), |m, r| m.max(r))
}

/// Cumulative products out[t] = mats[t] · mats[t-1] · ... · mats[0], computed
/// with an associative (Hillis-Steele) scan. Any combine order is valid since
/// (A, B) -> A·B is associative.
pub fn assoc_scan_matmul<T: Real>(mats: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    if mats.is_empty() {
        return Ok(Vec::new());
    }
    let b = mats[0].shape()[0];
    for m in mats {
        if m.shape() != [b, b] {
            return Err(MfError::Shape(format!(
                "ragged matrix sizes in scan: expected {}x{}, got {:?}",
                b,
                b,
                m.shape()
            )));
        }
    }
    let mut cur: Vec<Tensor<T>> = mats.to_vec();
    let mut offset = 1usize;
    while offset < cur.len() {
        let mut next = cur.clone();
        for t in offset..cur.len() {
            let mut prod = vec![T::zero(); b * b];
            // later segment times earlier segment
            kn::matmul_nn(cur[t].data(), cur[t - offset].data(), &mut prod, b, b, b, false);
            next[t] = Tensor::new(&[b, b], prod);
        }
        cur = next;
        offset *= 2;
    }
    Ok(cur)
}

/// Sequential left-multiplication oracle for the scan above.
pub fn seq_scan_matmul<T: Real>(mats: &[Tensor<T>]) -> Vec<Tensor<T>> {
    let mut out = Vec::with_capacity(mats.len());
    let mut acc: Option<Tensor<T>> = None;
    for m in mats {
        let b = m.shape()[0];
        let next = match &acc {
            None => m.clone(),
            Some(prev) => {
                let mut prod = vec![T::zero(); b * b];
                kn::matmul_nn(m.data(), prev.data(), &mut prod, b, b, b, false);
                Tensor::new(&[b, b], prod)
            }
        };
        out.push(next.clone());
        acc = Some(next);
    }
    out
}

/// Project a 2x2 matrix onto the traceless (sl(2)) subspace:
/// A = raw - tr(raw)/2 · I. exp(A) then has unit determinant.
pub fn sl2_generator<T: Real>(raw: &Tensor<T>) -> Tensor<T> {
    assert_eq!(raw.shape(), &[2, 2], "sl2_generator takes a 2x2 matrix");
    let half_tr = (raw.data()[0] + raw.data()[3]) * T::of(0.5);
    let mut out = raw.clone();
    out.data_mut()[0] -= half_tr;
    out.data_mut()[3] -= half_tr;
    out
}

/// Determinant of a small dense matrix via Gaussian elimination with
/// partial pivoting.
pub fn det<T: Real>(a: &Tensor<T>) -> T {
    let n = a.shape()[0];
    assert_eq!(a.shape(), &[n, n], "det needs a square matrix");
    let mut m = a.data().to_vec();
    let mut sign = T::one();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[piv * n + col].abs() {
                piv = r;
            }
        }
        if m[piv * n + col] == T::zero() {
            return T::zero();
        }
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
            }
            sign = -sign;
        }
        let d = m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] / d;
            for j in col..n {
                let sub = f * m[col * n + j];
                m[r * n + j] = m[r * n + j] - sub;
            }
        }
    }
    let mut out = sign;
    for i in 0..n {
        out = out * m[i * n + i];
    }
    out
}

/// Max deviation of RᵀR from the identity.
pub fn orthogonality_defect<T: Real>(r: &Tensor<T>) -> T {
    let b = r.shape()[0];
    let mut rtr = vec![T::zero(); b * b];
    kn::matmul_tn(r.data(), r.data(), &mut rtr, b, b, b, false);
    let mut worst = T::zero();
    for i in 0..b {
        for j in 0..b {
            let want = if i == j { T::one() } else { T::zero() };
            worst = worst.max((rtr[i * b + j] - want).abs());
        }
    }
    worst
}
