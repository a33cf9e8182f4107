//! Differentiable tensor operations and the small linear-algebra kernels the
//! rest of the crate builds on.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod linalg;
pub mod real;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_one};
pub use graph::{Grads, Graph, Var};
pub use linalg::{assoc_scan_matmul, matrix_exp, matrix_exp_skew, seq_scan_matmul, sl2_generator, SkewBasis};
pub use real::Real;
pub use tensor::Tensor;

use crate::error::{MfError, Result};

/// Inclusive cumulative sum along the leading (time) axis.
pub fn cumsum_time<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().is_empty() || x.shape()[0] == 0 {
        return Err(MfError::Shape("cumsum_time needs a nonempty time axis".into()));
    }
    let row = x.numel() / x.shape()[0];
    let mut out = vec![T::zero(); x.numel()];
    kernels::cumsum_lead(x.data(), &mut out, row);
    Ok(Tensor::new(x.shape(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn cumsum_trivial_examples() {
        let zeros = Tensor::<f64>::new(&[3], vec![0.0; 3]);
        assert_eq!(cumsum_time(&zeros).unwrap().data(), &[0.0, 0.0, 0.0]);
        let ones = Tensor::<f64>::new(&[3], vec![1.0; 3]);
        assert_eq!(cumsum_time(&ones).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    /// Lengths 1..32 against a sequential left-fold oracle.
    #[test]
    fn cumsum_matches_fold_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for t in 1..=32usize {
            let x = Tensor::<f64>::randn(&[t, 3], 1.0, &mut rng);
            let got = cumsum_time(&x).unwrap();
            let mut acc = [0.0f64; 3];
            for s in 0..t {
                for j in 0..3 {
                    acc[j] += x.data()[s * 3 + j];
                    assert!(
                        (got.data()[s * 3 + j] - acc[j]).abs() < 1e-12,
                        "cumsum mismatch at t={t}, s={s}"
                    );
                }
            }
        }
    }

    #[test]
    fn cumsum_rejects_empty_time_axis() {
        let empty = Tensor::<f64>::new(&[0, 3], vec![]);
        assert!(cumsum_time(&empty).is_err());
    }

    #[test]
    fn grad_check_quadratic() {
        let x = Tensor::<f64>::new(&[2], vec![1.0, 2.0]);
        let err = grad_check_one(
            |g, v| {
                let sq = g.mul(v, v);
                g.sum_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "quadratic grad check failed: {err}");
        // analytic gradient itself is [2, 4]
        let mut g = Graph::<f64>::new();
        let v = g.param(x);
        let sq = g.mul(v, v);
        let loss = g.sum_all(sq);
        let mut grads = g.backward(loss);
        assert_eq!(grads.take(v).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_check_reports_nonfinite_loss() {
        let x = Tensor::<f64>::new(&[1], vec![800.0]);
        let res = grad_check_one(
            |g, v| {
                let e = g.exp(v);
                let e = g.exp(e);
                g.sum_all(e)
            },
            &x,
            1e-5,
        );
        assert!(res.is_err());
    }
}
