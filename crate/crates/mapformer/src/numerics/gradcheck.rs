//! Central-difference gradient verification.

use super::graph::{Graph, Var};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{MfError, Result};

/// Max relative error between analytic gradients and central differences,
/// over every coordinate of every parameter tensor.
///
/// `f` rebuilds the scalar loss from fresh parameter leaves on each call, so
/// it is evaluated 2N+1 times for N total coordinates. Run at f64.
pub fn grad_check<T: Real>(
    f: impl Fn(&mut Graph<T>, &[Var]) -> Var,
    params: &[Tensor<T>],
    eps: T,
) -> Result<T> {
    let eval = |tensors: &[Tensor<T>]| -> Result<(T, Vec<Option<Tensor<T>>>)> {
        let mut g = Graph::new();
        g.set_check_finite(false);
        let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars);
        let value = g.val(loss).item();
        if !value.is_finite() {
            return Err(MfError::NonFinite("loss in grad_check".into()));
        }
        let mut grads = g.backward(loss);
        let out = vars.iter().map(|&v| grads.take(v)).collect();
        Ok((value, out))
    };

    let (_, analytic) = eval(params)?;
    let mut worst = T::zero();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ci] += eps;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ci] -= eps;
            let (lp, _) = eval(&plus)?;
            let (lm, _) = eval(&minus)?;
            let numeric = (lp - lm) / (eps + eps);
            let grad = analytic[pi]
                .as_ref()
                .map(|t| t.data()[ci])
                .unwrap_or(T::zero());
            let rel = (grad - numeric).abs()
                / (grad.abs() + numeric.abs() + T::of(1e-12));
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-tensor convenience form.
pub fn grad_check_one<T: Real>(
    f: impl Fn(&mut Graph<T>, Var) -> Var,
    params: &Tensor<T>,
    eps: T,
) -> Result<T> {
    grad_check(|g, vars| f(g, vars[0]), std::slice::from_ref(params), eps)
}
