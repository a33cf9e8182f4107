//! Two-route check that rotary linear attention equals a state-space
//! recurrence with a 2x2 skew-symmetric recurrent matrix.

use crate::numerics::{cumsum_time, Real, Tensor};
use crate::Result;

/// y_t = sum_{s<=t} <R̄_t q_t, R̄_s k_s> v_s computed two ways:
/// (i) rotate the streams by the cumulative angles and take dot products;
/// (ii) run the recurrence H_t = R(omega·delta_t) H_{t-1} + k_t v_tᵀ and read
/// out with q_t. Returns the max absolute deviation between the two routes.
///
/// q, k are (t, d) with d = 2·n_b; v is (t, d_v); omega is (n_b,);
/// deltas is (t,).
pub fn linear_rope_ssm_equivalence<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    omega: &Tensor<T>,
    deltas: &Tensor<T>,
) -> Result<T> {
    let t = q.shape()[0];
    let d = q.shape()[1];
    let n_b = omega.numel();
    assert_eq!(d, 2 * n_b, "stream dim must be twice the block count");
    let d_v = v.shape()[1];

    // cumulative angles per block
    let theta_steps = Tensor::from_fn(&[t, n_b], |i| {
        let (s, b) = (i / n_b, i % n_b);
        omega.data()[b] * deltas.data()[s]
    });
    let theta = cumsum_time(&theta_steps)?;

    let rot = |x: &[T], ang: &[T], sign: T| -> Vec<T> {
        let mut out = x.to_vec();
        crate::numerics::kernels::rotate_pairs_row(&mut out, ang, sign);
        out
    };

    // route (i): rotated linear attention
    let mut route_attention = vec![T::zero(); t * d_v];
    let q_bar: Vec<Vec<T>> = (0..t)
        .map(|s| rot(&q.data()[s * d..(s + 1) * d], &theta.data()[s * n_b..(s + 1) * n_b], -T::one()))
        .collect();
    let k_bar: Vec<Vec<T>> = (0..t)
        .map(|s| rot(&k.data()[s * d..(s + 1) * d], &theta.data()[s * n_b..(s + 1) * n_b], -T::one()))
        .collect();
    for ti in 0..t {
        for s in 0..=ti {
            let w = q_bar[ti]
                .iter()
                .zip(&k_bar[s])
                .map(|(&a, &b)| a * b)
                .sum::<T>();
            for c in 0..d_v {
                route_attention[ti * d_v + c] += w * v.data()[s * d_v + c];
            }
        }
    }

    // route (ii): state-space recurrence, state H in R^{d x d_v}
    let mut route_ssm = vec![T::zero(); t * d_v];
    let mut state = vec![T::zero(); d * d_v];
    for ti in 0..t {
        // rotate the state's key index by this step's angles
        let ang = &theta_steps.data()[ti * n_b..(ti + 1) * n_b];
        for c in 0..d_v {
            for b in 0..n_b {
                let (cs, sn) = (ang[b].cos(), ang[b].sin());
                let i1 = (2 * b) * d_v + c;
                let i2 = (2 * b + 1) * d_v + c;
                let (h1, h2) = (state[i1], state[i2]);
                state[i1] = h1 * cs - h2 * sn;
                state[i2] = h1 * sn + h2 * cs;
            }
        }
        // rank-one update k_t v_tᵀ
        for r in 0..d {
            let kv = k.data()[ti * d + r];
            for c in 0..d_v {
                state[r * d_v + c] += kv * v.data()[ti * d_v + c];
            }
        }
        // readout y = Hᵀ q
        for c in 0..d_v {
            let mut acc = T::zero();
            for r in 0..d {
                acc += state[r * d_v + c] * q.data()[ti * d + r];
            }
            route_ssm[ti * d_v + c] = acc;
        }
    }

    let mut worst = T::zero();
    for i in 0..t * d_v {
        worst = worst.max((route_attention[i] - route_ssm[i]).abs());
    }
    Ok(worst)
}
