//! Path-integration positional core: project inputs to integration times,
//! cumulative-sum them along time, convert to angles through a frequency
//! bank, and apply the resulting rotations to key/query streams or to a
//! learned zero coordinate.

use std::sync::Arc;

use rand::Rng;

use crate::error::{MfError, Result};
use crate::numerics::{self, Graph, Real, SkewBasis, Tensor, Var};

pub use crate::numerics::sl2_generator;

/// Angular velocities per head and per rotation block, plus the init scales.
#[derive(Clone, Debug)]
pub struct FrequencyBank<T: Real> {
    pub omega: Tensor<T>,
    pub omega_max: f64,
    pub delta_max: f64,
    pub learnable: bool,
}

/// Geometric frequency ladder: within each head the n_b frequencies decay
/// from omega_max toward omega_max / delta_max, with delta_max = n·omega_max/(2π)
/// so the slowest block completes one cycle over a grid of size n.
pub fn init_frequencies<T: Real>(
    n_heads: usize,
    n_b: usize,
    omega_max: f64,
    grid_size: usize,
) -> Result<FrequencyBank<T>> {
    if n_b < 1 || n_heads < 1 {
        return Err(MfError::Config("frequency bank needs n_heads, n_b >= 1".into()));
    }
    if grid_size < 2 {
        return Err(MfError::Config("grid size hint must be >= 2".into()));
    }
    if omega_max <= 1.0 || omega_max > std::f64::consts::TAU {
        eprintln!(
            "warning: omega_max = {omega_max} outside (1, 2*pi]; keeping it for ablation"
        );
    }
    let delta_max = grid_size as f64 * omega_max / std::f64::consts::TAU;
    let per_head: Vec<f64> = (0..n_b)
        .map(|i| omega_max * (1.0 / delta_max).powf(i as f64 / n_b as f64))
        .collect();
    let mut data = Vec::with_capacity(n_heads * n_b);
    for _ in 0..n_heads {
        data.extend(per_head.iter().map(|&w| T::of(w)));
    }
    Ok(FrequencyBank {
        omega: Tensor::new(&[n_heads, n_b], data),
        omega_max,
        delta_max,
        learnable: true,
    })
}

/// Shape book-keeping for the low-rank integration-time projector.
#[derive(Clone, Copy, Debug)]
pub struct DeltaProjector {
    pub d: usize,
    pub r: usize,
    pub n_h: usize,
    pub n_b: usize,
    /// Generators per block: 1 in commutative mode, b(b-1)/2 otherwise.
    pub k_gen: usize,
    pub nonlinear: bool,
    pub hidden: usize,
}

impl DeltaProjector {
    pub fn out_dim(&self) -> usize {
        self.n_h * self.n_b * self.k_gen
    }

    /// Fresh projector weights: (name, tensor, decay) triples for registration.
    pub fn init_weights<T: Real>(&self, rng: &mut impl Rng) -> Vec<(String, Tensor<T>)> {
        let lim_in = 1.0 / (self.d as f64).sqrt();
        let mut out = vec![(
            "delta.w_in".to_string(),
            Tensor::randu(&[self.d, self.r], -lim_in, lim_in, rng),
        )];
        let lim_r = 1.0 / (self.r as f64).sqrt();
        if self.nonlinear {
            let lim_h = 1.0 / (self.hidden as f64).sqrt();
            out.push((
                "delta.w_h1".to_string(),
                Tensor::randu(&[self.r, self.hidden], -lim_r, lim_r, rng),
            ));
            out.push(("delta.b_h1".to_string(), Tensor::zeros(&[self.hidden])));
            out.push((
                "delta.w_out".to_string(),
                Tensor::randu(&[self.hidden, self.out_dim()], -lim_h, lim_h, rng),
            ));
        } else {
            out.push((
                "delta.w_out".to_string(),
                Tensor::randu(&[self.r, self.out_dim()], -lim_r, lim_r, rng),
            ));
        }
        out
    }
}

/// Projector weights as graph vars for one forward pass.
pub enum ProjWeights {
    Linear { w_in: Var, w_out: Var },
    Mlp { w_in: Var, w_h1: Var, b_h1: Var, w_out: Var },
}

/// Project inputs to integration times. Returns the per-step increments
/// reshaped to (t, n_h, n_b, K_gen) plus the rank-r intermediate, which is
/// cached for the analysis probes.
pub fn project_deltas<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    proj: &DeltaProjector,
    weights: &ProjWeights,
) -> (Var, Var) {
    let t = g.val(x).shape()[0];
    let (delta_in, flat) = match weights {
        ProjWeights::Linear { w_in, w_out } => {
            let dinner = g.matmul(x, *w_in);
            (dinner, g.matmul(dinner, *w_out))
        }
        ProjWeights::Mlp { w_in, w_h1, b_h1, w_out } => {
            let dinner = g.matmul(x, *w_in);
            let h = g.matmul(dinner, *w_h1);
            let h = g.add(h, *b_h1);
            let h = g.gelu(h);
            (dinner, g.matmul(h, *w_out))
        }
    };
    let delta = g.reshape(flat, &[t, proj.n_h, proj.n_b, proj.k_gen]);
    (delta, delta_in)
}

/// Cumulative rotation angles theta[t] = omega ⊙ cumsum(delta)[t], shaped
/// (t, n_h, n_b). Commutative mode only.
pub fn path_integrate<T: Real>(
    g: &mut Graph<T>,
    deltas: Var,
    omega: Var,
) -> Result<Var> {
    let shape = g.val(deltas).shape().to_vec();
    if shape.len() == 4 && shape[3] != 1 {
        return Err(MfError::Config(format!(
            "path_integrate is commutative (K_gen = 1); got K_gen = {} — use \
             path_integrate_noncommutative",
            shape[3]
        )));
    }
    let (t, n_h, n_b) = (shape[0], shape[1], shape[2]);
    let d3 = g.reshape(deltas, &[t, n_h, n_b]);
    let cum = g.cumsum_lead(d3);
    Ok(g.mul(cum, omega))
}

/// Rotate a (t, n_h, d_h) stream by per-block angles (t, n_h, n_b), d_h = 2·n_b.
/// sign = -1 applies the inverse rotation. Raw (non-graph) form.
pub fn apply_rotation<T: Real>(
    x: &Tensor<T>,
    angles: &Tensor<T>,
    sign: i8,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ts = angles.shape();
    let d_h = xs[xs.len() - 1];
    if d_h % 2 != 0 {
        return Err(MfError::Shape(format!("apply_rotation needs even d_h, got {d_h}")));
    }
    if xs[..xs.len() - 1] != ts[..ts.len() - 1] || d_h != 2 * ts[ts.len() - 1] {
        return Err(MfError::Shape(format!(
            "apply_rotation shapes {:?} vs {:?}",
            xs, ts
        )));
    }
    let n_b = ts[ts.len() - 1];
    let rows = angles.numel() / n_b;
    let s = if sign >= 0 { T::one() } else { -T::one() };
    let mut out = x.data().to_vec();
    for r in 0..rows {
        numerics::kernels::rotate_pairs_row(
            &mut out[r * d_h..(r + 1) * d_h],
            &angles.data()[r * n_b..(r + 1) * n_b],
            s,
        );
    }
    Ok(Tensor::new(xs, out))
}

/// Learned zero coordinate of the positional stream.
#[derive(Clone, Debug)]
pub struct ZeroCoordinate<T: Real> {
    pub k_star: Tensor<T>,
    pub q_star: Tensor<T>,
}

impl<T: Real> ZeroCoordinate<T> {
    pub fn init(n_h: usize, d_h: usize, tied: bool, rng: &mut impl Rng) -> Self {
        let k_star = Tensor::randn(&[n_h, d_h], 1.0, rng);
        let q_star = if tied { k_star.clone() } else { Tensor::randn(&[n_h, d_h], 1.0, rng) };
        Self { k_star, q_star }
    }
}

/// Positional key/query streams: K_P[t] = R(theta[t])·k*, Q_P[t] = R(theta[t])·q*.
/// `theta` is (n_h, t, n_b) (heads leading); stars are (n_h, d_h).
/// Returns (n_h, t, d_h) streams.
pub fn position_stream<T: Real>(
    g: &mut Graph<T>,
    theta_heads: Var,
    k_star: Var,
    q_star: Var,
) -> (Var, Var) {
    let t = g.val(theta_heads).shape()[1];
    let mut rotate_star = |star: Var| -> Var {
        let tiled = g.broadcast_lead(star, t); // (t, n_h, d_h)
        let tiled = g.swap_lead2(tiled); // (n_h, t, d_h)
        g.rotate_pairs(tiled, theta_heads, false)
    };
    let k_p = rotate_star(k_star);
    let q_p = rotate_star(q_star);
    (k_p, q_p)
}

/// Cumulative rotations for the non-commutative case: per step
/// R_t = exp(Σ_i theta[t,..,i] S_i), composed in order along the time axis.
/// Output shape (t, n_h, n_b, b, b). Raw oracle form.
pub fn path_integrate_noncommutative<T: Real>(
    deltas: &Tensor<T>,
    basis: &SkewBasis<T>,
) -> Result<Tensor<T>> {
    let s = deltas.shape().to_vec();
    if s.len() != 4 || s[3] != basis.k() {
        return Err(MfError::Shape(format!(
            "expected (t, n_h, n_b, {}) angles for block size {}, got {:?}",
            basis.k(),
            basis.block_size(),
            s
        )));
    }
    let (t, n_h, n_b, k) = (s[0], s[1], s[2], s[3]);
    let b = basis.block_size();
    let mut out = vec![T::zero(); t * n_h * n_b * b * b];
    for h in 0..n_h {
        for blk in 0..n_b {
            let mats: Vec<Tensor<T>> = (0..t)
                .map(|step| {
                    let base = ((step * n_h + h) * n_b + blk) * k;
                    numerics::matrix_exp_skew(&deltas.data()[base..base + k], basis)
                })
                .collect::<Result<_>>()?;
            let cums = numerics::assoc_scan_matmul(&mats)?;
            for (step, m) in cums.iter().enumerate() {
                let dst = ((step * n_h + h) * n_b + blk) * b * b;
                out[dst..dst + b * b].copy_from_slice(m.data());
            }
        }
    }
    Ok(Tensor::new(&[t, n_h, n_b, b, b], out))
}

/// Graph-side batched exponential of small generator blocks, Taylor core with
/// a fixed scaling count (per-step training angles are O(1), so 8 halvings
/// keep the truncation error below f64 round-off for norms up to ~10).
pub fn matrix_exp_graph<T: Real>(g: &mut Graph<T>, a: Var) -> Var {
    const SQUARINGS: usize = 8;
    const TERMS: usize = 10;
    let shape = g.val(a).shape().to_vec();
    let b = shape[shape.len() - 1];
    let rows: usize = shape[..shape.len() - 2].iter().product();
    let eye = {
        let mut data = vec![T::zero(); rows * b * b];
        for r in 0..rows {
            for i in 0..b {
                data[r * b * b + i * b + i] = T::one();
            }
        }
        Tensor::new(&shape, data)
    };
    let scale = T::of((2.0f64).powi(-(SQUARINGS as i32)));
    let scaled = g.scale(a, scale);
    let eye = g.constant(eye);
    let mut acc = eye;
    let mut term = eye;
    for k in 1..=TERMS {
        let next = g.matmul(term, scaled);
        term = g.scale(next, T::of(1.0 / k as f64));
        acc = g.add(acc, term);
    }
    for _ in 0..SQUARINGS {
        acc = g.matmul(acc, acc);
    }
    acc
}

/// Graph-side cumulative rotations for the non-commutative model path:
/// theta (t, n_h, n_b, K) -> cumulative products (t, n_h, n_b, b, b),
/// differentiable end to end.
pub fn nc_cumulative_rotations<T: Real>(
    g: &mut Graph<T>,
    theta: Var,
    basis: &SkewBasis<T>,
) -> Var {
    let s = g.val(theta).shape().to_vec();
    let (t, n_h, n_b) = (s[0], s[1], s[2]);
    assert_eq!(s[3], basis.k(), "generator count mismatch");
    let gens = Arc::new(basis.generators().to_vec());
    let a = g.skew_combine(theta, gens); // (t, n_h, n_b, b, b)
    let per_step = matrix_exp_graph(g, a);
    let mut cums: Vec<Var> = Vec::with_capacity(t);
    for step in 0..t {
        let r_t = g.slice_lead(per_step, step); // (n_h, n_b, b, b)
        let cum = match cums.last() {
            None => r_t,
            Some(&prev) => g.matmul(r_t, prev),
        };
        cums.push(cum);
    }
    let out = g.stack_lead(&cums);
    debug_assert_eq!(g.val(out).shape(), &[t, n_h, n_b, basis.block_size(), basis.block_size()]);
    out
}

/// Fixed rotary schedule: theta[h, s, k] = (s+1) · omega[h, k], i.e. the
/// angles produced by path integration of a unit increment per step.
pub fn fixed_schedule_angles<T: Real>(bank: &FrequencyBank<T>, t: usize) -> Tensor<T> {
    let (n_h, n_b) = (bank.omega.shape()[0], bank.omega.shape()[1]);
    Tensor::from_fn(&[n_h, t, n_b], |i| {
        let k = i % n_b;
        let s = (i / n_b) % t;
        let h = i / (n_b * t);
        bank.omega.data()[h * n_b + k] * T::of((s + 1) as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, kernels as kn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::TAU;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_frequency_is_omega_max() {
        let bank = init_frequencies::<f64>(1, 1, TAU, 64).unwrap();
        assert_eq!(bank.omega.shape(), &[1, 1]);
        assert!((bank.omega.data()[0] - TAU).abs() < 1e-12);
    }

    #[test]
    fn lowest_frequency_constraint() {
        // omega_max = 2π, n = 64: the target floor omega_max/delta_max is 2π/64
        let bank = init_frequencies::<f64>(2, 8, TAU, 64).unwrap();
        assert!((bank.omega_max / bank.delta_max - TAU / 64.0).abs() < 1e-12);
        // frequencies decay geometrically and stay above the floor
        for h in 0..2 {
            for i in 1..8 {
                let (w0, w1) = (bank.omega.data()[h * 8 + i - 1], bank.omega.data()[h * 8 + i]);
                assert!(w1 < w0);
                assert!(w1 > TAU / 64.0 - 1e-12);
            }
        }
    }

    #[test]
    fn geometric_ratio_matches_formula() {
        let bank = init_frequencies::<f64>(1, 4, 2.0, 16).unwrap();
        let delta_max = 16.0 * 2.0 / TAU;
        assert!((bank.delta_max - delta_max).abs() < 1e-12);
        let w = bank.omega.data();
        let want = delta_max.powf(-3.0 / 4.0);
        assert!((w[3] / w[0] - want).abs() < 1e-10, "w3/w0 = {}, want {}", w[3] / w[0], want);
    }

    #[test]
    fn project_deltas_matches_dense_oracle() {
        let mut r = rng(2);
        let proj = DeltaProjector { d: 6, r: 2, n_h: 2, n_b: 3, k_gen: 1, nonlinear: false, hidden: 0 };
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut r);
        let w_in = Tensor::<f64>::randn(&[6, 2], 1.0, &mut r);
        let w_out = Tensor::<f64>::randn(&[2, 6], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wi, wo) = (g.constant(x.clone()), g.constant(w_in.clone()), g.constant(w_out.clone()));
        let (delta, delta_in) = project_deltas(&mut g, xv, &proj, &ProjWeights::Linear { w_in: wi, w_out: wo });
        assert_eq!(g.val(delta).shape(), &[4, 2, 3, 1]);
        // explicit two-matmul oracle
        let mut inner = vec![0.0; 4 * 2];
        kn::matmul_nn(x.data(), w_in.data(), &mut inner, 4, 6, 2, false);
        assert!(g.val(delta_in).max_diff(&Tensor::new(&[4, 2], inner.clone())) < 1e-12);
        let mut full = vec![0.0; 4 * 6];
        kn::matmul_nn(&inner, w_out.data(), &mut full, 4, 2, 6, false);
        assert!(
            g.val(delta).reshape(&[4, 6]).unwrap().max_diff(&Tensor::new(&[4, 6], full)) < 1e-10
        );

        // zero input maps to zero increments
        let zx = g.constant(Tensor::zeros(&[4, 6]));
        let (zd, _) = project_deltas(&mut g, zx, &proj, &ProjWeights::Linear { w_in: wi, w_out: wo });
        assert!(g.val(zd).max_abs() < 1e-15);

        // one-hot row selects the matching row of W_in
        let mut oh = Tensor::<f64>::zeros(&[1, 6]);
        oh.data_mut()[3] = 1.0;
        let ohv = g.constant(oh);
        let (_, din) = project_deltas(&mut g, ohv, &proj, &ProjWeights::Linear { w_in: wi, w_out: wo });
        assert!(
            (g.val(din).data()[0] - w_in.data()[3 * 2]).abs() < 1e-15
                && (g.val(din).data()[1] - w_in.data()[3 * 2 + 1]).abs() < 1e-15
        );
    }

    #[test]
    fn path_integrate_zero_and_unit_deltas() {
        let bank = init_frequencies::<f64>(2, 3, TAU, 16).unwrap();
        let mut g = Graph::new();
        let omega = g.constant(bank.omega.clone());
        let zeros = g.constant(Tensor::zeros(&[5, 2, 3, 1]));
        let theta = path_integrate(&mut g, zeros, omega).unwrap();
        assert!(g.val(theta).max_abs() < 1e-15);

        let ones = g.constant(Tensor::full(&[5, 2, 3, 1], 1.0));
        let theta = path_integrate(&mut g, ones, omega).unwrap();
        for s in 0..5 {
            for h in 0..2 {
                for k in 0..3 {
                    let want = (s + 1) as f64 * bank.omega.data()[h * 3 + k];
                    let got = g.val(theta).data()[(s * 2 + h) * 3 + k];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
        // matches the fixed schedule used by the rotary baseline
        let fixed = fixed_schedule_angles(&bank, 5);
        let th = g.val(theta).clone();
        let mut gg = Graph::<f64>::new();
        let thv = gg.constant(th);
        let swapped = gg.swap_lead2(thv);
        assert!(gg.val(swapped).max_diff(&fixed) < 1e-12);
    }

    #[test]
    fn path_integrate_rejects_noncommutative_input() {
        let mut g = Graph::<f64>::new();
        let omega = g.constant(Tensor::full(&[1, 1], 1.0));
        let deltas = g.constant(Tensor::zeros(&[3, 1, 1, 6]));
        let err = path_integrate(&mut g, deltas, omega);
        assert!(matches!(err, Err(MfError::Config(msg)) if msg.contains("noncommutative")));
    }

    /// The central parallel/sequential equivalence: R(omega·cumsum(delta)[t])
    /// equals the ordered product of the per-step rotations.
    #[test]
    fn cumsum_angles_equal_sequential_rotation_products() {
        let mut r = rng(3);
        let bank = init_frequencies::<f64>(1, 1, TAU, 12).unwrap();
        let w = bank.omega.data()[0];
        let deltas = Tensor::<f64>::randu(&[12, 1, 1, 1], -1.5, 1.5, &mut r);
        let mut g = Graph::new();
        let omega = g.constant(bank.omega.clone());
        let dv = g.constant(deltas.clone());
        let theta = path_integrate(&mut g, dv, omega).unwrap();

        let basis = SkewBasis::<f64>::new(2);
        let steps: Vec<Tensor<f64>> = (0..12)
            .map(|t| numerics::matrix_exp_skew(&[w * deltas.data()[t]], &basis).unwrap())
            .collect();
        let cums = numerics::assoc_scan_matmul(&steps).unwrap();
        for t in 0..12 {
            let want = numerics::matrix_exp_skew(&[g.val(theta).data()[t]], &basis).unwrap();
            assert!(cums[t].max_diff(&want) < 1e-6, "step {t}");
        }
    }

    #[test]
    fn apply_rotation_identity_and_quarter_turn() {
        let x = Tensor::<f64>::new(&[1, 1, 2], vec![1.0, 0.0]);
        let zero = Tensor::<f64>::zeros(&[1, 1, 1]);
        assert!(apply_rotation(&x, &zero, 1).unwrap().max_diff(&x) < 1e-15);
        let quarter = Tensor::<f64>::new(&[1, 1, 1], vec![std::f64::consts::FRAC_PI_2]);
        let y = apply_rotation(&x, &quarter, 1).unwrap();
        assert!((y.data()[0]).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn apply_rotation_matches_dense_blockdiag_and_inverts() {
        let mut r = rng(4);
        let (t, n_h, n_b) = (5, 2, 3);
        let x = Tensor::<f64>::randn(&[t, n_h, 2 * n_b], 1.0, &mut r);
        let th = Tensor::<f64>::randn(&[t, n_h, n_b], 1.0, &mut r);
        let y = apply_rotation(&x, &th, 1).unwrap();
        // dense block-diagonal oracle
        let basis = SkewBasis::<f64>::new(2);
        for s in 0..t {
            for h in 0..n_h {
                for k in 0..n_b {
                    let ang = th.data()[(s * n_h + h) * n_b + k];
                    let rot = numerics::matrix_exp_skew(&[ang], &basis).unwrap();
                    let xi = &x.data()[(s * n_h + h) * 2 * n_b + 2 * k..];
                    let want = [
                        rot.data()[0] * xi[0] + rot.data()[1] * xi[1],
                        rot.data()[2] * xi[0] + rot.data()[3] * xi[1],
                    ];
                    let got = &y.data()[(s * n_h + h) * 2 * n_b + 2 * k..];
                    assert!((got[0] - want[0]).abs() < 1e-6 && (got[1] - want[1]).abs() < 1e-6);
                }
            }
        }
        // inverse action round trip and norm preservation
        let back = apply_rotation(&y, &th, -1).unwrap();
        assert!(back.max_diff(&x) < 1e-6);
        assert!((y.norm() - x.norm()).abs() < 1e-6);
    }

    #[test]
    fn apply_rotation_rejects_odd_head_dim() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3]);
        let th = Tensor::<f64>::zeros(&[1, 1, 1]);
        assert!(apply_rotation(&x, &th, 1).is_err());
    }

    /// Relative-position identity <R(θi)q, R(θj)k> = <R(θi−θj)q, k>.
    #[test]
    fn relative_position_identity() {
        let mut r = rng(5);
        for _ in 0..20 {
            let q = Tensor::<f64>::randn(&[1, 1, 8], 1.0, &mut r);
            let k = Tensor::<f64>::randn(&[1, 1, 8], 1.0, &mut r);
            let ti = Tensor::<f64>::randn(&[1, 1, 4], 2.0, &mut r);
            let tj = Tensor::<f64>::randn(&[1, 1, 4], 2.0, &mut r);
            let qi = apply_rotation(&q, &ti, 1).unwrap();
            let kj = apply_rotation(&k, &tj, 1).unwrap();
            let lhs: f64 = qi.data().iter().zip(kj.data()).map(|(&a, &b)| a * b).sum();
            let diff = Tensor::<f64>::new(
                &[1, 1, 4],
                ti.data().iter().zip(tj.data()).map(|(&a, &b)| a - b).collect(),
            );
            let q_rel = apply_rotation(&q, &diff, 1).unwrap();
            let rhs: f64 = q_rel.data().iter().zip(k.data()).map(|(&a, &b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-6);
        }
    }

    #[test]
    fn position_stream_properties() {
        let mut r = rng(6);
        let (n_h, n_b, t) = (2, 4, 6);
        let d_h = 2 * n_b;
        let zc = ZeroCoordinate::<f64>::init(n_h, d_h, false, &mut r);
        // theta == 0 keeps the zero coordinate at every step
        let mut g = Graph::new();
        let theta0 = g.constant(Tensor::zeros(&[n_h, t, n_b]));
        let ks = g.param(zc.k_star.clone());
        let qs = g.param(zc.q_star.clone());
        let (kp, _qp) = position_stream(&mut g, theta0, ks, qs);
        for s in 0..t {
            for h in 0..n_h {
                for c in 0..d_h {
                    let got = g.val(kp).data()[(h * t + s) * d_h + c];
                    assert!((got - zc.k_star.data()[h * d_h + c]).abs() < 1e-12);
                }
            }
        }
        // norm preservation under random angles
        let theta = g.constant(Tensor::randn(&[n_h, t, n_b], 1.0, &mut r));
        let (kp, qp) = position_stream(&mut g, theta, ks, qs);
        for s in 0..t {
            for h in 0..n_h {
                let row = &g.val(kp).data()[(h * t + s) * d_h..(h * t + s + 1) * d_h];
                let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let want: f64 =
                    zc.k_star.data()[h * d_h..(h + 1) * d_h].iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - want).abs() < 1e-9);
            }
        }
        // equal stars and equal angles match maximally
        let tied = ZeroCoordinate::<f64>::init(n_h, d_h, true, &mut r);
        let kt = g.param(tied.k_star.clone());
        let qt = g.param(tied.q_star.clone());
        let same = g.constant(Tensor::full(&[n_h, 1, n_b], 0.37));
        let (kp2, qp2) = position_stream(&mut g, same, kt, qt);
        for h in 0..n_h {
            let krow = &g.val(kp2).data()[h * d_h..(h + 1) * d_h];
            let qrow = &g.val(qp2).data()[h * d_h..(h + 1) * d_h];
            let dot: f64 = krow.iter().zip(qrow).map(|(&a, &b)| a * b).sum();
            let norm2: f64 = tied.k_star.data()[h * d_h..(h + 1) * d_h].iter().map(|x| x * x).sum();
            assert!((dot - norm2).abs() < 1e-9);
        }
        let _ = qp;
    }

    /// A closed square path (increments sum to zero) returns the positional
    /// key to its start.
    #[test]
    fn closed_path_returns_to_start() {
        let mut r = rng(7);
        let (n_h, n_b) = (1, 4);
        let d_h = 2 * n_b;
        let bank = init_frequencies::<f64>(n_h, n_b, TAU, 8).unwrap();
        // per-axis increments for a square loop, projected onto blocks by a
        // random axis->block weighting
        let w_axis = Tensor::<f64>::randn(&[2, n_b], 1.0, &mut r);
        let square = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
        let mut deltas = Tensor::<f64>::zeros(&[4, n_h, n_b, 1]);
        for (s, (dx, dy)) in square.iter().enumerate() {
            for k in 0..n_b {
                deltas.data_mut()[(s * n_b) + k] =
                    dx * w_axis.data()[k] + dy * w_axis.data()[n_b + k];
            }
        }
        let mut g = Graph::new();
        let omega = g.constant(bank.omega.clone());
        let dv = g.constant(deltas);
        let theta = path_integrate(&mut g, dv, omega).unwrap();
        let theta_h = g.swap_lead2(theta);
        let zc = ZeroCoordinate::<f64>::init(n_h, d_h, false, &mut r);
        let ks = g.constant(zc.k_star.clone());
        let qs = g.constant(zc.q_star.clone());
        let (kp, _) = position_stream(&mut g, theta_h, ks, qs);
        // last angle is zero, so the final position equals the start
        let last = &g.val(kp).data()[3 * d_h..4 * d_h];
        for (c, &v) in last.iter().enumerate() {
            assert!((v - zc.k_star.data()[c]).abs() < 1e-5);
        }
    }

    #[test]
    fn noncommutative_path_matches_commutative_for_b2() {
        let mut r = rng(8);
        let deltas = Tensor::<f64>::randn(&[6, 1, 2, 1], 1.0, &mut r);
        let basis = SkewBasis::<f64>::new(2);
        let rots = path_integrate_noncommutative(&deltas, &basis).unwrap();
        let mut g = Graph::new();
        let omega = g.constant(Tensor::full(&[1, 2], 1.0));
        let dv = g.constant(deltas);
        let theta = path_integrate(&mut g, dv, omega).unwrap();
        for t in 0..6 {
            for blk in 0..2 {
                let ang = g.val(theta).data()[t * 2 + blk];
                let want = numerics::matrix_exp_skew(&[ang], &basis).unwrap();
                let got = &rots.data()[(t * 2 + blk) * 4..(t * 2 + blk + 1) * 4];
                for c in 0..4 {
                    assert!((got[c] - want.data()[c]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn noncommutative_two_step_differs_from_exp_of_sum() {
        let basis = SkewBasis::<f64>::new(4);
        let mut deltas = Tensor::<f64>::zeros(&[2, 1, 1, 6]);
        deltas.data_mut()[0] = 1.0; // step 1 rotates in plane (0,1)
        deltas.data_mut()[6 + 1] = 1.0; // step 2 rotates in plane (0,2)
        let rots = path_integrate_noncommutative(&deltas, &basis).unwrap();
        let summed = numerics::matrix_exp_skew(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0], &basis).unwrap();
        let last = Tensor::new(&[4, 4], rots.data()[16..32].to_vec());
        assert!(last.max_diff(&summed) > 1e-3);
        // all-zero angles give identities
        let zero = path_integrate_noncommutative(&Tensor::zeros(&[3, 1, 1, 6]), &basis).unwrap();
        for t in 0..3 {
            let m = Tensor::new(&[4, 4], zero.data()[t * 16..(t + 1) * 16].to_vec());
            assert!(m.max_diff(&numerics::linalg::identity(4)) < 1e-12);
        }
    }

    #[test]
    fn noncommutative_rejects_wrong_generator_count() {
        let basis = SkewBasis::<f64>::new(4);
        let deltas = Tensor::<f64>::zeros(&[2, 1, 1, 3]);
        assert!(path_integrate_noncommutative(&deltas, &basis).is_err());
    }

    #[test]
    fn graph_exp_matches_raw_and_nc_scan() {
        let mut r = rng(9);
        let basis = SkewBasis::<f64>::new(4);
        let theta = Tensor::<f64>::randn(&[3, 1, 1, 6], 0.8, &mut r);
        let mut g = Graph::new();
        let tv = g.constant(theta.clone());
        let cums = nc_cumulative_rotations(&mut g, tv, &basis);
        let want = path_integrate_noncommutative(&theta, &basis).unwrap();
        assert!(g.val(cums).max_diff(&want) < 1e-9);
    }

    /// Gradient flows through the rotation application and path integration.
    #[test]
    fn rotation_loss_grad_check() {
        let mut r = rng(10);
        let x = Tensor::<f64>::randn(&[4, 1, 6], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[4, 1, 6], 1.0, &mut r);
        let omega = Tensor::<f64>::randu(&[1, 3], 0.5, 2.0, &mut r);
        let deltas = Tensor::<f64>::randn(&[4, 1, 3, 1], 1.0, &mut r);
        let err = grad_check(
            |g, v| {
                let th = path_integrate(g, v[1], v[0]).unwrap();
                let xv = g.constant(x.clone());
                let y = g.rotate_pairs(xv, th, false);
                let wv = g.constant(w.clone());
                let y = g.mul(y, wv);
                let y = g.mul(y, y);
                g.sum_all(y)
            },
            &[omega, deltas],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "rotation loss grad err {err}");
    }
}
