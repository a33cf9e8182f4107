//! Reverse-mode autodiff over tensor-level operations.
//!
//! A `Graph` is a tape: every operation appends a node holding the result
//! tensor and enough structure to run its vector-Jacobian product. Gradients
//! are computed by a single reverse sweep from a scalar loss. Ops are
//! coarse-grained (matmul, softmax, rotation, ...) so tape overhead stays
//! negligible next to the kernels.

use std::sync::Arc;

use super::kernels as kn;
use super::real::Real;
use super::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    Clamp(Var, T, T),
    Reshape(Var),
    SwapLead2(Var),
    BroadcastLead(Var),
    SliceLead(Var, usize),
    StackLead(Box<[Var]>),
    SumAll(Var),
    CumsumLead(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    CausalSoftmax(Var),
    RowNormCausal(Var),
    CausalZero(Var),
    SuffixSumCausal(Var),
    PosInterp { z: Var, p: Var },
    RotatePairs { x: Var, theta: Var, inverse: bool },
    Rot2Combine { x: Var, c: Var, s: Var },
    SkewCombine { theta: Var, basis: Arc<Vec<Tensor<T>>> },
    Embedding { table: Var, ids: Arc<Vec<usize>> },
    MaskedCrossEntropy { logits: Var, targets: Arc<Vec<usize>>, weights: Arc<Vec<T>> },
    RmsNorm { x: Var, gain: Var },
    SinAOverA(Var),
    VersinOverA(Var),
    ExpM1Over(Var),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

/// Gradients keyed by `Var`, produced by `Graph::backward`.
pub struct Grads<T: Real> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots[v.0].take()
    }
}

const RMSNORM_EPS: f64 = 1e-6;
// Below this magnitude the sinc-style discretization factors switch to their
// Taylor series to avoid cancellation in both value and derivative.
const SERIES_CUTOFF: f64 = 1e-3;

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    /// Toggle per-op NaN/Inf checking (defaults to on in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if self.check_finite && !value.all_finite() {
            panic!("non-finite value produced at node {}", self.nodes.len());
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = bcast_apply(self.val(a), self.val(b), |x, y| x + y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = bcast_apply(self.val(a), self.val(b), |x, y| x - y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = bcast_apply(self.val(a), self.val(b), |x, y| x * y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.val(a).map(|x| -x);
        let g = self.ng(a);
        self.push(v, Op::Neg(a), g)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.val(a).map(|x| x * c);
        let g = self.ng(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.val(a).map(|x| x + c);
        let g = self.ng(a);
        self.push(v, Op::AddScalar(a, c), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.val(a).map(|x| x.exp());
        let g = self.ng(a);
        self.push(v, Op::Exp(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.val(a).map(sigmoid);
        let g = self.ng(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.val(a).map(softplus);
        let g = self.ng(a);
        self.push(v, Op::Softplus(a), g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.val(a).map(gelu);
        let g = self.ng(a);
        self.push(v, Op::Gelu(a), g)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.val(a).map(|x| x.max(lo).min(hi));
        let g = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), g)
    }

    /// sin(a)/a with a series branch near zero.
    pub fn sin_a_over_a(&mut self, a: Var) -> Var {
        let v = self.val(a).map(sin_a_over_a);
        let g = self.ng(a);
        self.push(v, Op::SinAOverA(a), g)
    }

    /// (1 − cos(a))/a with a series branch near zero.
    pub fn versin_over_a(&mut self, a: Var) -> Var {
        let v = self.val(a).map(versin_over_a);
        let g = self.ng(a);
        self.push(v, Op::VersinOverA(a), g)
    }

    /// (exp(a) − 1)/a with a series branch near zero.
    pub fn expm1_over(&mut self, a: Var) -> Var {
        let v = self.val(a).map(expm1_over);
        let g = self.ng(a);
        self.push(v, Op::ExpM1Over(a), g)
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.val(a).reshape(shape).expect("reshape");
        let g = self.ng(a);
        self.push(v, Op::Reshape(a), g)
    }

    /// Swap the first two axes: (a, b, rest..) -> (b, a, rest..).
    pub fn swap_lead2(&mut self, a: Var) -> Var {
        let v = swap_lead2_tensor(self.val(a));
        let g = self.ng(a);
        self.push(v, Op::SwapLead2(a), g)
    }

    /// Tile along a new leading axis of length `t`.
    pub fn broadcast_lead(&mut self, a: Var, t: usize) -> Var {
        let src = self.val(a);
        let mut shape = vec![t];
        shape.extend_from_slice(src.shape());
        let row = src.numel();
        let mut data = Vec::with_capacity(t * row);
        for _ in 0..t {
            data.extend_from_slice(src.data());
        }
        let v = Tensor::new(&shape, data);
        let g = self.ng(a);
        self.push(v, Op::BroadcastLead(a), g)
    }

    /// Select index `i` of the leading axis, dropping it.
    pub fn slice_lead(&mut self, a: Var, i: usize) -> Var {
        let src = self.val(a);
        let t = src.shape()[0];
        assert!(i < t, "slice_lead index {} out of range {}", i, t);
        let row = src.numel() / t;
        let shape = src.shape()[1..].to_vec();
        let v = Tensor::new(&shape, src.data()[i * row..(i + 1) * row].to_vec());
        let g = self.ng(a);
        self.push(v, Op::SliceLead(a, i), g)
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack_lead(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_lead of nothing");
        let inner = self.val(parts[0]).shape().to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.val(parts[0]).numel());
        let mut g = false;
        for &p in parts {
            assert_eq!(self.val(p).shape(), &inner[..], "stack_lead shape mismatch");
            data.extend_from_slice(self.val(p).data());
            g |= self.ng(p);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let v = Tensor::new(&shape, data);
        self.push(v, Op::StackLead(parts.to_vec().into_boxed_slice()), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().copied().sum::<T>();
        let g = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), g)
    }

    // ---- sequence ----

    /// Inclusive cumulative sum along the leading (time) axis.
    pub fn cumsum_lead(&mut self, a: Var) -> Var {
        let src = self.val(a);
        assert!(!src.shape().is_empty() && src.shape()[0] >= 1, "cumsum needs a time axis");
        let row = src.numel() / src.shape()[0];
        let mut out = vec![T::zero(); src.numel()];
        kn::cumsum_lead(src.data(), &mut out, row);
        let v = Tensor::new(src.shape(), out);
        let g = self.ng(a);
        self.push(v, Op::CumsumLead(a), g)
    }

    // ---- linear algebra ----

    /// Matrix product with matching batch dims: (..,m,k) x (..,k,n) -> (..,m,n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs >= 2 dims");
        assert_eq!(sa[..sa.len() - 2], sb[..sb.len() - 2], "matmul batch dims differ");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, kb, "matmul inner dims {}x{}", k, kb);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            kn::matmul_nn(
                &self.val(a).data()[bi * m * k..(bi + 1) * m * k],
                &self.val(b).data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
                false,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let v = Tensor::new(&shape, out);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    /// a · bᵀ with matching batch dims: (..,m,k) x (..,n,k) -> (..,m,n).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul_nt needs >= 2 dims");
        assert_eq!(sa[..sa.len() - 2], sb[..sb.len() - 2], "matmul_nt batch dims differ");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (n, kb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, kb, "matmul_nt inner dims {}x{}", k, kb);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            kn::matmul_nt(
                &self.val(a).data()[bi * m * k..(bi + 1) * m * k],
                &self.val(b).data()[bi * n * k..(bi + 1) * n * k],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
                false,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let v = Tensor::new(&shape, out);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), g)
    }

    // ---- attention ----

    /// Row-wise softmax over the causal support j <= i; zero above the diagonal.
    /// Shape (n_h, t, t).
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let src = self.val(a);
        let (h, t) = causal_dims(src.shape());
        let mut out = vec![T::zero(); src.numel()];
        for hi in 0..h {
            for i in 0..t {
                let base = hi * t * t + i * t;
                kn::softmax_row(&src.data()[base..base + i + 1], &mut out[base..base + i + 1]);
            }
        }
        let v = Tensor::new(src.shape(), out);
        let g = self.ng(a);
        self.push(v, Op::CausalSoftmax(a), g)
    }

    /// Normalize each causal row to sum to one. Shape (n_h, t, t).
    pub fn row_norm_causal(&mut self, a: Var) -> Var {
        let src = self.val(a);
        let (h, t) = causal_dims(src.shape());
        let mut out = vec![T::zero(); src.numel()];
        for hi in 0..h {
            for i in 0..t {
                let base = hi * t * t + i * t;
                let row = &src.data()[base..base + i + 1];
                let s = row.iter().copied().sum::<T>();
                let inv = T::one() / s;
                for (o, &x) in out[base..base + i + 1].iter_mut().zip(row) {
                    *o = x * inv;
                }
            }
        }
        let v = Tensor::new(src.shape(), out);
        let g = self.ng(a);
        self.push(v, Op::RowNormCausal(a), g)
    }

    /// Zero strictly above the diagonal. Shape (n_h, t, t).
    pub fn causal_zero(&mut self, a: Var) -> Var {
        let src = self.val(a);
        let (h, t) = causal_dims(src.shape());
        let mut out = src.data().to_vec();
        for hi in 0..h {
            for i in 0..t {
                out[hi * t * t + i * t + i + 1..hi * t * t + (i + 1) * t].fill(T::zero());
            }
        }
        let v = Tensor::new(src.shape(), out);
        let g = self.ng(a);
        self.push(v, Op::CausalZero(a), g)
    }

    /// out[h,i,j] = sum_{k=j..=i} a[h,i,k] for j <= i, else 0. Shape (n_h, t, t).
    pub fn suffix_sum_causal(&mut self, a: Var) -> Var {
        let src = self.val(a);
        let (h, t) = causal_dims(src.shape());
        let mut out = vec![T::zero(); src.numel()];
        for hi in 0..h {
            for i in 0..t {
                let base = hi * t * t + i * t;
                let mut run = T::zero();
                for j in (0..=i).rev() {
                    run += src.data()[base + j];
                    out[base + j] = run;
                }
            }
        }
        let v = Tensor::new(src.shape(), out);
        let g = self.ng(a);
        self.push(v, Op::SuffixSumCausal(a), g)
    }

    /// Linear interpolation of per-row tables: out[h,i,j] = interp(z[h,i,:], p[h,i,j])
    /// for j <= i, else 0. p is assumed clamped to [0, P-1].
    pub fn pos_interp(&mut self, z: Var, p: Var) -> Var {
        let (zs, ps) = (self.val(z).shape().to_vec(), self.val(p).shape().to_vec());
        let (h, t) = causal_dims(&ps);
        assert_eq!(zs[0], h, "pos_interp head dims");
        assert_eq!(zs[1], t, "pos_interp row dims");
        let pn = zs[2];
        let mut out = vec![T::zero(); h * t * t];
        for hi in 0..h {
            for i in 0..t {
                let zrow = &self.val(z).data()[(hi * t + i) * pn..(hi * t + i + 1) * pn];
                for j in 0..=i {
                    let pv = self.val(p).data()[hi * t * t + i * t + j];
                    let (lo, hi_idx, w_hi) = interp_coords(pv, pn);
                    let w_lo = T::one() - w_hi;
                    out[hi * t * t + i * t + j] = w_lo * zrow[lo] + w_hi * zrow[hi_idx];
                }
            }
        }
        let v = Tensor::new(&ps, out);
        let g = self.ng(z) || self.ng(p);
        self.push(v, Op::PosInterp { z, p }, g)
    }

    // ---- rotations ----

    /// Rotate interleaved pairs of the last axis: x (.., 2m) by theta (.., m).
    /// `inverse` applies the transpose rotation R(-theta).
    pub fn rotate_pairs(&mut self, x: Var, theta: Var, inverse: bool) -> Var {
        let (xs, ts) = (self.val(x).shape().to_vec(), self.val(theta).shape().to_vec());
        assert_eq!(xs[..xs.len() - 1], ts[..ts.len() - 1], "rotate_pairs leading dims");
        assert_eq!(
            xs[xs.len() - 1],
            2 * ts[ts.len() - 1],
            "rotate_pairs needs last dim {} = 2 x {}",
            xs[xs.len() - 1],
            ts[ts.len() - 1]
        );
        let m = ts[ts.len() - 1];
        let rows = self.val(theta).numel() / m;
        let sign = if inverse { -T::one() } else { T::one() };
        let mut out = self.val(x).data().to_vec();
        for r in 0..rows {
            kn::rotate_pairs_row(
                &mut out[r * 2 * m..(r + 1) * 2 * m],
                &self.val(theta).data()[r * m..(r + 1) * m],
                sign,
            );
        }
        let v = Tensor::new(&xs, out);
        let g = self.ng(x) || self.ng(theta);
        self.push(v, Op::RotatePairs { x, theta, inverse }, g)
    }

    /// Pairwise combine with explicit cos/sin-like coefficients:
    /// y1 = c·x1 − s·x2, y2 = s·x1 + c·x2 on interleaved pairs.
    pub fn rot2_combine(&mut self, x: Var, c: Var, s: Var) -> Var {
        let xs = self.val(x).shape().to_vec();
        let cs = self.val(c).shape().to_vec();
        assert_eq!(self.val(s).shape(), &cs[..], "rot2_combine c/s shapes");
        assert_eq!(xs[..xs.len() - 1], cs[..cs.len() - 1], "rot2_combine leading dims");
        assert_eq!(xs[xs.len() - 1], 2 * cs[cs.len() - 1], "rot2_combine pair dims");
        let m = cs[cs.len() - 1];
        let rows = self.val(c).numel() / m;
        let mut out = vec![T::zero(); self.val(x).numel()];
        for r in 0..rows {
            for k in 0..m {
                let cv = self.val(c).data()[r * m + k];
                let sv = self.val(s).data()[r * m + k];
                let x1 = self.val(x).data()[r * 2 * m + 2 * k];
                let x2 = self.val(x).data()[r * 2 * m + 2 * k + 1];
                out[r * 2 * m + 2 * k] = cv * x1 - sv * x2;
                out[r * 2 * m + 2 * k + 1] = sv * x1 + cv * x2;
            }
        }
        let v = Tensor::new(&xs, out);
        let g = self.ng(x) || self.ng(c) || self.ng(s);
        self.push(v, Op::Rot2Combine { x, c, s }, g)
    }

    /// Linear combination of fixed generator matrices:
    /// out[.., a, b] = sum_i theta[.., i] · basis[i][a, b].
    pub fn skew_combine(&mut self, theta: Var, basis: Arc<Vec<Tensor<T>>>) -> Var {
        let ts = self.val(theta).shape().to_vec();
        let kgen = ts[ts.len() - 1];
        assert_eq!(kgen, basis.len(), "skew_combine generator count");
        let b = basis[0].shape()[0];
        let rows = self.val(theta).numel() / kgen;
        let mut out = vec![T::zero(); rows * b * b];
        for r in 0..rows {
            let th = &self.val(theta).data()[r * kgen..(r + 1) * kgen];
            let block = &mut out[r * b * b..(r + 1) * b * b];
            for (i, gen) in basis.iter().enumerate() {
                kn::axpy(block, th[i], gen.data());
            }
        }
        let mut shape = ts[..ts.len() - 1].to_vec();
        shape.extend([b, b]);
        let v = Tensor::new(&shape, out);
        let g = self.ng(theta);
        self.push(v, Op::SkewCombine { theta, basis }, g)
    }

    // ---- embedding / loss / norm ----

    pub fn embedding(&mut self, table: Var, ids: Arc<Vec<usize>>) -> Var {
        let tab = self.val(table);
        let (v_sz, d) = (tab.shape()[0], tab.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids.iter() {
            assert!(id < v_sz, "token id {} out of vocab {}", id, v_sz);
            out.extend_from_slice(&tab.data()[id * d..(id + 1) * d]);
        }
        let v = Tensor::new(&[ids.len(), d], out);
        let g = self.ng(table);
        self.push(v, Op::Embedding { table, ids }, g)
    }

    /// Weighted mean cross-entropy over rows of (t, V) logits.
    /// Rows with zero weight are skipped; all-zero weights give loss 0.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: Arc<Vec<usize>>,
        weights: Arc<Vec<T>>,
    ) -> Var {
        let l = self.val(logits);
        let (t, v_sz) = (l.shape()[0], l.shape()[1]);
        assert_eq!(targets.len(), t, "targets per row");
        assert_eq!(weights.len(), t, "weights per row");
        let w_sum = weights.iter().copied().sum::<T>();
        let mut loss = T::zero();
        if w_sum > T::zero() {
            for i in 0..t {
                let w = weights[i];
                if w == T::zero() {
                    continue;
                }
                let row = &l.data()[i * v_sz..(i + 1) * v_sz];
                let lse = kn::log_sum_exp(row);
                loss += w * (lse - row[targets[i]]);
            }
            loss = loss / w_sum;
        }
        let g = self.ng(logits);
        self.push(Tensor::scalar(loss), Op::MaskedCrossEntropy { logits, targets, weights }, g)
    }

    /// RMS normalization over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let src = self.val(x);
        let d = *src.shape().last().expect("rms_norm needs an axis");
        assert_eq!(self.val(gain).shape(), &[d], "rms_norm gain shape");
        let rows = src.numel() / d;
        let mut out = vec![T::zero(); src.numel()];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &src.data()[r * d..(r + 1) * d];
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
            let rinv = T::one() / (ms + T::of(RMSNORM_EPS)).sqrt();
            for j in 0..d {
                out[r * d + j] = row[j] * rinv * self.val(gain).data()[j];
            }
        }
        let v = Tensor::new(src.shape(), out);
        let g = self.ng(x) || self.ng(gain);
        self.push(v, Op::RmsNorm { x, gain }, g)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Returns per-var gradients for every
    /// node on a path from a `requires_grad` leaf to the loss.
    pub fn backward(&mut self, loss: Var) -> Grads<T> {
        assert_eq!(self.val(loss).numel(), 1, "backward needs a scalar loss");
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            if slots[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let grad = slots[id].clone().unwrap();
            self.backprop_node(id, &grad, &mut slots);
        }
        Grads { slots }
    }

    fn backprop_node(&self, id: usize, gy: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.bcast_grad(Side::A, gy, BinKind::Add, slots, *a, *b);
                self.bcast_grad(Side::B, gy, BinKind::Add, slots, *a, *b);
            }
            Op::Sub(a, b) => {
                self.bcast_grad(Side::A, gy, BinKind::Sub, slots, *a, *b);
                self.bcast_grad(Side::B, gy, BinKind::Sub, slots, *a, *b);
            }
            Op::Mul(a, b) => {
                self.bcast_grad(Side::A, gy, BinKind::Mul, slots, *a, *b);
                self.bcast_grad(Side::B, gy, BinKind::Mul, slots, *a, *b);
            }
            Op::Neg(a) => {
                if let Some(buf) = self.grad_buf(slots, *a) {
                    kn::axpy(buf, -T::one(), gy.data());
                }
            }
            Op::Scale(a, c) => {
                if let Some(buf) = self.grad_buf(slots, *a) {
                    kn::axpy(buf, *c, gy.data());
                }
            }
            Op::AddScalar(a, _) => {
                if let Some(buf) = self.grad_buf(slots, *a) {
                    kn::add_assign(buf, gy.data());
                }
            }
            Op::Exp(a) => self.unary_grad(*a, gy, slots, |_, yv| yv, Some(y)),
            Op::Sigmoid(a) => self.unary_grad(*a, gy, slots, |_, yv| yv * (T::one() - yv), Some(y)),
            Op::Softplus(a) => self.unary_grad(*a, gy, slots, |xv, _| sigmoid(xv), None),
            Op::Gelu(a) => self.unary_grad(*a, gy, slots, |xv, _| gelu_grad(xv), None),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary_grad(*a, gy, slots, move |xv, _| {
                    if xv >= lo && xv <= hi {
                        T::one()
                    } else {
                        T::zero()
                    }
                }, None)
            }
            Op::SinAOverA(a) => self.unary_grad(*a, gy, slots, |xv, _| sin_a_over_a_grad(xv), None),
            Op::VersinOverA(a) => self.unary_grad(*a, gy, slots, |xv, _| versin_over_a_grad(xv), None),
            Op::ExpM1Over(a) => self.unary_grad(*a, gy, slots, |xv, _| expm1_over_grad(xv), None),
            Op::Reshape(a) => {
                if let Some(buf) = self.grad_buf(slots, *a) {
                    kn::add_assign(buf, gy.data());
                }
            }
            Op::SwapLead2(a) => {
                if self.ng(*a) {
                    let back = swap_lead2_tensor(&Tensor::new(y.shape(), gy.data().to_vec()));
                    if let Some(buf) = self.grad_buf(slots, *a) {
                        kn::add_assign(buf, back.data());
                    }
                }
            }
            Op::BroadcastLead(a) => {
                if let Some(buf) = self.grad_buf(slots, *a) {
                    let row = buf.len();
                    for r in 0..y.shape()[0] {
                        kn::add_assign(buf, &gy.data()[r * row..(r + 1) * row]);
                    }
                }
            }
            Op::SliceLead(a, i) => {
                if self.ng(*a) {
                    let row = gy.numel();
                    if let Some(buf) = self.grad_buf(slots, *a) {
                        kn::add_assign(&mut buf[i * row..(i + 1) * row], gy.data());
                    }
                }
            }
            Op::StackLead(parts) => {
                let row = y.numel() / parts.len();
                for (r, &p) in parts.iter().enumerate() {
                    if let Some(buf) = self.grad_buf(slots, p) {
                        kn::add_assign(buf, &gy.data()[r * row..(r + 1) * row]);
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(buf) = self.grad_buf(slots, *a) {
                    let g = gy.item();
                    for o in buf.iter_mut() {
                        *o += g;
                    }
                }
            }
            Op::CumsumLead(a) => {
                if self.ng(*a) {
                    let row = y.numel() / y.shape()[0];
                    let mut back = vec![T::zero(); y.numel()];
                    kn::suffix_sum_lead(gy.data(), &mut back, row);
                    if let Some(buf) = self.grad_buf(slots, *a) {
                        kn::add_assign(buf, &back);
                    }
                }
            }
            Op::MatMul(a, b) => self.matmul_grad(*a, *b, gy, slots, false),
            Op::MatMulNT(a, b) => self.matmul_grad(*a, *b, gy, slots, true),
            Op::CausalSoftmax(a) => {
                if self.ng(*a) {
                    let (h, t) = causal_dims(y.shape());
                    let mut back = vec![T::zero(); y.numel()];
                    for hi in 0..h {
                        for i in 0..t {
                            let base = hi * t * t + i * t;
                            let yrow = &y.data()[base..base + i + 1];
                            let grow = &gy.data()[base..base + i + 1];
                            let dot = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum::<T>();
                            for j in 0..=i {
                                back[base + j] = yrow[j] * (grow[j] - dot);
                            }
                        }
                    }
                    if let Some(buf) = self.grad_buf(slots, *a) {
                        kn::add_assign(buf, &back);
                    }
                }
            }
            Op::RowNormCausal(a) => {
                if self.ng(*a) {
                    let (h, t) = causal_dims(y.shape());
                    let x = self.val(*a);
                    let mut back = vec![T::zero(); y.numel()];
                    for hi in 0..h {
                        for i in 0..t {
                            let base = hi * t * t + i * t;
                            let s = x.data()[base..base + i + 1].iter().copied().sum::<T>();
                            let inv = T::one() / s;
                            let dot = y.data()[base..base + i + 1]
                                .iter()
                                .zip(&gy.data()[base..base + i + 1])
                                .map(|(&yv, &gv)| yv * gv)
                                .sum::<T>();
                            for j in 0..=i {
                                back[base + j] = (gy.data()[base + j] - dot) * inv;
                            }
                        }
                    }
                    if let Some(buf) = self.grad_buf(slots, *a) {
                        kn::add_assign(buf, &back);
                    }
                }
            }
            Op::CausalZero(a) => {
                if self.ng(*a) {
                    let (h, t) = causal_dims(y.shape());
                    let mut back = gy.data().to_vec();
                    for hi in 0..h {
                        for i in 0..t {
                            back[hi * t * t + i * t + i + 1..hi * t * t + (i + 1) * t]
                                .fill(T::zero());
                        }
                    }
                    if let Some(buf) = self.grad_buf(slots, *a) {
                        kn::add_assign(buf, &back);
                    }
                }
            }
            Op::SuffixSumCausal(a) => {
                if self.ng(*a) {
                    let (h, t) = causal_dims(y.shape());
                    let mut back = vec![T::zero(); y.numel()];
                    for hi in 0..h {
                        for i in 0..t {
                            let base = hi * t * t + i * t;
                            let mut run = T::zero();
                            for k in 0..=i {
                                run += gy.data()[base + k];
                                back[base + k] = run;
                            }
                        }
                    }
                    if let Some(buf) = self.grad_buf(slots, *a) {
                        kn::add_assign(buf, &back);
                    }
                }
            }
            Op::PosInterp { z, p } => {
                let (h, t) = causal_dims(y.shape());
                let pn = self.val(*z).shape()[2];
                let mut dz = vec![T::zero(); self.val(*z).numel()];
                let mut dp = vec![T::zero(); self.val(*p).numel()];
                for hi in 0..h {
                    for i in 0..t {
                        let zrow = &self.val(*z).data()[(hi * t + i) * pn..(hi * t + i + 1) * pn];
                        for j in 0..=i {
                            let g = gy.data()[hi * t * t + i * t + j];
                            if g == T::zero() {
                                continue;
                            }
                            let pv = self.val(*p).data()[hi * t * t + i * t + j];
                            let (lo, hi_idx, w_hi) = interp_coords(pv, pn);
                            dz[(hi * t + i) * pn + lo] += (T::one() - w_hi) * g;
                            dz[(hi * t + i) * pn + hi_idx] += w_hi * g;
                            dp[hi * t * t + i * t + j] = (zrow[hi_idx] - zrow[lo]) * g;
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(slots, *z) {
                    kn::add_assign(buf, &dz);
                }
                if let Some(buf) = self.grad_buf(slots, *p) {
                    kn::add_assign(buf, &dp);
                }
            }
            Op::RotatePairs { x, theta, inverse } => {
                let m = *self.val(*theta).shape().last().unwrap();
                let rows = self.val(*theta).numel() / m;
                let sign = if *inverse { -T::one() } else { T::one() };
                if self.ng(*x) {
                    // dx = R(-sign * theta) · dy
                    let mut back = gy.data().to_vec();
                    for r in 0..rows {
                        kn::rotate_pairs_row(
                            &mut back[r * 2 * m..(r + 1) * 2 * m],
                            &self.val(*theta).data()[r * m..(r + 1) * m],
                            -sign,
                        );
                    }
                    if let Some(buf) = self.grad_buf(slots, *x) {
                        kn::add_assign(buf, &back);
                    }
                }
                if self.ng(*theta) {
                    let mut dth = vec![T::zero(); self.val(*theta).numel()];
                    for r in 0..rows {
                        for k in 0..m {
                            let y1 = y.data()[r * 2 * m + 2 * k];
                            let y2 = y.data()[r * 2 * m + 2 * k + 1];
                            let g1 = gy.data()[r * 2 * m + 2 * k];
                            let g2 = gy.data()[r * 2 * m + 2 * k + 1];
                            dth[r * m + k] = sign * (g2 * y1 - g1 * y2);
                        }
                    }
                    if let Some(buf) = self.grad_buf(slots, *theta) {
                        kn::add_assign(buf, &dth);
                    }
                }
            }
            Op::Rot2Combine { x, c, s } => {
                let m = *self.val(*c).shape().last().unwrap();
                let rows = self.val(*c).numel() / m;
                let xd = self.val(*x).data();
                let cd = self.val(*c).data();
                let sd = self.val(*s).data();
                let mut dx = vec![T::zero(); xd.len()];
                let mut dc = vec![T::zero(); cd.len()];
                let mut ds = vec![T::zero(); sd.len()];
                for r in 0..rows {
                    for k in 0..m {
                        let (cv, sv) = (cd[r * m + k], sd[r * m + k]);
                        let (x1, x2) = (xd[r * 2 * m + 2 * k], xd[r * 2 * m + 2 * k + 1]);
                        let (g1, g2) = (gy.data()[r * 2 * m + 2 * k], gy.data()[r * 2 * m + 2 * k + 1]);
                        dx[r * 2 * m + 2 * k] = cv * g1 + sv * g2;
                        dx[r * 2 * m + 2 * k + 1] = -sv * g1 + cv * g2;
                        dc[r * m + k] = g1 * x1 + g2 * x2;
                        ds[r * m + k] = -g1 * x2 + g2 * x1;
                    }
                }
                if let Some(buf) = self.grad_buf(slots, *x) {
                    kn::add_assign(buf, &dx);
                }
                if let Some(buf) = self.grad_buf(slots, *c) {
                    kn::add_assign(buf, &dc);
                }
                if let Some(buf) = self.grad_buf(slots, *s) {
                    kn::add_assign(buf, &ds);
                }
            }
            Op::SkewCombine { theta, basis } => {
                if self.ng(*theta) {
                    let kgen = basis.len();
                    let b2 = basis[0].numel();
                    let rows = self.val(*theta).numel() / kgen;
                    let mut dth = vec![T::zero(); self.val(*theta).numel()];
                    for r in 0..rows {
                        let gblock = &gy.data()[r * b2..(r + 1) * b2];
                        for (i, gen) in basis.iter().enumerate() {
                            dth[r * kgen + i] = gblock
                                .iter()
                                .zip(gen.data())
                                .map(|(&g, &s)| g * s)
                                .sum::<T>();
                        }
                    }
                    if let Some(buf) = self.grad_buf(slots, *theta) {
                        kn::add_assign(buf, &dth);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.ng(*table) {
                    let d = self.val(*table).shape()[1];
                    if let Some(buf) = self.grad_buf(slots, *table) {
                        for (r, &id) in ids.iter().enumerate() {
                            kn::add_assign(
                                &mut buf[id * d..(id + 1) * d],
                                &gy.data()[r * d..(r + 1) * d],
                            );
                        }
                    }
                }
            }
            Op::MaskedCrossEntropy { logits, targets, weights } => {
                if self.ng(*logits) {
                    let l = self.val(*logits);
                    let (t, v_sz) = (l.shape()[0], l.shape()[1]);
                    let w_sum = weights.iter().copied().sum::<T>();
                    if w_sum > T::zero() {
                        let scale = gy.item() / w_sum;
                        let mut back = vec![T::zero(); l.numel()];
                        let mut probs = vec![T::zero(); v_sz];
                        for i in 0..t {
                            let w = weights[i];
                            if w == T::zero() {
                                continue;
                            }
                            let row = &l.data()[i * v_sz..(i + 1) * v_sz];
                            kn::softmax_row(row, &mut probs);
                            let o = &mut back[i * v_sz..(i + 1) * v_sz];
                            for (j, &pv) in probs.iter().enumerate() {
                                o[j] = pv * w * scale;
                            }
                            o[targets[i]] -= w * scale;
                        }
                        if let Some(buf) = self.grad_buf(slots, *logits) {
                            kn::add_assign(buf, &back);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain } => {
                let src = self.val(*x);
                let d = *src.shape().last().unwrap();
                let rows = src.numel() / d;
                let dn = T::of(d as f64);
                let gaind = self.val(*gain).data();
                let mut dx = vec![T::zero(); src.numel()];
                let mut dg = vec![T::zero(); d];
                for r in 0..rows {
                    let row = &src.data()[r * d..(r + 1) * d];
                    let grow = &gy.data()[r * d..(r + 1) * d];
                    let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
                    let rinv = T::one() / (ms + T::of(RMSNORM_EPS)).sqrt();
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot += grow[j] * gaind[j] * row[j];
                        dg[j] += grow[j] * row[j] * rinv;
                    }
                    let c = rinv * rinv * rinv / dn * dot;
                    for j in 0..d {
                        dx[r * d + j] = grow[j] * gaind[j] * rinv - c * row[j];
                    }
                }
                if let Some(buf) = self.grad_buf(slots, *x) {
                    kn::add_assign(buf, &dx);
                }
                if let Some(buf) = self.grad_buf(slots, *gain) {
                    kn::add_assign(buf, &dg);
                }
            }
        }
    }

    /// Get-or-create the gradient buffer for `v`, or None when `v` does not
    /// require gradients.
    fn grad_buf<'s>(&self, slots: &'s mut [Option<Tensor<T>>], v: Var) -> Option<&'s mut [T]> {
        if !self.ng(v) {
            return None;
        }
        let slot = &mut slots[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.val(v).shape()));
        }
        Some(slot.as_mut().unwrap().data_mut())
    }

    fn unary_grad(
        &self,
        a: Var,
        gy: &Tensor<T>,
        slots: &mut [Option<Tensor<T>>],
        df: impl Fn(T, T) -> T,
        y: Option<&Tensor<T>>,
    ) {
        if !self.ng(a) {
            return;
        }
        let x = self.val(a);
        let mut back = vec![T::zero(); x.numel()];
        for i in 0..x.numel() {
            let yv = y.map(|t| t.data()[i]).unwrap_or(T::zero());
            back[i] = gy.data()[i] * df(x.data()[i], yv);
        }
        if let Some(buf) = self.grad_buf(slots, a) {
            kn::add_assign(buf, &back);
        }
    }

    /// Backward for broadcast binary ops, targeting one input side.
    fn bcast_grad(
        &self,
        side: Side,
        gy: &Tensor<T>,
        kind: BinKind,
        slots: &mut [Option<Tensor<T>>],
        a: Var,
        b: Var,
    ) {
        let target = match side {
            Side::A => a,
            Side::B => b,
        };
        if !self.ng(target) {
            return;
        }
        let ta = self.val(a);
        let tb = self.val(b);
        let factor = |av: T, bv: T| -> T {
            match (kind, side) {
                (BinKind::Add, _) => T::one(),
                (BinKind::Sub, Side::A) => T::one(),
                (BinKind::Sub, Side::B) => -T::one(),
                (BinKind::Mul, Side::A) => bv,
                (BinKind::Mul, Side::B) => av,
            }
        };
        let mut acc = vec![T::zero(); self.val(target).numel()];
        if ta.shape() == tb.shape() {
            // no stretching on either side
            for i in 0..acc.len() {
                acc[i] = gy.data()[i] * factor(ta.data()[i], tb.data()[i]);
            }
        } else if matches!(side, Side::A) && suffix_of(tb.shape(), ta.shape()) {
            let row = tb.numel().max(1);
            for (r, chunk) in gy.data().chunks(row).enumerate() {
                for (j, &g) in chunk.iter().enumerate() {
                    acc[r * row + j] = g * factor(ta.data()[r * row + j], tb.data()[j]);
                }
            }
        } else if matches!(side, Side::B) && suffix_of(tb.shape(), ta.shape()) {
            let row = tb.numel().max(1);
            for (r, chunk) in gy.data().chunks(row).enumerate() {
                for (j, &g) in chunk.iter().enumerate() {
                    acc[j] += g * factor(ta.data()[r * row + j], tb.data()[j]);
                }
            }
        } else {
            bcast_zip(ta.shape(), tb.shape(), |oi, ia, ib| {
                let ti = match side {
                    Side::A => ia,
                    Side::B => ib,
                };
                acc[ti] += gy.data()[oi] * factor(ta.data()[ia], tb.data()[ib]);
            });
        }
        if let Some(buf) = self.grad_buf(slots, target) {
            kn::add_assign(buf, &acc);
        }
    }

    fn matmul_grad(
        &self,
        a: Var,
        b: Var,
        gy: &Tensor<T>,
        slots: &mut [Option<Tensor<T>>],
        nt: bool,
    ) {
        let sa = self.val(a).shape().to_vec();
        let sb = self.val(b).shape().to_vec();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = if nt { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let ad = self.val(a).data();
        let bd = self.val(b).data();
        if self.ng(a) {
            let mut da = vec![T::zero(); ad.len()];
            for bi in 0..batch {
                let gyb = &gy.data()[bi * m * n..(bi + 1) * m * n];
                let bb = &bd[bi * k * n..(bi + 1) * k * n];
                let dab = &mut da[bi * m * k..(bi + 1) * m * k];
                if nt {
                    // y = a bᵀ, b is (n,k): da = gy · b
                    kn::matmul_nn(gyb, bb, dab, m, n, k, false);
                } else {
                    // y = a b, b is (k,n): da = gy · bᵀ
                    kn::matmul_nt(gyb, bb, dab, m, n, k, false);
                }
            }
            if let Some(buf) = self.grad_buf(slots, a) {
                kn::add_assign(buf, &da);
            }
        }
        if self.ng(b) {
            let mut db = vec![T::zero(); bd.len()];
            for bi in 0..batch {
                let gyb = &gy.data()[bi * m * n..(bi + 1) * m * n];
                let ab = &ad[bi * m * k..(bi + 1) * m * k];
                let dbb = &mut db[bi * k * n..(bi + 1) * k * n];
                if nt {
                    // db (n,k) = gyᵀ · a
                    kn::matmul_tn(gyb, ab, dbb, n, m, k, false);
                } else {
                    // db (k,n) = aᵀ · gy
                    kn::matmul_tn(ab, gyb, dbb, k, m, n, false);
                }
            }
            if let Some(buf) = self.grad_buf(slots, b) {
                kn::add_assign(buf, &db);
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Side {
    A,
    B,
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

fn causal_dims(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 3, "causal ops take (n_h, t, t), got {:?}", shape);
    assert_eq!(shape[1], shape[2], "causal ops need square maps, got {:?}", shape);
    (shape[0], shape[1])
}

fn interp_coords<T: Real>(p: T, pn: usize) -> (usize, usize, T) {
    let pf = p.max(T::zero()).f64();
    let lo = (pf.floor() as usize).min(pn - 1);
    let hi = (lo + 1).min(pn - 1);
    let w_hi = if hi == lo { T::zero() } else { T::of(pf - lo as f64) };
    (lo, hi, w_hi)
}

fn swap_lead2_tensor<T: Real>(src: &Tensor<T>) -> Tensor<T> {
    let s = src.shape();
    assert!(s.len() >= 2, "swap_lead2 needs >= 2 dims");
    let (a, b) = (s[0], s[1]);
    let rest: usize = s[2..].iter().product();
    let mut shape = vec![b, a];
    shape.extend_from_slice(&s[2..]);
    let mut out = vec![T::zero(); src.numel()];
    for i in 0..a {
        for j in 0..b {
            let from = (i * b + j) * rest;
            let to = (j * a + i) * rest;
            out[to..to + rest].copy_from_slice(&src.data()[from..from + rest]);
        }
    }
    Tensor::new(&shape, out)
}

// ---- broadcasting ----

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "cannot broadcast {:?} with {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

fn bcast_apply<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    // Fast paths: one side is a suffix of the other (tiled along leading axes).
    if suffix_of(b.shape(), a.shape()) {
        let row = b.numel().max(1);
        let mut out = vec![T::zero(); a.numel()];
        for (oc, ac) in out.chunks_mut(row).zip(a.data().chunks(row)) {
            for ((o, &x), &y) in oc.iter_mut().zip(ac).zip(b.data()) {
                *o = f(x, y);
            }
        }
        return Tensor::new(a.shape(), out);
    }
    if suffix_of(a.shape(), b.shape()) {
        let row = a.numel().max(1);
        let mut out = vec![T::zero(); b.numel()];
        for (oc, bc) in out.chunks_mut(row).zip(b.data().chunks(row)) {
            for ((o, &y), &x) in oc.iter_mut().zip(bc).zip(a.data()) {
                *o = f(x, y);
            }
        }
        return Tensor::new(b.shape(), out);
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let n: usize = shape.iter().product();
    let mut out = vec![T::zero(); n];
    bcast_zip(a.shape(), b.shape(), |oi, ia, ib| {
        out[oi] = f(a.data()[ia], b.data()[ib]);
    });
    Tensor::new(&shape, out)
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Walk the broadcast output in row-major order, yielding flat indices into
/// the output, a, and b.
fn bcast_zip(sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let shape = broadcast_shape(sa, sb);
    let nd = shape.len();
    let stride = |s: &[usize]| -> Vec<usize> {
        // strides padded to nd, 0 where the dim is stretched
        let mut st = vec![0usize; nd];
        let off = nd - s.len();
        let mut acc = 1usize;
        for i in (0..s.len()).rev() {
            st[off + i] = if s[i] == 1 && shape[off + i] != 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    let (sta, stb) = (stride(sa), stride(sb));
    let n: usize = shape.iter().product();
    let mut coords = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for oi in 0..n {
        f(oi, ia, ib);
        // odometer increment
        for d in (0..nd).rev() {
            coords[d] += 1;
            ia += sta[d];
            ib += stb[d];
            if coords[d] < shape[d] {
                break;
            }
            ia -= sta[d] * shape[d];
            ib -= stb[d] * shape[d];
            coords[d] = 0;
        }
    }
}

// ---- scalar helpers ----

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-(x.abs())).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

fn sin_a_over_a<T: Real>(a: T) -> T {
    if a.abs().f64() < SERIES_CUTOFF {
        let a2 = a * a;
        T::one() - a2 / T::of(6.0) + a2 * a2 / T::of(120.0)
    } else {
        a.sin() / a
    }
}

fn sin_a_over_a_grad<T: Real>(a: T) -> T {
    if a.abs().f64() < SERIES_CUTOFF {
        let a2 = a * a;
        -a / T::of(3.0) + a * a2 / T::of(30.0)
    } else {
        (a * a.cos() - a.sin()) / (a * a)
    }
}

fn versin_over_a<T: Real>(a: T) -> T {
    if a.abs().f64() < SERIES_CUTOFF {
        let a2 = a * a;
        a / T::of(2.0) - a * a2 / T::of(24.0)
    } else {
        (T::one() - a.cos()) / a
    }
}

fn versin_over_a_grad<T: Real>(a: T) -> T {
    if a.abs().f64() < SERIES_CUTOFF {
        let a2 = a * a;
        T::of(0.5) - a2 / T::of(8.0)
    } else {
        (a * a.sin() + a.cos() - T::one()) / (a * a)
    }
}

fn expm1_over<T: Real>(a: T) -> T {
    if a.abs().f64() < SERIES_CUTOFF {
        T::one() + a / T::of(2.0) + a * a / T::of(6.0)
    } else {
        a.exp_m1() / a
    }
}

fn expm1_over_grad<T: Real>(a: T) -> T {
    if a.abs().f64() < SERIES_CUTOFF {
        T::of(0.5) + a / T::of(3.0) + a * a / T::of(8.0)
    } else {
        ((a - T::one()) * a.exp() + T::one()) / (a * a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn check(
        name: &str,
        params: &[Tensor<f64>],
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) {
        let err = grad_check(f, params, 1e-6).unwrap();
        // A wrong VJP shows up as O(1) error; coordinates whose true gradient
        // is exactly zero can carry ~1e-4 float noise in the quotient.
        assert!(err < 1e-3, "{name}: grad mismatch, rel err {err}");
    }

    /// Every op's VJP against central differences at f64.
    #[test]
    fn all_ops_match_central_differences() {
        let r = &mut rng(7);
        let a34 = Tensor::<f64>::randn(&[3, 4], 1.0, r);
        let b34 = Tensor::<f64>::randn(&[3, 4], 1.0, r);
        let suf4 = Tensor::<f64>::randn(&[4], 1.0, r);

        check("add", &[a34.clone(), b34.clone()], |g, v| {
            let y = g.add(v[0], v[1]);
            g.sum_all(y)
        });
        check("add_suffix_bcast", &[a34.clone(), suf4.clone()], |g, v| {
            let y = g.add(v[0], v[1]);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        check("sub", &[a34.clone(), suf4.clone()], |g, v| {
            let y = g.sub(v[0], v[1]);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        check("mul_bcast_general", &[
            Tensor::<f64>::randn(&[3, 2, 1], 1.0, r),
            Tensor::<f64>::randn(&[2, 5], 1.0, r),
        ], |g, v| {
            let y = g.mul(v[0], v[1]);
            g.sum_all(y)
        });
        check("neg_scale_addscalar", &[a34.clone()], |g, v| {
            let y = g.neg(v[0]);
            let y = g.scale(y, 0.7);
            let y = g.add_scalar(y, 0.3);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        for (name, f) in [
            ("exp", Graph::exp as fn(&mut Graph<f64>, Var) -> Var),
            ("sigmoid", Graph::sigmoid),
            ("softplus", Graph::softplus),
            ("gelu", Graph::gelu),
            ("sin_a_over_a", Graph::sin_a_over_a),
            ("versin_over_a", Graph::versin_over_a),
            ("expm1_over", Graph::expm1_over),
        ] {
            check(name, &[a34.clone()], |g, v| {
                let y = f(g, v[0]);
                g.sum_all(y)
            });
            // series branch near zero (values bounded away from 0 so the
            // central-difference quotient stays above float rounding noise)
            let tiny = Tensor::<f64>::from_fn(&[3, 4], |i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                sign * (2e-4 + 5e-5 * i as f64)
            });
            check(&format!("{name}_tiny"), &[tiny], |g, v| {
                let y = f(g, v[0]);
                g.sum_all(y)
            });
        }
        check("clamp", &[a34.clone()], |g, v| {
            let y = g.clamp(v[0], -0.45, 0.45);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        check("reshape_swap_bcast_slice_stack", &[a34.clone()], |g, v| {
            let y = g.reshape(v[0], &[2, 2, 3]);
            let y = g.swap_lead2(y);
            let y = g.broadcast_lead(y, 2);
            let s0 = g.slice_lead(y, 0);
            let s1 = g.slice_lead(y, 1);
            let y = g.stack_lead(&[s1, s0, s1]);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        check("cumsum_lead", &[a34.clone()], |g, v| {
            let y = g.cumsum_lead(v[0]);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        check("matmul", &[a34.clone(), Tensor::<f64>::randn(&[4, 2], 1.0, r)], |g, v| {
            let y = g.matmul(v[0], v[1]);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        check("matmul_batched", &[
            Tensor::<f64>::randn(&[2, 3, 4], 1.0, r),
            Tensor::<f64>::randn(&[2, 4, 2], 1.0, r),
        ], |g, v| {
            let y = g.matmul(v[0], v[1]);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        check("matmul_nt", &[
            Tensor::<f64>::randn(&[2, 3, 4], 1.0, r),
            Tensor::<f64>::randn(&[2, 5, 4], 1.0, r),
        ], |g, v| {
            let y = g.matmul_nt(v[0], v[1]);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        let att = Tensor::<f64>::randn(&[2, 4, 4], 1.0, r);
        check("causal_softmax", &[att.clone()], |g, v| {
            let y = g.causal_softmax(v[0]);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        check("row_norm_causal", &[att.clone()], |g, v| {
            let p = g.sigmoid(v[0]);
            let p = g.causal_zero(p);
            let y = g.row_norm_causal(p);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        check("suffix_sum_causal", &[att.clone()], |g, v| {
            let z = g.causal_zero(v[0]);
            let y = g.suffix_sum_causal(z);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        // p entries placed mid-cell so interpolation is smooth
        let pmax = 5usize;
        let p = Tensor::<f64>::from_fn(&[2, 4, 4], |i| 0.3 + 0.8 * ((i * 7) % 5) as f64);
        let z = Tensor::<f64>::randn(&[2, 4, pmax + 1], 1.0, r);
        check("pos_interp", &[z, p], |g, v| {
            let y = g.pos_interp(v[0], v[1]);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        let x_rot = Tensor::<f64>::randn(&[2, 3, 6], 1.0, r);
        let th_rot = Tensor::<f64>::randn(&[2, 3, 3], 1.0, r);
        // sum of squares is rotation-invariant (zero theta-gradient), so
        // weight the output before squaring
        let w_rot = Tensor::<f64>::randn(&[2, 3, 6], 1.0, r);
        for inverse in [false, true] {
            let w = w_rot.clone();
            check(&format!("rotate_pairs_inv={inverse}"), &[x_rot.clone(), th_rot.clone()], move |g, v| {
                let y = g.rotate_pairs(v[0], v[1], inverse);
                let wv = g.constant(w.clone());
                let y = g.mul(y, wv);
                let y = g.mul(y, y);
                g.sum_all(y)
            });
        }
        check("rot2_combine", &[
            x_rot.clone(),
            Tensor::<f64>::randn(&[2, 3, 3], 1.0, r),
            Tensor::<f64>::randn(&[2, 3, 3], 1.0, r),
        ], |g, v| {
            let y = g.rot2_combine(v[0], v[1], v[2]);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        let basis = Arc::new(crate::numerics::SkewBasis::<f64>::new(3).generators().to_vec());
        check("skew_combine", &[th_rot.clone()], |g, v| {
            let y = g.skew_combine(v[0], Arc::clone(&basis));
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        let table = Tensor::<f64>::randn(&[6, 4], 1.0, r);
        let ids = Arc::new(vec![1usize, 5, 1, 0]);
        check("embedding", &[table], |g, v| {
            let y = g.embedding(v[0], Arc::clone(&ids));
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        let logits = Tensor::<f64>::randn(&[4, 5], 1.0, r);
        let targets = Arc::new(vec![2usize, 0, 4, 1]);
        let weights = Arc::new(vec![1.0f64, 0.0, 2.0, 1.0]);
        check("masked_cross_entropy", &[logits], |g, v| {
            g.masked_cross_entropy(v[0], Arc::clone(&targets), Arc::clone(&weights))
        });
        check("rms_norm", &[a34.clone(), suf4.clone()], |g, v| {
            let y = g.rms_norm(v[0], v[1]);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
    }

    #[test]
    fn broadcast_matches_naive() {
        let r = &mut rng(3);
        let a = Tensor::<f64>::randn(&[2, 3, 4], 1.0, r);
        let b = Tensor::<f64>::randn(&[3, 1], 1.0, r);
        let mut g = Graph::<f64>::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.mul(va, vb);
        assert_eq!(g.val(y).shape(), &[2, 3, 4]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    let want = a.data()[(i * 3 + j) * 4 + k] * b.data()[j];
                    let got = g.val(y).data()[(i * 3 + j) * 4 + k];
                    assert!((want - got).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn causal_softmax_rows_are_stochastic_and_masked() {
        let r = &mut rng(11);
        let s = Tensor::<f64>::randn(&[2, 5, 5], 2.0, r);
        let mut g = Graph::<f64>::new();
        let v = g.constant(s);
        let a = g.causal_softmax(v);
        for h in 0..2 {
            for i in 0..5 {
                let row = &g.val(a).data()[h * 25 + i * 5..h * 25 + (i + 1) * 5];
                let sum: f64 = row[..=i].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn finite_check_catches_nan() {
        let mut g = Graph::<f64>::new();
        g.set_check_finite(true);
        let v = g.constant(Tensor::new(&[2], vec![-1.0, 0.0]));
        let l = g.add_scalar(v, -1.0);
        // ln of negative via exp? use sqrt-like path: exp(large) overflows to inf
        let big = g.scale(l, 1e308);
        let _ = g.exp(big);
    }
}
