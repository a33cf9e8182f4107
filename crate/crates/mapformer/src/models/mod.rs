//! Decoder-only causal models with swappable positional mechanisms.

mod checkpoint;
mod equivalence;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointExtra};
pub use equivalence::linear_rope_ssm_equivalence;

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MfError, Result};
use crate::numerics::{Graph, Real, SkewBasis, Tensor, Var};
use crate::rotor::{
    self, fixed_schedule_angles, init_frequencies, DeltaProjector, FrequencyBank, ProjWeights,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Rope,
    Cope,
    MapWm,
    MapEmOs,
    MapEmS,
    MapEmO,
}

impl Variant {
    pub fn uses_rotor(self) -> bool {
        matches!(self, Variant::Rope | Variant::MapWm | Variant::MapEmOs | Variant::MapEmS)
    }

    pub fn uses_projector(self) -> bool {
        matches!(self, Variant::MapWm | Variant::MapEmOs | Variant::MapEmS)
    }

    pub fn uses_stars(self) -> bool {
        matches!(self, Variant::MapEmOs | Variant::MapEmS)
    }

    pub fn is_em(self) -> bool {
        matches!(self, Variant::MapEmOs | Variant::MapEmS | Variant::MapEmO)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rope => "rope",
            Variant::Cope => "cope",
            Variant::MapWm => "map_wm",
            Variant::MapEmOs => "map_em_os",
            Variant::MapEmS => "map_em_s",
            Variant::MapEmO => "map_em_o",
        }
    }
}

fn default_block_size() -> usize {
    2
}
fn default_omega_max() -> f64 {
    std::f64::consts::TAU
}
fn default_grid_hint() -> usize {
    64
}
fn default_rank() -> usize {
    2
}
fn default_cope_pmax() -> usize {
    64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_omega_max")]
    pub omega_max: f64,
    #[serde(default = "default_grid_hint")]
    pub grid_size_hint: usize,
    #[serde(default)]
    pub noncommutative: bool,
    #[serde(default)]
    pub nonlinear_delta: bool,
    #[serde(default = "default_cope_pmax")]
    pub cope_pmax: usize,
    #[serde(default)]
    pub freeze_omega: bool,
    #[serde(default)]
    pub tie_star: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.head_dim {
            return Err(MfError::Config(format!(
                "d_model {} != n_heads {} x head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.variant.uses_rotor() {
            if self.head_dim % self.block_size != 0 {
                return Err(MfError::Config(format!(
                    "head_dim {} not divisible by block size {}",
                    self.head_dim, self.block_size
                )));
            }
            if self.block_size % 2 != 0 {
                return Err(MfError::Config("rotation blocks need even size".into()));
            }
        }
        if self.noncommutative {
            if !self.variant.is_em() || !self.variant.uses_rotor() {
                return Err(MfError::Config(
                    "non-commutative mode is available for the EM variants".into(),
                ));
            }
            if self.block_size < 3 {
                return Err(MfError::Config(
                    "non-commutative mode needs block size > 2".into(),
                ));
            }
        }
        Ok(())
    }

    /// Rotation blocks per head.
    pub fn n_blocks(&self) -> usize {
        self.head_dim / self.block_size
    }

    /// Generators per block: 1 in commutative mode, b(b-1)/2 otherwise.
    pub fn k_gen(&self) -> usize {
        if self.noncommutative {
            self.block_size * (self.block_size - 1) / 2
        } else {
            1
        }
    }

    fn projector(&self) -> DeltaProjector {
        DeltaProjector {
            d: self.d_model,
            r: self.rank,
            n_h: self.n_heads,
            n_b: self.n_blocks(),
            k_gen: self.k_gen(),
            nonlinear: self.nonlinear_delta,
            hidden: 4 * self.rank.max(4),
        }
    }
}

/// Named parameter store; the optimizer and checkpoints iterate it flat.
#[derive(Clone)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    decay: Vec<bool>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            decay: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>, decay: bool, trainable: bool) -> usize {
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        let idx = self.tensors.len();
        self.index.insert(name.to_string(), idx);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.decay.push(decay);
        self.trainable.push(trainable);
        idx
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn set_by_name(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| MfError::Checkpoint(format!("unknown parameter {name}")))?;
        if self.tensors[i].shape() != tensor.shape() {
            return Err(MfError::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                self.tensors[i].shape(),
                tensor.shape()
            )));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    pub fn decays(&self, i: usize) -> bool {
        self.decay[i]
    }

    pub fn trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// 64-bit FNV-1a over the raw parameter bytes; used by the determinism
    /// harness.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.tensors {
            for v in t.data() {
                for byte in v.f64().to_le_bits_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

trait ToLeBitsBytes {
    fn to_le_bits_bytes(self) -> [u8; 8];
}

impl ToLeBitsBytes for f64 {
    fn to_le_bits_bytes(self) -> [u8; 8] {
        self.to_bits().to_le_bytes()
    }
}

struct RotorIdx {
    w_in: Option<usize>,
    w_h1: Option<usize>,
    b_h1: Option<usize>,
    w_out: Option<usize>,
    omega: usize,
    stars: Option<(usize, usize)>,
}

struct LayerIdx {
    norm1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    norm2: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    rotor: Option<RotorIdx>,
    cope_table: Option<usize>,
}

pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    layers: Vec<LayerIdx>,
    embed: usize,
    final_norm: usize,
    head: usize,
    basis: Option<SkewBasis<T>>,
}

/// What the forward pass should capture for the analysis probes.
#[derive(Clone, Copy, Default)]
pub struct TraceOpts {
    pub attention: bool,
    pub rotor: bool,
    pub values: bool,
}

#[derive(Clone)]
pub struct AttentionTrace<T: Real> {
    /// Combined attention, rows summing to one over the causal support.
    pub a: Tensor<T>,
    pub a_x: Option<Tensor<T>>,
    pub a_p: Option<Tensor<T>>,
}

#[derive(Default)]
pub struct ForwardTrace<T: Real> {
    /// Rank-r projector intermediate per layer, (t, r).
    pub delta_in: Vec<Tensor<T>>,
    /// Integration times per layer, (t, n_h, n_b, K).
    pub delta: Vec<Tensor<T>>,
    /// Cumulative angles per layer, (n_h, t, n_b·K).
    pub theta: Vec<Tensor<T>>,
    /// Value stream per layer, (t, d).
    pub values: Vec<Tensor<T>>,
    pub attention: Vec<AttentionTrace<T>>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let d = config.d_model;
        let lim = 1.0 / (d as f64).sqrt();

        let embed = params.add("embed", Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng), true, true);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("l{l}.{s}");
            let norm1 = params.add(&p("norm1"), Tensor::full(&[d], T::one()), false, true);
            let wq = params.add(&p("wq"), Tensor::randu(&[d, d], -lim, lim, &mut rng), true, true);
            let wk = params.add(&p("wk"), Tensor::randu(&[d, d], -lim, lim, &mut rng), true, true);
            let wv = params.add(&p("wv"), Tensor::randu(&[d, d], -lim, lim, &mut rng), true, true);
            let wo = params.add(&p("wo"), Tensor::zeros(&[d, d]), true, true);
            let norm2 = params.add(&p("norm2"), Tensor::full(&[d], T::one()), false, true);
            let hid = 4 * d;
            let lim_h = 1.0 / (hid as f64).sqrt();
            let w1 = params.add(&p("w1"), Tensor::randu(&[d, hid], -lim, lim, &mut rng), true, true);
            let b1 = params.add(&p("b1"), Tensor::zeros(&[hid]), false, true);
            let w2 = params.add(&p("w2"), Tensor::zeros(&[hid, d]), true, true);
            let b2 = params.add(&p("b2"), Tensor::zeros(&[d]), false, true);

            let rotor = if config.variant.uses_rotor() {
                let bank: FrequencyBank<T> = init_frequencies(
                    config.n_heads,
                    config.n_blocks(),
                    config.omega_max,
                    config.grid_size_hint,
                )?;
                let learn_omega = config.variant.uses_projector() && !config.freeze_omega;
                let omega = params.add(&p("rotor.omega"), bank.omega, false, learn_omega);
                let (mut w_in, mut w_h1, mut b_h1, mut w_out) = (None, None, None, None);
                if config.variant.uses_projector() {
                    let proj = config.projector();
                    for (name, tensor) in proj.init_weights::<T>(&mut rng) {
                        // the output map starts at zero: no positional signal
                        // until the projector learns one
                        let tensor = if name.ends_with("w_out") {
                            Tensor::zeros(tensor.shape())
                        } else {
                            tensor
                        };
                        let idx = params.add(&p(&name), tensor, true, true);
                        match name.as_str() {
                            "delta.w_in" => w_in = Some(idx),
                            "delta.w_h1" => w_h1 = Some(idx),
                            "delta.b_h1" => b_h1 = Some(idx),
                            "delta.w_out" => w_out = Some(idx),
                            other => unreachable!("unexpected projector weight {other}"),
                        }
                    }
                }
                let stars = if config.variant.uses_stars() {
                    let zc = rotor::ZeroCoordinate::<T>::init(
                        config.n_heads,
                        config.head_dim,
                        config.tie_star,
                        &mut rng,
                    );
                    let ks = params.add(&p("rotor.k_star"), zc.k_star, false, true);
                    let qs = params.add(&p("rotor.q_star"), zc.q_star, false, true);
                    Some((ks, qs))
                } else {
                    None
                };
                Some(RotorIdx { w_in, w_h1, b_h1, w_out, omega, stars })
            } else {
                None
            };

            let cope_table = if config.variant == Variant::Cope {
                let t = Tensor::randn(
                    &[config.n_heads, config.cope_pmax + 1, config.head_dim],
                    0.02,
                    &mut rng,
                );
                Some(params.add(&p("cope.table"), t, false, true))
            } else {
                None
            };

            layers.push(LayerIdx {
                norm1,
                wq,
                wk,
                wv,
                wo,
                norm2,
                w1,
                b1,
                w2,
                b2,
                rotor,
                cope_table,
            });
        }
        let final_norm = params.add("final_norm", Tensor::full(&[d], T::one()), false, true);
        let head = params.add(
            "head",
            Tensor::randu(&[d, config.vocab_size], -lim, lim, &mut rng),
            true,
            true,
        );
        let basis = if config.noncommutative {
            Some(SkewBasis::new(config.block_size))
        } else {
            None
        };
        Ok(Self { config, params, layers, embed, final_norm, head, basis })
    }

    /// Forward pass building the graph; returns the (t, vocab) logits var.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        trace_opts: TraceOpts,
    ) -> Result<(Var, ForwardTrace<T>)> {
        self.forward_with(g, tokens, trace_opts, None)
    }

    /// Forward pass with an optional constant override for the integration
    /// times (used by the fixed-schedule reduction checks).
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        trace_opts: TraceOpts,
        delta_override: Option<T>,
    ) -> Result<(Var, ForwardTrace<T>)> {
        let vars = self.leaf_all(g);
        self.forward_from_vars(g, &vars, tokens, trace_opts, delta_override)
    }

    /// Core forward pass over externally supplied parameter vars (one per
    /// entry of the parameter set, in order). Lets callers own the leaves:
    /// the trainer accumulates gradients into them and the gradient checker
    /// re-leafs perturbed copies.
    pub fn forward_from_vars(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        tokens: &[usize],
        trace_opts: TraceOpts,
        delta_override: Option<T>,
    ) -> Result<(Var, ForwardTrace<T>)> {
        assert_eq!(vars.len(), self.params.len(), "one var per parameter");
        for &tok in tokens {
            if tok >= self.config.vocab_size {
                return Err(MfError::Vocab(format!(
                    "token id {tok} out of vocab {}",
                    self.config.vocab_size
                )));
            }
        }
        let t = tokens.len();
        if t == 0 {
            return Err(MfError::Shape("empty token sequence".into()));
        }
        let mut trace = ForwardTrace::default();
        let ids = Arc::new(tokens.to_vec());
        let mut x = g.embedding(vars[self.embed], ids);
        for layer in &self.layers {
            x = self.attention_block(g, vars, x, layer, t, &mut trace, trace_opts, delta_override)?;
            // MLP with pre-norm and residual
            let xn = g.rms_norm(x, vars[layer.norm2]);
            let h = g.matmul(xn, vars[layer.w1]);
            let h = g.add(h, vars[layer.b1]);
            let h = g.gelu(h);
            let h = g.matmul(h, vars[layer.w2]);
            let h = g.add(h, vars[layer.b2]);
            x = g.add(x, h);
        }
        let xn = g.rms_norm(x, vars[self.final_norm]);
        let logits = g.matmul(xn, vars[self.head]);
        Ok((logits, trace))
    }

    /// Plain logits for evaluation (no trace, no gradient bookkeeping).
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        g.set_check_finite(false);
        let (logits, _) = self.forward(&mut g, tokens, TraceOpts::default())?;
        Ok(g.val(logits).clone())
    }

    /// Leaf a parameter into the graph, tracking trainability.
    fn var(&self, g: &mut Graph<T>, idx: usize) -> Var {
        g.leaf(self.params.tensor(idx).clone(), self.params.trainable(idx))
    }

    /// Leaf every trainable parameter and return (indices, vars) so callers
    /// can accumulate gradients back into the set.
    pub fn leaf_all(&self, g: &mut Graph<T>) -> Vec<Var> {
        (0..self.params.len()).map(|i| self.var(g, i)).collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        g: &mut Graph<T>,
        x: Var,
        layer: &LayerIdx,
        t: usize,
        trace: &mut ForwardTrace<T>,
        opts: TraceOpts,
        delta_override: Option<T>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (n_h, d_h) = (cfg.n_heads, cfg.head_dim);
        let norm1 = self.var(g, layer.norm1);
        let xn = g.rms_norm(x, norm1);
        let scale = T::of(1.0 / (d_h as f64).sqrt());

        let heads = |g: &mut Graph<T>, v: Var| -> Var {
            let r = g.reshape(v, &[t, n_h, d_h]);
            g.swap_lead2(r)
        };

        let wv = self.var(g, layer.wv);
        let v_flat = g.matmul(xn, wv);
        if opts.values {
            trace.values.push(g.val(v_flat).clone());
        }
        let v = heads(g, v_flat);

        // cumulative rotation angles from the path integrator, (n_h, t, n_b)
        let mut theta_heads: Option<Var> = None;
        let mut nc_rotations: Option<Var> = None;
        if let Some(rid) = &layer.rotor {
            let omega = self.var(g, rid.omega);
            if cfg.variant == Variant::Rope {
                let bank = FrequencyBank {
                    omega: g.val(omega).clone(),
                    omega_max: cfg.omega_max,
                    delta_max: 0.0,
                    learnable: false,
                };
                theta_heads = Some(g.constant(fixed_schedule_angles(&bank, t)));
            } else {
                let proj = cfg.projector();
                let (delta, delta_in) = match delta_override {
                    Some(c) => {
                        let dv = g.constant(Tensor::full(
                            &[t, proj.n_h, proj.n_b, proj.k_gen],
                            c,
                        ));
                        let di = g.constant(Tensor::zeros(&[t, proj.r]));
                        (dv, di)
                    }
                    None => {
                        let weights = self.proj_weights(g, rid);
                        rotor::project_deltas(g, xn, &proj, &weights)
                    }
                };
                if opts.rotor {
                    trace.delta_in.push(g.val(delta_in).clone());
                    trace.delta.push(g.val(delta).clone());
                }
                if cfg.noncommutative {
                    let basis = self.basis.as_ref().expect("basis for nc mode");
                    // integrate in the group: per-step exponentials composed in order
                    let theta_steps = delta_mul_omega(g, delta, omega, &proj);
                    nc_rotations = Some(rotor::nc_cumulative_rotations(g, theta_steps, basis));
                } else {
                    let th = rotor::path_integrate(g, delta, omega)?;
                    let th = g.swap_lead2(th);
                    if opts.rotor {
                        trace.theta.push(g.val(th).clone());
                    }
                    theta_heads = Some(th);
                }
            }
        }

        let a = match cfg.variant {
            Variant::Rope | Variant::MapWm => {
                let (wq, wk) = (self.var(g, layer.wq), self.var(g, layer.wk));
                let q = g.matmul(xn, wq);
                let k = g.matmul(xn, wk);
                let (mut q, mut k) = (heads(g, q), heads(g, k));
                if let Some(th) = theta_heads {
                    q = g.rotate_pairs(q, th, false);
                    k = g.rotate_pairs(k, th, false);
                }
                let s = g.matmul_nt(q, k);
                let s = g.scale(s, scale);
                g.causal_softmax(s)
            }
            Variant::Cope => {
                let (wq, wk) = (self.var(g, layer.wq), self.var(g, layer.wk));
                let q = g.matmul(xn, wq);
                let k = g.matmul(xn, wk);
                let (q, k) = (heads(g, q), heads(g, k));
                let raw = g.matmul_nt(q, k); // gate logits, unscaled
                let gates = g.sigmoid(raw);
                let gates = g.causal_zero(gates);
                let p = g.suffix_sum_causal(gates);
                let p = g.clamp(p, T::zero(), T::of(cfg.cope_pmax as f64));
                let table = self.var(g, layer.cope_table.expect("cope table"));
                let z = g.matmul_nt(q, table); // (n_h, t, pmax+1)
                let pos = g.pos_interp(z, p);
                let s = g.scale(raw, scale);
                let s = g.add(s, pos);
                g.causal_softmax(s)
            }
            Variant::MapEmO => {
                let (wq, wk) = (self.var(g, layer.wq), self.var(g, layer.wk));
                let q = g.matmul(xn, wq);
                let k = g.matmul(xn, wk);
                let (q, k) = (heads(g, q), heads(g, k));
                let s = g.matmul_nt(q, k);
                let s = g.scale(s, scale);
                g.causal_softmax(s)
            }
            Variant::MapEmOs | Variant::MapEmS => {
                let rid = layer.rotor.as_ref().expect("rotor for EM");
                let (ks_i, qs_i) = rid.stars.expect("zero coordinate for EM");
                let (ks, qs) = (self.var(g, ks_i), self.var(g, qs_i));
                let (k_p, q_p) = match nc_rotations {
                    Some(rots) => nc_position_stream(g, rots, ks, qs, cfg),
                    None => rotor::position_stream(
                        g,
                        theta_heads.expect("angles for EM"),
                        ks,
                        qs,
                    ),
                };
                let s_p = g.matmul_nt(q_p, k_p);
                let s_p = g.scale(s_p, scale);
                let a_p = g.causal_softmax(s_p);
                if cfg.variant == Variant::MapEmS {
                    if opts.attention {
                        trace.attention.push(AttentionTrace {
                            a: g.val(a_p).clone(),
                            a_x: None,
                            a_p: Some(g.val(a_p).clone()),
                        });
                    }
                    let y = g.matmul(a_p, v);
                    return self.finish_block(g, x, y, layer, t);
                }
                let (wq, wk) = (self.var(g, layer.wq), self.var(g, layer.wk));
                let q = g.matmul(xn, wq);
                let k = g.matmul(xn, wk);
                let (q, k) = (heads(g, q), heads(g, k));
                let s_x = g.matmul_nt(q, k);
                let s_x = g.scale(s_x, scale);
                let a_x = g.causal_softmax(s_x);
                let prod = g.mul(a_x, a_p);
                let a = g.row_norm_causal(prod);
                if opts.attention {
                    trace.attention.push(AttentionTrace {
                        a: g.val(a).clone(),
                        a_x: Some(g.val(a_x).clone()),
                        a_p: Some(g.val(a_p).clone()),
                    });
                }
                a
            }
        };
        if opts.attention && !cfg.variant.is_em() {
            trace.attention.push(AttentionTrace { a: g.val(a).clone(), a_x: None, a_p: None });
        } else if opts.attention && cfg.variant == Variant::MapEmO {
            trace.attention.push(AttentionTrace { a: g.val(a).clone(), a_x: None, a_p: None });
        }
        let y = g.matmul(a, v);
        self.finish_block(g, x, y, layer, t)
    }

    fn finish_block(
        &self,
        g: &mut Graph<T>,
        x: Var,
        y_heads: Var,
        layer: &LayerIdx,
        t: usize,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let y = g.swap_lead2(y_heads); // (t, n_h, d_h)
        let y = g.reshape(y, &[t, d]);
        let wo = self.var(g, layer.wo);
        let y = g.matmul(y, wo);
        Ok(g.add(x, y))
    }

    fn proj_weights(&self, g: &mut Graph<T>, rid: &RotorIdx) -> ProjWeights {
        let w_in = self.var(g, rid.w_in.expect("projector w_in"));
        let w_out = self.var(g, rid.w_out.expect("projector w_out"));
        match (rid.w_h1, rid.b_h1) {
            (Some(w1), Some(b1)) => ProjWeights::Mlp {
                w_in,
                w_h1: self.var(g, w1),
                b_h1: self.var(g, b1),
                w_out,
            },
            _ => ProjWeights::Linear { w_in, w_out },
        }
    }
}

/// theta = omega ⊙ delta per step (no cumulative sum): used by the
/// non-commutative path where integration happens in the group.
fn delta_mul_omega<T: Real>(
    g: &mut Graph<T>,
    delta: Var,
    omega: Var,
    proj: &DeltaProjector,
) -> Var {
    // delta (t, n_h, n_b, K) x omega (n_h, n_b) -> broadcast over t and K
    let t = g.val(delta).shape()[0];
    let om = g.reshape(omega, &[proj.n_h, proj.n_b, 1]);
    let _ = t;
    g.mul(delta, om)
}

/// Positional streams for the non-commutative path: K_P[t] = Rcum[t]·k*.
fn nc_position_stream<T: Real>(
    g: &mut Graph<T>,
    rots: Var,
    k_star: Var,
    q_star: Var,
    cfg: &ModelConfig,
) -> (Var, Var) {
    let s = g.val(rots).shape().to_vec(); // (t, n_h, n_b, b, b)
    let (t, n_h, n_b, b) = (s[0], s[1], s[2], s[3]);
    let flat_rots = g.reshape(rots, &[t * n_h * n_b, b, b]);
    let mut apply = |star: Var| -> Var {
        let sb = g.reshape(star, &[n_h, n_b, b]);
        let tiled = g.broadcast_lead(sb, t); // (t, n_h, n_b, b)
        let col = g.reshape(tiled, &[t * n_h * n_b, b, 1]);
        let y = g.matmul(flat_rots, col); // (t·n_h·n_b, b, 1)
        let y = g.reshape(y, &[t, n_h, n_b * b]);
        g.swap_lead2(y) // (n_h, t, d_h)
    };
    let k_p = apply(k_star);
    let q_p = apply(q_star);
    let _ = cfg;
    (k_p, q_p)
}
