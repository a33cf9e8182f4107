//! Decoder-only sequence models whose positional encoding is updated by
//! input-dependent rotations computed with parallel path integration, plus
//! the baselines, selective state-space counterparts, synthetic
//! structure-learning tasks, training harness and analysis probes.
//!
//! The numeric core is generic over the scalar type ([`numerics::Real`],
//! f32 or f64): verification suites run at f64, training defaults to f32.

pub mod error;
pub mod numerics;
pub mod rotor;

pub use error::{MfError, Result};
pub use numerics::{Graph, Real, Tensor, Var};

/// Training-precision graph.
pub type Graph32 = Graph<f32>;
/// Verification-precision graph.
pub type Graph64 = Graph<f64>;
