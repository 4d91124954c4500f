//! Video patch pruning over a mask-aware mini vision transformer.
//!
//! The crate implements a desk-scale, dependency-light video token pruning
//! pipeline: a frozen L-layer transformer runs over patch tokens of each
//! frame while two families of learned gates decide, per patch, whether the
//! remaining layers still need it. A temporal mapping module transfers
//! evidence from the previous frame's surviving patches onto the current
//! frame (motion-tolerant via a grid-distance prior), and per-depth
//! selective modules sharpen the mask as features mature. All decisions run
//! through Gumbel-softmax relaxations so the gates are trainable with
//! straight-through gradients against density-targeting losses.
//!
//! Everything is deterministic given a seed, checked against independent
//! oracles (finite differences, dense reference attention, hand-computed
//! values), and measurable: analytic FLOP ledgers, foreground-coverage and
//! density metrics, and a synthetic moving-texture video generator make the
//! pruning behavior quantifiable end to end without any external data.

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod gumbel;
pub mod heads;
pub mod io;
pub mod losses;
pub mod mapsm;
pub mod metrics;
pub mod pipeline;
pub mod sm;
pub mod synth;
pub mod tensor;
pub mod vit;

pub use error::{Result, VppError};
