//! Temporal query denoising for transformer-based multi-object tracking on a
//! synthetic bird's-eye-view world.
//!
//! The crate is organized bottom-up:
//!
//! - [`numeric`]: dense f64 kernels, a recording graph with reverse-mode
//!   differentiation, and a finite-difference gradient checker.
//! - [`rng`]: hierarchical seeded random streams (run -> frame -> group).
//! - [`masks`]: self-attention and association masks over a query layout.
//! - [`dngen`]: the temporal denoising query generator (noise injection,
//!   groups, propagation, reconstruction targets).
//! - [`sim`]: synthetic ground-truth scenes and observation tokens.
//! - [`tracker`]: the decoder stack for the three tracking paradigms and the
//!   track update.
//! - [`train`]: bipartite matching, losses, and the optimization loop.
//! - [`metrics`]: CLEAR-MOT and AMOTA/AMOTP evaluation.

pub mod dngen;
pub mod masks;
pub mod metrics;
pub mod numeric;
pub mod rng;
pub mod sim;
pub mod tracker;
pub mod train;

pub use numeric::{Graph, Matrix, NodeId, ParamId, ParamStore};
