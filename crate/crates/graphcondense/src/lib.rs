//! Condense a large attributed graph into a tiny synthetic one that keeps
//! link-prediction utility while blunting membership-inference attacks.
//!
//! The pipeline has three stages:
//!
//! 1. **Select** structurally central nodes by spectral similarity: rows of
//!    the k smallest Laplacian eigenvectors are compared by cosine, and the
//!    per-class top scorers seed the condensed features ([`spectral`]).
//! 2. **Synthesize** the condensed structure with a small network operating
//!    on the Poincare ball: selected features are mapped into hyperbolic
//!    space and pairwise edge weights are read out of a Mobius-linear stack
//!    ([`hyperbolic`]).
//! 3. **Optimize** features and structure by matching per-class gradients of
//!    a simplified graph convolution between the real and synthetic graphs,
//!    aligning spectral gaps and regularizing edge mass ([`condense`]).
//!
//! The [`eval`] module measures what the condensed graph is worth: link
//! prediction transfer, node/link membership-inference attacks, graph
//! statistics, DOT export and efficiency measurements.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! each major capability has one. A thin `graphcondense` binary wraps the
//! same entry points behind `synth`, `select`, `condense`, `eval` and
//! `export-dot` subcommands.

pub mod autodiff;
pub mod condense;
pub mod error;
pub mod eval;
pub mod graph;
pub mod hyperbolic;
pub mod linalg;
pub mod rng;
pub mod sparse;
pub mod spectral;
pub mod synth;

pub mod cli;

pub use error::{Error, Result};
