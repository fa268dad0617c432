//! Laboratory for the identity-bridge mechanism in two-hop composition.
//!
//! The crate has five parts:
//!
//! - [`taskgen`]: synthetic one-hop / zero-hop / two-hop task families with
//!   controlled complexity and OOD-by-construction test splits.
//! - [`embmlp`]: the sum-of-embeddings linear model with analytic gradients
//!   and full-batch gradient-descent training.
//! - [`nanoformer`]: a minimal decoder-only pre-norm transformer with a
//!   hand-derived backward pass, at toy scale.
//! - [`theory`]: the reduced nuclear-norm margin programs (with and without
//!   identity supervision), an augmented-Lagrangian solver, KKT checks, and a
//!   full-matrix proximal oracle.
//! - [`analysis`]: margins, OOD accuracy, logit-template block fits and
//!   pattern checks, hidden-state alignment scores.
//!
//! [`harness`] wires everything into runnable commands; see the `twohop`
//! binary and the `examples/` directory.

pub mod analysis;
pub mod embmlp;
pub mod harness;
pub mod nanoformer;
pub mod taskgen;
pub mod theory;
