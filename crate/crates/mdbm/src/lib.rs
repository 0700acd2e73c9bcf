//! Monotone deep Boltzmann machines.
//!
//! A Boltzmann machine over categorical variables has density
//! `p(x) ∝ exp(sum_{ij} x_i^T Phi_ij x_j + sum_i b_i^T x_i)`. This crate
//! parameterizes the pairwise potential `Phi` so that it is block hollow and
//! `I - Phi ⪰ mI`, which makes parallel damped mean-field inference converge
//! to the unique globally optimal fixed point — including through dense
//! intra-layer connections that restricted Boltzmann machines forbid.
//!
//! Module map:
//!
//! - [`linops`] — the block-structured potential (dense and convolutional
//!   blocks), spectral normalization, dense materialization oracles.
//! - [`prox`] — the proximal operator of entropy minus squared norm on the
//!   simplex, via Lambert W / Halley / Newton, with analytic derivatives.
//! - [`meanfield`] — the damped forward-backward fixed-point solver
//!   (forward and implicit backward passes) plus the CCCP, log-damped and
//!   Frank-Wolfe baseline update rules.
//! - [`model`] — model assembly, the energy function, and brute-force
//!   oracles (exact conditional marginals, sequential coordinate ascent).
//! - [`train`] — marginal-based losses, implicit gradients, Adam.
//! - [`data`] — IDX ingestion, binning/one-hot encoding, masking,
//!   checkpoints, metrics, a synthetic digit corpus, PGM/PPM dumps.
//! - [`rbm`] — deep restricted Boltzmann machine baseline (CD-k, Gibbs,
//!   block mean-field).
//! - [`verify`] — the runnable property/oracle suite behind `mdbm check`.
//! - [`cli`] — the command-line entry points.

pub mod cli;
pub mod data;
pub mod error;
pub mod linops;
pub mod meanfield;
pub mod model;
pub mod prox;
pub mod rbm;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
