//! Density-driven solute transport in stochastically fractured porous media.
//!
//! The crate covers the full pipeline from stochastic geology to a trained
//! neural surrogate of the transport dynamics:
//!
//! 1. [`scenario`] — sample fractured-rock realizations and upscale them to
//!    equivalent permeability fields over a structured grid ([`grid`]).
//! 2. [`pressure`] / [`transport`] / [`simulator`] — a Q1 finite-element
//!    solver for Darcy flow coupled to advective-dispersive brine transport
//!    ([`physics`]), sequentially stepped with backward Euler.
//! 3. [`dataset`] — turn simulation snapshots into normalized training
//!    records of the concentration *rate*, with importance sampling
//!    focused on the plume.
//! 4. [`autodiff`] / [`operator`] — a small reverse-mode tape and the
//!    branch-trunk operator networks trained on those records, including
//!    enriched variants that mix branch and trunk embeddings through
//!    residual interaction blocks.
//! 5. [`harness`] — training loops, architecture sweeps, and rollout
//!    evaluation against held-out simulations.
//!
//! Everything is deterministic given a base seed: random draws go through
//! counter-based streams ([`rng`]) keyed by stable identifiers rather than
//! shared mutable generator state, and all floating-point loops have a
//! fixed evaluation order (the crate is deliberately single-threaded).

pub mod error;
pub mod grid;
pub mod harness;
pub mod operator;
pub mod linalg;
pub mod physics;
pub mod pressure;
pub mod rng;
pub mod scenario;
pub mod autodiff;
pub mod dataset;
pub mod simulator;
pub mod store;
pub mod transport;

pub use error::{Error, Result};
