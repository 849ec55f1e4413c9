//! Structural toolkit for markets of visually differentiated products.
//!
//! Products carry unit-norm characteristic vectors on an embedding
//! hypersphere. The crate provides the geometry of that space, a
//! random-coefficient nested-logit demand system, Bertrand pricing and
//! fixed-cost supply primitives, instrument construction and GMM demand
//! estimation, reduced-form panel evidence, and counterfactual experiments
//! that vary a design-similarity protection radius.
//!
//! Start from the `examples/` directory: each example is a runnable
//! walkthrough of one capability on synthetic data. The `cml` binary wraps
//! the same entry points behind a subcommand CLI for scripted runs.

pub mod cli;
pub mod demand;
pub mod error;
pub mod estimation;
pub mod geometry;
pub mod io;
pub mod manifest;
pub mod panel;
pub mod policy;
pub mod rng;
pub mod supply;
pub mod synth;

pub use error::{Error, Result};
