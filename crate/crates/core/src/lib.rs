//! Hierarchical multiscale recurrent language models on characters.
//!
//! The crate bundles a small reverse-mode differentiation engine
//! ([`numerics`]), the recurrent cells ([`cells`]), the three-layer stack
//! with its output heads ([`model`]), corpus handling ([`data`]), the
//! training protocol ([`training`]), evaluation and segmentation analysis
//! ([`analysis`]), and the command-line driver ([`cli`]).

pub mod analysis;
pub mod cli;
pub mod cells;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
