//! Learned sub-grid splash model for FLIP liquid simulations.
//!
//! The crate contains a dimension-generic FLIP solver with ghost-fluid
//! surface tension, a training-data generator, a small neural-network engine
//! for the splash classifier and velocity modifier, the coupling of the
//! trained model into coarse simulations, and evaluation experiments.

// grid code indexes several parallel arrays per axis or cell, and the
// negated float comparisons reject NaN on purpose
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod components;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod levelset;
pub mod mlflip;
pub mod neural;
pub mod particles;
pub mod solver;
pub mod vecmath;

pub use error::{Error, Result};
