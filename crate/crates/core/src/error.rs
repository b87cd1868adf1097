use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("resolution {res:?} is not divisible by factor {factor}")]
    NotDivisible { res: Vec<usize>, factor: usize },

    #[error("pressure solve did not converge after {iterations} iterations (relative residual {residual:e})")]
    PressureNotConverged { iterations: usize, residual: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scene setup failed: {0}")]
    Scene(String),

    #[error("particle id {0} is not present in both states")]
    IdMismatch(u64),

    #[error("dataset has no positive (splash) samples")]
    NoPositives,

    #[error("degenerate dataset: {0}")]
    Degenerate(String),

    #[error("incompatible datasets: {0}")]
    Incompatible(String),

    #[error("feature length mismatch: expected {expected}, got {found}")]
    FeatureLength { expected: usize, found: usize },

    #[error("bad magic in {kind} file")]
    BadMagic { kind: &'static str },

    #[error("unsupported {kind} version: found {found}, expected {expected}")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
