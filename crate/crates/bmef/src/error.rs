//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("basis dimension must be at least 4, got {0}")]
    InvalidDegree(usize),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("marginal basis for the {0} dimension is rank deficient")]
    RankDeficient(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset integrity: {0}")]
    Integrity(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "rejection sampler degenerate after {attempts} attempts \
         (d = {dim}, |linear| = {linear_norm:.3e}, spread = {quad_spread:.3e})"
    )]
    SamplerDegenerate {
        attempts: u64,
        dim: usize,
        linear_norm: f64,
        quad_spread: f64,
    },

    #[error("numerical divergence at iteration {iteration}: {context}")]
    NumericalDivergence { iteration: usize, context: String },

    #[error("need at least 2 posterior draws, got {0}")]
    InsufficientDraws(usize),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("model specification error: {0}")]
    Spec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
