//! Bayesian mixed-effects models for multilevel two-way functional data.
//!
//! This crate fits a mixed-effects model to functional responses observed on a
//! two-dimensional grid (e.g. time x frequency), collected for several subjects
//! under several experimental conditions. Fixed effects are covariate-dependent
//! and carry a low-rank CP structure with orthonormal factor matrices; random
//! effects capture subject-level and subject-by-condition variation. Posterior
//! inference runs through a two-block Gibbs sampler with a spike-and-slab
//! shrinkage prior that selects the CP rank automatically.
//!
//! The main entry points are:
//!
//! - [`basis`]: tensor-product spline bases and their orthogonalized form,
//! - [`dataset`]: the observed-data container and its file formats,
//! - [`sampler`]: the Gibbs sampler ([`sampler::fit`]),
//! - [`posterior`]: reconstruction, summaries, and WAIC,
//! - [`simulate`]: synthetic-data generation and evaluation metrics.

pub mod basis;
pub mod chain_io;
pub mod config;
pub mod dataset;
pub mod distributions;
pub mod error;
mod linalg;
pub mod posterior;
pub mod rng;
pub mod sampler;
pub mod simulate;

pub use error::{Error, Result};

#[cfg(any())] // book chapters not written yet
#[cfg(doctest)]
mod booktest {
    //! Every code block in the guide runs as a doctest of this crate.
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/bases.md")]
    pub struct Bases;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct Model;
    #[doc = include_str!("../../../book/src/sampling.md")]
    pub struct Sampling;
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub struct Simulation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
