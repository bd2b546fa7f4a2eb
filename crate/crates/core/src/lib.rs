//! Hierarchical Bayesian spatio-temporal disease mapping on areal data.
//!
//! A Poisson model with a log-area offset, a BYM2 spatial effect, an RW1
//! trend and an optional cyclic seasonal block, fitted by nested Laplace
//! approximations over a hyperparameter grid. Around the engine sit the
//! pieces needed for an areal workflow: polygon ingestion and Queen
//! adjacency, fit metrics (DIC, WAIC, CPO), relative-risk surfaces, Moran's
//! I / LISA and RW1 forecasts, plus a forward simulator for checks.

pub mod analytics;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod fit;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod model;
pub mod pipeline;
mod parallel;
pub mod quadrature;
pub mod report;
pub mod simulate;
pub mod sparsela;

pub use error::{Error, Result};
