//! Nested Laplace approximation for latent Gaussian models.
//!
//! For a fixed hyperparameter vector θ the latent field is approximated by
//! a Gaussian at the constrained mode of `p(x | y, θ)` ([`LaplaceEngine`]);
//! the resulting evidence `p̃(θ | y)` drives a quasi-Newton ascent and a
//! grid (or CCD) exploration around the hyperparameter mode
//! ([`explore_grid`]); latent marginals are Gaussian mixtures over the
//! retained grid points ([`PosteriorMixture`]).

mod grid;
mod laplace;
mod marginals;

pub use grid::{
    explore_grid, maximize, Design as GridDesign, Evaluation, GridPoint, HyperGrid, HyperObjective, MaximizeResult,
};
pub use laplace::{GaussianApprox, LaplaceEngine, ModeFit, NewtonSettings};
pub use marginals::{latent_marginals, Mixture, PosteriorMixture, Summary};

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::sparsela::{Constraints, SparseSym};

/// Prior of the latent field at one θ.
#[derive(Debug, Clone)]
pub struct LatentPrior {
    pub precision: SparseSym,
    pub constraints: Constraints,
    /// `log|Q| + log|A Q⁻¹ Aᵀ|` when known in closed form; otherwise the
    /// engine computes it from a factorization of `Q`.
    pub constrained_log_det: Option<f64>,
}

/// A latent Gaussian model: `x | θ ~ N(0, Q(θ)⁻¹)` subject to linear
/// constraints, with a prior on θ in an unconstrained internal scale.
///
/// The sparsity pattern of `Q(θ)` must not depend on θ.
pub trait LatentModel: Sync {
    fn latent_dim(&self) -> usize;
    fn hyper_names(&self) -> Vec<String>;
    fn initial_hyper(&self) -> Vec<f64>;
    fn prior(&self, theta: &[f64]) -> Result<LatentPrior>;
    fn log_hyper_prior(&self, theta: &[f64]) -> Result<f64>;

    fn hyper_dim(&self) -> usize {
        self.hyper_names().len()
    }
}

/// Sparse design in CSR form: `η = offset + A x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl Design {
    pub fn new(n_cols: usize) -> Self {
        Self { n_cols, row_ptr: vec![0], col_idx: Vec::new(), values: Vec::new() }
    }

    /// Appends a row; duplicate columns are merged.
    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        let mut row: Vec<(usize, f64)> = entries.to_vec();
        row.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for (c, v) in row {
            assert!(c < self.n_cols, "design column {c} out of range");
            match merged.last_mut() {
                Some(last) if last.0 == c => last.1 += v,
                _ => merged.push((c, v)),
            }
        }
        for (c, v) in merged {
            self.col_idx.push(c);
            self.values.push(v);
        }
        self.row_ptr.push(self.col_idx.len());
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    pub fn row_entries(&self, r: usize) -> Vec<(usize, f64)> {
        let (c, v) = self.row(r);
        c.iter().copied().zip(v.iter().copied()).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows())
            .map(|r| {
                let (c, v) = self.row(r);
                c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
            })
            .collect()
    }

    /// `Aᵀ g`.
    pub fn tmul_vec(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for (r, &gr) in g.iter().enumerate() {
            let (c, v) = self.row(r);
            for (&j, &a) in c.iter().zip(v) {
                out[j] += a * gr;
            }
        }
        out
    }
}

/// Observation model.
#[derive(Debug, Clone, PartialEq)]
pub enum Likelihood {
    /// `y ~ Poisson(exp(η))`, the offset carrying `log E`.
    Poisson { counts: Vec<f64>, log_factorial: Vec<f64> },
    /// `y ~ N(η, 1/precision)` with known precision.
    Gaussian { values: Vec<f64>, precision: Vec<f64> },
}

impl Likelihood {
    pub fn poisson(counts: &[u64]) -> Self {
        let counts: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let log_factorial = counts.iter().map(|&c| ln_gamma(c + 1.0)).collect();
        Likelihood::Poisson { counts, log_factorial }
    }

    pub fn gaussian(values: Vec<f64>, precision: Vec<f64>) -> Self {
        Likelihood::Gaussian { values, precision }
    }

    pub fn len(&self) -> usize {
        match self {
            Likelihood::Poisson { counts, .. } => counts.len(),
            Likelihood::Gaussian { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn observed(&self, i: usize) -> f64 {
        match self {
            Likelihood::Poisson { counts, .. } => counts[i],
            Likelihood::Gaussian { values, .. } => values[i],
        }
    }

    pub fn log_density(&self, i: usize, eta: f64) -> f64 {
        match self {
            Likelihood::Poisson { counts, log_factorial } => {
                let y = counts[i];
                let t = if y == 0.0 { 0.0 } else { y * eta };
                t - eta.exp() - log_factorial[i]
            }
            Likelihood::Gaussian { values, precision } => {
                let p = precision[i];
                0.5 * (p / std::f64::consts::TAU).ln() - 0.5 * p * (values[i] - eta).powi(2)
            }
        }
    }

    /// First derivative and negated second derivative of the log density
    /// in `η`.
    pub fn derivatives(&self, i: usize, eta: f64) -> (f64, f64) {
        match self {
            Likelihood::Poisson { counts, .. } => {
                let mu = eta.exp();
                (counts[i] - mu, mu)
            }
            Likelihood::Gaussian { values, precision } => {
                (precision[i] * (values[i] - eta), precision[i])
            }
        }
    }

    /// Offset shift that turns the mode equation into the stationarity
    /// condition of the variational objective `E_q[log p(y | η)]` with
    /// `Var_q(η) = var` held fixed.
    pub fn mean_correction_shift(&self, var: f64) -> f64 {
        match self {
            Likelihood::Poisson { .. } => 0.5 * var,
            Likelihood::Gaussian { .. } => 0.0,
        }
    }
}

/// Data side of a latent Gaussian model.
#[derive(Debug, Clone)]
pub struct Observations {
    pub design: Design,
    pub offset: Vec<f64>,
    pub likelihood: Likelihood,
}

impl Observations {
    pub fn new(design: Design, offset: Vec<f64>, likelihood: Likelihood) -> Result<Self> {
        let n = design.n_rows();
        if offset.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: offset.len() });
        }
        if likelihood.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: likelihood.len() });
        }
        if let Some(i) = offset.iter().position(|o| !o.is_finite()) {
            return Err(Error::NonFinite(format!("offset of observation {i}")));
        }
        Ok(Self { design, offset, likelihood })
    }

    pub fn len(&self) -> usize {
        self.offset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offset.is_empty()
    }

    /// `η = offset + A x`.
    pub fn linear_predictor(&self, x: &[f64]) -> Vec<f64> {
        self.design.mul_vec(x).into_iter().zip(&self.offset).map(|(a, o)| a + o).collect()
    }

    pub fn log_likelihood(&self, eta: &[f64]) -> f64 {
        eta.iter().enumerate().map(|(i, &e)| self.likelihood.log_density(i, e)).sum()
    }
}
