//! Gauss–Hermite rules and expectations under Gaussian mixtures.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::inference::Mixture;

/// Nodes and weights for `∫ e^{-x²} f(x) dx`, from the eigen-decomposition
/// of the Jacobi matrix (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrize to remove eigen-solver asymmetry
    for k in 0..n / 2 {
        let (a, b) = (pairs[k], pairs[n - 1 - k]);
        let x = 0.5 * (b.0 - a.0);
        let w = 0.5 * (a.1 + b.1);
        pairs[k] = (-x, w);
        pairs[n - 1 - k] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    pairs.into_iter().unzip()
}

/// Standard-normal rule: `E[f(Z)] ≈ Σ w_k f(z_k)`.
#[derive(Debug, Clone)]
pub struct NormalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalRule {
    pub fn new(n: usize) -> Self {
        let (x, w) = gauss_hermite(n);
        let s = std::f64::consts::PI.sqrt();
        Self {
            nodes: x.iter().map(|v| v * std::f64::consts::SQRT_2).collect(),
            weights: w.iter().map(|v| v / s).collect(),
        }
    }

    /// Cached rules for 15·2^k nodes.
    pub fn cached(level: usize) -> &'static NormalRule {
        static RULES: OnceLock<Vec<NormalRule>> = OnceLock::new();
        &RULES.get_or_init(|| (0..MAX_LEVEL + 1).map(|k| NormalRule::new(BASE_NODES << k)).collect())[level]
    }
}

pub const BASE_NODES: usize = 15;
const MAX_LEVEL: usize = 3;

/// `log E[exp(h(X))]` under a mixture at one rule resolution.
fn log_expect_exp_at(mix: &Mixture, h: &dyn Fn(f64) -> f64, rule: &NormalRule) -> f64 {
    let mut terms = Vec::with_capacity(mix.weights.len() * rule.nodes.len());
    for (w, (&m, &s)) in mix.weights.iter().zip(mix.means.iter().zip(&mix.sds)) {
        if *w <= 0.0 {
            continue;
        }
        if s == 0.0 {
            terms.push(w.ln() + h(m));
            continue;
        }
        for (z, wz) in rule.nodes.iter().zip(&rule.weights) {
            terms.push(w.ln() + wz.ln() + h(m + s * z));
        }
    }
    log_sum_exp(&terms)
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Adaptive estimate of `log E[exp(h(X))]`: start at 15 nodes, double
/// until consecutive resolutions agree to `rel_tol` on the natural scale.
/// Returns the estimate and whether it converged.
pub fn log_expect_exp(mix: &Mixture, h: &dyn Fn(f64) -> f64, rel_tol: f64) -> (f64, bool) {
    let mut prev = log_expect_exp_at(mix, h, NormalRule::cached(0));
    for level in 1..=MAX_LEVEL {
        let next = log_expect_exp_at(mix, h, NormalRule::cached(level));
        // relative difference of exp(prev) and exp(next)
        if (next - prev).abs() <= rel_tol || !next.is_finite() {
            return (next, next.is_finite());
        }
        prev = next;
    }
    (prev, false)
}

/// Adaptive estimate of `E[g(X)]`.
pub fn expect(mix: &Mixture, g: &dyn Fn(f64) -> f64, rel_tol: f64) -> (f64, bool) {
    let at = |rule: &NormalRule| -> f64 {
        let mut acc = 0.0;
        for (w, (&m, &s)) in mix.weights.iter().zip(mix.means.iter().zip(&mix.sds)) {
            if s == 0.0 {
                acc += w * g(m);
            } else {
                acc += w * rule.nodes.iter().zip(&rule.weights).map(|(z, wz)| wz * g(m + s * z)).sum::<f64>();
            }
        }
        acc
    };
    let mut prev = at(NormalRule::cached(0));
    for level in 1..=MAX_LEVEL {
        let next = at(NormalRule::cached(level));
        if (next - prev).abs() <= rel_tol * next.abs().max(1e-300) {
            return (next, true);
        }
        prev = next;
    }
    (prev, false)
}
