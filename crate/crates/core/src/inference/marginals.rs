use statrs::distribution::{ContinuousCDF, Normal};

use super::{GaussianApprox, HyperGrid};

/// Finite mixture of univariate Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Mixture {
    pub fn single(mean: f64, sd: f64) -> Self {
        Self { weights: vec![1.0], means: vec![mean], sds: vec![sd] }
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let second: f64 = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(w, (mu, s))| w * (s * s + mu * mu))
            .sum();
        (second - m * m).max(0.0)
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(w, (&mu, &s))| {
                if s > 0.0 {
                    w * Normal::new(mu, s).expect("positive sd").cdf(x)
                } else if x >= mu {
                    *w
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// Quantile by bisection on the mixture CDF.
    pub fn quantile(&self, p: f64) -> f64 {
        let spread = self
            .means
            .iter()
            .zip(&self.sds)
            .map(|(m, s)| (m - 10.0 * s, m + 10.0 * s))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| (lo.min(a), hi.max(b)));
        let (mut lo, mut hi) = spread;
        if lo == hi {
            return lo;
        }
        let tol = 1e-10 * (hi - lo).max(1e-300) + 1e-12;
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Probability that the variable exceeds `x`.
    pub fn exceedance(&self, x: f64) -> f64 {
        (1.0 - self.cdf(x)).clamp(0.0, 1.0)
    }

    pub fn summary(&self) -> Summary {
        Summary {
            mean: self.mean(),
            sd: self.sd(),
            q025: self.quantile(0.025),
            q50: self.quantile(0.5),
            q975: self.quantile(0.975),
        }
    }

    /// Moments of `exp(X)`: mean and sd, via the lognormal formula per
    /// component.
    pub fn exp_moments(&self) -> (f64, f64) {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for (w, (&mu, &s)) in self.weights.iter().zip(self.means.iter().zip(&self.sds)) {
            let v = s * s;
            m1 += w * (mu + 0.5 * v).exp();
            m2 += w * (2.0 * mu + 2.0 * v).exp();
        }
        (m1, (m2 - m1 * m1).max(0.0).sqrt())
    }
}

/// Table-style summary: mean, sd and the 2.5/50/97.5% quantiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

impl Summary {
    /// Applies a monotone increasing transform to the quantiles; mean and
    /// sd must be supplied separately because they do not commute with it.
    pub fn map_quantiles(&self, f: impl Fn(f64) -> f64, mean: f64, sd: f64) -> Summary {
        Summary { mean, sd, q025: f(self.q025), q50: f(self.q50), q975: f(self.q975) }
    }
}

/// Posterior marginals of the latent field and linear predictor, mixed over
/// the retained hyperparameter points.
#[derive(Debug, Clone)]
pub struct PosteriorMixture {
    pub weights: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
    eta_means: Vec<Vec<f64>>,
    eta_vars: Vec<Vec<f64>>,
    eta_modes: Vec<Vec<f64>>,
}

pub fn latent_marginals(grid: &HyperGrid<GaussianApprox>) -> PosteriorMixture {
    let mut out = PosteriorMixture {
        weights: Vec::new(),
        thetas: Vec::new(),
        means: Vec::new(),
        vars: Vec::new(),
        eta_means: Vec::new(),
        eta_vars: Vec::new(),
        eta_modes: Vec::new(),
    };
    for p in &grid.points {
        out.weights.push(p.weight);
        out.thetas.push(p.theta.clone());
        out.means.push(p.state.mean.clone());
        out.vars.push(p.state.latent_var.clone());
        out.eta_means.push(p.state.eta_mean.clone());
        out.eta_vars.push(p.state.eta_var.clone());
        out.eta_modes.push(p.state.eta_mode.clone());
    }
    out
}

impl PosteriorMixture {
    pub fn latent_dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn n_obs(&self) -> usize {
        self.eta_means.first().map_or(0, Vec::len)
    }

    pub fn latent(&self, i: usize) -> Mixture {
        Mixture {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m[i]).collect(),
            sds: self.vars.iter().map(|v| v[i].sqrt()).collect(),
        }
    }

    pub fn latent_mean(&self, i: usize) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m[i]).sum()
    }

    pub fn latent_means(&self) -> Vec<f64> {
        (0..self.latent_dim()).map(|i| self.latent_mean(i)).collect()
    }

    /// Linear predictor (offset included) of observation `r`.
    pub fn eta(&self, r: usize) -> Mixture {
        Mixture {
            weights: self.weights.clone(),
            means: self.eta_means.iter().map(|m| m[r]).collect(),
            sds: self.eta_vars.iter().map(|v| v[r].sqrt()).collect(),
        }
    }

    /// Linear predictor of observation `r` at each component's mode.
    pub fn eta_modes(&self, r: usize) -> Vec<f64> {
        self.eta_modes.iter().map(|m| m[r]).collect()
    }

    /// Posterior mean of `E·e^η` per observation.
    pub fn fitted_means(&self) -> Vec<f64> {
        (0..self.n_obs()).map(|r| self.eta(r).exp_moments().0).collect()
    }

    /// Summary of hyperparameter `j` mapped to the user scale by `f`,
    /// taken from the weighted grid points.
    pub fn hyper_summary(&self, j: usize, f: impl Fn(f64) -> f64) -> Summary {
        let mut pts: Vec<(f64, f64)> = self.thetas.iter().zip(&self.weights).map(|(t, &w)| (f(t[j]), w)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mean: f64 = pts.iter().map(|(v, w)| v * w).sum();
        let var: f64 = pts.iter().map(|(v, w)| w * (v - mean).powi(2)).sum();
        Summary {
            mean,
            sd: var.sqrt(),
            q025: weighted_quantile(&pts, 0.025),
            q50: weighted_quantile(&pts, 0.5),
            q975: weighted_quantile(&pts, 0.975),
        }
    }
}

/// Quantile of a weighted point set, interpolating the CDF linearly
/// between mid-mass positions of consecutive points.
fn weighted_quantile(sorted: &[(f64, f64)], p: f64) -> f64 {
    let mut cum = 0.0;
    let mids: Vec<(f64, f64)> = sorted
        .iter()
        .map(|&(v, w)| {
            let m = cum + 0.5 * w;
            cum += w;
            (m, v)
        })
        .collect();
    if p <= mids[0].0 {
        return mids[0].1;
    }
    for win in mids.windows(2) {
        let ((c0, v0), (c1, v1)) = (win[0], win[1]);
        if p <= c1 {
            let t = if c1 > c0 { (p - c0) / (c1 - c0) } else { 1.0 };
            return v0 + t * (v1 - v0);
        }
    }
    mids[mids.len() - 1].1
}
