use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;

use super::{LatentModel, LatentPrior, Observations};
use crate::error::{Error, Result};
use crate::sparsela::{pattern_union, CholFactor, Kriging, SelectedInverse, SparseSym, Symbolic};

#[derive(Debug, Clone)]
pub struct NewtonSettings {
    pub max_iter: usize,
    pub step_tol: f64,
    pub rel_objective_tol: f64,
    /// Shift latent means to the stationary point of the variational
    /// objective with the Laplace covariance held fixed.
    pub mean_correction: bool,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self { max_iter: 50, step_tol: 1e-8, rel_objective_tol: 1e-10, mean_correction: true }
    }
}

/// Constrained mode of `p(x | y, θ)` with the curvature factorized there.
#[derive(Debug, Clone)]
pub struct ModeFit {
    pub theta: Vec<f64>,
    pub mode: Vec<f64>,
    pub iterations: usize,
    /// `log p(y | x*, θ)`.
    pub log_likelihood: f64,
    /// Laplace estimate of `log p(y | θ)`.
    pub log_marginal_likelihood: f64,
    pub log_hyper_prior: f64,
    /// Objective value after each accepted Newton step.
    pub objective_trace: Vec<f64>,
    prior: LatentPrior,
    factor: CholFactor,
    kriging: Kriging,
}

impl ModeFit {
    /// `log p̃(θ | y)` up to the normalizing constant of the data.
    pub fn log_posterior(&self) -> f64 {
        self.log_marginal_likelihood + self.log_hyper_prior
    }

    pub fn factor(&self) -> &CholFactor {
        &self.factor
    }

    pub fn kriging(&self) -> &Kriging {
        &self.kriging
    }

    pub fn prior(&self) -> &LatentPrior {
        &self.prior
    }
}

/// Gaussian approximation of `x | y, θ` at one hyperparameter point.
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub theta: Vec<f64>,
    pub mode: Vec<f64>,
    /// Posterior mean estimate (mode unless the mean correction is on).
    pub mean: Vec<f64>,
    /// Constrained marginal variances of the latent field.
    pub latent_var: Vec<f64>,
    /// Linear predictor (offset included) mean and variance per observation.
    pub eta_mean: Vec<f64>,
    pub eta_var: Vec<f64>,
    /// Linear predictor at the mode, where the curvature was taken.
    pub eta_mode: Vec<f64>,
    pub log_marginal_likelihood: f64,
    pub log_hyper_prior: f64,
    factor: CholFactor,
    kriging: Kriging,
}

impl GaussianApprox {
    pub fn log_posterior(&self) -> f64 {
        self.log_marginal_likelihood + self.log_hyper_prior
    }

    /// Dense constrained covariance among `indices`.
    pub fn covariance_block(&self, indices: &[usize]) -> Result<DMatrix<f64>> {
        let n = self.factor.dim();
        let k = indices.len();
        let mut cols = Vec::with_capacity(k);
        for &j in indices {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            cols.push(self.factor.solve(&e)?);
        }
        let mut out = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..=a {
                let v = cols[b][indices[a]]
                    - self.kriging.covariance_correction(indices[a], indices[b]);
                out[(a, b)] = v;
                out[(b, a)] = v;
            }
        }
        Ok(out)
    }

    pub fn factor(&self) -> &CholFactor {
        &self.factor
    }
}

/// Laplace machinery bound to one model and data set. The curvature
/// pattern `Q + Aᵀ W A` and its symbolic factorization are computed once.
pub struct LaplaceEngine<'a, M: LatentModel> {
    model: &'a M,
    obs: &'a Observations,
    settings: NewtonSettings,
    q_pattern: SparseSym,
    q_slots: Vec<usize>,
    pattern: SparseSym,
    pair_ptr: Vec<usize>,
    pair_slot: Vec<usize>,
    pair_coef: Vec<f64>,
    symbolic: Arc<Symbolic>,
    prior_symbolic: OnceLock<Arc<Symbolic>>,
}

impl<'a, M: LatentModel> LaplaceEngine<'a, M> {
    pub fn new(model: &'a M, obs: &'a Observations, settings: NewtonSettings) -> Result<Self> {
        let n = model.latent_dim();
        if obs.design.n_cols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: obs.design.n_cols() });
        }
        let q = model.prior(&model.initial_hyper())?.precision;
        if q.dim() != n {
            return Err(Error::DimensionMismatch { expected: n, got: q.dim() });
        }
        let q_entries: Vec<(usize, usize)> = q.iter().map(|(r, c, _)| (r, c)).collect();
        let mut obs_entries = Vec::new();
        for r in 0..obs.len() {
            let (cols, _) = obs.design.row(r);
            for (a, &i) in cols.iter().enumerate() {
                for &j in &cols[..=a] {
                    obs_entries.push((i, j));
                }
            }
        }
        let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        let pattern = pattern_union(n, &[&q_entries, &obs_entries, &diag]);

        let q_slots = slots_of(&pattern, &q);
        let mut pair_ptr = vec![0];
        let mut pair_slot = Vec::new();
        let mut pair_coef = Vec::new();
        for r in 0..obs.len() {
            let (cols, vals) = obs.design.row(r);
            for a in 0..cols.len() {
                for b in 0..=a {
                    pair_slot.push(pattern.position(cols[a], cols[b]).expect("pair in pattern"));
                    pair_coef.push(vals[a] * vals[b]);
                }
            }
            pair_ptr.push(pair_slot.len());
        }
        let symbolic = Symbolic::analyze(&pattern);
        let q_pattern = q;
        Ok(Self {
            model,
            obs,
            settings,
            q_pattern,
            q_slots,
            pattern,
            pair_ptr,
            pair_slot,
            pair_coef,
            symbolic,
            prior_symbolic: OnceLock::new(),
        })
    }

    pub fn model(&self) -> &M {
        self.model
    }

    pub fn observations(&self) -> &Observations {
        self.obs
    }

    pub fn settings(&self) -> &NewtonSettings {
        &self.settings
    }

    /// `Q + Aᵀ diag(w) A` on the fixed curvature pattern.
    fn assemble(&self, q: &SparseSym, w: &[f64]) -> SparseSym {
        let mut h = self.pattern.clone();
        let vals = h.values_mut();
        if q.same_pattern(&self.q_pattern) {
            for (&slot, &v) in self.q_slots.iter().zip(q.values()) {
                vals[slot] += v;
            }
        } else {
            for (r, c, v) in q.iter() {
                let slot = self.pattern.position(r, c).expect("Q(θ) pattern changed with θ");
                vals[slot] += v;
            }
        }
        for (r, &wr) in w.iter().enumerate() {
            for p in self.pair_ptr[r]..self.pair_ptr[r + 1] {
                vals[self.pair_slot[p]] += wr * self.pair_coef[p];
            }
        }
        h
    }

    fn objective(&self, q: &SparseSym, offset: &[f64], x: &[f64]) -> f64 {
        let eta = linear_predictor(self.obs, offset, x);
        self.obs.log_likelihood(&eta) - 0.5 * q.quad_form(x)
    }

    fn curvature(&self, prior: &LatentPrior, offset: &[f64], x: &[f64]) -> Result<(CholFactor, Vec<f64>)> {
        let eta = linear_predictor(self.obs, offset, x);
        let mut g = vec![0.0; eta.len()];
        let mut w = vec![0.0; eta.len()];
        for (r, &e) in eta.iter().enumerate() {
            let (gr, wr) = self.obs.likelihood.derivatives(r, e);
            g[r] = gr;
            w[r] = wr;
        }
        let h = self.assemble(&prior.precision, &w);
        let factor = self.symbolic.factorize(&h)?;
        let mut grad = self.obs.design.tmul_vec(&g);
        for (gi, qi) in grad.iter_mut().zip(prior.precision.mul_vec(x)) {
            *gi -= qi;
        }
        Ok((factor, grad))
    }

    /// Damped Newton iterations on the concave objective with the
    /// constraints enforced by kriging at every step. Returns the maximizer,
    /// the iteration count and the objective after each accepted step.
    fn newton(
        &self,
        prior: &LatentPrior,
        offset: &[f64],
        start: Vec<f64>,
    ) -> Result<(Vec<f64>, usize, Vec<f64>)> {
        let s = &self.settings;
        let mut x = start;
        let mut obj = self.objective(&prior.precision, offset, &x);
        let mut trace = vec![obj];
        let mut feasible = prior.constraints.residual(&x).iter().all(|r| r.abs() <= 1e-10);
        let mut last_grad_norm = f64::INFINITY;
        for it in 1..=s.max_iter {
            let (factor, grad) = self.curvature(prior, offset, &x)?;
            last_grad_norm = grad.iter().fold(0.0, |m, g| f64::max(m, g.abs()));
            let delta = factor.solve(&grad)?;
            let kriging = Kriging::new(&factor, &prior.constraints)?;
            let target: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let target = kriging.correct_mean(&target);
            let dir: Vec<f64> = target.iter().zip(&x).map(|(a, b)| a - b).collect();

            let mut t = 1.0;
            let mut cand: Vec<f64>;
            let mut cand_obj;
            let mut halvings = 0;
            loop {
                cand = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
                cand_obj = self.objective(&prior.precision, offset, &cand);
                if !feasible || (cand_obj.is_finite() && cand_obj >= obj - 1e-12 * obj.abs()) {
                    break;
                }
                halvings += 1;
                if halvings > 40 {
                    break;
                }
                t *= 0.5;
            }
            if !cand_obj.is_finite() {
                return Err(Error::NonFinite(format!("objective at Newton iteration {it}")));
            }
            feasible = true;
            let step = dir.iter().fold(0.0, |m, d| f64::max(m, (t * d).abs()));
            let change = (cand_obj - obj).abs();
            x = cand;
            obj = cand_obj;
            trace.push(obj);
            if step <= s.step_tol || change <= s.rel_objective_tol * obj.abs().max(1.0) && it > 1 {
                return Ok((x, it, trace));
            }
        }
        Err(Error::NoConvergence { iterations: s.max_iter, gradient_norm: last_grad_norm })
    }

    fn prior_constrained_log_det(&self, prior: &LatentPrior) -> Result<f64> {
        if let Some(v) = prior.constrained_log_det {
            return Ok(v);
        }
        let sym = self.prior_symbolic.get_or_init(|| Symbolic::analyze(&prior.precision));
        let factor = if sym.matches(&prior.precision) {
            sym.factorize(&prior.precision)?
        } else {
            CholFactor::new(&prior.precision)?
        };
        let kriging = Kriging::new(&factor, &prior.constraints)?;
        Ok(factor.log_det() + kriging.log_det_aqa())
    }

    /// Finds the constrained mode at `theta`, optionally warm-started.
    pub fn find_mode(&self, theta: &[f64], warm: Option<&[f64]>) -> Result<ModeFit> {
        let prior = self.model.prior(theta)?;
        let n = self.model.latent_dim();
        let start = match warm {
            Some(w) if w.len() == n => w.to_vec(),
            _ => vec![0.0; n],
        };
        let (mode, iterations, objective_trace) = self.newton(&prior, &self.obs.offset, start)?;
        let (factor, _) = self.curvature(&prior, &self.obs.offset, &mode)?;
        let kriging = Kriging::new(&factor, &prior.constraints)?;

        let eta = self.obs.linear_predictor(&mode);
        let log_likelihood = self.obs.log_likelihood(&eta);
        let quad = prior.precision.quad_form(&mode);
        let prior_ld = self.prior_constrained_log_det(&prior)?;
        let log_marginal_likelihood =
            log_likelihood - 0.5 * quad + 0.5 * prior_ld - 0.5 * (factor.log_det() + kriging.log_det_aqa());
        let log_hyper_prior = self.model.log_hyper_prior(theta)?;
        if !log_marginal_likelihood.is_finite() || !log_hyper_prior.is_finite() {
            return Err(Error::NonFinite(format!(
                "log evidence terms: loglik={log_likelihood} quad={quad} logdet_prior={prior_ld} \
                 logdet_post={} logdet_constraint={} log_prior_theta={log_hyper_prior}",
                factor.log_det(),
                kriging.log_det_aqa()
            )));
        }
        Ok(ModeFit {
            theta: theta.to_vec(),
            mode,
            iterations,
            log_likelihood,
            log_marginal_likelihood,
            log_hyper_prior,
            objective_trace,
            prior,
            factor,
            kriging,
        })
    }

    /// Full Gaussian approximation: mode, marginal variances, linear
    /// predictor moments and (optionally) the corrected mean.
    pub fn approximate(&self, theta: &[f64], warm: Option<&[f64]>) -> Result<GaussianApprox> {
        let fit = self.find_mode(theta, warm)?;
        self.approximate_from(fit)
    }

    pub fn approximate_from(&self, fit: ModeFit) -> Result<GaussianApprox> {
        let sel = SelectedInverse::compute(&fit.factor);
        let latent_var = fit.kriging.correct_variances(&sel.diag());

        let mut eta_var = Vec::with_capacity(self.obs.len());
        for r in 0..self.obs.len() {
            let (cols, vals) = self.obs.design.row(r);
            let mut v = 0.0;
            for a in 0..cols.len() {
                for b in 0..cols.len() {
                    let s = sel.get(cols[a], cols[b]).expect("design pair on filled pattern");
                    v += vals[a] * vals[b] * s;
                }
            }
            v -= fit.kriging.sparse_quadratic_correction(&self.obs.design.row_entries(r));
            eta_var.push(v.max(0.0));
        }

        let mean = if self.settings.mean_correction {
            let shifted: Vec<f64> = self
                .obs
                .offset
                .iter()
                .zip(&eta_var)
                .map(|(o, &v)| o + self.obs.likelihood.mean_correction_shift(v))
                .collect();
            if shifted == self.obs.offset {
                fit.mode.clone()
            } else {
                self.newton(&fit.prior, &shifted, fit.mode.clone())?.0
            }
        } else {
            fit.mode.clone()
        };
        let eta_mean = self.obs.linear_predictor(&mean);
        let eta_mode = self.obs.linear_predictor(&fit.mode);

        Ok(GaussianApprox {
            theta: fit.theta,
            mode: fit.mode,
            mean,
            latent_var,
            eta_mean,
            eta_var,
            eta_mode,
            log_marginal_likelihood: fit.log_marginal_likelihood,
            log_hyper_prior: fit.log_hyper_prior,
            factor: fit.factor,
            kriging: fit.kriging,
        })
    }
}

fn linear_predictor(obs: &Observations, offset: &[f64], x: &[f64]) -> Vec<f64> {
    obs.design.mul_vec(x).into_iter().zip(offset).map(|(a, o)| a + o).collect()
}

fn slots_of(pattern: &SparseSym, q: &SparseSym) -> Vec<usize> {
    q.iter()
        .map(|(r, c, _)| pattern.position(r, c).expect("Q entry in pattern"))
        .collect()
}
