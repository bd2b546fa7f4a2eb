//! Model configuration, read from TOML.
//!
//! ```toml
//! covariates = ["density", "income"]
//! offset = "area"               # or the name of a panel column holding E_i
//! fill_missing_as_zero = true
//! trend = true                  # RW1 temporal trend
//!
//! [covariate_shape]             # optional: "panel" (default), "time", "region"
//! precip_lag1 = "time"
//!
//! [seasonal]
//! enabled = true
//! period = 12
//!
//! [priors.bym2]
//! u = 1.0
//! alpha = 0.01
//!
//! [priors]
//! phi = "uniform"               # or { beta = [a, b] }
//! fixed_effect_precision = 1e-3
//! intercept_precision = 0.0
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub covariates: Vec<String>,
    pub covariate_shape: BTreeMap<String, CovariateShape>,
    /// `"area"` joins log area (km²) from the geometry; any other value
    /// names a panel column with the exposure `E_i`.
    pub offset: String,
    pub fill_missing_as_zero: bool,
    /// RW1 temporal trend; needs at least two time points.
    pub trend: bool,
    pub seasonal: SeasonalConfig,
    pub priors: PriorConfig,
    /// Hyperparameters held fixed, on the user scale (`phi`,
    /// `prec_bym2`, `prec_rw1`, `prec_seasonal`).
    pub fixed: BTreeMap<String, f64>,
    pub initial: InitialConfig,
    pub grid: GridConfig,
    pub jitter: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            covariates: Vec::new(),
            covariate_shape: BTreeMap::new(),
            offset: "area".into(),
            fill_missing_as_zero: true,
            trend: true,
            seasonal: SeasonalConfig::default(),
            priors: PriorConfig::default(),
            fixed: BTreeMap::new(),
            initial: InitialConfig::default(),
            grid: GridConfig::default(),
            jitter: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seasonal.enabled && self.seasonal.period < 2 {
            return Err(Error::Config("seasonal period must be >= 2".into()));
        }
        for (name, p) in [
            ("bym2", &self.priors.bym2),
            ("rw1", &self.priors.rw1),
            ("seasonal", &self.priors.seasonal),
        ] {
            if !(p.u > 0.0) || !(p.alpha > 0.0 && p.alpha < 1.0) {
                return Err(Error::Config(format!(
                    "PC prior {name}: need u > 0 and 0 < alpha < 1, got u={} alpha={}",
                    p.u, p.alpha
                )));
            }
        }
        if !(self.priors.fixed_effect_precision > 0.0) || self.priors.intercept_precision < 0.0 {
            return Err(Error::Config("fixed-effect precisions must be positive".into()));
        }
        if !(self.jitter > 0.0) {
            return Err(Error::Config("jitter must be positive".into()));
        }
        for key in self.fixed.keys() {
            if !["phi", "prec_bym2", "prec_rw1", "prec_seasonal"].contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown fixed hyperparameter {key:?}")));
            }
        }
        for name in self.covariate_shape.keys() {
            if !self.covariates.contains(name) {
                return Err(Error::Config(format!("shape given for unknown covariate {name:?}")));
            }
        }
        self.grid.validate()
    }

    pub fn shape_of(&self, covariate: &str) -> CovariateShape {
        self.covariate_shape.get(covariate).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateShape {
    /// Varies by region and time.
    #[default]
    Panel,
    /// Same value for every region at a given time.
    Time,
    /// Same value at every time for a given region.
    Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeasonalConfig {
    pub enabled: bool,
    pub period: usize,
}

impl Default for SeasonalConfig {
    fn default() -> Self {
        Self { enabled: true, period: 12 }
    }
}

/// `P(σ > u) = alpha` for `σ = τ^{-1/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcPrior {
    pub u: f64,
    pub alpha: f64,
}

impl Default for PcPrior {
    fn default() -> Self {
        Self { u: 1.0, alpha: 0.01 }
    }
}

impl PcPrior {
    pub fn rate(&self) -> f64 {
        -self.alpha.ln() / self.u
    }

    /// Log density of `log τ` (Jacobian included).
    pub fn log_density_log_precision(&self, log_tau: f64) -> f64 {
        let lambda = self.rate();
        let sigma = (-0.5 * log_tau).exp();
        lambda.ln() - lambda * sigma + (0.5 * sigma).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhiPrior {
    #[default]
    Uniform,
    Beta([f64; 2]),
}

impl PhiPrior {
    /// Log density of `logit φ` (Jacobian included).
    pub fn log_density_logit(&self, logit_phi: f64) -> f64 {
        let phi = logistic(logit_phi);
        let log_jac = log_phi_one_minus_phi(logit_phi);
        match *self {
            PhiPrior::Uniform => log_jac,
            PhiPrior::Beta([a, b]) => {
                let ln_beta = statrs::function::beta::ln_beta(a, b);
                (a - 1.0) * phi.ln() + (b - 1.0) * (1.0 - phi).ln() - ln_beta + log_jac
            }
        }
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `log(φ(1-φ))` for `φ = logistic(x)`, stable for large `|x|`.
pub(crate) fn log_phi_one_minus_phi(x: f64) -> f64 {
    -x.abs() - 2.0 * (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub bym2: PcPrior,
    pub rw1: PcPrior,
    pub seasonal: PcPrior,
    pub phi: PhiPrior,
    pub fixed_effect_precision: f64,
    pub intercept_precision: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            bym2: PcPrior::default(),
            rw1: PcPrior::default(),
            seasonal: PcPrior::default(),
            phi: PhiPrior::Uniform,
            fixed_effect_precision: 1e-3,
            intercept_precision: 0.0,
        }
    }
}

/// Starting point of the hyperparameter ascent, user scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    pub prec_bym2: f64,
    pub phi: f64,
    pub prec_rw1: f64,
    pub prec_seasonal: f64,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self { prec_bym2: 1.0, phi: 0.5, prec_rw1: 10.0, prec_seasonal: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridStrategy {
    /// Full grid up to 3 hyperparameters, CCD beyond.
    #[default]
    Auto,
    Grid,
    Ccd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub strategy: GridStrategy,
    /// Step in standardized coordinates.
    pub step: f64,
    /// Maximum log-posterior drop from the best point.
    pub drop: f64,
    /// CCD radius factor; design points sit at `f0·√d`.
    pub ccd_f0: f64,
    /// Finite-difference step for gradients in internal scale.
    pub fd_step: f64,
    /// Finite-difference step for the Hessian at the mode.
    pub hessian_step: f64,
    /// Convergence tolerance on the ascent step (∞-norm).
    pub ascent_tol: f64,
    pub max_ascent_iter: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            strategy: GridStrategy::Auto,
            step: 0.75,
            drop: 6.0,
            ccd_f0: 1.1,
            fd_step: 1e-4,
            hessian_step: 5e-3,
            ascent_tol: 1e-4,
            max_ascent_iter: 200,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.drop >= 0.0) || !(self.ccd_f0 > 1.0) {
            return Err(Error::Config("grid: need step > 0, drop >= 0, ccd_f0 > 1".into()));
        }
        if !(self.fd_step > 0.0) || !(self.hessian_step > 0.0) || !(self.ascent_tol > 0.0) {
            return Err(Error::Config("grid: finite-difference steps must be positive".into()));
        }
        Ok(())
    }
}
