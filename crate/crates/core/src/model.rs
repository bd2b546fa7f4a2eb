//! Latent Gaussian model assembly: observation panel, latent layout,
//! joint precision `Q(θ)`, constraints, design and hyperparameter priors.
//!
//! The latent vector is ordered `(β, b, u*, f, s)`: fixed effects
//! (intercept first), the BYM2 combined effect, its scaled structured part,
//! the RW1 trend and the cyclic seasonal block.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::config::{logistic, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::AreaGraph;
use crate::inference::{Design, LatentModel, LatentPrior, Likelihood, Observations};
use crate::sparsela::{Constraints, SparseSym, TripletBuilder};

/// Complete region × time panel, region-major (`row = i·T + t`).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPanel {
    region_ids: Vec<String>,
    time_labels: Vec<String>,
    /// Position of the first time point within the seasonal cycle.
    season_origin: usize,
    cases: Vec<u64>,
    covariate_names: Vec<String>,
    covariates: Vec<Vec<f64>>,
    standardization: Vec<(f64, f64)>,
    offsets: Vec<f64>,
}

/// Sample mean and sd (n − 1 denominator).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

impl ObservationPanel {
    /// Builds a panel from raw (unstandardized) covariates; each covariate
    /// is standardized to zero mean and unit sd.
    pub fn new(
        region_ids: Vec<String>,
        time_labels: Vec<String>,
        cases: Vec<u64>,
        raw_covariates: Vec<(String, Vec<f64>)>,
        offsets: Vec<f64>,
    ) -> Result<Self> {
        let rows = region_ids.len() * time_labels.len();
        if rows == 0 {
            return Err(Error::Ingestion("panel has no regions or no time points".into()));
        }
        if cases.len() != rows {
            return Err(Error::DimensionMismatch { expected: rows, got: cases.len() });
        }
        if offsets.len() != rows {
            return Err(Error::DimensionMismatch { expected: rows, got: offsets.len() });
        }
        if let Some(r) = offsets.iter().position(|o| !o.is_finite()) {
            return Err(Error::NonFinite(format!("offset of panel row {r}")));
        }
        let mut covariate_names = Vec::new();
        let mut covariates = Vec::new();
        let mut standardization = Vec::new();
        for (name, values) in raw_covariates {
            if values.len() != rows {
                return Err(Error::DimensionMismatch { expected: rows, got: values.len() });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("covariate {name}")));
            }
            let (mean, sd) = mean_sd(&values);
            if !(sd > 1e-12 * mean.abs().max(1.0)) {
                return Err(Error::ZeroVariance(name));
            }
            covariates.push(values.iter().map(|v| (v - mean) / sd).collect());
            standardization.push((mean, sd));
            covariate_names.push(name);
        }
        let season_origin = time_labels.first().and_then(|l| month_of(l)).unwrap_or(0);
        Ok(Self {
            region_ids,
            time_labels,
            season_origin,
            cases,
            covariate_names,
            covariates,
            standardization,
            offsets,
        })
    }

    /// Panel with the log-area offset `log E_i` on every row of region `i`.
    pub fn with_area_offset(
        region_ids: Vec<String>,
        time_labels: Vec<String>,
        cases: Vec<u64>,
        raw_covariates: Vec<(String, Vec<f64>)>,
        areas_km2: &[f64],
    ) -> Result<Self> {
        let t = time_labels.len();
        if areas_km2.len() != region_ids.len() {
            return Err(Error::DimensionMismatch { expected: region_ids.len(), got: areas_km2.len() });
        }
        let offsets = areas_km2.iter().flat_map(|a| std::iter::repeat_n(a.ln(), t)).collect();
        Self::new(region_ids, time_labels, cases, raw_covariates, offsets)
    }

    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }

    pub fn n_times(&self) -> usize {
        self.time_labels.len()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn row(&self, region: usize, time: usize) -> usize {
        region * self.n_times() + time
    }

    pub fn region_of(&self, row: usize) -> usize {
        row / self.n_times()
    }

    pub fn time_of(&self, row: usize) -> usize {
        row % self.n_times()
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    pub fn season_origin(&self) -> usize {
        self.season_origin
    }

    pub fn cases(&self) -> &[u64] {
        &self.cases
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Standardized values of covariate `k`, one per row.
    pub fn covariate(&self, k: usize) -> &[f64] {
        &self.covariates[k]
    }

    /// `(mean, sd)` used to standardize each covariate.
    pub fn standardization(&self) -> &[(f64, f64)] {
        &self.standardization
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// Multiplies every exposure by `c` (adds `log c` to every offset).
    pub fn scale_exposure(&self, c: f64) -> Self {
        let mut out = self.clone();
        for o in &mut out.offsets {
            *o += c.ln();
        }
        out
    }
}

/// Zero-based calendar month of a `YYYY-MM` label.
pub fn month_of(label: &str) -> Option<usize> {
    let (y, m) = label.split_once('-')?;
    if y.len() != 4 || !y.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let m: usize = m.parse().ok()?;
    (1..=12).contains(&m).then(|| m - 1)
}

/// Index ranges of the latent blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentLayout {
    n_fixed: usize,
    n_regions: usize,
    n_times: usize,
    trend: bool,
    period: Option<usize>,
    season_origin: usize,
}

impl LatentLayout {
    pub fn new(p: usize, n_regions: usize, n_times: usize, trend: bool, period: Option<usize>) -> Self {
        Self { n_fixed: 1 + p, n_regions, n_times, trend, period, season_origin: 0 }
    }

    pub fn with_season_origin(mut self, origin: usize) -> Self {
        self.season_origin = origin;
        self
    }

    pub fn beta(&self) -> Range<usize> {
        0..self.n_fixed
    }

    pub fn b(&self) -> Range<usize> {
        let s = self.n_fixed;
        s..s + self.n_regions
    }

    pub fn u(&self) -> Range<usize> {
        let s = self.b().end;
        s..s + self.n_regions
    }

    pub fn f(&self) -> Range<usize> {
        let s = self.u().end;
        s..s + if self.trend { self.n_times } else { 0 }
    }

    pub fn s(&self) -> Range<usize> {
        let s = self.f().end;
        s..s + self.period.unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.s().end
    }

    pub fn n_covariates(&self) -> usize {
        self.n_fixed - 1
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn has_trend(&self) -> bool {
        self.trend
    }

    pub fn period(&self) -> Option<usize> {
        self.period
    }

    /// Seasonal slot of time index `t` (may exceed the observed range).
    pub fn season_of(&self, t: usize) -> Option<usize> {
        self.period.map(|m| (self.season_origin + t) % m)
    }

    /// Latent entries touched by the linear predictor of `(i, t)` with
    /// covariate values `x`.
    pub fn predictor_entries(&self, i: usize, t: usize, x: &[f64]) -> Vec<(usize, f64)> {
        let mut row = Vec::with_capacity(self.n_fixed + 3);
        row.push((0, 1.0));
        row.extend(x.iter().enumerate().map(|(k, &v)| (1 + k, v)));
        row.push((self.b().start + i, 1.0));
        if self.trend {
            row.push((self.f().start + t, 1.0));
        }
        if let Some(m) = self.season_of(t) {
            row.push((self.s().start + m, 1.0));
        }
        row
    }
}

/// Layout for a panel on a graph.
pub fn build_layout(panel: &ObservationPanel, graph: &AreaGraph, cfg: &ModelConfig) -> Result<LatentLayout> {
    let in_panel: BTreeSet<&str> = panel.region_ids().iter().map(String::as_str).collect();
    let in_graph: BTreeSet<&str> = graph.region_ids().iter().map(String::as_str).collect();
    if in_panel != in_graph {
        let missing: Vec<&str> = in_graph.difference(&in_panel).copied().collect();
        let extra: Vec<&str> = in_panel.difference(&in_graph).copied().collect();
        return Err(Error::Model(format!(
            "region sets differ: in geometry but not in panel: [{}]; in panel but not in geometry: [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    if panel.region_ids() != graph.region_ids() {
        return Err(Error::Model("panel regions must follow the geometry order".into()));
    }
    if cfg.trend && panel.n_times() < 2 {
        return Err(Error::Model("the RW1 trend needs at least 2 time points".into()));
    }
    let period = cfg.seasonal.enabled.then_some(cfg.seasonal.period);
    if let Some(m) = period {
        if panel.n_times() < m {
            return Err(Error::Model(format!(
                "seasonal period {m} exceeds the {} observed time points",
                panel.n_times()
            )));
        }
    }
    Ok(LatentLayout::new(panel.covariates.len(), panel.n_regions(), panel.n_times(), cfg.trend, period)
        .with_season_origin(panel.season_origin()))
}

/// Hyperparameters in internal scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Hyper {
    PrecBym2,
    Phi,
    PrecRw1,
    PrecSeasonal,
}

impl Hyper {
    pub fn config_key(self) -> &'static str {
        match self {
            Hyper::PrecBym2 => "prec_bym2",
            Hyper::Phi => "phi",
            Hyper::PrecRw1 => "prec_rw1",
            Hyper::PrecSeasonal => "prec_seasonal",
        }
    }

    pub fn internal_name(self) -> &'static str {
        match self {
            Hyper::PrecBym2 => "log_prec_bym2",
            Hyper::Phi => "logit_phi",
            Hyper::PrecRw1 => "log_prec_rw1",
            Hyper::PrecSeasonal => "log_prec_seasonal",
        }
    }

    /// Row label in the hyperparameter table.
    pub fn label(self) -> &'static str {
        match self {
            Hyper::PrecBym2 => "Spatial precision (BYM2)",
            Hyper::Phi => "Structured spatial proportion (phi)",
            Hyper::PrecRw1 => "Temporal precision (RW1)",
            Hyper::PrecSeasonal => "Seasonal precision",
        }
    }

    pub fn to_user(self, internal: f64) -> f64 {
        match self {
            Hyper::Phi => logistic(internal),
            _ => internal.exp(),
        }
    }

    pub fn to_internal(self, user: f64) -> Result<f64> {
        let ok = match self {
            Hyper::Phi => user > 0.0 && user < 1.0,
            _ => user > 0.0 && user.is_finite(),
        };
        if !ok {
            return Err(Error::Config(format!("{} out of range: {user}", self.config_key())));
        }
        Ok(match self {
            Hyper::Phi => (user / (1.0 - user)).ln(),
            _ => user.ln(),
        })
    }
}

/// Sum over eigenvalues `λ` of the Laplacian-type structure of
/// `ln(λ·scale + ε)`.
fn log_det_shifted(eigenvalues: &[f64], scale: f64, eps: f64) -> f64 {
    eigenvalues.iter().map(|&l| (l.max(0.0) * scale + eps).ln()).sum()
}

fn rw1_eigenvalues(t: usize) -> Vec<f64> {
    (0..t).map(|k| 2.0 - 2.0 * (PI * k as f64 / t as f64).cos()).collect()
}

fn cyclic_eigenvalues(m: usize) -> Vec<f64> {
    (0..m).map(|k| 2.0 - 2.0 * (2.0 * PI * k as f64 / m as f64).cos()).collect()
}

/// First-difference structure matrix of an RW1 of length `t`.
pub fn rw1_structure(t: usize) -> SparseSym {
    let mut b = TripletBuilder::new(t);
    for k in 0..t.saturating_sub(1) {
        b.add(k, k, 1.0);
        b.add(k + 1, k + 1, 1.0);
        b.add(k + 1, k, -1.0);
    }
    b.build()
}

/// Structure matrix of a cyclic RW1 with period `m`.
pub fn cyclic_structure(m: usize) -> SparseSym {
    let mut b = TripletBuilder::new(m);
    for k in 0..m {
        let j = (k + 1) % m;
        b.add(k, k, 1.0);
        b.add(j, j, 1.0);
        b.add(k.max(j), k.min(j), -1.0);
    }
    b.build()
}

/// The spatio-temporal Poisson model bound to a panel and graph.
#[derive(Debug, Clone)]
pub struct SpatioTemporalModel {
    layout: LatentLayout,
    cfg: ModelConfig,
    free: Vec<Hyper>,
    fixed: Vec<(Hyper, f64)>,
    icar: SparseSym,
    /// `1/κ` per region; 0 for singletons.
    inv_kappa: Vec<f64>,
    singleton: Vec<bool>,
    /// Per non-singleton component: members, Laplacian eigenvalues, `1/κ`.
    components: Vec<(Vec<usize>, Vec<f64>, f64)>,
    eps_u: f64,
    eps_f: f64,
    eps_s: f64,
    rw1: SparseSym,
    cyclic: SparseSym,
}

impl SpatioTemporalModel {
    pub fn new(layout: LatentLayout, graph: &AreaGraph, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if graph.len() != layout.n_regions() {
            return Err(Error::DimensionMismatch { expected: layout.n_regions(), got: graph.len() });
        }
        let mut hypers = vec![Hyper::PrecBym2, Hyper::Phi];
        if layout.has_trend() {
            hypers.push(Hyper::PrecRw1);
        }
        if layout.period().is_some() {
            hypers.push(Hyper::PrecSeasonal);
        }
        let mut free = Vec::new();
        let mut fixed = Vec::new();
        for h in hypers {
            match cfg.fixed.get(h.config_key()) {
                Some(&v) => fixed.push((h, h.to_internal(v)?)),
                None => free.push(h),
            }
        }

        let n = graph.len();
        let mut inv_kappa = vec![0.0; n];
        let mut singleton = vec![false; n];
        let mut components = Vec::new();
        for (c, members) in graph.components().iter().enumerate() {
            match graph.icar_scale()[c] {
                None => {
                    for &i in members {
                        singleton[i] = true;
                    }
                }
                Some(kappa) => {
                    let m = members.len();
                    let mut r = DMatrix::<f64>::zeros(m, m);
                    for (a, &i) in members.iter().enumerate() {
                        r[(a, a)] = graph.degree(i) as f64;
                        for &j in graph.neighbors(i) {
                            let bj = members.binary_search(&j).expect("neighbor in same component");
                            r[(a, bj)] = -1.0;
                        }
                    }
                    let mut eig: Vec<f64> = SymmetricEigen::new(r).eigenvalues.iter().copied().collect();
                    eig.sort_by(f64::total_cmp);
                    eig[0] = 0.0;
                    for &i in members {
                        inv_kappa[i] = 1.0 / kappa;
                    }
                    components.push((members.clone(), eig, 1.0 / kappa));
                }
            }
        }
        let structured: Vec<f64> =
            (0..n).filter(|&i| !singleton[i]).map(|i| graph.degree(i) as f64 * inv_kappa[i]).collect();
        let eps_u = if structured.is_empty() {
            0.0
        } else {
            cfg.jitter * structured.iter().sum::<f64>() / structured.len() as f64
        };
        let t = layout.n_times();
        let eps_f = if layout.has_trend() { cfg.jitter * 2.0 * (t as f64 - 1.0) / t as f64 } else { 0.0 };
        let eps_s = if layout.period().is_some() { cfg.jitter * 2.0 } else { 0.0 };
        Ok(Self {
            rw1: rw1_structure(if layout.has_trend() { t } else { 0 }),
            cyclic: cyclic_structure(layout.period().unwrap_or(0)),
            layout,
            cfg: cfg.clone(),
            free,
            fixed,
            icar: graph.icar_structure(),
            inv_kappa,
            singleton,
            components,
            eps_u,
            eps_f,
            eps_s,
        })
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Hyperparameters estimated (in the order of θ).
    pub fn free_hypers(&self) -> &[Hyper] {
        &self.free
    }

    /// Hyperparameters held fixed, with internal-scale values.
    pub fn fixed_hypers(&self) -> &[(Hyper, f64)] {
        &self.fixed
    }

    /// Internal-scale value of `h` at free coordinates `theta`.
    pub fn hyper_value(&self, theta: &[f64], h: Hyper) -> Option<f64> {
        if let Some(k) = self.free.iter().position(|&f| f == h) {
            return theta.get(k).copied();
        }
        self.fixed.iter().find(|(f, _)| *f == h).map(|&(_, v)| v)
    }

    /// Observations with the design built from the panel.
    pub fn observations(&self, panel: &ObservationPanel) -> Result<Observations> {
        let lay = &self.layout;
        if panel.n_regions() != lay.n_regions() || panel.n_times() != lay.n_times() {
            return Err(Error::Model("panel shape differs from the layout".into()));
        }
        let p = lay.n_covariates();
        let mut design = Design::new(lay.dim());
        let mut x = vec![0.0; p];
        for r in 0..panel.len() {
            for (k, xk) in x.iter_mut().enumerate() {
                *xk = panel.covariate(k)[r];
            }
            design.push_row(&lay.predictor_entries(panel.region_of(r), panel.time_of(r), &x));
        }
        Observations::new(design, panel.offsets().to_vec(), Likelihood::poisson(panel.cases()))
    }

    fn precisions(&self, theta: &[f64]) -> Result<(f64, f64, f64, f64)> {
        if theta.len() != self.free.len() {
            return Err(Error::DimensionMismatch { expected: self.free.len(), got: theta.len() });
        }
        if let Some(v) = theta.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("hyperparameter value {v}")));
        }
        let get = |h| self.hyper_value(theta, h).unwrap_or(0.0);
        Ok((
            get(Hyper::PrecBym2).exp(),
            logistic(get(Hyper::Phi)),
            get(Hyper::PrecRw1).exp(),
            get(Hyper::PrecSeasonal).exp(),
        ))
    }

    /// Prior precision of the fixed effects.
    pub fn fixed_effect_precisions(&self) -> Vec<f64> {
        let mut v = vec![self.cfg.priors.fixed_effect_precision; self.layout.beta().len()];
        v[0] = self.cfg.priors.intercept_precision;
        v
    }
}

impl LatentModel for SpatioTemporalModel {
    fn latent_dim(&self) -> usize {
        self.layout.dim()
    }

    fn hyper_names(&self) -> Vec<String> {
        self.free.iter().map(|h| h.internal_name().to_string()).collect()
    }

    fn initial_hyper(&self) -> Vec<f64> {
        let init = &self.cfg.initial;
        self.free
            .iter()
            .map(|&h| {
                let user = match h {
                    Hyper::PrecBym2 => init.prec_bym2,
                    Hyper::Phi => init.phi,
                    Hyper::PrecRw1 => init.prec_rw1,
                    Hyper::PrecSeasonal => init.prec_seasonal,
                };
                h.to_internal(user).unwrap_or(0.0)
            })
            .collect()
    }

    fn prior(&self, theta: &[f64]) -> Result<LatentPrior> {
        let (tau_b, phi, tau_f, tau_s) = self.precisions(theta)?;
        if !(phi < 1.0) || !(phi > 0.0) {
            return Err(Error::NonFinite(format!("mixing parameter saturated at {phi}")));
        }
        let lay = &self.layout;
        let dim = lay.dim();
        let mut q = TripletBuilder::new(dim);
        let mut constraints = Constraints::none(dim);
        let mut cld = 0.0;

        for (k, prec) in self.fixed_effect_precisions().into_iter().enumerate() {
            q.add(k, k, prec);
            // a flat intercept carries unit density
            cld += if prec > 0.0 { prec.ln() } else { (2.0 * PI).ln() };
        }

        let n = lay.n_regions();
        let c = tau_b / (1.0 - phi);
        let cross = -(phi * tau_b).sqrt() / (1.0 - phi);
        let uu = phi / (1.0 - phi);
        let (b0, u0) = (lay.b().start, lay.u().start);
        for i in 0..n {
            q.add(b0 + i, b0 + i, c);
            q.add(u0 + i, b0 + i, cross);
            let own = if self.singleton[i] { 1.0 } else { self.eps_u };
            q.add(u0 + i, u0 + i, uu + own);
        }
        for (r, col, v) in self.icar.iter() {
            let scale = self.inv_kappa[r];
            if scale > 0.0 {
                q.add(u0 + r, u0 + col, v * scale);
            }
        }
        cld += n as f64 * c.ln();
        for (members, eig, inv_k) in &self.components {
            cld += log_det_shifted(eig, *inv_k, self.eps_u);
            cld += (members.len() as f64 / self.eps_u).ln();
            constraints.push_sum_to_zero(members.iter().map(|&i| u0 + i));
        }

        if lay.has_trend() {
            let f0 = lay.f().start;
            let t = lay.n_times();
            for (r, col, v) in self.rw1.iter() {
                q.add(f0 + r, f0 + col, tau_f * v);
            }
            for k in 0..t {
                q.add(f0 + k, f0 + k, tau_f * self.eps_f);
            }
            cld += (t as f64 - 1.0) * tau_f.ln()
                + log_det_shifted(&rw1_eigenvalues(t), 1.0, self.eps_f)
                + (t as f64 / self.eps_f).ln();
            constraints.push_sum_to_zero(lay.f());
        }

        if let Some(m) = lay.period() {
            let s0 = lay.s().start;
            for (r, col, v) in self.cyclic.iter() {
                q.add(s0 + r, s0 + col, tau_s * v);
            }
            for k in 0..m {
                q.add(s0 + k, s0 + k, tau_s * self.eps_s);
            }
            cld += (m as f64 - 1.0) * tau_s.ln()
                + log_det_shifted(&cyclic_eigenvalues(m), 1.0, self.eps_s)
                + (m as f64 / self.eps_s).ln();
            constraints.push_sum_to_zero(lay.s());
        }

        Ok(LatentPrior { precision: q.build(), constraints, constrained_log_det: Some(cld) })
    }

    fn log_hyper_prior(&self, theta: &[f64]) -> Result<f64> {
        self.precisions(theta)?;
        let pri = &self.cfg.priors;
        let total: f64 = self
            .free
            .iter()
            .zip(theta)
            .map(|(&h, &v)| match h {
                Hyper::PrecBym2 => pri.bym2.log_density_log_precision(v),
                Hyper::Phi => pri.phi.log_density_logit(v),
                Hyper::PrecRw1 => pri.rw1.log_density_log_precision(v),
                Hyper::PrecSeasonal => pri.seasonal.log_density_log_precision(v),
            })
            .sum();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("log prior of θ = {theta:?}")));
        }
        Ok(total)
    }
}
