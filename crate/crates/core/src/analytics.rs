//! Spatial risk products: relative-risk and exceedance surfaces, residuals,
//! global and local Moran's I, and RW1 forecasts.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{DiscreteCDF, Poisson};

use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::geometry::AreaGraph;
use crate::inference::Mixture;
use crate::model::{month_of, Hyper, ObservationPanel};
use crate::parallel;
use crate::quadrature::NormalRule;
use crate::simulate::month_labels;

/// Per-region risk summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionRisk {
    pub region: String,
    /// Posterior mean and sd of the combined spatial effect `b_i`.
    pub b_mean: f64,
    pub b_sd: f64,
    /// `exp(E[b_i])`.
    pub rr: f64,
    /// Posterior mean and sd of `exp(b_i)`.
    pub rr_mean: f64,
    pub rr_sd: f64,
    pub rr_q025: f64,
    pub rr_q975: f64,
    /// `P(b_i > 0)`.
    pub exceedance: f64,
    /// Mean over time of fitted cases per km² of exposure.
    pub fitted_density: f64,
    /// Observed minus fitted cases, summed over time.
    pub residual_raw: f64,
    /// Time-aggregated Pearson residual `(Σy − Σμ̂) / √Σμ̂`.
    pub residual_pearson: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskSurface {
    pub regions: Vec<RegionRisk>,
}

pub fn risk_surface(fit: &FitResult, panel: &ObservationPanel) -> RiskSurface {
    let lay = fit.layout();
    let fitted = fit.fitted_counts();
    let t = panel.n_times();
    let regions = (0..panel.n_regions())
        .map(|i| {
            let mix = fit.marginals.latent(lay.b().start + i);
            let (rr_mean, rr_sd) = mix.exp_moments();
            let b_mean = mix.mean();
            let rows = panel.row(i, 0)..panel.row(i, 0) + t;
            let mut density = 0.0;
            let mut obs = 0.0;
            let mut fit_sum = 0.0;
            for r in rows {
                density += fitted[r] / panel.offsets()[r].exp();
                obs += panel.cases()[r] as f64;
                fit_sum += fitted[r];
            }
            RegionRisk {
                region: panel.region_ids()[i].clone(),
                b_mean,
                b_sd: mix.sd(),
                rr: b_mean.exp(),
                rr_mean,
                rr_sd,
                rr_q025: mix.quantile(0.025).exp(),
                rr_q975: mix.quantile(0.975).exp(),
                exceedance: mix.exceedance(0.0),
                fitted_density: density / t as f64,
                residual_raw: obs - fit_sum,
                residual_pearson: (obs - fit_sum) / fit_sum.sqrt(),
            }
        })
        .collect();
    RiskSurface { regions }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weights {
    /// Binary symmetric contiguity weights.
    #[default]
    Binary,
    /// Each row scaled to sum to one.
    RowStandardized,
}

struct SpatialWeights {
    rows: Vec<Vec<(usize, f64)>>,
    s0: f64,
}

impl SpatialWeights {
    fn new(graph: &AreaGraph, kind: Weights) -> Self {
        let rows: Vec<Vec<(usize, f64)>> = (0..graph.len())
            .map(|i| {
                let nb = graph.neighbors(i);
                let w = match kind {
                    Weights::Binary => 1.0,
                    Weights::RowStandardized => 1.0 / nb.len().max(1) as f64,
                };
                nb.iter().map(|&j| (j, w)).collect()
            })
            .collect();
        let s0 = rows.iter().flatten().map(|e| e.1).sum();
        Self { rows, s0 }
    }

    fn lag(&self, i: usize, z: &[f64]) -> f64 {
        self.rows[i].iter().map(|&(j, w)| w * z[j]).sum()
    }
}

fn centered(values: &[f64], graph: &AreaGraph) -> Result<(Vec<f64>, f64)> {
    if values.len() != graph.len() {
        return Err(Error::DimensionMismatch { expected: graph.len(), got: values.len() });
    }
    if values.len() < 3 {
        return Err(Error::InvalidArgument("Moran's I needs at least 3 regions".into()));
    }
    if graph.n_edges() == 0 {
        return Err(Error::InvalidArgument("Moran's I needs at least one edge".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("Moran input value {v}")));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let z: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let m2: f64 = z.iter().map(|v| v * v).sum();
    if !(m2 > 1e-24 * values.iter().map(|v| v * v).sum::<f64>().max(1e-300)) {
        return Err(Error::ZeroVariance("values are constant".into()));
    }
    Ok((z, m2))
}

fn moran_statistic(w: &SpatialWeights, z: &[f64], m2: f64) -> f64 {
    let cross: f64 = (0..z.len()).map(|i| z[i] * w.lag(i, z)).sum();
    z.len() as f64 / w.s0 * cross / m2
}

/// Folded pseudo p-value: the smaller tail count, `(r + 1)/(perms + 1)`.
fn pseudo_p(observed: f64, null: &[f64]) -> f64 {
    let tol = 1e-12 * observed.abs().max(1e-300);
    let above = null.iter().filter(|&&v| v >= observed - tol).count();
    let below = null.iter().filter(|&&v| v <= observed + tol).count();
    (above.min(below) + 1) as f64 / (null.len() + 1) as f64
}

fn substream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalMoran {
    pub i: f64,
    pub p_value: f64,
    pub expected: f64,
}

/// Global Moran's I with a permutation p-value. Replicate `k` draws from
/// its own ChaCha20 stream, so the null sample does not depend on the
/// worker count.
pub fn morans_global(
    values: &[f64],
    graph: &AreaGraph,
    permutations: usize,
    seed: u64,
    weights: Weights,
) -> Result<GlobalMoran> {
    let (z, m2) = centered(values, graph)?;
    let w = SpatialWeights::new(graph, weights);
    let observed = moran_statistic(&w, &z, m2);
    let reps: Vec<u64> = (0..permutations as u64).collect();
    let null = parallel::map(&reps, |&k| {
        let mut rng = substream(seed, k);
        let perm = sample(&mut rng, z.len(), z.len());
        let zp: Vec<f64> = perm.iter().map(|j| z[j]).collect();
        moran_statistic(&w, &zp, m2)
    });
    Ok(GlobalMoran {
        i: observed,
        p_value: if permutations == 0 { f64::NAN } else { pseudo_p(observed, &null) },
        expected: -1.0 / (z.len() as f64 - 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterClass {
    HighHigh,
    LowLow,
    HighLow,
    LowHigh,
    NotSignificant,
}

impl ClusterClass {
    pub fn label(self) -> &'static str {
        match self {
            ClusterClass::HighHigh => "High-High",
            ClusterClass::LowLow => "Low-Low",
            ClusterClass::HighLow => "High-Low",
            ClusterClass::LowHigh => "Low-High",
            ClusterClass::NotSignificant => "Not significant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LisaResult {
    pub local_i: Vec<f64>,
    pub p_values: Vec<f64>,
    pub classes: Vec<ClusterClass>,
    pub global: GlobalMoran,
    /// `Σ I_i − n·I`, zero up to rounding.
    pub identity_gap: f64,
}

/// Local Moran's I with conditional permutation inference.
///
/// `I_i = (n / S0) · z_i · Σ_j w_ij z_j / (Σ_k z_k² / n)`, so that
/// `Σ_i I_i = n · I` for any weights; with row-standardized weights
/// (`S0 = n`) this is the usual local statistic.
pub fn lisa(
    values: &[f64],
    graph: &AreaGraph,
    permutations: usize,
    seed: u64,
    alpha: f64,
    weights: Weights,
) -> Result<LisaResult> {
    let (z, m2) = centered(values, graph)?;
    let n = z.len();
    let w = SpatialWeights::new(graph, weights);
    let scale = n as f64 / w.s0 * n as f64 / m2;
    let local_i: Vec<f64> = (0..n).map(|i| scale * z[i] * w.lag(i, &z)).collect();
    let global = morans_global(values, graph, permutations, seed, weights)?;
    let identity_gap = local_i.iter().sum::<f64>() - n as f64 * global.i;

    let idx: Vec<usize> = (0..n).collect();
    let p_values = parallel::map(&idx, |&i| {
        let row = &w.rows[i];
        if row.is_empty() || permutations == 0 {
            return 1.0;
        }
        let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| z[j]).collect();
        let mut rng = substream(seed, (1u64 << 32) + i as u64);
        let null: Vec<f64> = (0..permutations)
            .map(|_| {
                let pick = sample(&mut rng, others.len(), row.len());
                let lag: f64 = pick.iter().zip(row).map(|(j, &(_, wij))| wij * others[j]).sum();
                scale * z[i] * lag
            })
            .collect();
        pseudo_p(local_i[i], &null)
    });
    let classes = (0..n)
        .map(|i| {
            if !(p_values[i] < alpha) {
                return ClusterClass::NotSignificant;
            }
            match (z[i] >= 0.0, w.lag(i, &z) >= 0.0) {
                (true, true) => ClusterClass::HighHigh,
                (false, false) => ClusterClass::LowLow,
                (true, false) => ClusterClass::HighLow,
                (false, true) => ClusterClass::LowHigh,
            }
        })
        .collect();
    Ok(LisaResult { local_i, p_values, classes, global, identity_gap })
}

/// Future covariate values for a forecast.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateScenario {
    /// Region's mean at the same position in the seasonal cycle (or its
    /// overall mean without a seasonal block).
    Climatological,
    /// Region's last observed value.
    LastObserved,
    /// Standardized values, `[covariate][region · horizon + h − 1]`.
    Supplied(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRow {
    pub region: String,
    pub horizon: usize,
    pub time: String,
    pub exposure: f64,
    /// Linear predictor (log expected count) mean and sd.
    pub eta_mean: f64,
    pub eta_sd: f64,
    pub mean_count: f64,
    /// 2.5% and 97.5% posterior predictive count quantiles.
    pub count_lo: u64,
    pub count_hi: u64,
    pub mean_density: f64,
    pub density_lo: f64,
    pub density_hi: f64,
    /// 95% credible interval of the expected density `e^η / E`.
    pub rate_lo: f64,
    pub rate_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub horizon: usize,
    pub rows: Vec<ForecastRow>,
}

impl Forecast {
    pub fn row(&self, region: usize, h: usize) -> &ForecastRow {
        &self.rows[region * self.horizon + h - 1]
    }
}

fn future_labels(panel: &ObservationPanel, horizon: usize) -> Vec<String> {
    let labels = panel.time_labels();
    let last = &labels[labels.len() - 1];
    if month_of(last).is_some() {
        if let Ok(next) = month_labels(last, horizon + 1) {
            return next[1..].to_vec();
        }
    }
    match last.parse::<i64>() {
        Ok(v) => (1..=horizon as i64).map(|h| (v + h).to_string()).collect(),
        Err(_) => (1..=horizon).map(|h| format!("T+{h}")).collect(),
    }
}

fn scenario_values(
    panel: &ObservationPanel,
    fit: &FitResult,
    horizon: usize,
    scenario: &CovariateScenario,
) -> Result<Vec<Vec<f64>>> {
    let p = panel.covariate_names().len();
    let (n, t) = (panel.n_regions(), panel.n_times());
    let lay = fit.layout();
    match scenario {
        CovariateScenario::Supplied(v) => {
            if v.len() != p || v.iter().any(|c| c.len() != n * horizon) {
                return Err(Error::InvalidArgument(format!(
                    "supplied scenario needs {p} covariates × {} values",
                    n * horizon
                )));
            }
            Ok(v.clone())
        }
        CovariateScenario::LastObserved => Ok((0..p)
            .map(|k| {
                (0..n)
                    .flat_map(|i| std::iter::repeat_n(panel.covariate(k)[panel.row(i, t - 1)], horizon))
                    .collect()
            })
            .collect()),
        CovariateScenario::Climatological => Ok((0..p)
            .map(|k| {
                let x = panel.covariate(k);
                let mut out = Vec::with_capacity(n * horizon);
                for i in 0..n {
                    for h in 1..=horizon {
                        let target = lay.season_of(t - 1 + h);
                        let (sum, cnt) = (0..t)
                            .filter(|&s| target.is_none() || lay.season_of(s) == target)
                            .fold((0.0, 0usize), |(a, c), s| (a + x[panel.row(i, s)], c + 1));
                        out.push(if cnt > 0 { sum / cnt as f64 } else { 0.0 });
                    }
                }
                out
            })
            .collect()),
    }
}

/// Smallest count `y` with `P(Y ≤ y) ≥ q` for `Y | η ~ Poisson(e^η)` and
/// `η` a Gaussian mixture.
fn predictive_count_quantile(mix: &Mixture, q: f64, rule: &NormalRule) -> u64 {
    let rates: Vec<(f64, f64)> = mix
        .weights
        .iter()
        .zip(mix.means.iter().zip(&mix.sds))
        .flat_map(|(w, (&m, &s))| {
            rule.nodes.iter().zip(&rule.weights).map(move |(z, wz)| (w * wz, (m + s * z).exp()))
        })
        .filter(|(w, _)| *w > 0.0)
        .collect();
    let cdf = |y: u64| -> f64 {
        rates
            .iter()
            .map(|&(w, mu)| if mu <= 0.0 { w } else { w * Poisson::new(mu).map_or(1.0, |d| d.cdf(y)) })
            .sum()
    };
    let max_rate = rates.iter().map(|r| r.1).fold(0.0, f64::max);
    let mut hi = (max_rate + 10.0 * max_rate.sqrt() + 10.0).ceil() as u64;
    while cdf(hi) < q {
        hi *= 2;
    }
    let mut lo = 0u64;
    if cdf(0) >= q {
        return 0;
    }
    // invariant: cdf(lo) < q <= cdf(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if cdf(mid) >= q {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// RW1 forward projection. For each grid point the future linear
/// predictor is Gaussian with mean `offset + cᵀ m` and variance
/// `cᵀ Σ c + h/τ_f`, `c` touching the fixed effects, `b_i`, the last trend
/// value and the seasonal slot; the predictive count is Poisson mixed over
/// the resulting lognormal rate and over grid points.
pub fn forecast(
    fit: &FitResult,
    panel: &ObservationPanel,
    horizon: usize,
    scenario: &CovariateScenario,
) -> Result<Forecast> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("forecast horizon must be positive".into()));
    }
    let lay = fit.layout();
    if !lay.has_trend() {
        return Err(Error::Model("forecasting needs the RW1 trend block".into()));
    }
    let (n, t) = (panel.n_regions(), panel.n_times());
    let p = lay.n_covariates();
    let x_future = scenario_values(panel, fit, horizon, scenario)?;
    let labels = future_labels(panel, horizon);

    // latent indices whose joint covariance is needed
    let mut idx: Vec<usize> = lay.beta().collect();
    let b_at = idx.len();
    idx.extend(lay.b());
    let f_at = idx.len();
    idx.push(lay.f().end - 1);
    let s_at = idx.len();
    idx.extend(lay.s());

    let per_point = parallel::map(&fit.grid.points, |pt| -> Result<_> {
        let cov = pt.state.covariance_block(&idx)?;
        let mean: Vec<f64> = idx.iter().map(|&j| pt.state.mean[j]).collect();
        let tau_f = fit.model.hyper_value(&pt.theta, Hyper::PrecRw1).map(f64::exp).unwrap_or(f64::INFINITY);
        Ok((cov, mean, tau_f))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let rule = NormalRule::cached(0);
    let mut rows = Vec::with_capacity(n * horizon);
    for i in 0..n {
        let offset = panel.offsets()[panel.row(i, t - 1)];
        let exposure = offset.exp();
        for h in 1..=horizon {
            let mut c: Vec<(usize, f64)> = vec![(0, 1.0)];
            for k in 0..p {
                c.push((1 + k, x_future[k][i * horizon + h - 1]));
            }
            c.push((b_at + i, 1.0));
            c.push((f_at, 1.0));
            if let Some(sj) = lay.season_of(t - 1 + h) {
                c.push((s_at + sj, 1.0));
            }
            let mut mix = Mixture { weights: Vec::new(), means: Vec::new(), sds: Vec::new() };
            for (pt, (cov, mean, tau_f)) in fit.grid.points.iter().zip(&per_point) {
                let m: f64 = offset + c.iter().map(|&(a, v)| v * mean[a]).sum::<f64>();
                let mut var = h as f64 / tau_f;
                for &(a, va) in &c {
                    for &(b, vb) in &c {
                        var += va * vb * cov[(a, b)];
                    }
                }
                mix.weights.push(pt.weight);
                mix.means.push(m);
                mix.sds.push(var.max(0.0).sqrt());
            }
            let (mean_count, _) = mix.exp_moments();
            let count_lo = predictive_count_quantile(&mix, 0.025, rule);
            let count_hi = predictive_count_quantile(&mix, 0.975, rule);
            rows.push(ForecastRow {
                region: panel.region_ids()[i].clone(),
                horizon: h,
                time: labels[h - 1].clone(),
                exposure,
                eta_mean: mix.mean(),
                eta_sd: mix.sd(),
                mean_count,
                count_lo,
                count_hi,
                mean_density: mean_count / exposure,
                density_lo: count_lo as f64 / exposure,
                density_hi: count_hi as f64 / exposure,
                rate_lo: mix.quantile(0.025).exp() / exposure,
                rate_hi: mix.quantile(0.975).exp() / exposure,
            });
        }
    }
    Ok(Forecast { horizon, rows })
}
