//! CSV and GeoJSON renderers for fitted models and derived products.

use serde_json::{json, Map, Value};

use crate::analytics::{Forecast, LisaResult, RiskSurface};
use crate::evaluation::FitMetrics;
use crate::fit::FitResult;
use crate::geometry::{regions_to_geojson, Region};
use crate::inference::Summary;
use crate::io::{csv_table, fmt_f64};
use crate::model::{Hyper, ObservationPanel};

pub const SUMMARY_HEADER: [&str; 5] = ["mean", "sd", "2.5%", "median", "97.5%"];

fn summary_cells(s: &Summary) -> Vec<String> {
    [s.mean, s.sd, s.q025, s.q50, s.q975].iter().map(|&v| fmt_f64(v)).collect()
}

fn header<'a>(lead: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    lead.iter().chain(tail).copied().collect()
}

/// Fixed effects: `variable,mean,sd,2.5%,median,97.5%`, intercept first.
pub fn fixed_effects_csv(fit: &FitResult, panel: &ObservationPanel) -> String {
    let names = std::iter::once("Intercept").chain(panel.covariate_names().iter().map(String::as_str));
    let rows: Vec<Vec<String>> = names
        .zip(fit.fixed_effects())
        .map(|(n, s)| std::iter::once(n.to_string()).chain(summary_cells(&s)).collect())
        .collect();
    csv_table(&header(&["variable"], &SUMMARY_HEADER), &rows)
}

fn interpretation(h: Hyper) -> &'static str {
    match h {
        Hyper::PrecBym2 => "Inverse marginal variance of the area effect",
        Hyper::Phi => "Share of area-effect variance that is spatially structured",
        Hyper::PrecRw1 => "Inverse variance of month-to-month trend changes",
        Hyper::PrecSeasonal => "Inverse variance of the cyclic monthly effect",
    }
}

fn compact(v: f64) -> String {
    format!("{v:.4}")
}

/// Hyperparameters: `parameter,value,interpretation` with the value as
/// `mean [2.5%; 97.5%]`, followed by full-precision summary columns and an
/// `estimated` flag (fixed hyperparameters have zero sd).
pub fn hyperparameters_csv(fit: &FitResult) -> String {
    let mut all: Vec<(Hyper, Summary, bool)> = fit.hyperparameters().into_iter().map(|(h, s)| (h, s, true)).collect();
    for &(h, v) in fit.model.fixed_hypers() {
        let u = h.to_user(v);
        all.push((h, Summary { mean: u, sd: 0.0, q025: u, q50: u, q975: u }, false));
    }
    all.sort_by_key(|e| e.0);
    let rows: Vec<Vec<String>> = all
        .iter()
        .map(|(h, s, est)| {
            let value = if *est {
                format!("{} [{}; {}]", compact(s.mean), compact(s.q025), compact(s.q975))
            } else {
                compact(s.mean)
            };
            let mut row = vec![h.label().to_string(), value, interpretation(*h).to_string()];
            row.extend(summary_cells(s));
            row.push(est.to_string());
            row
        })
        .collect();
    csv_table(&header(&["parameter", "value", "interpretation"], &header(&SUMMARY_HEADER, &["estimated"])), &rows)
}

/// Model-performance block: `metric,value`.
pub fn metrics_csv(m: &FitMetrics) -> String {
    let rows: Vec<Vec<String>> = [
        ("dic", m.dic),
        ("waic", m.waic),
        ("p_eff_dic", m.p_eff_dic),
        ("p_eff_waic", m.p_eff_waic),
        ("log_score", m.log_score),
        ("rmse", m.rmse),
        ("r2_pred", m.r2_pred),
        ("mlik", m.mlik),
    ]
    .iter()
    .map(|(k, v)| vec![k.to_string(), fmt_f64(*v)])
    .collect();
    csv_table(&["metric", "value"], &rows)
}

pub fn cpo_csv(m: &FitMetrics, panel: &ObservationPanel) -> String {
    let rows: Vec<Vec<String>> = (0..panel.len())
        .map(|r| {
            vec![
                panel.region_ids()[panel.region_of(r)].clone(),
                panel.time_labels()[panel.time_of(r)].clone(),
                panel.cases()[r].to_string(),
                fmt_f64(m.cpo[r]),
                m.cpo_flagged[r].to_string(),
            ]
        })
        .collect();
    csv_table(&["area_id", "time", "cases", "cpo", "flagged"], &rows)
}

/// Per-(region, time) fitted values: posterior mean count, density per
/// km² of exposure, and the linear-predictor summary.
pub fn fitted_csv(fit: &FitResult, panel: &ObservationPanel) -> String {
    let fitted = fit.fitted_counts();
    let rows: Vec<Vec<String>> = (0..panel.len())
        .map(|r| {
            let eta = fit.marginals.eta(r);
            let exposure = panel.offsets()[r].exp();
            vec![
                panel.region_ids()[panel.region_of(r)].clone(),
                panel.time_labels()[panel.time_of(r)].clone(),
                panel.cases()[r].to_string(),
                fmt_f64(exposure),
                fmt_f64(fitted[r]),
                fmt_f64(fitted[r] / exposure),
                fmt_f64(eta.mean()),
                fmt_f64(eta.sd()),
            ]
        })
        .collect();
    csv_table(
        &["area_id", "time", "cases", "exposure", "fitted_mean", "fitted_density", "eta_mean", "eta_sd"],
        &rows,
    )
}

/// Per-region summaries of the combined effect `b` and the scaled
/// structured component `u*`.
pub fn random_effects_csv(fit: &FitResult, panel: &ObservationPanel) -> String {
    let lay = fit.layout();
    let rows: Vec<Vec<String>> = (0..panel.n_regions())
        .map(|i| {
            let mut row = vec![panel.region_ids()[i].clone()];
            row.extend(summary_cells(&fit.marginals.latent(lay.b().start + i).summary()));
            row.extend(summary_cells(&fit.marginals.latent(lay.u().start + i).summary()));
            row
        })
        .collect();
    let head = [
        "area_id", "b_mean", "b_sd", "b_2.5%", "b_median", "b_97.5%", "u_mean", "u_sd", "u_2.5%", "u_median",
        "u_97.5%",
    ];
    csv_table(&head, &rows)
}

/// Temporal effects: RW1 trend and seasonal cycle summaries.
pub fn temporal_effects_csv(fit: &FitResult, panel: &ObservationPanel) -> String {
    let lay = fit.layout();
    let mut rows = Vec::new();
    for (t, j) in lay.f().enumerate() {
        let mut row = vec!["trend".to_string(), panel.time_labels()[t].clone()];
        row.extend(summary_cells(&fit.marginals.latent(j).summary()));
        rows.push(row);
    }
    for (k, j) in lay.s().enumerate() {
        let mut row = vec!["season".to_string(), k.to_string()];
        row.extend(summary_cells(&fit.marginals.latent(j).summary()));
        rows.push(row);
    }
    csv_table(&header(&["effect", "index"], &SUMMARY_HEADER), &rows)
}

pub fn risk_csv(risk: &RiskSurface) -> String {
    let rows: Vec<Vec<String>> = risk
        .regions
        .iter()
        .map(|r| {
            let mut row = vec![r.region.clone()];
            row.extend(
                [
                    r.b_mean,
                    r.b_sd,
                    r.rr,
                    r.rr_mean,
                    r.rr_sd,
                    r.rr_q025,
                    r.rr_q975,
                    r.exceedance,
                    r.fitted_density,
                    r.residual_raw,
                    r.residual_pearson,
                ]
                .iter()
                .map(|&v| fmt_f64(v)),
            );
            row
        })
        .collect();
    csv_table(
        &[
            "area_id",
            "b_mean",
            "b_sd",
            "rr",
            "rr_mean",
            "rr_sd",
            "rr_2.5%",
            "rr_97.5%",
            "exceed",
            "fitted_density",
            "residual_raw",
            "residual_pearson",
        ],
        &rows,
    )
}

pub fn lisa_csv(lisa: &LisaResult, region_ids: &[String], values: &[f64]) -> String {
    let rows: Vec<Vec<String>> = (0..region_ids.len())
        .map(|i| {
            vec![
                region_ids[i].clone(),
                fmt_f64(values[i]),
                fmt_f64(lisa.local_i[i]),
                fmt_f64(lisa.p_values[i]),
                lisa.classes[i].label().to_string(),
            ]
        })
        .collect();
    csv_table(&["area_id", "value", "local_i", "p_value", "cluster"], &rows)
}

pub fn lisa_global_csv(lisa: &LisaResult) -> String {
    let g = &lisa.global;
    let rows = vec![
        vec!["morans_i".into(), fmt_f64(g.i)],
        vec!["p_value".into(), fmt_f64(g.p_value)],
        vec!["expected_i".into(), fmt_f64(g.expected)],
        vec!["local_sum_gap".into(), fmt_f64(lisa.identity_gap)],
    ];
    csv_table(&["statistic", "value"], &rows)
}

pub fn forecast_csv(fc: &Forecast) -> String {
    let rows: Vec<Vec<String>> = fc
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.region.clone(), r.horizon.to_string(), r.time.clone()];
            row.extend([r.exposure, r.eta_mean, r.eta_sd, r.mean_count].iter().map(|&v| fmt_f64(v)));
            row.push(r.count_lo.to_string());
            row.push(r.count_hi.to_string());
            row.extend(
                [r.mean_density, r.density_lo, r.density_hi, r.rate_lo, r.rate_hi].iter().map(|&v| fmt_f64(v)),
            );
            row
        })
        .collect();
    csv_table(
        &[
            "area_id",
            "horizon",
            "time",
            "exposure",
            "eta_mean",
            "eta_sd",
            "mean_count",
            "count_2.5%",
            "count_97.5%",
            "mean_density",
            "density_2.5%",
            "density_97.5%",
            "rate_2.5%",
            "rate_97.5%",
        ],
        &rows,
    )
}

/// Input polygons with the available map, cluster and forecast properties
/// appended. Regions are matched by position (graph order).
pub fn risk_geojson(
    regions: &[Region],
    risk: Option<&RiskSurface>,
    lisa: Option<&LisaResult>,
    forecast: Option<&Forecast>,
) -> Value {
    let extra: Vec<Map<String, Value>> = (0..regions.len())
        .map(|i| {
            let mut m = Map::new();
            if let Some(r) = risk.map(|r| &r.regions[i]) {
                m.insert("rr_mean".into(), json!(r.rr_mean));
                m.insert("rr_sd".into(), json!(r.rr_sd));
                m.insert("exceed".into(), json!(r.exceedance));
                m.insert("fitted_density".into(), json!(r.fitted_density));
                m.insert("residual".into(), json!(r.residual_raw));
                m.insert("residual_pearson".into(), json!(r.residual_pearson));
            }
            if let Some(l) = lisa {
                m.insert("lisa_class".into(), json!(l.classes[i].label()));
                m.insert("lisa_p".into(), json!(l.p_values[i]));
                m.insert("lisa_i".into(), json!(l.local_i[i]));
            }
            if let Some(f) = forecast {
                for h in 1..=f.horizon {
                    let row = f.row(i, h);
                    m.insert(format!("forecast_mean_h{h}"), json!(row.mean_density));
                    m.insert(format!("forecast_lo_h{h}"), json!(row.density_lo));
                    m.insert(format!("forecast_hi_h{h}"), json!(row.density_hi));
                }
            }
            m
        })
        .collect();
    regions_to_geojson(regions, &extra)
}
