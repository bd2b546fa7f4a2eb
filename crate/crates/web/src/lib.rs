//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Results cross the boundary as JSON strings so the page needs no bundler.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use riskmap::analytics::{self, CovariateScenario, Weights};
use riskmap::config::ModelConfig;
use riskmap::fit::{fit, FitResult};
use riskmap::geometry::{lattice_regions, AreaGraph, CoordUnit};
use riskmap::inference::Summary;
use riskmap::simulate::{simulate_panel, SimSpec, Simulation};

fn js_err(e: riskmap::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn summary_json(name: &str, s: &Summary) -> Value {
    json!({"name": name, "mean": s.mean, "sd": s.sd, "q025": s.q025, "median": s.q50, "q975": s.q975})
}

/// A simulated lattice panel and its fitted model.
#[wasm_bindgen]
pub struct Demo {
    sim: Simulation,
    fit: FitResult,
}

impl Demo {
    pub fn build(rows: usize, cols: usize, n_times: usize, phi: f64, seed: u64) -> riskmap::Result<Demo> {
        let spec = SimSpec { rows, cols, n_times, phi, seed, ..SimSpec::default() };
        let sim = simulate_panel(&spec)?;
        let cfg = ModelConfig { covariates: spec.covariate_names(), ..ModelConfig::default() };
        let fit = fit(&sim.panel, &sim.graph, &cfg)?;
        Ok(Demo { sim, fit })
    }

    pub fn risk_map_value(&self) -> Value {
        let risk = analytics::risk_surface(&self.fit, &self.sim.panel);
        let cells: Vec<Value> = risk
            .regions
            .iter()
            .zip(&self.sim.truth.b)
            .map(|(r, b)| {
                json!({"id": r.region, "rr": r.rr, "exceed": r.exceedance, "density": r.fitted_density,
                       "residual": r.residual_pearson, "true_rr": b.exp()})
            })
            .collect();
        let names: Vec<String> =
            std::iter::once("Intercept".to_string()).chain(self.sim.panel.covariate_names().iter().cloned()).collect();
        let fixed: Vec<Value> = names.iter().zip(self.fit.fixed_effects()).map(|(n, s)| summary_json(n, &s)).collect();
        let hypers: Vec<Value> = self.fit.hyperparameters().iter().map(|(h, s)| summary_json(h.label(), s)).collect();
        json!({
            "rows": self.sim.spec.rows,
            "cols": self.sim.spec.cols,
            "cells": cells,
            "fixed": fixed,
            "hyper": hypers,
            "grid_points": self.fit.grid.points.len(),
        })
    }

    pub fn forecast_value(&self, cell: usize, horizon: usize) -> riskmap::Result<Value> {
        let panel = &self.sim.panel;
        if cell >= panel.n_regions() {
            return Err(riskmap::Error::InvalidArgument(format!("cell {cell} out of range")));
        }
        let fc = analytics::forecast(&self.fit, panel, horizon, &CovariateScenario::Climatological)?;
        let fitted = self.fit.fitted_counts();
        let history: Vec<Value> = (0..panel.n_times())
            .map(|t| {
                let r = panel.row(cell, t);
                let e = panel.offsets()[r].exp();
                json!({"time": panel.time_labels()[t], "observed": panel.cases()[r] as f64 / e, "fitted": fitted[r] / e})
            })
            .collect();
        let ahead: Vec<Value> = (1..=horizon)
            .map(|h| {
                let row = fc.row(cell, h);
                json!({"time": row.time, "mean": row.mean_density, "lo": row.density_lo, "hi": row.density_hi})
            })
            .collect();
        Ok(json!({"id": panel.region_ids()[cell], "history": history, "forecast": ahead}))
    }
}

#[wasm_bindgen]
impl Demo {
    /// Simulates a `rows × cols` lattice over `n_times` months and fits it.
    #[wasm_bindgen(constructor)]
    pub fn new(rows: usize, cols: usize, n_times: usize, phi: f64, seed: u64) -> Result<Demo, JsError> {
        Demo::build(rows, cols, n_times, phi, seed).map_err(js_err)
    }

    /// Per-cell relative risk, exceedance and fitted density, plus the
    /// fixed-effect and hyperparameter tables.
    #[wasm_bindgen(js_name = riskMap)]
    pub fn risk_map(&self) -> String {
        self.risk_map_value().to_string()
    }

    /// Observed and fitted density history of one cell and its forecast band.
    pub fn forecast(&self, cell: usize, horizon: usize) -> Result<String, JsError> {
        self.forecast_value(cell, horizon).map(|v| v.to_string()).map_err(js_err)
    }
}

pub fn lisa_grid_value(
    rows: usize,
    cols: usize,
    values: &[f64],
    permutations: usize,
    seed: u64,
    alpha: f64,
) -> riskmap::Result<Value> {
    let regions = lattice_regions(&vec![1.0; cols], &vec![1.0; rows]);
    let graph = AreaGraph::from_regions(&regions, 1e-9, CoordUnit::Kilometers)?;
    let res = analytics::lisa(values, &graph, permutations, seed, alpha, Weights::Binary)?;
    let cells: Vec<Value> = (0..values.len())
        .map(|i| json!({"class": res.classes[i].label(), "p": res.p_values[i], "local_i": res.local_i[i]}))
        .collect();
    Ok(json!({"global_i": res.global.i, "global_p": res.global.p_value, "cells": cells}))
}

/// Local Moran clusters of row-major `values` on a `rows × cols` queen
/// lattice.
#[wasm_bindgen(js_name = lisaGrid)]
pub fn lisa_grid(
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    permutations: usize,
    seed: u64,
    alpha: f64,
) -> Result<String, JsError> {
    lisa_grid_value(rows, cols, &values, permutations, seed, alpha).map(|v| v.to_string()).map_err(js_err)
}
