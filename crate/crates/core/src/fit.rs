//! End-to-end model fit: layout, hyperparameter mode, grid and marginals.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::geometry::AreaGraph;
use crate::inference::{
    explore_grid, latent_marginals, maximize, GaussianApprox, HyperGrid, LaplaceEngine, LatentModel,
    NewtonSettings, Observations, PosteriorMixture, Summary,
};
use crate::model::{build_layout, Hyper, LatentLayout, ObservationPanel, SpatioTemporalModel};

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: SpatioTemporalModel,
    pub observations: Observations,
    pub grid: HyperGrid<GaussianApprox>,
    pub marginals: PosteriorMixture,
    pub ascent_iterations: usize,
    pub evaluations: usize,
}

pub fn fit(panel: &ObservationPanel, graph: &AreaGraph, cfg: &ModelConfig) -> Result<FitResult> {
    fit_with(panel, graph, cfg, NewtonSettings::default())
}

pub fn fit_with(
    panel: &ObservationPanel,
    graph: &AreaGraph,
    cfg: &ModelConfig,
    newton: NewtonSettings,
) -> Result<FitResult> {
    let layout = build_layout(panel, graph, cfg)?;
    let model = SpatioTemporalModel::new(layout, graph, cfg)?;
    let observations = model.observations(panel)?;
    let engine = LaplaceEngine::new(&model, &observations, newton)?;
    let start = model.initial_hyper();
    let mode = maximize(&engine, &start, &cfg.grid)?;
    let (ascent_iterations, evaluations) = (mode.iterations, mode.evaluations);
    let grid = explore_grid(&engine, mode, &cfg.grid)?;
    let grid = grid.try_map_states(|p| engine.approximate_from(p.state.clone()))?;
    let marginals = latent_marginals(&grid);
    Ok(FitResult { model, observations, grid, marginals, ascent_iterations, evaluations })
}

impl FitResult {
    pub fn layout(&self) -> &LatentLayout {
        self.model.layout()
    }

    /// Summaries of the fixed effects, intercept first.
    pub fn fixed_effects(&self) -> Vec<Summary> {
        self.layout().beta().map(|i| self.marginals.latent(i).summary()).collect()
    }

    /// Summaries of the estimated hyperparameters on the user scale.
    pub fn hyperparameters(&self) -> Vec<(Hyper, Summary)> {
        self.model
            .free_hypers()
            .iter()
            .enumerate()
            .map(|(j, &h)| (h, self.marginals.hyper_summary(j, |v| h.to_user(v))))
            .collect()
    }

    /// Posterior mean of the fitted counts `E·e^η` per panel row.
    pub fn fitted_counts(&self) -> Vec<f64> {
        self.marginals.fitted_means()
    }
}
