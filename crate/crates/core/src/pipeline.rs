//! Batch workflow: adjacency → fit → metrics → map → lisa → forecast, with
//! a reproducibility manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analytics::{self, CovariateScenario, Forecast, LisaResult, RiskSurface, Weights};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::evaluation;
use crate::fit::{fit, FitResult};
use crate::geometry::{load_polygons_str, AreaGraph, CoordUnit, Region};
use crate::io::ingest_panel;
use crate::model::ObservationPanel;
use crate::report;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Adjacency,
    Fit,
    Metrics,
    Map,
    Lisa,
    Forecast,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Adjacency, Stage::Fit, Stage::Metrics, Stage::Map, Stage::Lisa, Stage::Forecast];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Adjacency => "adjacency",
            Stage::Fit => "fit",
            Stage::Metrics => "metrics",
            Stage::Map => "map",
            Stage::Lisa => "lisa",
            Stage::Forecast => "forecast",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

/// Variable tested for local clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LisaVariable {
    /// Forecast mean density averaged over the horizon.
    #[default]
    ForecastDensity,
    /// Time-aggregated Pearson residual.
    Residual,
    /// Relative risk `exp(E[b_i])`.
    RelativeRisk,
}

impl LisaVariable {
    pub fn name(self) -> &'static str {
        match self {
            LisaVariable::ForecastDensity => "forecast",
            LisaVariable::Residual => "residual",
            LisaVariable::RelativeRisk => "rr",
        }
    }
}

impl FromStr for LisaVariable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forecast" => Ok(LisaVariable::ForecastDensity),
            "residual" => Ok(LisaVariable::Residual),
            "rr" => Ok(LisaVariable::RelativeRisk),
            other => Err(Error::InvalidArgument(format!("unknown LISA variable {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScenarioKind {
    #[default]
    Climatological,
    LastObserved,
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "climatological" => Ok(ScenarioKind::Climatological),
            "last" => Ok(ScenarioKind::LastObserved),
            other => Err(Error::InvalidArgument(format!("unknown covariate scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub geo: PathBuf,
    pub data: Option<PathBuf>,
    pub model_config: Option<PathBuf>,
    pub out: PathBuf,
    pub id_field: String,
    pub coord_unit: CoordUnit,
    /// Vertex-matching tolerance for contiguity, in coordinate units.
    pub tolerance: f64,
    pub seed: u64,
    pub permutations: usize,
    pub alpha: f64,
    pub horizon: usize,
    pub stages: Vec<Stage>,
    pub lisa_variable: LisaVariable,
    pub weights: Weights,
    pub scenario: ScenarioKind,
    pub workers: Option<usize>,
    pub verbose: bool,
}

impl RunConfig {
    pub fn new(geo: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            geo: geo.into(),
            data: None,
            model_config: None,
            out: out.into(),
            id_field: "id".into(),
            coord_unit: CoordUnit::Meters,
            tolerance: 1e-6,
            seed: 1,
            permutations: 999,
            alpha: 0.05,
            horizon: 12,
            stages: Stage::ALL.to_vec(),
            lisa_variable: LisaVariable::default(),
            weights: Weights::Binary,
            scenario: ScenarioKind::default(),
            workers: None,
            verbose: false,
        }
    }

    /// Requested stages plus everything they depend on, in run order.
    pub fn resolved_stages(&self) -> Vec<Stage> {
        let mut set: Vec<Stage> = self.stages.clone();
        let mut i = 0;
        while i < set.len() {
            let deps: &[Stage] = match set[i] {
                Stage::Adjacency => &[],
                Stage::Fit => &[Stage::Adjacency],
                Stage::Metrics | Stage::Map | Stage::Forecast => &[Stage::Fit],
                Stage::Lisa => match self.lisa_variable {
                    LisaVariable::ForecastDensity => &[Stage::Forecast],
                    _ => &[Stage::Map],
                },
            };
            for d in deps {
                if !set.contains(d) {
                    set.push(*d);
                }
            }
            i += 1;
        }
        set.sort();
        set.dedup();
        // forecast feeds lisa, so it runs first
        if let (Some(l), Some(f)) =
            (set.iter().position(|s| *s == Stage::Lisa), set.iter().position(|s| *s == Stage::Forecast))
        {
            set.swap(l, f);
        }
        set
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.resolved_stages();
        if !self.geo.is_file() {
            return Err(Error::InvalidArgument(format!("geometry file {} not found", self.geo.display())));
        }
        if stages.contains(&Stage::Fit) {
            match &self.data {
                Some(p) if p.is_file() => {}
                Some(p) => return Err(Error::InvalidArgument(format!("panel file {} not found", p.display()))),
                None => return Err(Error::InvalidArgument("the fit stage needs a panel CSV".into())),
            }
        }
        if let Some(p) = &self.model_config {
            if !p.is_file() {
                return Err(Error::InvalidArgument(format!("model config {} not found", p.display())));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if stages.contains(&Stage::Lisa) && self.permutations == 0 {
            return Err(Error::InvalidArgument("permutations must be positive".into()));
        }
        if stages.contains(&Stage::Forecast) && self.horizon == 0 {
            return Err(Error::InvalidArgument("forecast horizon must be positive".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidArgument("workers must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of a pipeline run; the manifest has been written to
/// `out/manifest.json`.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub success: bool,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub outputs: Vec<PathBuf>,
    pub manifest: Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Default)]
struct State {
    regions: Option<Vec<Region>>,
    graph: Option<AreaGraph>,
    model_cfg: Option<ModelConfig>,
    panel: Option<ObservationPanel>,
    fit: Option<FitResult>,
    risk: Option<RiskSurface>,
    lisa: Option<LisaResult>,
    forecast: Option<Forecast>,
}

struct Writer<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        self.written.push(path);
        Ok(())
    }
}

fn read_text(path: &Path) -> Result<(String, String)> {
    let bytes = fs::read(path)?;
    let hash = sha256_hex(&bytes);
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Ingestion(format!("{} is not valid UTF-8", path.display())))?;
    Ok((text, hash))
}

fn need<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::InvalidArgument(format!("{what} unavailable")))
}

fn run_stage(stage: Stage, cfg: &RunConfig, st: &mut State, w: &mut Writer) -> Result<()> {
    match stage {
        Stage::Adjacency => {
            let (text, _) = read_text(&cfg.geo)?;
            let regions = load_polygons_str(&text, &cfg.id_field)?;
            let graph = AreaGraph::from_regions(&regions, cfg.tolerance, cfg.coord_unit)?;
            w.put("adjacency.csv", &graph.edges_csv())?;
            w.put("adjacency_summary.txt", &format!("{}\n", graph.summary_line()))?;
            st.regions = Some(regions);
            st.graph = Some(graph);
        }
        Stage::Fit => {
            let graph = need(&st.graph, "adjacency graph")?;
            let model_cfg = match &cfg.model_config {
                Some(p) => ModelConfig::from_toml(&read_text(p)?.0)?,
                None => ModelConfig::default(),
            };
            let data = cfg.data.as_ref().ok_or_else(|| Error::InvalidArgument("no panel CSV".into()))?;
            let panel = ingest_panel(&read_text(data)?.0, graph, &model_cfg)?;
            let result = fit(&panel, graph, &model_cfg)?;
            w.put("fixed_effects.csv", &report::fixed_effects_csv(&result, &panel))?;
            w.put("hyperparameters.csv", &report::hyperparameters_csv(&result))?;
            w.put("fitted.csv", &report::fitted_csv(&result, &panel))?;
            w.put("random_effects.csv", &report::random_effects_csv(&result, &panel))?;
            w.put("temporal_effects.csv", &report::temporal_effects_csv(&result, &panel))?;
            st.model_cfg = Some(model_cfg);
            st.panel = Some(panel);
            st.fit = Some(result);
        }
        Stage::Metrics => {
            let (result, panel) = (need(&st.fit, "fit")?, need(&st.panel, "panel")?);
            let m = evaluation::evaluate(result);
            w.put("report.csv", &report::metrics_csv(&m))?;
            w.put("cpo.csv", &report::cpo_csv(&m, panel))?;
            if !m.warnings.is_empty() {
                w.put("warnings.txt", &(m.warnings.join("\n") + "\n"))?;
            }
        }
        Stage::Map => {
            let risk = analytics::risk_surface(need(&st.fit, "fit")?, need(&st.panel, "panel")?);
            w.put("risk.csv", &report::risk_csv(&risk))?;
            st.risk = Some(risk);
        }
        Stage::Forecast => {
            let (result, panel) = (need(&st.fit, "fit")?, need(&st.panel, "panel")?);
            let scenario = match cfg.scenario {
                ScenarioKind::Climatological => CovariateScenario::Climatological,
                ScenarioKind::LastObserved => CovariateScenario::LastObserved,
            };
            let fc = analytics::forecast(result, panel, cfg.horizon, &scenario)?;
            w.put("forecast.csv", &report::forecast_csv(&fc))?;
            st.forecast = Some(fc);
        }
        Stage::Lisa => {
            let graph = need(&st.graph, "adjacency graph")?;
            let values: Vec<f64> = match cfg.lisa_variable {
                LisaVariable::ForecastDensity => {
                    let fc = need(&st.forecast, "forecast")?;
                    (0..graph.len())
                        .map(|i| (1..=fc.horizon).map(|h| fc.row(i, h).mean_density).sum::<f64>() / fc.horizon as f64)
                        .collect()
                }
                LisaVariable::Residual => {
                    need(&st.risk, "risk surface")?.regions.iter().map(|r| r.residual_pearson).collect()
                }
                LisaVariable::RelativeRisk => need(&st.risk, "risk surface")?.regions.iter().map(|r| r.rr).collect(),
            };
            let l = analytics::lisa(&values, graph, cfg.permutations, cfg.seed, cfg.alpha, cfg.weights)?;
            w.put("lisa.csv", &report::lisa_csv(&l, graph.region_ids(), &values))?;
            w.put("lisa_global.csv", &report::lisa_global_csv(&l))?;
            st.lisa = Some(l);
        }
    }
    Ok(())
}

fn config_echo(cfg: &RunConfig, stages: &[Stage]) -> Value {
    json!({
        "geo": cfg.geo.display().to_string(),
        "data": cfg.data.as_ref().map(|p| p.display().to_string()),
        "model_config": cfg.model_config.as_ref().map(|p| p.display().to_string()),
        "out": cfg.out.display().to_string(),
        "id_field": cfg.id_field,
        "coord_unit": format!("{:?}", cfg.coord_unit),
        "tolerance": cfg.tolerance,
        "permutations": cfg.permutations,
        "alpha": cfg.alpha,
        "horizon": cfg.horizon,
        "requested_stages": cfg.stages.iter().map(|s| s.name()).collect::<Vec<_>>(),
        "resolved_stages": stages.iter().map(|s| s.name()).collect::<Vec<_>>(),
        "lisa_variable": cfg.lisa_variable.name(),
        "weights": format!("{:?}", cfg.weights),
        "scenario": format!("{:?}", cfg.scenario),
        "workers": cfg.workers,
    })
}

/// Runs the configured stages, stopping at the first failure. Outputs of
/// completed stages are kept; the manifest records each stage's status.
/// Configuration errors and an uncreatable output directory are returned
/// as `Err` without a manifest.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    let start = Instant::now();
    let stages = cfg.resolved_stages();

    let mut inputs = serde_json::Map::new();
    for (key, path) in [("geo", Some(&cfg.geo)), ("data", cfg.data.as_ref()), ("model_config", cfg.model_config.as_ref())]
    {
        if let Some(p) = path {
            inputs.insert(key.into(), json!({"path": p.display().to_string(), "sha256": sha256_hex(&fs::read(p)?)}));
        }
    }

    let mut st = State::default();
    let mut w = Writer { dir: &cfg.out, written: Vec::new() };
    let mut records = Vec::new();
    let mut failure: Option<(Stage, String)> = None;
    for &stage in &stages {
        if failure.is_some() {
            records.push(json!({"stage": stage.name(), "status": "skipped"}));
            continue;
        }
        let t0 = Instant::now();
        let before = w.written.len();
        let outcome = run_stage(stage, cfg, &mut st, &mut w);
        let files: Vec<String> = w.written[before..]
            .iter()
            .map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default())
            .collect();
        let mut rec = json!({
            "stage": stage.name(),
            "requested": cfg.stages.contains(&stage),
            "seconds": t0.elapsed().as_secs_f64(),
            "outputs": files,
        });
        match outcome {
            Ok(()) => rec["status"] = json!("ok"),
            Err(e) => {
                rec["status"] = json!("FAILED");
                rec["error"] = json!(e.to_string());
                failure = Some((stage, e.to_string()));
            }
        }
        if cfg.verbose {
            eprintln!("[{}] {}", rec["status"].as_str().unwrap_or("?"), stage.name());
        }
        records.push(rec);
    }

    if st.risk.is_some() || st.lisa.is_some() || st.forecast.is_some() {
        if let Some(regions) = &st.regions {
            let geo = report::risk_geojson(regions, st.risk.as_ref(), st.lisa.as_ref(), st.forecast.as_ref());
            w.put("risk_map.geojson", &serde_json::to_string(&geo)?)?;
        }
    }

    let time_span = st.panel.as_ref().map(|p| {
        json!({
            "min": p.time_labels().first(),
            "max": p.time_labels().last(),
            "n_times": p.n_times(),
            "n_regions": p.n_regions(),
        })
    });
    let manifest = json!({
        "tool": "riskmap",
        "version": env!("CARGO_PKG_VERSION"),
        "status": if failure.is_some() { "FAILED" } else { "ok" },
        "failed_stage": failure.as_ref().map(|f| f.0.name()),
        "root_seed": cfg.seed,
        "inputs": inputs,
        "config": config_echo(cfg, &stages),
        "model_config": st.model_cfg.as_ref().map(|c| serde_json::to_value(c).unwrap_or(Value::Null)),
        "time_span": time_span,
        "stages": records,
        "wall_time_seconds": start.elapsed().as_secs_f64(),
    });
    let path = cfg.out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    w.written.push(path);
    Ok(RunReport {
        success: failure.is_none(),
        failed_stage: failure.as_ref().map(|f| f.0),
        error: failure.map(|f| f.1),
        outputs: w.written,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dependencies_are_pulled_in() {
        let mut cfg = RunConfig::new("a", "b");
        cfg.stages = vec![Stage::Lisa];
        assert_eq!(cfg.resolved_stages(), vec![Stage::Adjacency, Stage::Fit, Stage::Forecast, Stage::Lisa]);
        cfg.lisa_variable = LisaVariable::Residual;
        assert_eq!(cfg.resolved_stages(), vec![Stage::Adjacency, Stage::Fit, Stage::Map, Stage::Lisa]);
        cfg.stages = vec![Stage::Adjacency];
        assert_eq!(cfg.resolved_stages(), vec![Stage::Adjacency]);
        assert_eq!(RunConfig::new("a", "b").resolved_stages().last(), Some(&Stage::Lisa));
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("plot".parse::<Stage>().is_err());
    }

    #[test]
    fn hash_is_sha256() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
