use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use riskmap::analytics::Weights;
use riskmap::geometry::CoordUnit;
use riskmap::pipeline::{run_pipeline, LisaVariable, RunConfig, ScenarioKind, Stage};
use riskmap::simulate::{simulate_panel, SimSpec};

#[derive(Parser)]
#[command(name = "riskmap", version, about = "Bayesian spatio-temporal risk mapping for areal count data")]
struct Cli {
    /// Worker threads for parallel stages (defaults to all cores).
    #[arg(long, global = true, env = "RISKMAP_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Queen contiguity graph from polygons.
    Adjacency(Common),
    /// Fit the model and write effect tables.
    Fit(Common),
    /// Relative-risk, exceedance and residual surfaces.
    Map(Common),
    /// Global and local Moran's I with permutation inference.
    Lisa {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        lisa: LisaArgs,
        #[command(flatten)]
        forecast: ForecastArgs,
    },
    /// RW1 forward projection with predictive intervals.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        forecast: ForecastArgs,
    },
    /// Draw a synthetic panel from the model.
    Simulate {
        /// Simulation spec (TOML); defaults apply when omitted.
        #[arg(long, alias = "config")]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several stages with one manifest.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        lisa: LisaArgs,
        #[command(flatten)]
        forecast: ForecastArgs,
        /// Comma-separated subset of adjacency,fit,metrics,map,lisa,forecast.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
    },
}

#[derive(Args)]
struct Common {
    /// Polygon GeoJSON FeatureCollection.
    #[arg(long)]
    geo: PathBuf,
    /// Feature property holding the region identifier.
    #[arg(long, default_value = "id")]
    id_field: String,
    /// Long-format panel CSV (area_id,time,cases,covariates...).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Root seed for all randomized steps.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Unit of the polygon coordinates: m or km.
    #[arg(long, default_value = "m")]
    unit: String,
    /// Vertex-matching tolerance for contiguity, in coordinate units.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct LisaArgs {
    #[arg(long, default_value_t = 999)]
    permutations: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Variable tested: forecast, residual or rr.
    #[arg(long, default_value = "forecast")]
    lisa_variable: String,
    /// Row-standardized instead of binary weights.
    #[arg(long)]
    row_standardized: bool,
}

#[derive(Args)]
struct ForecastArgs {
    /// Months ahead.
    #[arg(long, default_value_t = 12)]
    horizon: usize,
    /// Future covariates: climatological or last.
    #[arg(long, default_value = "climatological")]
    scenario: String,
}

impl Common {
    fn run_config(&self, workers: Option<usize>, stages: Vec<Stage>) -> Result<RunConfig> {
        let mut cfg = RunConfig::new(&self.geo, &self.out);
        cfg.id_field = self.id_field.clone();
        cfg.data = self.data.clone();
        cfg.model_config = self.config.clone();
        cfg.seed = self.seed;
        cfg.coord_unit = self.unit.parse::<CoordUnit>()?;
        cfg.tolerance = self.tolerance;
        cfg.verbose = self.verbose;
        cfg.workers = workers;
        cfg.stages = stages;
        Ok(cfg)
    }
}

impl LisaArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        cfg.permutations = self.permutations;
        cfg.alpha = self.alpha;
        cfg.lisa_variable = self.lisa_variable.parse::<LisaVariable>()?;
        cfg.weights = if self.row_standardized { Weights::RowStandardized } else { Weights::Binary };
        Ok(())
    }
}

impl ForecastArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        cfg.horizon = self.horizon;
        cfg.scenario = self.scenario.parse::<ScenarioKind>()?;
        Ok(())
    }
}

fn simulate(spec: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut spec = match spec {
        Some(p) => SimSpec::from_toml(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SimSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let sim = simulate_panel(&spec)?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("panel.csv"), sim.panel_csv())?;
    std::fs::write(out.join("truth.csv"), sim.truth_csv())?;
    std::fs::write(out.join("areas.geojson"), serde_json::to_string(&sim.geojson())?)?;
    println!(
        "simulated {} regions x {} months ({} rows) into {}",
        sim.panel.n_regions(),
        sim.panel.n_times(),
        sim.panel.len(),
        out.display()
    );
    Ok(())
}

fn run(cfg: RunConfig) -> Result<bool> {
    let report = run_pipeline(&cfg)?;
    for stage in report.manifest["stages"].as_array().into_iter().flatten() {
        println!("{:<10} {}", stage["stage"].as_str().unwrap_or(""), stage["status"].as_str().unwrap_or(""));
    }
    if let Some(e) = &report.error {
        eprintln!("error: {e}");
    }
    if cfg.stages == [Stage::Adjacency] {
        let summary = std::fs::read_to_string(cfg.out.join("adjacency_summary.txt")).unwrap_or_default();
        print!("{summary}");
    }
    println!("outputs in {}", cfg.out.display());
    Ok(report.success)
}

fn dispatch(cli: Cli) -> Result<bool> {
    let workers = cli.workers;
    let cfg = match cli.command {
        Command::Simulate { spec, out, seed } => {
            simulate(spec, out, seed)?;
            return Ok(true);
        }
        Command::Adjacency(c) => c.run_config(workers, vec![Stage::Adjacency])?,
        Command::Fit(c) => c.run_config(workers, vec![Stage::Fit])?,
        Command::Map(c) => c.run_config(workers, vec![Stage::Map])?,
        Command::Lisa { common, lisa, forecast } => {
            let mut cfg = common.run_config(workers, vec![Stage::Lisa])?;
            lisa.apply(&mut cfg)?;
            forecast.apply(&mut cfg)?;
            cfg
        }
        Command::Forecast { common, forecast } => {
            let mut cfg = common.run_config(workers, vec![Stage::Forecast])?;
            forecast.apply(&mut cfg)?;
            cfg
        }
        Command::Pipeline { common, lisa, forecast, stages } => {
            let stages = match stages {
                Some(list) => list.iter().map(|s| s.trim().parse::<Stage>()).collect::<riskmap::Result<Vec<_>>>()?,
                None => Stage::ALL.to_vec(),
            };
            let mut cfg = common.run_config(workers, stages)?;
            lisa.apply(&mut cfg)?;
            forecast.apply(&mut cfg)?;
            cfg
        }
    };
    run(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = (|| -> Result<bool> {
        match cli.workers {
            Some(0) => bail!("--workers must be positive"),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
                pool.install(|| dispatch(cli))
            }
            None => dispatch(cli),
        }
    })();
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
