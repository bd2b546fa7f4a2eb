//! Forward simulation from the model on a rectangular lattice.
//!
//! Every random block draws from its own ChaCha20 stream derived from the
//! seed, so adding or resizing a block never perturbs the others:
//! covariates (1), cell sizes (2), structured effect (3), unstructured
//! effect (4), trend (5), seasonal (6), counts (7).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{lattice_regions, regions_to_geojson, AreaGraph, CoordUnit, Region};
use crate::io::fmt_f64;
use crate::model::{cyclic_structure, mean_sd, month_of, rw1_structure, ObservationPanel};
use crate::sparsela::{CholFactor, Constraints, Kriging, SparseSym, TripletBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    /// Nominal cell side in km.
    pub cell_km: f64,
    /// Column widths and row heights are drawn uniformly in
    /// `cell_km · [1 − spread, 1 + spread]`.
    pub area_spread: f64,
    pub n_times: usize,
    /// First time label, `YYYY-MM`.
    pub start: String,
    pub intercept: f64,
    /// Coefficients of the standardized covariates.
    pub beta: Vec<f64>,
    pub prec_bym2: f64,
    pub phi: f64,
    pub trend: bool,
    pub prec_rw1: f64,
    pub seasonal: bool,
    pub period: usize,
    pub prec_seasonal: f64,
    pub jitter: f64,
    /// Regions whose combined spatial effect `b` is set to a fixed value
    /// after sampling.
    pub b_override: BTreeMap<String, f64>,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            rows: 10,
            cols: 10,
            cell_km: 1.0,
            area_spread: 0.5,
            n_times: 24,
            start: "2015-01".into(),
            intercept: 1.0,
            beta: vec![0.5, -0.5],
            prec_bym2: 2.0,
            phi: 0.6,
            trend: true,
            prec_rw1: 20.0,
            seasonal: true,
            period: 12,
            prec_seasonal: 10.0,
            jitter: 1e-5,
            b_override: BTreeMap::new(),
        }
    }
}

impl SimSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("simulation spec: {m}")));
        if self.rows == 0 || self.cols == 0 || self.rows * self.cols < 2 {
            return bad("lattice needs at least 2 cells");
        }
        if self.n_times == 0 || (self.trend && self.n_times < 2) {
            return bad("n_times must be >= 2 with a trend");
        }
        if !(self.cell_km > 0.0) || !(0.0..1.0).contains(&self.area_spread) {
            return bad("need cell_km > 0 and 0 <= area_spread < 1");
        }
        if !(self.phi >= 0.0 && self.phi <= 1.0) {
            return bad("phi must lie in [0, 1]");
        }
        for (name, v) in [("prec_bym2", self.prec_bym2), ("prec_rw1", self.prec_rw1), ("prec_seasonal", self.prec_seasonal)] {
            if !(v > 0.0) {
                return bad(&format!("{name} must be positive (use a large value for a degenerate limit)"));
            }
        }
        if self.seasonal && self.period < 2 {
            return bad("period must be >= 2");
        }
        if month_of(&self.start).is_none() {
            return bad("start must be YYYY-MM");
        }
        Ok(())
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.beta.len()).map(|k| format!("x{k}")).collect()
    }
}

/// Ground truth behind a simulated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub b: Vec<f64>,
    pub u_star: Vec<f64>,
    pub v: Vec<f64>,
    pub f: Vec<f64>,
    pub s: Vec<f64>,
    /// Linear predictor (offset included) per panel row.
    pub eta: Vec<f64>,
}

impl SimTruth {
    /// Expected counts `E·e^η` per panel row.
    pub fn rates(&self) -> Vec<f64> {
        self.eta.iter().map(|e| e.exp()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub spec: SimSpec,
    pub regions: Vec<Region>,
    pub graph: AreaGraph,
    pub panel: ObservationPanel,
    pub truth: SimTruth,
}

fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normals(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Time labels `YYYY-MM` starting at `start`.
pub fn month_labels(start: &str, n: usize) -> Result<Vec<String>> {
    let (y, _) = start.split_once('-').ok_or_else(|| Error::Config(format!("bad month {start:?}")))?;
    let year: i64 = y.parse().map_err(|_| Error::Config(format!("bad month {start:?}")))?;
    let m0 = month_of(start).ok_or_else(|| Error::Config(format!("bad month {start:?}")))? as i64;
    Ok((0..n as i64)
        .map(|k| {
            let total = year * 12 + m0 + k;
            format!("{:04}-{:02}", total.div_euclid(12), total.rem_euclid(12) + 1)
        })
        .collect())
}

/// Draws `x ~ N(0, Q⁻¹)` conditioned on `A x = 0` (sample, then krige).
pub fn sample_constrained(q: &SparseSym, constraints: &Constraints, z: &[f64]) -> Result<Vec<f64>> {
    let factor = CholFactor::new(q)?;
    let x = factor.sample_from_standard(z)?;
    Ok(Kriging::new(&factor, constraints)?.correct_mean(&x))
}

/// Intrinsic block `τ (R + ε I)` with `ε` relative to the mean diagonal.
fn jittered(structure: &SparseSym, tau: f64, jitter: f64) -> SparseSym {
    let n = structure.dim();
    let eps = jitter * structure.diag().iter().sum::<f64>() / n as f64;
    let mut b = TripletBuilder::new(n);
    b.add_block(0, structure, tau);
    for i in 0..n {
        b.add(i, i, tau * eps);
    }
    b.build()
}

pub fn simulate_panel(spec: &SimSpec) -> Result<Simulation> {
    spec.validate()?;
    let (nr, nc, t) = (spec.rows, spec.cols, spec.n_times);
    let n = nr * nc;
    let p = spec.beta.len();
    let rows = n * t;

    let mut rng = stream(spec.seed, 2);
    let lo = spec.cell_km * (1.0 - spec.area_spread);
    let hi = spec.cell_km * (1.0 + spec.area_spread);
    let mut draw = |k: usize| -> Vec<f64> {
        (0..k).map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo }).collect()
    };
    let widths = draw(nc);
    let heights = draw(nr);
    let regions = lattice_regions(&widths, &heights);
    let graph = AreaGraph::from_regions(&regions, 0.0, CoordUnit::Kilometers)?;

    let mut rng = stream(spec.seed, 1);
    let mut covariates = Vec::with_capacity(p);
    for name in spec.covariate_names() {
        let raw = normals(&mut rng, rows);
        let (m, s) = mean_sd(&raw);
        covariates.push((name, raw.iter().map(|x| (x - m) / s).collect::<Vec<f64>>()));
    }

    // structured effect: scaled ICAR per component, singletons N(0, 1)
    let mut rng = stream(spec.seed, 3);
    let z = normals(&mut rng, n);
    let mut inv_kappa = vec![0.0; n];
    for (c, members) in graph.components().iter().enumerate() {
        if let Some(k) = graph.icar_scale()[c] {
            for &i in members {
                inv_kappa[i] = 1.0 / k;
            }
        }
    }
    let mut qb = TripletBuilder::new(n);
    let mut cons = Constraints::none(n);
    let structure = graph.icar_structure();
    let mean_diag = (0..n).map(|i| graph.degree(i) as f64 * inv_kappa[i]).sum::<f64>() / n as f64;
    for (r, c, v) in structure.iter() {
        qb.add(r, c, v * inv_kappa[r]);
    }
    for i in 0..n {
        qb.add(i, i, if graph.is_singleton(i) { 1.0 } else { spec.jitter * mean_diag });
    }
    for (c, members) in graph.components().iter().enumerate() {
        if graph.icar_scale()[c].is_some() {
            cons.push_sum_to_zero(members.iter().copied());
        }
    }
    let u_star = sample_constrained(&qb.build(), &cons, &z)?;

    let mut rng = stream(spec.seed, 4);
    let v = normals(&mut rng, n);
    let sd_b = spec.prec_bym2.powf(-0.5);
    let mut b: Vec<f64> = u_star
        .iter()
        .zip(&v)
        .map(|(u, v)| sd_b * ((1.0 - spec.phi).sqrt() * v + spec.phi.sqrt() * u))
        .collect();
    for (id, &value) in &spec.b_override {
        let i = graph
            .index_of(id)
            .ok_or_else(|| Error::Config(format!("b_override names unknown region {id:?}")))?;
        b[i] = value;
    }

    let mut rng = stream(spec.seed, 5);
    let f = if spec.trend {
        let z = normals(&mut rng, t);
        let mut c = Constraints::none(t);
        c.push_sum_to_zero(0..t);
        sample_constrained(&jittered(&rw1_structure(t), spec.prec_rw1, spec.jitter), &c, &z)?
    } else {
        Vec::new()
    };

    let mut rng = stream(spec.seed, 6);
    let origin = month_of(&spec.start).unwrap_or(0);
    let s = if spec.seasonal {
        let m = spec.period;
        let z = normals(&mut rng, m);
        let mut c = Constraints::none(m);
        c.push_sum_to_zero(0..m);
        sample_constrained(&jittered(&cyclic_structure(m), spec.prec_seasonal, spec.jitter), &c, &z)?
    } else {
        Vec::new()
    };

    let mut eta = Vec::with_capacity(rows);
    for i in 0..n {
        let log_e = graph.areas_km2()[i].ln();
        for tt in 0..t {
            let r = i * t + tt;
            let mut e = log_e + spec.intercept + b[i];
            for (k, (_, x)) in covariates.iter().enumerate() {
                e += spec.beta[k] * x[r];
            }
            if spec.trend {
                e += f[tt];
            }
            if spec.seasonal {
                e += s[(origin + tt) % spec.period];
            }
            eta.push(e);
        }
    }

    let mut rng = stream(spec.seed, 7);
    let mut cases = Vec::with_capacity(rows);
    for &e in &eta {
        let mu = e.exp();
        let y = if mu > 0.0 {
            Poisson::new(mu).map_err(|err| Error::Model(format!("Poisson mean {mu}: {err}")))?.sample(&mut rng)
        } else {
            0.0
        };
        cases.push(y as u64);
    }

    let panel = ObservationPanel::with_area_offset(
        graph.region_ids().to_vec(),
        month_labels(&spec.start, t)?,
        cases,
        covariates,
        graph.areas_km2(),
    )?;
    Ok(Simulation {
        spec: spec.clone(),
        regions,
        graph,
        panel,
        truth: SimTruth { b, u_star, v, f, s, eta },
    })
}

impl Simulation {
    /// Long-format panel CSV: `area_id,time,cases,<covariates>`. Covariates
    /// are written on their standardized scale.
    pub fn panel_csv(&self) -> String {
        let p = &self.panel;
        let mut out = String::from("area_id,time,cases");
        for name in p.covariate_names() {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for r in 0..p.len() {
            let i = p.region_of(r);
            let t = p.time_of(r);
            out.push_str(&format!("{},{},{}", p.region_ids()[i], p.time_labels()[t], p.cases()[r]));
            for k in 0..p.covariate_names().len() {
                out.push(',');
                out.push_str(&fmt_f64(p.covariate(k)[r]));
            }
            out.push('\n');
        }
        out
    }

    /// `block,index,label,value` rows for every true parameter and latent
    /// element.
    pub fn truth_csv(&self) -> String {
        let spec = &self.spec;
        let mut out = String::from("block,index,label,value\n");
        let mut push = |block: &str, idx: usize, label: &str, v: f64| {
            out.push_str(&format!("{block},{idx},{label},{}\n", fmt_f64(v)));
        };
        push("intercept", 0, "(Intercept)", spec.intercept);
        for (k, name) in spec.covariate_names().iter().enumerate() {
            push("beta", k, name, spec.beta[k]);
        }
        push("hyper", 0, "prec_bym2", spec.prec_bym2);
        push("hyper", 1, "phi", spec.phi);
        if spec.trend {
            push("hyper", 2, "prec_rw1", spec.prec_rw1);
        }
        if spec.seasonal {
            push("hyper", 3, "prec_seasonal", spec.prec_seasonal);
        }
        let ids = self.graph.region_ids();
        for (i, id) in ids.iter().enumerate() {
            push("b", i, id, self.truth.b[i]);
        }
        for (i, id) in ids.iter().enumerate() {
            push("u_star", i, id, self.truth.u_star[i]);
        }
        for (i, id) in ids.iter().enumerate() {
            push("v", i, id, self.truth.v[i]);
        }
        let labels = self.panel.time_labels();
        for (k, v) in self.truth.f.iter().enumerate() {
            push("f", k, &labels[k], *v);
        }
        for (k, v) in self.truth.s.iter().enumerate() {
            push("s", k, &format!("season{k}"), *v);
        }
        for (r, e) in self.truth.eta.iter().enumerate() {
            let label = format!("{}@{}", ids[self.panel.region_of(r)], labels[self.panel.time_of(r)]);
            push("eta", r, &label, *e);
        }
        out
    }

    /// Lattice polygons (km coordinates) with an `id` property.
    pub fn geojson(&self) -> Value {
        regions_to_geojson(&self.regions, &[])
    }
}
