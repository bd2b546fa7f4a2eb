//! Panel ingestion and small formatting helpers shared by the writers.

use std::collections::{BTreeMap, HashMap};

use crate::config::{CovariateShape, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::AreaGraph;
use crate::model::{month_of, ObservationPanel};
use crate::simulate::month_labels;

/// Numbers in output tables: 17 significant digits, round-trip exact.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Quotes a CSV field when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Renders a table with a header row; string cells are quoted as needed.
pub fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum TimeKey {
    Month(i64),
    Index(i64),
}

fn parse_time(s: &str) -> Option<TimeKey> {
    if let Some(m) = month_of(s) {
        let year: i64 = s[..4].parse().ok()?;
        return Some(TimeKey::Month(year * 12 + m as i64));
    }
    s.parse::<i64>().ok().map(TimeKey::Index)
}

fn parse_cases(s: &str) -> Option<u64> {
    if let Ok(v) = s.parse::<u64>() {
        return Some(v);
    }
    // accept integral floats such as "3.0"
    let f: f64 = s.parse().ok()?;
    (f >= 0.0 && f.fract() == 0.0 && f < 9.0e15).then_some(f as u64)
}

/// Reads a long-format panel CSV (`area_id,time,cases,...`) against the
/// region order of `graph`.
///
/// The time axis spans the observed minimum to maximum; absent
/// `(area, time)` rows become zero counts when `fill_missing_as_zero` is
/// set, otherwise they are an error. Covariates are standardized.
pub fn ingest_panel(text: &str, graph: &AreaGraph, cfg: &ModelConfig) -> Result<ObservationPanel> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Ingestion(format!("panel CSV lacks required column {name:?}")))
    };
    let c_area = col("area_id")?;
    let c_time = col("time")?;
    let c_cases = col("cases")?;
    let c_cov: Vec<usize> = cfg.covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let c_offset = if cfg.offset == "area" { None } else { Some(col(&cfg.offset)?) };

    struct Row {
        region: usize,
        time: TimeKey,
        cases: u64,
        cov: Vec<f64>,
        exposure: Option<f64>,
    }
    let mut rows = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let id = get(c_area);
        let region = graph
            .index_of(id)
            .ok_or_else(|| Error::Ingestion(format!("row {line}: unknown area_id {id:?}")))?;
        let time = parse_time(get(c_time))
            .ok_or_else(|| Error::Ingestion(format!("row {line}: time {:?} is neither YYYY-MM nor an integer", get(c_time))))?;
        let cases = parse_cases(get(c_cases)).ok_or_else(|| {
            Error::Ingestion(format!("row {line}: cases {:?} is not a non-negative integer", get(c_cases)))
        })?;
        let mut cov = Vec::with_capacity(c_cov.len());
        for (name, &c) in cfg.covariates.iter().zip(&c_cov) {
            let cell = get(c);
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Ingestion(format!("row {line}: covariate {name} missing or invalid ({cell:?})")))?;
            cov.push(v);
        }
        let exposure = match c_offset {
            Some(c) => {
                let cell = get(c);
                let e: f64 = cell.parse().ok().filter(|e: &f64| *e > 0.0 && e.is_finite()).ok_or_else(|| {
                    Error::Ingestion(format!("row {line}: exposure {:?} must be positive", cell))
                })?;
                Some(e)
            }
            None => None,
        };
        rows.push(Row { region, time, cases, cov, exposure });
    }
    if rows.is_empty() {
        return Err(Error::Ingestion("panel CSV has no data rows".into()));
    }
    let months = rows.iter().all(|r| matches!(r.time, TimeKey::Month(_)));
    let indices = rows.iter().all(|r| matches!(r.time, TimeKey::Index(_)));
    if !months && !indices {
        return Err(Error::Ingestion("time column mixes YYYY-MM labels and integer indices".into()));
    }
    let key = |t: TimeKey| match t {
        TimeKey::Month(v) | TimeKey::Index(v) => v,
    };
    let t_min = rows.iter().map(|r| key(r.time)).min().unwrap();
    let t_max = rows.iter().map(|r| key(r.time)).max().unwrap();
    let n_t = (t_max - t_min + 1) as usize;
    let n = graph.len();
    let labels: Vec<String> = if months {
        let start = format!("{:04}-{:02}", t_min.div_euclid(12), t_min.rem_euclid(12) + 1);
        month_labels(&start, n_t)?
    } else {
        (t_min..=t_max).map(|v| v.to_string()).collect()
    };

    let mut slot: Vec<Option<usize>> = vec![None; n * n_t];
    for (k, r) in rows.iter().enumerate() {
        let idx = r.region * n_t + (key(r.time) - t_min) as usize;
        if slot[idx].is_some() {
            return Err(Error::Ingestion(format!(
                "row {}: duplicate record for area {:?} at time {}",
                k + 2,
                graph.region_ids()[r.region],
                labels[idx % n_t]
            )));
        }
        slot[idx] = Some(k);
    }

    let describe = |idx: usize| format!("area {:?} at time {}", graph.region_ids()[idx / n_t], labels[idx % n_t]);
    let mut cases = vec![0u64; n * n_t];
    for (idx, s) in slot.iter().enumerate() {
        match s {
            Some(k) => cases[idx] = rows[*k].cases,
            None if cfg.fill_missing_as_zero => {}
            None => return Err(Error::Ingestion(format!("no record for {}", describe(idx)))),
        }
    }

    let mut covariates = Vec::new();
    for (j, name) in cfg.covariates.iter().enumerate() {
        let shape = cfg.shape_of(name);
        let mut by_key: BTreeMap<usize, f64> = BTreeMap::new();
        let key_of = |idx: usize| match shape {
            CovariateShape::Time => idx % n_t,
            CovariateShape::Region => idx / n_t,
            CovariateShape::Panel => idx,
        };
        for (idx, s) in slot.iter().enumerate() {
            if let Some(k) = s {
                let v = rows[*k].cov[j];
                match by_key.get(&key_of(idx)) {
                    Some(&prev) if (prev - v).abs() > 1e-9 * prev.abs().max(1.0) => {
                        return Err(Error::Ingestion(format!(
                            "covariate {name} is declared {shape:?}-shaped but varies ({prev} vs {v} for {})",
                            describe(idx)
                        )));
                    }
                    Some(_) => {}
                    None => {
                        by_key.insert(key_of(idx), v);
                    }
                }
            }
        }
        let mut values = Vec::with_capacity(n * n_t);
        for idx in 0..n * n_t {
            let v = by_key.get(&key_of(idx)).copied().ok_or_else(|| {
                Error::Ingestion(format!("covariate {name} has no value for {}", describe(idx)))
            })?;
            values.push(v);
        }
        covariates.push((name.clone(), values));
    }

    let offsets = match c_offset {
        None => (0..n * n_t).map(|idx| graph.areas_km2()[idx / n_t].ln()).collect(),
        Some(_) => {
            let mut per_region: HashMap<usize, f64> = HashMap::new();
            for (idx, s) in slot.iter().enumerate() {
                if let Some(k) = s {
                    per_region.entry(idx / n_t).or_insert(rows[*k].exposure.unwrap());
                }
            }
            let mut out = Vec::with_capacity(n * n_t);
            for (idx, s) in slot.iter().enumerate() {
                let e = match s {
                    Some(k) => rows[*k].exposure.unwrap(),
                    None => *per_region.get(&(idx / n_t)).ok_or_else(|| {
                        Error::Ingestion(format!("no exposure available for {}", describe(idx)))
                    })?,
                };
                out.push(e.ln());
            }
            out
        }
    };

    ObservationPanel::new(graph.region_ids().to_vec(), labels, cases, covariates, offsets)
}
