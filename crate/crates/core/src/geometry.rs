//! Areal geometry: polygon ingestion, Queen contiguity, connected
//! components and the per-component ICAR scaling constant.

use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, SymmetricEigen};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::io::csv_field;
use crate::sparsela::{SparseSym, TripletBuilder};

pub type Ring = Vec<[f64; 2]>;

#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub exterior: Ring,
    pub holes: Vec<Ring>,
}

impl Polygon {
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            exterior: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]],
            holes: Vec::new(),
        }
    }

    /// Planar area in squared coordinate units (holes subtracted).
    pub fn area(&self) -> f64 {
        ring_area(&self.exterior).abs() - self.holes.iter().map(|h| ring_area(h).abs()).sum::<f64>()
    }

    fn vertices(&self) -> impl Iterator<Item = &[f64; 2]> {
        self.exterior.iter().chain(self.holes.iter().flatten())
    }
}

fn ring_area(ring: &[[f64; 2]]) -> f64 {
    let mut s = 0.0;
    for w in ring.windows(2) {
        s += w[0][0] * w[1][1] - w[1][0] * w[0][1];
    }
    0.5 * s
}

/// Unit of the projected coordinates of the input polygons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoordUnit {
    #[default]
    Meters,
    Kilometers,
}

impl CoordUnit {
    fn km2_per_unit2(self) -> f64 {
        match self {
            CoordUnit::Meters => 1e-6,
            CoordUnit::Kilometers => 1.0,
        }
    }
}

impl std::str::FromStr for CoordUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" | "meters" | "metre" | "meter" => Ok(CoordUnit::Meters),
            "km" | "kilometers" | "kilometre" => Ok(CoordUnit::Kilometers),
            other => Err(Error::InvalidArgument(format!("unknown coordinate unit {other:?}"))),
        }
    }
}

/// One input region: identifier, its polygons, and the original feature
/// properties (kept so output GeoJSON can echo them).
#[derive(Debug, Clone)]
pub struct Region {
    pub id: String,
    pub polygons: Vec<Polygon>,
    pub properties: Map<String, Value>,
}

impl Region {
    pub fn area(&self) -> f64 {
        self.polygons.iter().map(Polygon::area).sum()
    }

    pub fn to_geometry_json(&self) -> Value {
        let poly = |p: &Polygon| {
            let mut rings = vec![p.exterior.clone()];
            rings.extend(p.holes.iter().cloned());
            json!(rings)
        };
        if self.polygons.len() == 1 {
            json!({"type": "Polygon", "coordinates": poly(&self.polygons[0])})
        } else {
            let all: Vec<Value> = self.polygons.iter().map(poly).collect();
            json!({"type": "MultiPolygon", "coordinates": all})
        }
    }
}

/// Reads regions from a GeoJSON `FeatureCollection`, in feature order.
pub fn load_polygons(geo: &Value, id_field: &str) -> Result<Vec<Region>> {
    let features = geo
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Ingestion("not a FeatureCollection: no features array".into()))?;
    let mut seen = HashSet::new();
    let mut regions = Vec::with_capacity(features.len());
    for (idx, feature) in features.iter().enumerate() {
        let properties = feature
            .get("properties")
            .and_then(Value::as_object)
            .cloned()
            .unwrap_or_default();
        let id = match properties.get(id_field) {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(Error::Ingestion(format!("feature {idx}: id field absent"))),
        };
        if !seen.insert(id.clone()) {
            return Err(Error::Ingestion(format!("duplicate region id: {id}")));
        }
        let polygons = parse_geometry(feature.get("geometry"))
            .map_err(|e| Error::Geometry(format!("region {id}: {e}")))?;
        let region = Region { id, polygons, properties };
        if !(region.area() > 0.0) {
            return Err(Error::Geometry(format!("region {}: empty geometry (zero area)", region.id)));
        }
        regions.push(region);
    }
    if regions.is_empty() {
        return Err(Error::Ingestion("feature collection is empty".into()));
    }
    Ok(regions)
}

pub fn load_polygons_str(text: &str, id_field: &str) -> Result<Vec<Region>> {
    let v: Value = serde_json::from_str(text)
        .map_err(|e| Error::Ingestion(format!("invalid GeoJSON: {e}")))?;
    load_polygons(&v, id_field)
}

fn parse_geometry(geom: Option<&Value>) -> std::result::Result<Vec<Polygon>, String> {
    let geom = geom.filter(|g| !g.is_null()).ok_or("missing geometry")?;
    let kind = geom.get("type").and_then(Value::as_str).ok_or("geometry without type")?;
    let coords = geom.get("coordinates").ok_or("geometry without coordinates")?;
    match kind {
        "Polygon" => Ok(vec![parse_polygon(coords)?]),
        "MultiPolygon" => {
            let parts = coords.as_array().ok_or("MultiPolygon coordinates not an array")?;
            if parts.is_empty() {
                return Err("empty MultiPolygon".into());
            }
            parts.iter().map(parse_polygon).collect()
        }
        other => Err(format!("unsupported geometry type {other}")),
    }
}

fn parse_polygon(v: &Value) -> std::result::Result<Polygon, String> {
    let rings = v.as_array().ok_or("polygon coordinates not an array")?;
    let mut parsed = rings.iter().map(parse_ring).collect::<std::result::Result<Vec<_>, _>>()?;
    if parsed.is_empty() {
        return Err("polygon without rings".into());
    }
    let exterior = parsed.remove(0);
    Ok(Polygon { exterior, holes: parsed })
}

fn parse_ring(v: &Value) -> std::result::Result<Ring, String> {
    let pts = v.as_array().ok_or("ring not an array")?;
    let ring: Ring = pts
        .iter()
        .map(|p| {
            let a = p.as_array().ok_or("position not an array")?;
            match (a.first().and_then(Value::as_f64), a.get(1).and_then(Value::as_f64)) {
                (Some(x), Some(y)) if x.is_finite() && y.is_finite() => Ok([x, y]),
                _ => Err("position without finite x/y".to_string()),
            }
        })
        .collect::<std::result::Result<_, _>>()?;
    if ring.len() < 4 || ring.first() != ring.last() {
        return Err("ring must be closed with at least 4 positions".into());
    }
    Ok(ring)
}

/// Queen contiguity: regions `i` and `j` are neighbours iff their
/// boundaries share a point, detected as coinciding vertices or a vertex of
/// one lying on an edge of the other (exactly for `tolerance == 0`, within
/// `tolerance` otherwise). Returns sorted undirected edges `(i, j)`
/// with `i < j`.
pub fn queen_adjacency(regions: &[Region], tolerance: f64) -> Result<Vec<(usize, usize)>> {
    if !(tolerance >= 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be >= 0, got {tolerance}")));
    }
    let mut edges = HashSet::new();
    if tolerance == 0.0 {
        let mut owners: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
        for (r, region) in regions.iter().enumerate() {
            for p in region.polygons.iter().flat_map(Polygon::vertices) {
                let key = (canonical_bits(p[0]), canonical_bits(p[1]));
                let list = owners.entry(key).or_default();
                if list.last() != Some(&r) {
                    list.push(r);
                }
            }
        }
        for list in owners.values() {
            add_clique(&mut edges, list);
        }
    } else {
        // snap to a grid of cell size `tolerance`, compare against the 3x3 block
        let mut cells: HashMap<(i64, i64), Vec<(usize, [f64; 2])>> = HashMap::new();
        for (r, region) in regions.iter().enumerate() {
            for p in region.polygons.iter().flat_map(Polygon::vertices) {
                let key = ((p[0] / tolerance).floor() as i64, (p[1] / tolerance).floor() as i64);
                cells.entry(key).or_default().push((r, *p));
            }
        }
        let tol2 = tolerance * tolerance;
        for (&(cx, cy), pts) in &cells {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(other) = cells.get(&(cx + dx, cy + dy)) else { continue };
                    for &(ra, pa) in pts {
                        for &(rb, pb) in other {
                            if ra != rb {
                                let d2 = (pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2);
                                if d2 <= tol2 {
                                    edges.insert((ra.min(rb), ra.max(rb)));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    add_vertex_on_segment_contacts(regions, tolerance, &mut edges);
    let mut out: Vec<_> = edges.into_iter().collect();
    out.sort_unstable();
    Ok(out)
}

fn bbox(region: &Region) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in region.polygons.iter().flat_map(Polygon::vertices) {
        b = [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])];
    }
    b
}

fn touches_segment(p: &[f64; 2], a: &[f64; 2], b: &[f64; 2], tolerance: f64) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    if tolerance == 0.0 {
        let cross = dx * (p[1] - a[1]) - dy * (p[0] - a[0]);
        return cross == 0.0
            && p[0] >= a[0].min(b[0])
            && p[0] <= a[0].max(b[0])
            && p[1] >= a[1].min(b[1])
            && p[1] <= a[1].max(b[1]);
    }
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (ex, ey) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    ex * ex + ey * ey <= tolerance * tolerance
}

fn vertex_touches(a: &Region, b: &Region, tolerance: f64) -> bool {
    let rings_b: Vec<&Ring> = b.polygons.iter().flat_map(|p| std::iter::once(&p.exterior).chain(&p.holes)).collect();
    a.polygons.iter().flat_map(Polygon::vertices).any(|p| {
        rings_b.iter().any(|ring| ring.windows(2).any(|w| touches_segment(p, &w[0], &w[1], tolerance)))
    })
}

/// Contacts where a vertex of one region lies on an edge of another
/// without a matching vertex (T-junctions).
fn add_vertex_on_segment_contacts(regions: &[Region], tolerance: f64, edges: &mut HashSet<(usize, usize)>) {
    let boxes: Vec<[f64; 4]> = regions.iter().map(bbox).collect();
    for i in 0..regions.len() {
        for j in i + 1..regions.len() {
            let (a, b) = (&boxes[i], &boxes[j]);
            let overlap = a[0] <= b[2] + tolerance
                && b[0] <= a[2] + tolerance
                && a[1] <= b[3] + tolerance
                && b[1] <= a[3] + tolerance;
            if overlap
                && !edges.contains(&(i, j))
                && (vertex_touches(&regions[i], &regions[j], tolerance)
                    || vertex_touches(&regions[j], &regions[i], tolerance))
            {
                edges.insert((i, j));
            }
        }
    }
}

fn canonical_bits(x: f64) -> u64 {
    // -0.0 and 0.0 are the same coordinate
    if x == 0.0 {
        0
    } else {
        x.to_bits()
    }
}

fn add_clique(edges: &mut HashSet<(usize, usize)>, members: &[usize]) {
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            if i != j {
                edges.insert((i.min(j), i.max(j)));
            }
        }
    }
}

/// Region graph with Queen adjacency, areas and ICAR scaling.
///
/// Index order of `region_ids` is the canonical latent ordering used by
/// every downstream block.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaGraph {
    region_ids: Vec<String>,
    neighbors: Vec<Vec<usize>>,
    areas_km2: Vec<f64>,
    components: Vec<Vec<usize>>,
    component_of: Vec<usize>,
    icar_scale: Vec<Option<f64>>,
}

impl AreaGraph {
    pub fn new(region_ids: Vec<String>, edges: &[(usize, usize)], areas_km2: Vec<f64>) -> Result<Self> {
        let n = region_ids.len();
        if areas_km2.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: areas_km2.len() });
        }
        let mut uniq = HashSet::new();
        for id in &region_ids {
            if !uniq.insert(id) {
                return Err(Error::Ingestion(format!("duplicate region id: {id}")));
            }
        }
        for (id, &a) in region_ids.iter().zip(&areas_km2) {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::Geometry(format!("region {id}: area must be positive, got {a}")));
            }
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!("edge ({i},{j}) out of range")));
            }
            if i == j {
                continue;
            }
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
            nb.dedup();
        }
        let (components, component_of) = connected_components(&neighbors);
        let mut graph = Self {
            region_ids,
            neighbors,
            areas_km2,
            components,
            component_of,
            icar_scale: Vec::new(),
        };
        graph.icar_scale = icar_scaling(&graph);
        Ok(graph)
    }

    /// Builds the graph from polygons: Queen adjacency at `tolerance` and
    /// areas converted to km².
    pub fn from_regions(regions: &[Region], tolerance: f64, unit: CoordUnit) -> Result<Self> {
        let edges = queen_adjacency(regions, tolerance)?;
        let ids = regions.iter().map(|r| r.id.clone()).collect();
        let areas = regions.iter().map(|r| r.area() * unit.km2_per_unit2()).collect();
        Self::new(ids, &edges, areas)
    }

    pub fn len(&self) -> usize {
        self.region_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.region_ids.is_empty()
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.region_ids.iter().position(|r| r == id)
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn areas_km2(&self) -> &[f64] {
        &self.areas_km2
    }

    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn component_of(&self, i: usize) -> usize {
        self.component_of[i]
    }

    /// Scaling constant per component; `None` flags a singleton, where
    /// the structured effect is disabled.
    pub fn icar_scale(&self) -> &[Option<f64>] {
        &self.icar_scale
    }

    pub fn is_singleton(&self, i: usize) -> bool {
        self.components[self.component_of[i]].len() < 2
    }

    /// Undirected edges `(i, j)`, `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for (i, nb) in self.neighbors.iter().enumerate() {
            e.extend(nb.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        e
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// ICAR structure matrix: degree on the diagonal, -1 per edge.
    pub fn icar_structure(&self) -> SparseSym {
        let mut b = TripletBuilder::new(self.len());
        for (i, nb) in self.neighbors.iter().enumerate() {
            b.add(i, i, nb.len() as f64);
            for &j in nb.iter().filter(|&&j| j < i) {
                b.add(i, j, -1.0);
            }
        }
        b.build()
    }

    /// `"n_regions, n_edges, n_components"` (undirected edges), plus the
    /// directed link count since sources differ on which one they quote.
    pub fn summary_line(&self) -> String {
        format!(
            "{}, {}, {} (directed links: {})",
            self.len(),
            self.n_edges(),
            self.components.len(),
            2 * self.n_edges()
        )
    }

    /// Edge list CSV with header `id_i,id_j`.
    pub fn edges_csv(&self) -> String {
        let mut s = String::from("id_i,id_j\n");
        for (i, j) in self.edges() {
            s.push_str(&csv_field(&self.region_ids[i]));
            s.push(',');
            s.push_str(&csv_field(&self.region_ids[j]));
            s.push('\n');
        }
        s
    }
}

fn connected_components(neighbors: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let n = neighbors.len();
    let mut component_of = vec![usize::MAX; n];
    let mut components = Vec::new();
    for start in 0..n {
        if component_of[start] != usize::MAX {
            continue;
        }
        let c = components.len();
        let mut members = vec![start];
        component_of[start] = c;
        let mut head = 0;
        while head < members.len() {
            let v = members[head];
            head += 1;
            for &u in &neighbors[v] {
                if component_of[u] == usize::MAX {
                    component_of[u] = c;
                    members.push(u);
                }
            }
        }
        members.sort_unstable();
        components.push(members);
    }
    (components, component_of)
}

/// Per-component ICAR scaling `κ_c`: `u·√κ_c` has unit geometric-mean
/// marginal variance under the sum-to-zero constrained ICAR with unit
/// precision. The constrained covariance of a connected component equals
/// the Moore–Penrose pseudo-inverse of its Laplacian, computed densely.
pub fn icar_scaling(graph: &AreaGraph) -> Vec<Option<f64>> {
    graph
        .components
        .iter()
        .map(|members| {
            if members.len() < 2 {
                return None;
            }
            let m = members.len();
            let local: HashMap<usize, usize> = members.iter().enumerate().map(|(a, &i)| (i, a)).collect();
            let mut r = DMatrix::<f64>::zeros(m, m);
            for (a, &i) in members.iter().enumerate() {
                r[(a, a)] = graph.neighbors[i].len() as f64;
                for j in &graph.neighbors[i] {
                    r[(a, local[j])] = -1.0;
                }
            }
            let eig = SymmetricEigen::new(r);
            let tol = 1e-9 * eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
            let mut mean_log = 0.0;
            for a in 0..m {
                let mut v = 0.0;
                for (k, &lam) in eig.eigenvalues.iter().enumerate() {
                    if lam > tol {
                        v += eig.eigenvectors[(a, k)].powi(2) / lam;
                    }
                }
                mean_log += v.ln();
            }
            Some(1.0 / (mean_log / m as f64).exp())
        })
        .collect()
}

/// Rectangular lattice of cells with the given column widths and row
/// heights (same units as the output coordinates). Cells are numbered
/// row-major from the bottom-left; ids are `r{row}c{col}`.
pub fn lattice_regions(col_widths: &[f64], row_heights: &[f64]) -> Vec<Region> {
    let xs: Vec<f64> = std::iter::once(0.0)
        .chain(col_widths.iter().scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        }))
        .collect();
    let ys: Vec<f64> = std::iter::once(0.0)
        .chain(row_heights.iter().scan(0.0, |acc, h| {
            *acc += h;
            Some(*acc)
        }))
        .collect();
    let mut out = Vec::with_capacity(col_widths.len() * row_heights.len());
    for r in 0..row_heights.len() {
        for c in 0..col_widths.len() {
            let id = format!("r{r}c{c}");
            let mut properties = Map::new();
            properties.insert("id".into(), Value::String(id.clone()));
            out.push(Region {
                id,
                polygons: vec![Polygon::rectangle(xs[c], ys[r], xs[c + 1], ys[r + 1])],
                properties,
            });
        }
    }
    out
}

/// GeoJSON FeatureCollection of `regions`, each feature's properties being
/// the original ones merged with `extra[i]`.
pub fn regions_to_geojson(regions: &[Region], extra: &[Map<String, Value>]) -> Value {
    let features: Vec<Value> = regions
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut props = r.properties.clone();
            if let Some(e) = extra.get(i) {
                for (k, v) in e {
                    props.insert(k.clone(), v.clone());
                }
            }
            json!({"type": "Feature", "properties": props, "geometry": r.to_geometry_json()})
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(n: usize) -> Vec<Region> {
        lattice_regions(&vec![1.0; n], &vec![1.0; n])
    }

    fn feature(name: Option<&str>, x0: f64) -> Value {
        let props = match name {
            Some(n) => json!({"name": n}),
            None => json!({}),
        };
        json!({"type": "Feature", "properties": props, "geometry": {"type": "Polygon",
            "coordinates": [[[x0, 0.0], [x0 + 1.0, 0.0], [x0 + 1.0, 1.0], [x0, 1.0], [x0, 0.0]]]}})
    }

    #[test]
    fn loads_in_file_order() {
        let fc = json!({"type": "FeatureCollection", "features": [
            feature(Some("d"), 0.0), feature(Some("a"), 1.0), feature(Some("c"), 2.0), feature(Some("b"), 3.0)]});
        let regions = load_polygons(&fc, "name").unwrap();
        let ids: Vec<_> = regions.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["d", "a", "c", "b"]);
    }

    #[test]
    fn missing_id_names_the_feature() {
        let fc = json!({"type": "FeatureCollection", "features": [
            feature(Some("a"), 0.0), feature(Some("b"), 1.0), feature(None, 2.0)]});
        let err = load_polygons(&fc, "name").unwrap_err().to_string();
        assert!(err.contains("feature 2: id field absent"), "{err}");
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let fc = json!({"type": "FeatureCollection", "features": [
            feature(Some("A"), 0.0), feature(Some("B"), 1.0), feature(Some("A"), 2.0)]});
        let err = load_polygons(&fc, "name").unwrap_err().to_string();
        assert!(err.contains("duplicate region id: A"), "{err}");
    }

    #[test]
    fn empty_geometry_names_region() {
        let fc = json!({"type": "FeatureCollection", "features": [
            {"type": "Feature", "properties": {"name": "Z"}, "geometry": null}]});
        let err = load_polygons(&fc, "name").unwrap_err().to_string();
        assert!(err.contains("region Z"), "{err}");
    }

    #[test]
    fn two_by_two_grid_is_complete() {
        let edges = queen_adjacency(&grid(2), 0.0).unwrap();
        assert_eq!(edges.len(), 6);
        let g = AreaGraph::from_regions(&grid(2), 0.0, CoordUnit::Kilometers).unwrap();
        assert!((0..4).all(|i| g.degree(i) == 3));
    }

    #[test]
    fn three_by_three_grid_counts() {
        let g = AreaGraph::from_regions(&grid(3), 0.0, CoordUnit::Kilometers).unwrap();
        assert_eq!(g.n_edges(), 20);
        assert_eq!(g.degree(4), 8);
        for corner in [0, 2, 6, 8] {
            assert_eq!(g.degree(corner), 3);
        }
    }

    #[test]
    fn disjoint_squares_have_no_edges() {
        let fc = json!({"type": "FeatureCollection", "features": [
            feature(Some("a"), 0.0), feature(Some("b"), 2.0)]});
        let regions = load_polygons(&fc, "name").unwrap();
        let g = AreaGraph::from_regions(&regions, 0.0, CoordUnit::Kilometers).unwrap();
        assert_eq!(g.n_edges(), 0);
        assert_eq!(g.components().len(), 2);
        assert!(g.icar_scale().iter().all(Option::is_none));
    }

    #[test]
    fn tolerance_snaps_near_vertices() {
        let mut regions = grid(2);
        // nudge one square's corner off the shared point
        regions[3].polygons[0].exterior[0] = [1.0 + 1e-7, 1.0];
        regions[3].polygons[0].exterior[4] = [1.0 + 1e-7, 1.0];
        let exact = queen_adjacency(&regions, 0.0).unwrap();
        let snapped = queen_adjacency(&regions, 1e-6).unwrap();
        assert!(exact.len() < snapped.len());
        assert_eq!(snapped.len(), 6);
    }

    #[test]
    fn meters_convert_to_square_kilometers() {
        let regions = lattice_regions(&[1000.0, 2000.0], &[500.0]);
        let g = AreaGraph::from_regions(&regions, 0.0, CoordUnit::Meters).unwrap();
        assert_relative_eq!(g.areas_km2()[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(g.areas_km2()[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn icar_structure_annihilates_constants() {
        let g = AreaGraph::from_regions(&grid(4), 0.0, CoordUnit::Kilometers).unwrap();
        let r = g.icar_structure();
        assert!(r.mul_vec(&vec![1.0; 16]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn complete_graph_scaling_is_closed_form() {
        // K_n Laplacian pseudo-inverse diagonal is (n-1)/n²
        let n = 5;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j));
            }
        }
        let ids = (0..n).map(|i| i.to_string()).collect();
        let g = AreaGraph::new(ids, &edges, vec![1.0; n]).unwrap();
        let k = g.icar_scale()[0].unwrap();
        assert_relative_eq!(k, (n * n) as f64 / (n - 1) as f64, epsilon = 1e-10);
    }

    #[test]
    fn geojson_roundtrip_keeps_properties() {
        let regions = grid(2);
        let mut extra = vec![Map::new(); 4];
        extra[1].insert("rr_mean".into(), json!(1.5));
        let out = regions_to_geojson(&regions, &extra);
        let back = load_polygons(&out, "id").unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[1].properties["rr_mean"], json!(1.5));
    }
}
