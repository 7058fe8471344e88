//! City geometry: an axis-aligned simulation region with a uniform voxel grid,
//! and buildings modelled as extruded prisms (simple 2D footprint polygon swept
//! from the ground up to a roof height).
//!
//! Occlusion is exact, not sampled: a sight segment is clipped against every
//! prism by intersecting its 2D projection with the footprint edges and the
//! resulting parameter intervals with the slab `0 < z < height`. A segment
//! counts as blocked only when it spends a positive-measure stretch of its
//! length inside some prism interior, so grazing contact with a wall or roof
//! plane is still line-of-sight.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

/// Minimum fraction of the segment parameter that must lie inside a prism for
/// the segment to count as blocked. Tangencies produce intervals of zero (or
/// numerically tiny) measure and are deliberately classified as clear.
pub const BLOCK_T_EPS: f64 = 1e-12;

/// Upper bound on the number of grid cells, guarding against accidental (or
/// adversarial) configurations that would try to allocate absurd grids.
pub const MAX_GRID_CELLS: usize = 50_000_000;

// ---------------------------------------------------------------------------
// Region
// ---------------------------------------------------------------------------

/// Axis-aligned box `[q_lower, q_upper]` partitioned into a uniform grid.
///
/// Cell counts per axis are `ceil((upper - lower) / cell_size)`; the last cell
/// of an axis may therefore stick out past `q_upper`. Points exactly on a cell
/// boundary belong to the lower-index cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    q_lower: Vec3,
    q_upper: Vec3,
    cell_size: Vec3,
    counts: [usize; 3],
}

impl Region {
    pub fn new(q_lower: Vec3, q_upper: Vec3, cell_size: Vec3) -> Result<Self> {
        for k in 0..3 {
            if !q_lower[k].is_finite() || !q_upper[k].is_finite() {
                return Err(Error::InvalidInput("region bounds must be finite".into()));
            }
            if !(q_lower[k] < q_upper[k]) {
                return Err(Error::InvalidInput(format!(
                    "region must have positive extent on axis {k} (lower {} >= upper {})",
                    q_lower[k], q_upper[k]
                )));
            }
            if !(cell_size[k] > 0.0) || !cell_size[k].is_finite() {
                return Err(Error::InvalidInput(format!(
                    "cell size must be positive and finite on axis {k}, got {}",
                    cell_size[k]
                )));
            }
        }
        let mut counts = [0usize; 3];
        let mut total: u128 = 1;
        for k in 0..3 {
            let n = ((q_upper[k] - q_lower[k]) / cell_size[k]).ceil();
            if !n.is_finite() || n < 1.0 || n > MAX_GRID_CELLS as f64 {
                return Err(Error::InvalidInput(format!(
                    "cell count on axis {k} out of range (got {n})"
                )));
            }
            counts[k] = n as usize;
            total *= counts[k] as u128;
        }
        if total > MAX_GRID_CELLS as u128 {
            return Err(Error::InvalidInput(format!(
                "grid has {total} cells, exceeding the supported maximum of {MAX_GRID_CELLS}"
            )));
        }
        Ok(Region { q_lower, q_upper, cell_size, counts })
    }

    pub fn q_lower(&self) -> Vec3 {
        self.q_lower
    }

    pub fn q_upper(&self) -> Vec3 {
        self.q_upper
    }

    pub fn cell_size(&self) -> Vec3 {
        self.cell_size
    }

    /// Cells per axis, x-major ordering is used for linear indices.
    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    /// Total number of grid cells.
    pub fn cell_count(&self) -> usize {
        self.counts[0] * self.counts[1] * self.counts[2]
    }

    /// Inclusive containment test; false for non-finite coordinates.
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.q_lower[k] && p[k] <= self.q_upper[k])
    }

    /// Nearest point of the region to `p` (componentwise clamp).
    pub fn clamp(&self, p: &Vec3) -> Vec3 {
        Vec3::new(
            p.x.clamp(self.q_lower.x, self.q_upper.x),
            p.y.clamp(self.q_lower.y, self.q_upper.y),
            p.z.clamp(self.q_lower.z, self.q_upper.z),
        )
    }

    /// Length of the region's main diagonal.
    pub fn diagonal(&self) -> f64 {
        (self.q_upper - self.q_lower).norm()
    }

    /// Grid cell containing `p`. Boundary points map to the lower-index cell;
    /// positions outside the region are an error.
    pub fn cell_index(&self, p: &Vec3) -> Result<[usize; 3]> {
        if !self.contains(p) {
            return Err(Error::OutOfRegion(p.x, p.y, p.z));
        }
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let t = (p[k] - self.q_lower[k]) / self.cell_size[k];
            let i = (t.ceil() - 1.0).max(0.0) as usize;
            idx[k] = i.min(self.counts[k] - 1);
        }
        Ok(idx)
    }

    /// Centre of the cell at `index`.
    pub fn cell_center(&self, index: [usize; 3]) -> Result<Vec3> {
        for k in 0..3 {
            if index[k] >= self.counts[k] {
                return Err(Error::IndexOutOfRange(
                    index[0], index[1], index[2], self.counts[0], self.counts[1], self.counts[2],
                ));
            }
        }
        Ok(Vec3::new(
            self.q_lower.x + (index[0] as f64 + 0.5) * self.cell_size.x,
            self.q_lower.y + (index[1] as f64 + 0.5) * self.cell_size.y,
            self.q_lower.z + (index[2] as f64 + 0.5) * self.cell_size.z,
        ))
    }

    /// Row-major (x outermost, z innermost) linear index of a cell.
    pub fn linear_index(&self, index: [usize; 3]) -> usize {
        (index[0] * self.counts[1] + index[1]) * self.counts[2] + index[2]
    }
}

// ---------------------------------------------------------------------------
// Buildings
// ---------------------------------------------------------------------------

/// A building: a simple polygon footprint extruded from the ground (z = 0) up
/// to `height`.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildingPrism {
    pub footprint: Vec<[f64; 2]>,
    pub height: f64,
}

/// Result of an occlusion query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Occlusion {
    Clear,
    /// First point (lowest segment parameter `t`) where the segment enters a
    /// building interior.
    Blocked { point: Vec3, t: f64 },
}

impl Occlusion {
    pub fn is_blocked(&self) -> bool {
        matches!(self, Occlusion::Blocked { .. })
    }
}

/// The simulation environment: a gridded region plus its buildings.
#[derive(Debug, Clone, PartialEq)]
pub struct CityMap {
    pub region: Region,
    pub buildings: Vec<BuildingPrism>,
}

// Serde-facing shapes for the JSON file format.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCityMap {
    region: RawRegion,
    buildings: Vec<RawBuilding>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegion {
    q_lower: [f64; 3],
    q_upper: [f64; 3],
    cell_size: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBuilding {
    footprint: Vec<[f64; 2]>,
    height: f64,
}

impl CityMap {
    /// Validating constructor; building errors name the offending entry.
    pub fn new(region: Region, buildings: Vec<BuildingPrism>) -> Result<Self> {
        for (i, b) in buildings.iter().enumerate() {
            validate_building(&region, b, i)?;
        }
        Ok(CityMap { region, buildings })
    }

    /// Parse and validate the JSON map format:
    /// `{"region": {"q_lower": [..], "q_upper": [..], "cell_size": [..]},
    ///   "buildings": [{"footprint": [[x, y], ..], "height": h}, ..]}`.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: RawCityMap = serde_json::from_str(s)?;
        let region = Region::new(
            Vec3::from(raw.region.q_lower),
            Vec3::from(raw.region.q_upper),
            Vec3::from(raw.region.cell_size),
        )
        .map_err(|e| Error::validation("region", e.to_string()))?;
        let buildings = raw
            .buildings
            .into_iter()
            .map(|b| BuildingPrism { footprint: b.footprint, height: b.height })
            .collect();
        CityMap::new(region, buildings)
    }

    pub fn to_json_string(&self) -> String {
        let raw = RawCityMap {
            region: RawRegion {
                q_lower: self.region.q_lower.into(),
                q_upper: self.region.q_upper.into(),
                cell_size: self.region.cell_size.into(),
            },
            buildings: self
                .buildings
                .iter()
                .map(|b| RawBuilding { footprint: b.footprint.clone(), height: b.height })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("city map serialization cannot fail")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_json_string())?)
    }

    /// Exact occlusion test for the open segment between `a` and `b`.
    ///
    /// Both endpoints must lie inside the region and must not coincide. The
    /// segment is blocked when it passes through the *interior* of any prism
    /// for a positive-measure stretch; the reported hit is the entry point of
    /// the earliest such stretch.
    pub fn segment_blocked(&self, a: &Vec3, b: &Vec3) -> Result<Occlusion> {
        for p in [a, b] {
            if !self.region.contains(p) {
                return Err(Error::OutOfRegion(p.x, p.y, p.z));
            }
        }
        if (b - a).norm_squared() < 1e-24 {
            return Err(Error::InvalidInput(
                "degenerate segment: endpoints coincide".into(),
            ));
        }
        let mut first: Option<f64> = None;
        for prism in &self.buildings {
            if let Some(t) = prism_entry(prism, a, b) {
                first = Some(first.map_or(t, |cur: f64| cur.min(t)));
            }
        }
        Ok(match first {
            Some(t) => Occlusion::Blocked { point: a + (b - a) * t, t },
            None => Occlusion::Clear,
        })
    }

    /// Convenience wrapper returning just the verdict.
    pub fn is_blocked(&self, a: &Vec3, b: &Vec3) -> Result<bool> {
        Ok(self.segment_blocked(a, b)?.is_blocked())
    }
}

fn validate_building(region: &Region, b: &BuildingPrism, i: usize) -> Result<()> {
    let at = |field: &str| format!("buildings[{i}].{field}");
    if !(b.height > 0.0) || !b.height.is_finite() {
        return Err(Error::validation(at("height"), format!("must be positive and finite, got {}", b.height)));
    }
    let n = b.footprint.len();
    if n < 3 {
        return Err(Error::validation(at("footprint"), format!("needs at least 3 vertices, got {n}")));
    }
    for (j, v) in b.footprint.iter().enumerate() {
        if !v[0].is_finite() || !v[1].is_finite() {
            return Err(Error::validation(
                format!("buildings[{i}].footprint[{j}]"),
                "coordinates must be finite",
            ));
        }
        let lo = region.q_lower();
        let hi = region.q_upper();
        if v[0] < lo.x || v[0] > hi.x || v[1] < lo.y || v[1] > hi.y {
            return Err(Error::validation(
                format!("buildings[{i}].footprint[{j}]"),
                format!("vertex ({}, {}) lies outside the region", v[0], v[1]),
            ));
        }
    }
    for j in 0..n {
        let p = b.footprint[j];
        let q = b.footprint[(j + 1) % n];
        if (p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12 {
            return Err(Error::validation(
                format!("buildings[{i}].footprint[{j}]"),
                "zero-length edge (repeated vertex)",
            ));
        }
    }
    if polygon_area(&b.footprint).abs() < 1e-9 {
        return Err(Error::validation(at("footprint"), "polygon has (near-)zero area"));
    }
    if !polygon_is_simple(&b.footprint) {
        return Err(Error::validation(at("footprint"), "polygon is self-intersecting"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 2D geometry helpers
// ---------------------------------------------------------------------------

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc
}

/// Simplicity check: no two non-adjacent edges may intersect or touch.
fn polygon_is_simple(poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    for i in 0..n {
        for j in (i + 1)..n {
            // Adjacent edges (sharing a vertex) are allowed to touch there.
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let (c, d) = (poly[j], poly[(j + 1) % n]);
            if segments_touch(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

fn cross2(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    ax * by - ay * bx
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Whether closed segments ab and cd share any point.
fn segments_touch(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let d1 = cross2(d[0] - c[0], d[1] - c[1], a[0] - c[0], a[1] - c[1]);
    let d2 = cross2(d[0] - c[0], d[1] - c[1], b[0] - c[0], b[1] - c[1]);
    let d3 = cross2(b[0] - a[0], b[1] - a[1], c[0] - a[0], c[1] - a[1]);
    let d4 = cross2(b[0] - a[0], b[1] - a[1], d[0] - a[0], d[1] - a[1]);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Even-odd point-in-polygon test (boundary points are classified arbitrarily,
/// which is fine: they only ever arise for measure-zero tangencies).
fn point_in_polygon(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (poly[i][0], poly[i][1]);
        let (xj, yj) = (poly[j][0], poly[j][1]);
        if (yi > y) != (yj > y) {
            let x_cross = (xj - xi) * (y - yi) / (yj - yi) + xi;
            if x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Maximal open parameter intervals of the 2D segment `a + t (b - a)`,
/// `t ∈ [0, 1]`, that lie strictly inside the polygon.
///
/// Split points are gathered from every proper edge crossing; each span
/// between consecutive split points is classified by its midpoint. A 2D-
/// degenerate segment (the 3D segment is vertical) is either fully inside or
/// fully outside.
pub(crate) fn footprint_crossing_intervals(
    poly: &[[f64; 2]],
    a: [f64; 2],
    b: [f64; 2],
) -> Vec<(f64, f64)> {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    if dx * dx + dy * dy < 1e-24 {
        return if point_in_polygon(poly, a[0], a[1]) { vec![(0.0, 1.0)] } else { Vec::new() };
    }

    let mut ts = vec![0.0, 1.0];
    let n = poly.len();
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let ex = q[0] - p[0];
        let ey = q[1] - p[1];
        let denom = dx * ey - dy * ex;
        if denom == 0.0 {
            // Parallel (possibly collinear) edge: midpoint classification of
            // the surrounding spans handles it without an explicit split.
            continue;
        }
        let rx = p[0] - a[0];
        let ry = p[1] - a[1];
        let t = (rx * ey - ry * ex) / denom;
        let u = (rx * dy - ry * dx) / denom;
        if (-1e-9..=1.0 + 1e-9).contains(&u) && (-1e-9..=1.0 + 1e-9).contains(&t) {
            ts.push(t.clamp(0.0, 1.0));
        }
    }
    ts.sort_by(|x, y| x.partial_cmp(y).expect("split points are finite"));

    let mut intervals: Vec<(f64, f64)> = Vec::new();
    for w in ts.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 - t0 <= BLOCK_T_EPS {
            continue;
        }
        let tm = 0.5 * (t0 + t1);
        if point_in_polygon(poly, a[0] + tm * dx, a[1] + tm * dy) {
            match intervals.last_mut() {
                Some(last) if t0 - last.1 <= BLOCK_T_EPS => last.1 = t1,
                _ => intervals.push((t0, t1)),
            }
        }
    }
    intervals
}

/// Earliest segment parameter at which the segment enters the open interior of
/// `prism` for a stretch of positive measure, if any.
fn prism_entry(prism: &BuildingPrism, a: &Vec3, b: &Vec3) -> Option<f64> {
    let dz = b.z - a.z;
    // Parameter interval where 0 < z < height.
    let (zlo, zhi) = if dz.abs() < 1e-15 {
        if a.z > 0.0 && a.z < prism.height {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else {
            return None;
        }
    } else {
        let t0 = (0.0 - a.z) / dz;
        let t1 = (prism.height - a.z) / dz;
        (t0.min(t1), t0.max(t1))
    };

    let mut best: Option<f64> = None;
    for (s0, s1) in footprint_crossing_intervals(&prism.footprint, [a.x, a.y], [b.x, b.y]) {
        let lo = s0.max(zlo).max(0.0);
        let hi = s1.min(zhi).min(1.0);
        if hi - lo > BLOCK_T_EPS {
            best = Some(best.map_or(lo, |cur: f64| cur.min(lo)));
        }
    }
    best
}

/// Minimum altitude the segment reaches while its 2D projection crosses the
/// prism's footprint (ignoring the prism height), if it crosses at all.
///
/// This feeds the probabilistic LoS prior: a building blocks the segment
/// exactly when its roof is higher than this value.
pub(crate) fn min_crossing_height(prism: &BuildingPrism, a: &Vec3, b: &Vec3) -> Option<f64> {
    let dz = b.z - a.z;
    let mut zmin: Option<f64> = None;
    for (s0, s1) in footprint_crossing_intervals(&prism.footprint, [a.x, a.y], [b.x, b.y]) {
        let lo = s0.max(0.0);
        let hi = s1.min(1.0);
        if hi - lo > BLOCK_T_EPS {
            let z0 = a.z + lo * dz;
            let z1 = a.z + hi * dz;
            let m = z0.min(z1);
            zmin = Some(zmin.map_or(m, |cur: f64| cur.min(m)));
        }
    }
    zmin
}

// ---------------------------------------------------------------------------
