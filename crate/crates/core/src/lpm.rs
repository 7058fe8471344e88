//! Line-of-sight probability map (LPM).
//!
//! The map stores one Beta pseudo-count pair `(a, b)` per grid cell of the
//! region, with `P_LoS = a / (a + b)`. Two sources feed it:
//!
//! * **Prior from geometry** — for each cell centre, every building whose
//!   footprint the sight segment crosses contributes the probability that its
//!   (Gaussian-uncertain) roof stays below the segment. With zero height
//!   uncertainty this degenerates to the exact occlusion indicator.
//! * **Refinement from RF measurements** — labelled LoS/NLoS observations are
//!   folded in as conjugate Beta-Bernoulli counts, so refinement is exactly
//!   order-independent.
//!
//! Maps serialize to a small versioned little-endian binary format (see
//! [`LosProbabilityMap::to_bytes`]) and export to CSV for inspection.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::citymap::{min_crossing_height, CityMap, Region};
use crate::error::{Error, Result};
use crate::Vec3;

pub const DEFAULT_HEIGHT_SIGMA: f64 = 2.0;
pub const DEFAULT_PRIOR_STRENGTH: f64 = 10.0;

/// Lower bound on either pseudo-count. Keeps every cell's posterior mean in
/// the open interval (0, 1): even a geometrically certain prior stays barely
/// revisable by enough contradicting measurements.
pub const PSEUDO_COUNT_FLOOR: f64 = 1e-6;

/// File format magic and version for the binary map serialization.
const MAGIC: [u8; 4] = *b"SLPM";
const FORMAT_VERSION: u32 = 1;
/// Header size in bytes: magic, version, region (bounds, cell size, counts),
/// base-station position, meta, cell count.
const HEADER_LEN: usize = 4 + 4 + 72 + 24 + 24 + 16 + 8;

/// Beta pseudo-counts for one cell. `a` counts (pseudo-)LoS evidence, `b`
/// NLoS evidence; the posterior mean is `a / (a + b)`. Both counts are
/// strictly positive, so the mean lives in the open interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellBelief {
    pub a: f64,
    pub b: f64,
}

impl CellBelief {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !a.is_finite() || !b.is_finite() || !(a > 0.0) || !(b > 0.0) {
            return Err(Error::InvalidInput(format!(
                "cell belief counts must be finite and strictly positive, got ({a}, {b})"
            )));
        }
        Ok(CellBelief { a, b })
    }

    pub fn p_los(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

/// LoS/NLoS probability pair; `p_nlos` is exactly `1 - p_los`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkProbability {
    pub p_los: f64,
    pub p_nlos: f64,
}

/// Map construction parameters, kept with the map for provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpmMeta {
    pub height_sigma: f64,
    pub prior_strength: f64,
}

///// A labelled RF observation: while the transmitter sat at `position`, the
/// link to the map's base station was measured as LoS or not.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfMeasurement {
    pub position: Vec3,
    pub los_observed: bool,
}

/// Per-cell LoS probability beliefs for one base station over one region.
#[derive(Debug, Clone, PartialEq)]
pub struct LosProbabilityMap {
    region: Region,
    bs_position: Vec3,
    meta: LpmMeta,
    /// Row-major (x outermost, z innermost), matching `Region::linear_index`.
    cells: Vec<CellBelief>,
}

impl LosProbabilityMap {
    /// Build the geometric prior for a base station at `bs_position`.
    ///
    /// Each building's roof height is treated as Gaussian around its nominal
    /// value with standard deviation `height_sigma`; the cell prior is the
    /// product over crossed buildings of the probability that the roof stays
    /// below the sight segment. `height_sigma = 0` reproduces the exact
    /// occlusion test verdict. `prior_strength` scales the resulting
    /// probability into pseudo-counts `(s * p, s * (1 - p))`, each clamped to
    /// at least [`PSEUDO_COUNT_FLOOR`] so certainty is asymptotic, never
    /// absolute.
    pub fn build_prior(
        map: &CityMap,
        bs_position: Vec3,
        height_sigma: f64,
        prior_strength: f64,
    ) -> Result<Self> {
        if !map.region.contains(&bs_position) {
            return Err(Error::OutOfRegion(bs_position.x, bs_position.y, bs_position.z));
        }
        if !(height_sigma >= 0.0) || !height_sigma.is_finite() {
            return Err(Error::InvalidInput(format!(
                "height_sigma must be non-negative and finite, got {height_sigma}"
            )));
        }
        if !(prior_strength > 0.0) || !prior_strength.is_finite() {
            return Err(Error::InvalidInput(format!(
                "prior_strength must be positive and finite, got {prior_strength}"
            )));
        }

        let region = map.region.clone();
        let counts = region.counts();
        let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
        let mut cells = Vec::with_capacity(region.cell_count());
        for ix in 0..counts[0] {
            for iy in 0..counts[1] {
                for iz in 0..counts[2] {
                    let center = region.cell_center([ix, iy, iz])?;
                    // Partial edge cells can have centres past the region
                    // boundary; evaluate visibility at the nearest in-region
                    // point instead.
                    let target = region.clamp(&center);
                    let p = if (target - bs_position).norm_squared() < 1e-24 {
                        1.0 // the cell containing the base station itself
                    } else if height_sigma == 0.0 {
                        match map.segment_blocked(&bs_position, &target)? {
                            crate::citymap::Occlusion::Clear => 1.0,
                            crate::citymap::Occlusion::Blocked { .. } => 0.0,
                        }
                    } else {
                        let mut p = 1.0;
                        for prism in &map.buildings {
                            if let Some(zmin) = min_crossing_height(prism, &bs_position, &target) {
                                // P(roof below segment) for this building.
                                p *= std_normal.cdf((zmin - prism.height) / height_sigma);
                            }
                        }
                        p
                    };
                    cells.push(CellBelief {
                        a: (prior_strength * p).max(PSEUDO_COUNT_FLOOR),
                        b: (prior_strength * (1.0 - p)).max(PSEUDO_COUNT_FLOOR),
                    });
                }
            }
        }
        Ok(LosProbabilityMap { region, bs_position, meta: LpmMeta { height_sigma, prior_strength }, cells })
    }

    /// Assemble a map from raw parts, validating every cell.
    pub fn from_parts(
        region: Region,
        bs_position: Vec3,
        meta: LpmMeta,
        cells: Vec<CellBelief>,
    ) -> Result<Self> {
        if cells.len() != region.cell_count() {
            return Err(Error::InvalidInput(format!(
                "cell vector length {} does not match the grid's {} cells",
                cells.len(),
                region.cell_count()
            )));
        }
        if !region.contains(&bs_position) {
            return Err(Error::OutOfRegion(bs_position.x, bs_position.y, bs_position.z));
        }
        for (i, c) in cells.iter().enumerate() {
            CellBelief::new(c.a, c.b)
                .map_err(|e| Error::InvalidInput(format!("cell {i}: {e}")))?;
        }
        Ok(LosProbabilityMap { region, bs_position, meta, cells })
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn bs_position(&self) -> Vec3 {
        self.bs_position
    }

    pub fn meta(&self) -> LpmMeta {
        self.meta
    }

    pub fn cells(&self) -> &[CellBelief] {
        &self.cells
    }

    pub fn belief_at(&self, index: [usize; 3]) -> Result<CellBelief> {
        self.region.cell_center(index)?; // bounds check with the right error
        Ok(self.cells[self.region.linear_index(index)])
    }

    /// LoS probability of the cell containing `q`; errors outside the region.
    pub fn query(&self, q: &Vec3) -> Result<LinkProbability> {
        let idx = self.region.cell_index(q)?;
        let p = self.cells[self.region.linear_index(idx)].p_los();
        Ok(LinkProbability { p_los: p, p_nlos: 1.0 - p })
    }

    /// Like [`query`](Self::query) but clamping `q` onto the region first.
    /// Returns the probability and whether clamping was needed, so callers can
    /// flag out-of-map estimates instead of crashing mid-run.
    pub fn query_clamped(&self, q: &Vec3) -> (LinkProbability, bool) {
        let clamped = self.region.clamp(q);
        let moved = clamped != *q;
        let prob = self
            .query(&clamped)
            .expect("clamped point is inside the region");
        (prob, moved)
    }

    /// Fold labelled observations into the per-cell Beta counts.
    ///
    /// All positions are validated before anything is applied, so a failed
    /// call leaves the map untouched; the error names the offending entry.
    /// Counts are aggregated per cell first, which makes the result exactly
    /// independent of measurement order.
    pub fn update_with_measurements(&mut self, measurements: &[RfMeasurement]) -> Result<()> {
        let mut tallies: HashMap<usize, (u64, u64)> = HashMap::new();
        for (i, m) in measurements.iter().enumerate() {
            let idx = self.region.cell_index(&m.position).map_err(|_| {
                Error::validation(
                    format!("measurements[{i}]"),
                    format!(
                        "position ({}, {}, {}) lies outside the map region",
                        m.position.x, m.position.y, m.position.z
                    ),
                )
            })?;
            let entry = tallies.entry(self.region.linear_index(idx)).or_insert((0, 0));
            if m.los_observed {
                entry.0 += 1;
            } else {
                entry.1 += 1;
            }
        }
        for (li, (n_los, n_nlos)) in tallies {
            self.cells[li].a += n_los as f64;
            self.cells[li].b += n_nlos as f64;
        }
        Ok(())
    }

    // -- binary serialization -------------------------------------------------

    /// Serialize to the versioned little-endian binary format:
    ///
    /// | offset | field |
    /// |-------:|-------|
    /// | 0      | magic `"SLPM"` |
    /// | 4      | format version, u32 |
    /// | 8      | region `q_lower`, 3 × f64 |
    /// | 32     | region `q_upper`, 3 × f64 |
    /// | 56     | region `cell_size`, 3 × f64 |
    /// | 80     | grid counts, 3 × u64 |
    /// | 104    | base-station position, 3 × f64 |
    /// | 128    | `height_sigma`, `prior_strength`, 2 × f64 |
    /// | 144    | cell count `M`, u64 |
    /// | 152    | `M` pairs `(a, b)`, 2 × f64 each, row-major |
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 16 * self.cells.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.region.q_lower(), self.region.q_upper(), self.region.cell_size()] {
            for k in 0..3 {
                out.extend_from_slice(&v[k].to_le_bytes());
            }
        }
        for c in self.region.counts() {
            out.extend_from_slice(&(c as u64).to_le_bytes());
        }
        for k in 0..3 {
            out.extend_from_slice(&self.bs_position[k].to_le_bytes());
        }
        out.extend_from_slice(&self.meta.height_sigma.to_le_bytes());
        out.extend_from_slice(&self.meta.prior_strength.to_le_bytes());
        out.extend_from_slice(&(self.cells.len() as u64).to_le_bytes());
        for c in &self.cells {
            out.extend_from_slice(&c.a.to_le_bytes());
            out.extend_from_slice(&c.b.to_le_bytes());
        }
        out
    }

    /// Parse the binary format. Fails closed: any truncation, version
    /// mismatch, inconsistent header or invalid cell invalidates the whole
    /// map, with the byte offset of the first problem.
    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader { data, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Parse { offset: 0, reason: "bad magic (not an LPM file)".into() });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
        }
        let region_off = r.pos;
        let q_lower = r.vec3()?;
        let q_upper = r.vec3()?;
        let cell_size = r.vec3()?;
        let counts_off = r.pos;
        let mut counts = [0u64; 3];
        for c in counts.iter_mut() {
            *c = r.u64()?;
        }
        let region = Region::new(q_lower, q_upper, cell_size)
            .map_err(|e| Error::Parse { offset: region_off, reason: e.to_string() })?;
        let expected: Vec<u64> = region.counts().iter().map(|&c| c as u64).collect();
        if counts != expected.as_slice() {
            return Err(Error::Parse {
                offset: counts_off,
                reason: format!(
                    "stored grid counts {counts:?} disagree with the region's {expected:?}"
                ),
            });
        }
        let bs_off = r.pos;
        let bs_position = r.vec3()?;
        if !region.contains(&bs_position) {
            return Err(Error::Parse {
                offset: bs_off,
                reason: "base-station position lies outside the region".into(),
            });
        }
        let meta_off = r.pos;
        let height_sigma = r.f64()?;
        let prior_strength = r.f64()?;
        if !(height_sigma >= 0.0) || !height_sigma.is_finite() || !(prior_strength > 0.0) || !prior_strength.is_finite()
        {
            return Err(Error::Parse { offset: meta_off, reason: "invalid map metadata".into() });
        }
        let m_off = r.pos;
        let m = r.u64()?;
        if m != region.cell_count() as u64 {
            return Err(Error::Parse {
                offset: m_off,
                reason: format!("cell count {m} does not match the grid's {} cells", region.cell_count()),
            });
        }
        // Validate the payload length *before* allocating anything sized by it.
        let need = (m as usize).checked_mul(16).ok_or(Error::Parse {
            offset: m_off,
            reason: "cell count overflows".into(),
        })?;
        if data.len() - r.pos != need {
            return Err(Error::Parse {
                offset: r.pos,
                reason: format!("expected {need} bytes of cell data, found {}", data.len() - r.pos),
            });
        }
        let mut cells = Vec::with_capacity(m as usize);
        for _ in 0..m {
            let off = r.pos;
            let a = r.f64()?;
            let b = r.f64()?;
            let cell = CellBelief::new(a, b)
                .map_err(|e| Error::Parse { offset: off, reason: e.to_string() })?;
            cells.push(cell);
        }
        Ok(LosProbabilityMap {
            region,
            bs_position,
            meta: LpmMeta { height_sigma, prior_strength },
            cells,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    /// Write the map as CSV with header `ix,iy,iz,x,y,z,p_los`, one row per
    /// cell in row-major order, positions being raw cell centres.
    pub fn export_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "ix,iy,iz,x,y,z,p_los")?;
        let counts = self.region.counts();
        for ix in 0..counts[0] {
            for iy in 0..counts[1] {
                for iz in 0..counts[2] {
                    let c = self.region.cell_center([ix, iy, iz])?;
                    let p = self.cells[self.region.linear_index([ix, iy, iz])].p_los();
                    writeln!(w, "{ix},{iy},{iz},{},{},{},{}", c.x, c.y, c.z, p)?;
                }
            }
        }
        Ok(())
    }
}

struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Parse { offset: self.pos, reason: "unexpected end of data".into() });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
}

/// Parse labelled RF measurements from CSV with header `x,y,z,los`, where
/// `los` is `0`/`1` or `false`/`true`.
pub fn read_measurements_csv(reader: impl Read) -> Result<Vec<RfMeasurement>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expect = ["x", "y", "z", "los"];
    let got: Vec<&str> = headers.iter().collect();
    if got != expect {
        return Err(Error::validation(
            "header",
            format!("expected columns {expect:?}, got {got:?}"),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let at = |field: &str| format!("row {} (line {}), field {field}", i + 1, i + 2);
        if rec.len() != 4 {
            return Err(Error::validation(
                format!("row {} (line {})", i + 1, i + 2),
                format!("expected 4 fields, got {}", rec.len()),
            ));
        }
        let num = |k: usize, field: &str| -> Result<f64> {
            let v: f64 = rec[k]
                .parse()
                .map_err(|_| Error::validation(at(field), format!("not a number: {:?}", &rec[k])))?;
            if !v.is_finite() {
                return Err(Error::validation(at(field), "must be finite"));
            }
            Ok(v)
        };
        let x = num(0, "x")?;
        let y = num(1, "y")?;
        let z = num(2, "z")?;
        let los = match rec[3].to_ascii_lowercase().as_str() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(Error::validation(at("los"), format!("expected 0/1/true/false, got {other:?}")))
            }
        };
        out.push(RfMeasurement { position: Vec3::new(x, y, z), los_observed: los });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
