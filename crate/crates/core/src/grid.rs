//! Rectangular lon/lat grid, facility rasterization and face-staggered wind.
//!
//! Cells are indexed `k = j * nx + i` with `i` running west to east and `j`
//! running south to north. Geographic coordinates map to kilometres with an
//! equirectangular approximation anchored at the grid's middle latitude.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kilometres per degree of latitude.
pub const KM_PER_DEG_LAT: f64 = 111.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    /// Cell width (east-west) in km.
    pub dx: f64,
    /// Cell height (north-south) in km.
    pub dy: f64,
    /// (lon, lat) of the lower-left corner.
    pub origin: (f64, f64),
    pub km_per_deg_lon: f64,
    pub km_per_deg_lat: f64,
}

/// Builds a validated grid. Both dimensions must be at least 2.
pub fn build_grid(nx: usize, ny: usize, origin: (f64, f64), dx: f64, dy: f64) -> Result<Grid> {
    if nx < 2 {
        return Err(Error::config("grid.nx", format!("need nx >= 2, got {nx}")));
    }
    if ny < 2 {
        return Err(Error::config("grid.ny", format!("need ny >= 2, got {ny}")));
    }
    Grid::with_dims(nx, ny, origin, dx, dy)
}

impl Grid {
    fn with_dims(nx: usize, ny: usize, origin: (f64, f64), dx: f64, dy: f64) -> Result<Grid> {
        if !(dx.is_finite() && dx > 0.0) {
            return Err(Error::config("grid.dx", format!("need dx > 0, got {dx}")));
        }
        if !(dy.is_finite() && dy > 0.0) {
            return Err(Error::config("grid.dy", format!("need dy > 0, got {dy}")));
        }
        if !(origin.0.is_finite() && origin.1.is_finite()) {
            return Err(Error::config("grid.origin", "origin must be finite"));
        }
        let mid_lat = origin.1 + 0.5 * ny as f64 * dy / KM_PER_DEG_LAT;
        let km_per_deg_lon = KM_PER_DEG_LAT * mid_lat.to_radians().cos();
        if km_per_deg_lon <= 0.0 {
            return Err(Error::config("grid.origin", "grid reaches a pole"));
        }
        Ok(Grid {
            nx,
            ny,
            dx,
            dy,
            origin,
            km_per_deg_lon,
            km_per_deg_lat: KM_PER_DEG_LAT,
        })
    }

    /// One-row strip of `nx` cells, used for 1-D operator checks.
    pub fn strip(nx: usize, dx: f64) -> Result<Grid> {
        if nx < 2 {
            return Err(Error::config("grid.nx", format!("need nx >= 2, got {nx}")));
        }
        Grid::with_dims(nx, 1, (0.0, 0.0), dx, dx)
    }

    /// Unit-spaced grid at the origin, handy for synthetic problems.
    pub fn unit(nx: usize, ny: usize) -> Result<Grid> {
        build_grid(nx, ny, (0.0, 0.0), 1.0, 1.0)
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    #[inline]
    pub fn coords(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    /// Cell width in degrees of longitude.
    pub fn cell_width_deg(&self) -> f64 {
        self.dx / self.km_per_deg_lon
    }

    /// Cell height in degrees of latitude.
    pub fn cell_height_deg(&self) -> f64 {
        self.dy / self.km_per_deg_lat
    }

    /// (lon_min, lat_min, lon_max, lat_max).
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.origin.0,
            self.origin.1,
            self.origin.0 + self.nx as f64 * self.cell_width_deg(),
            self.origin.1 + self.ny as f64 * self.cell_height_deg(),
        )
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin.0 + (i as f64 + 0.5) * self.cell_width_deg(),
            self.origin.1 + (j as f64 + 0.5) * self.cell_height_deg(),
        )
    }

    /// Cell containing (lon, lat), using half-open intervals `[left, right)`.
    pub fn locate(&self, lon: f64, lat: f64) -> Option<usize> {
        let fx = ((lon - self.origin.0) / self.cell_width_deg()).floor();
        let fy = ((lat - self.origin.1) / self.cell_height_deg()).floor();
        if !(fx.is_finite() && fy.is_finite()) || fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (i, j) = (fx as usize, fy as usize);
        (i < self.nx && j < self.ny).then(|| self.index(i, j))
    }

    /// Midpoint of the west face of cell (i, j); `i == nx` is the east edge.
    pub fn u_face_midpoint(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin.0 + i as f64 * self.cell_width_deg(),
            self.origin.1 + (j as f64 + 0.5) * self.cell_height_deg(),
        )
    }

    /// Midpoint of the south face of cell (i, j); `j == ny` is the north edge.
    pub fn v_face_midpoint(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin.0 + (i as f64 + 0.5) * self.cell_width_deg(),
            self.origin.1 + j as f64 * self.cell_height_deg(),
        )
    }
}

/// Wind on cell faces (Arakawa-C staggering), m/s.
///
/// `u_face` has `(nx + 1) * ny` entries indexed `j * (nx + 1) + i`, where face
/// `i` is the west face of cell `i`. `v_face` has `nx * (ny + 1)` entries
/// indexed `j * nx + i`, where face `j` is the south face of cell row `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceWind {
    pub nx: usize,
    pub ny: usize,
    pub u_face: Vec<f64>,
    pub v_face: Vec<f64>,
}

impl FaceWind {
    pub fn new(grid: &Grid, u_face: Vec<f64>, v_face: Vec<f64>) -> Result<Self> {
        let (nx, ny) = (grid.nx, grid.ny);
        if u_face.len() != (nx + 1) * ny {
            return Err(Error::Dimension(format!(
                "u_face has {} entries, expected {}",
                u_face.len(),
                (nx + 1) * ny
            )));
        }
        if v_face.len() != nx * (ny + 1) {
            return Err(Error::Dimension(format!(
                "v_face has {} entries, expected {}",
                v_face.len(),
                nx * (ny + 1)
            )));
        }
        Ok(FaceWind {
            nx,
            ny,
            u_face,
            v_face,
        })
    }

    pub fn uniform(grid: &Grid, u: f64, v: f64) -> Self {
        FaceWind {
            nx: grid.nx,
            ny: grid.ny,
            u_face: vec![u; (grid.nx + 1) * grid.ny],
            v_face: vec![v; grid.nx * (grid.ny + 1)],
        }
    }

    pub fn calm(grid: &Grid) -> Self {
        Self::uniform(grid, 0.0, 0.0)
    }

    #[inline]
    pub fn u(&self, i: usize, j: usize) -> f64 {
        self.u_face[j * (self.nx + 1) + i]
    }

    #[inline]
    pub fn v(&self, i: usize, j: usize) -> f64 {
        self.v_face[j * self.nx + i]
    }

    pub fn matches(&self, grid: &Grid) -> bool {
        self.nx == grid.nx
            && self.ny == grid.ny
            && self.u_face.len() == (grid.nx + 1) * grid.ny
            && self.v_face.len() == grid.nx * (grid.ny + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Facility {
    pub facility_id: String,
    pub name: String,
    pub lon: f64,
    pub lat: f64,
    /// Annual SO2 emissions, tons/yr.
    pub so2_tons: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionsInventory {
    pub facilities: Vec<Facility>,
    /// Cell of each facility, parallel to `facilities`; `None` when out of domain.
    pub cells: Vec<Option<usize>>,
    /// Tons/yr per cell.
    pub x: Vec<f64>,
    /// Ids of facilities outside the grid.
    pub out_of_domain: Vec<String>,
}

impl EmissionsInventory {
    pub fn facility_index(&self, id: &str) -> Option<usize> {
        self.facilities.iter().position(|f| f.facility_id == id)
    }

    /// Total tonnage of in-domain facilities.
    pub fn in_domain_total(&self) -> f64 {
        self.facilities
            .iter()
            .zip(&self.cells)
            .filter(|(_, c)| c.is_some())
            .map(|(f, _)| f.so2_tons)
            .sum()
    }
}

/// Aggregates facility tonnages onto grid cells.
pub fn rasterize_emissions(facilities: &[Facility], grid: &Grid) -> Result<EmissionsInventory> {
    if facilities.is_empty() {
        log::warn!("empty facility list; emissions inventory is all zero");
    }
    let mut seen = HashSet::new();
    let mut x = vec![0.0; grid.n_cells()];
    let mut cells = Vec::with_capacity(facilities.len());
    let mut out_of_domain = Vec::new();
    for f in facilities {
        if !seen.insert(f.facility_id.as_str()) {
            return Err(Error::Data(format!("duplicate facility id `{}`", f.facility_id)));
        }
        if !(f.lon.is_finite() && f.lat.is_finite()) {
            return Err(Error::Data(format!(
                "facility `{}` has nonfinite coordinates",
                f.facility_id
            )));
        }
        if !(f.so2_tons.is_finite() && f.so2_tons >= 0.0) {
            return Err(Error::Data(format!(
                "facility `{}` has invalid tonnage {}",
                f.facility_id, f.so2_tons
            )));
        }
        let cell = grid.locate(f.lon, f.lat);
        match cell {
            Some(k) => x[k] += f.so2_tons,
            None => out_of_domain.push(f.facility_id.clone()),
        }
        cells.push(cell);
    }
    if !out_of_domain.is_empty() {
        log::warn!("{} facilities outside the grid: {:?}", out_of_domain.len(), out_of_domain);
    }
    Ok(EmissionsInventory {
        facilities: facilities.to_vec(),
        cells,
        x,
        out_of_domain,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindSample {
    pub lon: f64,
    pub lat: f64,
    pub u: f64,
    pub v: f64,
}

/// Bilinear interpolator over samples on a rectilinear lon/lat lattice.
#[derive(Debug, Clone)]
pub struct LatticeInterpolator {
    lons: Vec<f64>,
    lats: Vec<f64>,
    /// Values at lattice nodes, `[lat index][lon index]`.
    u: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn distinct_sorted(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(f64::total_cmp);
    xs.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * (1.0 + b.abs()));
    xs
}

fn position(axis: &[f64], x: f64) -> Option<usize> {
    axis.iter().position(|&a| (a - x).abs() <= 1e-9 * (1.0 + a.abs()))
}

impl LatticeInterpolator {
    pub fn new(samples: &[WindSample]) -> Result<Self> {
        if samples.iter().any(|s| !(s.lon.is_finite() && s.lat.is_finite())) {
            return Err(Error::Interpolation("sample with nonfinite coordinates".into()));
        }
        if samples.iter().any(|s| !(s.u.is_finite() && s.v.is_finite())) {
            return Err(Error::Interpolation("sample with nonfinite wind".into()));
        }
        let lons = distinct_sorted(samples.iter().map(|s| s.lon).collect());
        let lats = distinct_sorted(samples.iter().map(|s| s.lat).collect());
        if lons.len() < 2 || lats.len() < 2 {
            return Err(Error::Interpolation(format!(
                "need at least 4 non-collinear samples, got {} distinct lons x {} distinct lats",
                lons.len(),
                lats.len()
            )));
        }
        let mut u = vec![vec![f64::NAN; lons.len()]; lats.len()];
        let mut v = u.clone();
        for s in samples {
            let (a, b) = (position(&lons, s.lon).unwrap(), position(&lats, s.lat).unwrap());
            if !u[b][a].is_nan() {
                return Err(Error::Interpolation(format!(
                    "duplicate sample at ({}, {})",
                    s.lon, s.lat
                )));
            }
            u[b][a] = s.u;
            v[b][a] = s.v;
        }
        if u.iter().flatten().any(|x| x.is_nan()) {
            return Err(Error::Interpolation(
                "samples do not cover a complete rectilinear lattice".into(),
            ));
        }
        Ok(LatticeInterpolator { lons, lats, u, v })
    }

    fn bracket(axis: &[f64], x: f64) -> (usize, f64) {
        let x = x.clamp(axis[0], axis[axis.len() - 1]);
        let hi = axis.partition_point(|&a| a <= x).clamp(1, axis.len() - 1);
        let lo = hi - 1;
        (lo, (x - axis[lo]) / (axis[hi] - axis[lo]))
    }

    /// Bilinear (u, v) at a point; points outside the lattice are clamped onto it.
    pub fn eval(&self, lon: f64, lat: f64) -> (f64, f64) {
        let (a, s) = Self::bracket(&self.lons, lon);
        let (b, t) = Self::bracket(&self.lats, lat);
        let blend = |f: &Vec<Vec<f64>>| {
            (1.0 - s) * (1.0 - t) * f[b][a]
                + s * (1.0 - t) * f[b][a + 1]
                + (1.0 - s) * t * f[b + 1][a]
                + s * t * f[b + 1][a + 1]
        };
        (blend(&self.u), blend(&self.v))
    }
}

/// Interpolates scattered lattice wind samples onto the grid's face midpoints.
pub fn interpolate_wind(samples: &[WindSample], grid: &Grid) -> Result<FaceWind> {
    let interp = LatticeInterpolator::new(samples)?;
    let (nx, ny) = (grid.nx, grid.ny);
    let mut u_face = Vec::with_capacity((nx + 1) * ny);
    for j in 0..ny {
        for i in 0..=nx {
            let (lon, lat) = grid.u_face_midpoint(i, j);
            u_face.push(interp.eval(lon, lat).0);
        }
    }
    let mut v_face = Vec::with_capacity(nx * (ny + 1));
    for j in 0..=ny {
        for i in 0..nx {
            let (lon, lat) = grid.v_face_midpoint(i, j);
            v_face.push(interp.eval(lon, lat).1);
        }
    }
    FaceWind::new(grid, u_face, v_face)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationGrid {
    pub pop: Vec<f64>,
}

impl PopulationGrid {
    pub fn new(grid: &Grid, pop: Vec<f64>) -> Result<Self> {
        if pop.len() != grid.n_cells() {
            return Err(Error::Dimension(format!(
                "population has {} cells, grid has {}",
                pop.len(),
                grid.n_cells()
            )));
        }
        if let Some(k) = pop.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Data(format!("population cell {k} is {}", pop[k])));
        }
        Ok(PopulationGrid { pop })
    }

    pub fn total(&self) -> f64 {
        self.pop.iter().sum()
    }
}

/// Groups facility indices by cell, for reporting.
pub fn facilities_by_cell(inv: &EmissionsInventory) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, cell) in inv.cells.iter().enumerate() {
        if let Some(k) = cell {
            out.entry(*k).or_default().push(idx);
        }
    }
    out
}
