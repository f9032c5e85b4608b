//! Run configuration, file formats and persisted artifacts.
//!
//! Rasters are ESRI ASCII grids (north row first on disk, south row first in
//! memory). Emissions are a CSV with header `facility_id,name,lon,lat,so2_tons`.
//! Every artifact carries the config hash and seed of the run that made it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forecast::{unit_responses, Forecaster};
use crate::grid::{
    build_grid, interpolate_wind, rasterize_emissions, EmissionsInventory, Facility, FaceWind, Grid, PopulationGrid,
    WindSample, KM_PER_DEG_LAT,
};
use crate::inference::{pooled, summarize, theta_from_row, McmcConfig, Posterior, PriorSpec, Trace};
use crate::operator::TransportOperator;
use crate::sulfate::{Observations, Param, SulfateModel, Theta};

// ---------------------------------------------------------------- rasters

#[derive(Debug, Clone, PartialEq)]
pub struct AsciiRaster {
    pub ncols: usize,
    pub nrows: usize,
    /// Lower-left corner.
    pub xll: f64,
    pub yll: f64,
    pub dx_deg: f64,
    pub dy_deg: f64,
    pub nodata: Option<f64>,
    /// Row-major, southern row first; NODATA cells hold NaN.
    pub values: Vec<f64>,
}

impl AsciiRaster {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut header: BTreeMap<String, f64> = BTreeMap::new();
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
        while let Some(line) = lines.peek() {
            let mut it = line.split_whitespace();
            let key = it.next().unwrap_or("").to_ascii_lowercase();
            if !key.starts_with(|c: char| c.is_ascii_alphabetic()) {
                break;
            }
            let val = it
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::parse(path, format!("bad header line `{line}`")))?;
            header.insert(key, val);
            lines.next();
        }
        let get = |k: &str| header.get(k).copied();
        let need = |k: &str| get(k).ok_or_else(|| Error::parse(path, format!("missing header `{k}`")));
        let ncols = need("ncols")? as usize;
        let nrows = need("nrows")? as usize;
        let (dx, dy) = match (get("cellsize"), get("dx"), get("dy")) {
            (Some(c), _, _) => (c, c),
            (None, Some(dx), Some(dy)) => (dx, dy),
            _ => return Err(Error::parse(path, "missing header `cellsize`")),
        };
        if ncols == 0 || nrows == 0 || !(dx > 0.0 && dy > 0.0) {
            return Err(Error::parse(path, "raster dimensions and cell size must be positive"));
        }
        let xll = match (get("xllcorner"), get("xllcenter")) {
            (Some(v), _) => v,
            (None, Some(v)) => v - 0.5 * dx,
            _ => return Err(Error::parse(path, "missing header `xllcorner`")),
        };
        let yll = match (get("yllcorner"), get("yllcenter")) {
            (Some(v), _) => v,
            (None, Some(v)) => v - 0.5 * dy,
            _ => return Err(Error::parse(path, "missing header `yllcorner`")),
        };
        let nodata = get("nodata_value");
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(nrows);
        for line in lines {
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(path, format!("row {}: {e}", rows.len() + 1)))?;
            if row.len() != ncols {
                return Err(Error::parse(
                    path,
                    format!("row {} has {} values, expected {ncols}", rows.len() + 1, row.len()),
                ));
            }
            rows.push(row);
        }
        if rows.len() != nrows {
            return Err(Error::parse(path, format!("found {} rows, expected {nrows}", rows.len())));
        }
        let mut values = Vec::with_capacity(ncols * nrows);
        for row in rows.iter().rev() {
            for &v in row {
                let missing = nodata.is_some_and(|nd| v == nd) || !v.is_finite();
                values.push(if missing { f64::NAN } else { v });
            }
        }
        Ok(AsciiRaster {
            ncols,
            nrows,
            xll,
            yll,
            dx_deg: dx,
            dy_deg: dy,
            nodata,
            values,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Raster on the cells of `grid`; NaN entries are written as NODATA.
    pub fn from_grid(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::Dimension(format!(
                "raster has {} values, grid has {} cells",
                values.len(),
                grid.n_cells()
            )));
        }
        Ok(AsciiRaster {
            ncols: grid.nx,
            nrows: grid.ny,
            xll: grid.origin.0,
            yll: grid.origin.1,
            dx_deg: grid.cell_width_deg(),
            dy_deg: grid.cell_height_deg(),
            nodata: Some(-9999.0),
            values,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ncols {}", self.ncols);
        let _ = writeln!(s, "nrows {}", self.nrows);
        let _ = writeln!(s, "xllcorner {}", self.xll);
        let _ = writeln!(s, "yllcorner {}", self.yll);
        if self.dx_deg == self.dy_deg {
            let _ = writeln!(s, "cellsize {}", self.dx_deg);
        } else {
            let _ = writeln!(s, "dx {}", self.dx_deg);
            let _ = writeln!(s, "dy {}", self.dy_deg);
        }
        let nodata = self.nodata.unwrap_or(-9999.0);
        let _ = writeln!(s, "NODATA_value {nodata}");
        for j in (0..self.nrows).rev() {
            let row: Vec<String> = self.values[j * self.ncols..(j + 1) * self.ncols]
                .iter()
                .map(|v| if v.is_nan() { format!("{nodata}") } else { format!("{v}") })
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.xll + (i as f64 + 0.5) * self.dx_deg,
            self.yll + (j as f64 + 0.5) * self.dy_deg,
        )
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.ncols + i]
    }

    /// Grid whose cells coincide with this raster's cells.
    pub fn grid_spec(&self) -> GridSpec {
        let dy = self.dy_deg * KM_PER_DEG_LAT;
        let mid_lat = self.yll + 0.5 * self.nrows as f64 * self.dy_deg;
        GridSpec {
            nx: self.ncols,
            ny: self.nrows,
            origin: (self.xll, self.yll),
            dx: self.dx_deg * KM_PER_DEG_LAT * mid_lat.to_radians().cos(),
            dy,
        }
    }

    /// Errors unless the raster cells coincide with `grid` (1e-6 relative in degrees).
    pub fn check_matches(&self, grid: &Grid, what: &str) -> Result<()> {
        if self.ncols != grid.nx || self.nrows != grid.ny {
            return Err(Error::Data(format!(
                "{what} raster is {}x{}, grid is {}x{}",
                self.ncols, self.nrows, grid.nx, grid.ny
            )));
        }
        let close = |a: f64, b: f64, scale: f64| (a - b).abs() <= 1e-6 * scale.abs().max(1e-3);
        let (w, h) = (grid.cell_width_deg(), grid.cell_height_deg());
        if !(close(self.dx_deg, w, w)
            && close(self.dy_deg, h, h)
            && close(self.xll, grid.origin.0, w)
            && close(self.yll, grid.origin.1, h))
        {
            return Err(Error::Data(format!(
                "{what} raster georeference ({}, {}, {}x{} deg) does not match the grid ({}, {}, {}x{} deg)",
                self.xll, self.yll, self.dx_deg, self.dy_deg, grid.origin.0, grid.origin.1, w, h
            )));
        }
        Ok(())
    }
}

/// Wind samples at the cell centres of a pair of u/v rasters.
pub fn wind_samples(u: &AsciiRaster, v: &AsciiRaster) -> Result<Vec<WindSample>> {
    if (u.ncols, u.nrows, u.xll, u.yll, u.dx_deg, u.dy_deg) != (v.ncols, v.nrows, v.xll, v.yll, v.dx_deg, v.dy_deg) {
        return Err(Error::Data("u and v wind rasters have different georeferences".into()));
    }
    let mut out = Vec::with_capacity(u.values.len());
    for j in 0..u.nrows {
        for i in 0..u.ncols {
            let (uu, vv) = (u.get(i, j), v.get(i, j));
            if uu.is_nan() || vv.is_nan() {
                return Err(Error::Data(format!("wind raster has NODATA at column {i}, row {j} from the south")));
            }
            let (lon, lat) = u.center(i, j);
            out.push(WindSample { lon, lat, u: uu, v: vv });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- emissions

pub fn read_emissions_csv(path: &Path) -> Result<Vec<Facility>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::parse(path, e.to_string()))?.clone();
    let expected = ["facility_id", "name", "lon", "lat", "so2_tons"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            path,
            format!("header must be `{}`, found `{}`", expected.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.deserialize::<Facility>().enumerate() {
        let f = rec.map_err(|e| Error::parse(path, format!("record {}: {e}", k + 1)))?;
        if !(f.so2_tons.is_finite() && f.so2_tons >= 0.0) {
            return Err(Error::Data(format!("facility {} has so2_tons = {}", f.facility_id, f.so2_tons)));
        }
        out.push(f);
    }
    Ok(out)
}

pub fn write_emissions_csv(path: &Path, facilities: &[Facility]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    for f in facilities {
        w.serialize(f).map_err(|e| Error::parse(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- configuration

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// (lon, lat) of the lower-left corner.
    pub origin: (f64, f64),
    /// Cell width in km.
    pub dx: f64,
    /// Cell height in km.
    pub dy: f64,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        build_grid(self.nx, self.ny, self.origin, self.dx, self.dy)
    }

    pub fn of(grid: &Grid) -> Self {
        GridSpec {
            nx: grid.nx,
            ny: grid.ny,
            origin: grid.origin,
            dx: grid.dx,
            dy: grid.dy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub emissions: PathBuf,
    pub wind_u: PathBuf,
    pub wind_v: PathBuf,
    pub sulfate: PathBuf,
    pub population: PathBuf,
    /// Cells with value 0 or NODATA are excluded from the likelihood.
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSettings {
    pub fraction: f64,
    pub n_draws: usize,
    pub include_noise: bool,
    /// Facilities to rank; all in-domain facilities when absent.
    pub candidates: Option<Vec<String>>,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        ForecastSettings {
            fraction: 0.8,
            n_draws: 2000,
            include_noise: true,
            candidates: None,
        }
    }
}

fn default_delta() -> f64 {
    50.0
}

fn default_t() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Taken from the sulfate raster when absent.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    pub files: DataFiles,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_t", rename = "T")]
    pub t: f64,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub forecast: ForecastSettings,
    /// Directory that relative file paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
    /// SHA-256 over the config bytes and every referenced file.
    #[serde(skip)]
    pub hash: String,
}

impl RunConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn file_list(&self) -> Vec<(&'static str, &PathBuf)> {
        let f = &self.files;
        let mut v = vec![
            ("files.emissions", &f.emissions),
            ("files.wind_u", &f.wind_u),
            ("files.wind_v", &f.wind_v),
            ("files.sulfate", &f.sulfate),
            ("files.population", &f.population),
        ];
        if let Some(m) = &f.mask {
            v.push(("files.mask", m));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::config("delta", format!("must be > 0, got {}", self.delta)));
        }
        if !(self.t.is_finite() && self.t > 0.0) {
            return Err(Error::config("T", format!("must be > 0, got {}", self.t)));
        }
        self.prior.validate()?;
        self.mcmc.validate()?;
        let fc = &self.forecast;
        if !(0.0..=1.0).contains(&fc.fraction) {
            return Err(Error::config("forecast.fraction", format!("must lie in [0, 1], got {}", fc.fraction)));
        }
        if fc.n_draws == 0 {
            return Err(Error::config("forecast.n_draws", "must be >= 1"));
        }
        if let Some(g) = &self.grid {
            g.build()?;
        }
        for (field, p) in self.file_list() {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(Error::config(field, format!("file {} does not exist", full.display())));
            }
        }
        Ok(())
    }

    /// Fixed parts of theta (delta, T) with placeholder rates.
    pub fn base_theta(&self) -> Theta {
        Theta {
            delta: self.delta,
            t: self.t,
            ..Theta::reference()
        }
    }
}

/// Reads, validates and hashes a JSON run configuration.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::config("--config", format!("{} does not exist", path.display())),
        _ => Error::io(path, e),
    })?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::config(if field == "." { "<root>".to_string() } else { field }, e.inner().to_string())
    })?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.validate()?;
    let mut h = Sha256::new();
    h.update(&bytes);
    for (field, p) in cfg.file_list() {
        let full = cfg.resolve(p);
        let data = fs::read(&full).map_err(|e| Error::io(&full, e))?;
        h.update(field.as_bytes());
        h.update(Sha256::digest(&data));
    }
    cfg.hash = hex::encode(h.finalize());
    Ok(cfg)
}

// ---------------------------------------------------------------- dataset

/// Everything a fit or forecast needs, loaded from the files of a config.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: Grid,
    pub wind: FaceWind,
    pub operator: Arc<TransportOperator>,
    pub inventory: EmissionsInventory,
    pub obs: Observations,
    pub population: PopulationGrid,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let f = &cfg.files;
    let sulfate = AsciiRaster::read(&cfg.resolve(&f.sulfate))?;
    let grid = match &cfg.grid {
        Some(g) => g.build()?,
        None => sulfate.grid_spec().build()?,
    };
    sulfate.check_matches(&grid, "sulfate")?;
    let u = AsciiRaster::read(&cfg.resolve(&f.wind_u))?;
    let v = AsciiRaster::read(&cfg.resolve(&f.wind_v))?;
    let wind = interpolate_wind(&wind_samples(&u, &v)?, &grid)?;
    let operator = Arc::new(TransportOperator::new(&grid, &wind)?);
    let facilities = read_emissions_csv(&cfg.resolve(&f.emissions))?;
    let inventory = rasterize_emissions(&facilities, &grid)?;
    let pop = AsciiRaster::read(&cfg.resolve(&f.population))?;
    pop.check_matches(&grid, "population")?;
    let population = PopulationGrid::new(&grid, pop.values.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect())?;
    let mut valid: Vec<bool> = sulfate.values.iter().map(|v| !v.is_nan()).collect();
    if let Some(m) = &f.mask {
        let mask = AsciiRaster::read(&cfg.resolve(m))?;
        mask.check_matches(&grid, "mask")?;
        for (ok, m) in valid.iter_mut().zip(&mask.values) {
            *ok &= !m.is_nan() && *m != 0.0;
        }
    }
    let obs = Observations::new(sulfate.values.clone(), valid)?;
    Ok(Dataset {
        grid,
        wind,
        operator,
        inventory,
        obs,
        population,
    })
}

impl Dataset {
    pub fn model(&self, theta: Theta) -> Result<SulfateModel> {
        SulfateModel::new(self.operator.clone(), self.inventory.x.clone(), theta)
    }

    pub fn posterior(&self, cfg: &RunConfig) -> Result<Posterior> {
        Posterior::new(self.model(cfg.base_theta())?, self.obs.clone(), cfg.prior)
    }
}

// ---------------------------------------------------------------- stamps and traces

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStamp {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSidecar {
    pub chain: usize,
    pub seed: u64,
    pub config_hash: String,
    pub iterations: usize,
    pub burn_in: usize,
    pub acceptance: BTreeMap<String, f64>,
    pub step_sizes_burn_in: BTreeMap<String, f64>,
    pub step_sizes_final: BTreeMap<String, f64>,
    pub failed_proposals: u64,
    pub delta: f64,
    #[serde(rename = "T")]
    pub t: f64,
}

const TRACE_HEADER: [&str; 7] = ["iter", "gamma", "alpha", "eta", "beta", "sigma2", "logpost"];

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `chain_<c>.csv` and `chain_<c>.json` per trace into `dir`.
pub fn write_traces(dir: &Path, traces: &[Trace], stamp: &RunStamp) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for t in traces {
        let csv_path = dir.join(format!("chain_{}.csv", t.chain));
        let mut s = TRACE_HEADER.join(",");
        s.push('\n');
        for (i, (row, lp)) in t.samples.iter().zip(&t.logpost).enumerate() {
            let _ = writeln!(s, "{i},{},{},{},{},{},{lp}", row[0], row[1], row[2], row[3], row[4]);
        }
        write_file(&csv_path, s.as_bytes())?;
        let side = TraceSidecar {
            chain: t.chain,
            seed: t.seed,
            config_hash: stamp.config_hash.clone(),
            iterations: t.samples.len(),
            burn_in: t.burn_in,
            acceptance: t.acceptance.clone(),
            step_sizes_burn_in: t.step_sizes_burn_in.clone(),
            step_sizes_final: t.step_sizes_final.clone(),
            failed_proposals: t.failed_proposals,
            delta: t.delta,
            t: t.t,
        };
        let json_path = dir.join(format!("chain_{}.json", t.chain));
        write_file(&json_path, (to_json_pretty(&side)? + "\n").as_bytes())?;
        written.push(csv_path);
        written.push(json_path);
    }
    Ok(written)
}

/// Reads every `chain_<c>.csv` with its sidecar from `dir`, ordered by chain.
pub fn read_traces(dir: &Path) -> Result<Vec<Trace>> {
    let mut chains: Vec<usize> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("chain_")?.strip_suffix(".csv")?.parse().ok()
        })
        .collect();
    chains.sort_unstable();
    if chains.is_empty() {
        return Err(Error::Data(format!("no chain_*.csv traces in {}", dir.display())));
    }
    chains.iter().map(|&c| read_trace(dir, c)).collect()
}

fn read_trace(dir: &Path, chain: usize) -> Result<Trace> {
    let json_path = dir.join(format!("chain_{chain}.json"));
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let side: TraceSidecar = serde_json::from_str(&text).map_err(|e| Error::parse(&json_path, e.to_string()))?;
    let csv_path = dir.join(format!("chain_{chain}.csv"));
    let mut rdr = csv::Reader::from_path(&csv_path).map_err(|e| Error::parse(&csv_path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::parse(&csv_path, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(Error::parse(&csv_path, format!("header must be `{}`", TRACE_HEADER.join(","))));
    }
    let mut samples = Vec::new();
    let mut logpost = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(&csv_path, e.to_string()))?;
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(&csv_path, format!("row {}: {e}", k + 1)))?;
        if vals.len() != 6 {
            return Err(Error::parse(&csv_path, format!("row {} has {} columns", k + 1, vals.len() + 1)));
        }
        let row = [vals[0], vals[1], vals[2], vals[3], vals[4]];
        if row.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Data(format!("{}: row {} violates positivity", csv_path.display(), k + 1)));
        }
        samples.push(row);
        logpost.push(vals[5]);
    }
    if samples.len() != side.iterations {
        return Err(Error::Data(format!(
            "{} has {} rows, sidecar says {}",
            csv_path.display(),
            samples.len(),
            side.iterations
        )));
    }
    Ok(Trace {
        chain: side.chain,
        seed: side.seed,
        burn_in: side.burn_in,
        samples,
        logpost,
        loglik: Vec::new(),
        acceptance: side.acceptance,
        step_sizes_burn_in: side.step_sizes_burn_in,
        step_sizes_final: side.step_sizes_final,
        failed_proposals: side.failed_proposals,
        delta: side.delta,
        t: side.t,
    })
}

// ---------------------------------------------------------------- summary table

fn fmt_num(v: f64) -> String {
    if !v.is_finite() {
        return "NaN".into();
    }
    let a = v.abs();
    if a == 0.0 || (1e-3..1e6).contains(&a) {
        let decimals = (3 - a.log10().floor() as i32).clamp(0, 6) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.3e}")
    }
}

/// Posterior summary laid out like a parameter-estimate table.
pub fn write_summary_table(traces: &[Trace], stamp: Option<&RunStamp>) -> Result<String> {
    let rows = summarize(traces)?;
    let mut s = String::new();
    if let Some(st) = stamp {
        let _ = writeln!(s, "# config_hash: {}", st.config_hash);
        let _ = writeln!(s, "# seed: {}", st.seed);
    }
    let kept: usize = traces.iter().map(|t| t.kept().len()).sum();
    let _ = writeln!(s, "# chains: {}, post-burn-in samples: {kept}", traces.len());
    let header = ["Parameter", "Interpretation", "Mean", "95% CI", "R-hat", "ESS"];
    let mut table: Vec<[String; 6]> = vec![header.map(String::from)];
    for r in &rows {
        table.push([
            r.param.name().to_string(),
            r.param.interpretation().to_string(),
            fmt_num(r.mean),
            format!("({}, {})", fmt_num(r.lo), fmt_num(r.hi)),
            if r.rhat.is_finite() { format!("{:.3}", r.rhat) } else { "NaN".into() },
            if r.ess.is_finite() { format!("{:.0}", r.ess) } else { "NaN".into() },
        ]);
    }
    let widths: Vec<usize> = (0..6).map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    for (k, r) in table.iter().enumerate() {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(s, "{}", line.join("  ").trim_end());
        if k == 0 {
            let _ = writeln!(s, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        }
    }
    Ok(s)
}

pub fn to_json_pretty<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Numerical(format!("serializing JSON: {e}")))
}

// ---------------------------------------------------------------- model bundle

/// A fitted model packaged for forecasting and serving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub grid: GridSpec,
    pub wind: FaceWind,
    pub facilities: Vec<Facility>,
    pub population: Vec<f64>,
    /// Pooled post-burn-in rows in (gamma, alpha, eta, beta, sigma2) order.
    pub trace: Vec<[f64; 5]>,
    pub delta: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub theta_mean: BTreeMap<String, f64>,
    pub ci95: BTreeMap<String, [f64; 2]>,
    /// Mean SO4 response to one ton removed at each facility, at the posterior mean.
    pub unit_responses: Vec<Vec<f64>>,
    /// Mean SO4 field at the posterior mean with the full inventory.
    pub baseline_mean: Vec<f64>,
    pub config_hash: String,
    pub seed: u64,
}

impl ModelBundle {
    pub fn build(ds: &Dataset, traces: &[Trace], stamp: &RunStamp) -> Result<Self> {
        let rows: Vec<[f64; 5]> = traces.iter().flat_map(|t| t.kept().iter().copied()).collect();
        let first = traces
            .first()
            .filter(|_| !rows.is_empty())
            .ok_or_else(|| Error::Data("bundle needs a nonempty post-burn-in trace".into()))?;
        let summary = summarize(traces)?;
        let theta_mean: BTreeMap<String, f64> = summary.iter().map(|r| (r.param.name().to_string(), r.mean)).collect();
        let ci95 = summary.iter().map(|r| (r.param.name().to_string(), [r.lo, r.hi])).collect();
        let mut bundle = ModelBundle {
            grid: GridSpec::of(&ds.grid),
            wind: ds.wind.clone(),
            facilities: ds.inventory.facilities.clone(),
            population: ds.population.pop.clone(),
            trace: rows,
            delta: first.delta,
            t: first.t,
            theta_mean,
            ci95,
            unit_responses: Vec::new(),
            baseline_mean: Vec::new(),
            config_hash: stamp.config_hash.clone(),
            seed: stamp.seed,
        };
        let theta = bundle.posterior_mean();
        let mut model = ds.model(theta)?;
        bundle.unit_responses = unit_responses(&mut model, &theta, &ds.inventory)?;
        bundle.baseline_mean = model.so4_mean()?;
        Ok(bundle)
    }

    pub fn posterior_mean(&self) -> Theta {
        let g = |p: Param| self.theta_mean.get(p.name()).copied().unwrap_or(f64::NAN);
        Theta {
            gamma: g(Param::Gamma),
            alpha: g(Param::Alpha),
            eta: g(Param::Eta),
            beta: g(Param::Beta),
            sigma2: g(Param::Sigma2),
            delta: self.delta,
            t: self.t,
        }
    }

    pub fn thetas(&self) -> Vec<Theta> {
        self.trace.iter().map(|r| theta_from_row(r, self.delta, self.t)).collect()
    }

    pub fn grid(&self) -> Result<Grid> {
        self.grid.build()
    }

    pub fn inventory(&self) -> Result<EmissionsInventory> {
        rasterize_emissions(&self.facilities, &self.grid()?)
    }

    pub fn population_grid(&self) -> Result<PopulationGrid> {
        PopulationGrid::new(&self.grid()?, self.population.clone())
    }

    pub fn model(&self) -> Result<SulfateModel> {
        let grid = self.grid()?;
        let op = Arc::new(TransportOperator::new(&grid, &self.wind)?);
        SulfateModel::new(op, self.inventory()?.x, self.posterior_mean())
    }

    pub fn forecaster(&self) -> Result<Forecaster> {
        Forecaster::from_thetas(self.model()?, self.inventory()?, self.thetas())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.nx * self.grid.ny;
        if self.trace.is_empty() {
            return Err(Error::Data("bundle trace is empty".into()));
        }
        if self.unit_responses.len() != self.facilities.len() || self.unit_responses.iter().any(|u| u.len() != n) {
            return Err(Error::Data("bundle unit responses do not match facilities and grid".into()));
        }
        if self.population.len() != n || self.baseline_mean.len() != n {
            return Err(Error::Data("bundle fields do not match the grid".into()));
        }
        self.posterior_mean().validate()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::Numerical(format!("serializing bundle: {e}")))?;
        write_file(path, s.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let b: ModelBundle = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        b.validate()?;
        Ok(b)
    }
}

/// Pooled rows of traces as thetas; convenience for callers holding traces.
pub fn pooled_thetas(traces: &[Trace]) -> Vec<Theta> {
    pooled(traces)
}
