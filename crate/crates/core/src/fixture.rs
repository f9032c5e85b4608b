//! Synthetic data sets drawn from the model itself.
//!
//! A fixture is a grid, a smooth wind field, a handful of facilities, a
//! population surface and one sulfate field sampled at a known theta. It can
//! be written out as a complete run directory (rasters, CSV, `run.json`).

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{build_grid, interpolate_wind, rasterize_emissions, Facility, FaceWind, Grid, PopulationGrid, WindSample};
use crate::inference::{substream, McmcConfig};
use crate::io::{write_emissions_csv, AsciiRaster, Dataset, ForecastSettings, GridSpec};
use crate::operator::TransportOperator;
use crate::sulfate::{Observations, SulfateModel, Theta};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub nx: usize,
    pub ny: usize,
    /// Lower-left corner (lon, lat).
    pub origin: (f64, f64),
    pub cellsize_deg: f64,
    pub n_facilities: usize,
    pub theta: Theta,
    /// Mean wind speed; direction and strength vary smoothly over the domain.
    pub wind_speed: f64,
    pub seed: u64,
}

impl FixtureSpec {
    /// Ohio-valley sized domain at the reference parameters.
    pub fn new(nx: usize, ny: usize, seed: u64) -> Self {
        FixtureSpec {
            nx,
            ny,
            origin: (-88.0, 36.0),
            cellsize_deg: 1.0 / 3.0,
            n_facilities: (nx * ny / 24).clamp(2, 12),
            theta: Theta::reference(),
            wind_speed: 150.0,
            seed,
        }
    }

    /// The 4x4 fixture used by `validate`.
    pub fn small() -> Self {
        FixtureSpec::new(4, 4, 7)
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub grid: Grid,
    /// Wind samples on a lattice one cell wider than the grid on every side.
    pub wind_u: AsciiRaster,
    pub wind_v: AsciiRaster,
    pub wind: FaceWind,
    pub facilities: Vec<Facility>,
    pub population: Vec<f64>,
    pub sulfate: Vec<f64>,
}

fn lattice_raster(spec: &FixtureSpec, values: Vec<f64>) -> AsciiRaster {
    let c = spec.cellsize_deg;
    AsciiRaster {
        ncols: spec.nx + 2,
        nrows: spec.ny + 2,
        xll: spec.origin.0 - c,
        yll: spec.origin.1 - c,
        dx_deg: c,
        dy_deg: c,
        nodata: Some(-9999.0),
        values,
    }
}

pub fn generate(spec: &FixtureSpec) -> Result<Fixture> {
    spec.theta.validate()?;
    if spec.n_facilities == 0 {
        return Err(Error::config("n_facilities", "must be >= 1"));
    }
    let c = spec.cellsize_deg;
    let mid_lat = spec.origin.1 + 0.5 * spec.ny as f64 * c;
    let km = crate::grid::KM_PER_DEG_LAT;
    let grid = build_grid(spec.nx, spec.ny, spec.origin, c * km * mid_lat.to_radians().cos(), c * km)?;
    let mut rng = substream(spec.seed, 0);

    // Westerly flow veering with latitude.
    let (lw, lh) = (spec.nx as f64 + 2.0, spec.ny as f64 + 2.0);
    let phase = rng.random::<f64>() * 2.0 * PI;
    let (mut us, mut vs) = (Vec::new(), Vec::new());
    for j in 0..spec.ny + 2 {
        for i in 0..spec.nx + 2 {
            let (s, t) = ((i as f64 + 0.5) / lw, (j as f64 + 0.5) / lh);
            let speed = spec.wind_speed * (1.0 + 0.3 * (2.0 * PI * s + phase).sin());
            let angle = 0.35 * (2.0 * PI * t + phase).cos();
            us.push(speed * angle.cos());
            vs.push(speed * angle.sin());
        }
    }
    let wind_u = lattice_raster(spec, us);
    let wind_v = lattice_raster(spec, vs);
    let samples: Vec<WindSample> = crate::io::wind_samples(&wind_u, &wind_v)?;
    let wind = interpolate_wind(&samples, &grid)?;

    let facilities: Vec<Facility> = (0..spec.n_facilities)
        .map(|k| {
            let fx = rng.random_range(0.1..0.9);
            let fy = rng.random_range(0.1..0.9);
            let tons = (rng.random_range(5_000.0f64..60_000.0) / 10.0).round() * 10.0;
            Facility {
                facility_id: format!("F{:02}", k + 1),
                name: format!("Synthetic plant {}", k + 1),
                lon: spec.origin.0 + fx * spec.nx as f64 * c,
                lat: spec.origin.1 + fy * spec.ny as f64 * c,
                so2_tons: tons,
            }
        })
        .collect();

    // Population: a rural floor plus one city east of the sources.
    let (cx, cy) = (0.75 * spec.nx as f64, 0.5 * spec.ny as f64);
    let scale = 0.25 * spec.nx.min(spec.ny) as f64;
    let mut population = Vec::with_capacity(grid.n_cells());
    for j in 0..spec.ny {
        for i in 0..spec.nx {
            let r2 = ((i as f64 + 0.5 - cx).powi(2) + (j as f64 + 0.5 - cy).powi(2)) / (scale * scale);
            population.push((20_000.0 + 500_000.0 * (-0.5 * r2).exp()).round());
        }
    }

    let inv = rasterize_emissions(&facilities, &grid)?;
    let op = Arc::new(TransportOperator::new(&grid, &wind)?);
    let mut model = SulfateModel::new(op, inv.x.clone(), spec.theta)?;
    let mut field_rng = substream(spec.seed, 1);
    let sulfate = model.sample_field_for(&spec.theta, &inv.x, &mut field_rng)?;

    Ok(Fixture {
        spec: spec.clone(),
        grid,
        wind_u,
        wind_v,
        wind,
        facilities,
        population,
        sulfate,
    })
}

impl Fixture {
    pub fn model(&self) -> Result<SulfateModel> {
        let op = Arc::new(TransportOperator::new(&self.grid, &self.wind)?);
        let inv = rasterize_emissions(&self.facilities, &self.grid)?;
        SulfateModel::new(op, inv.x, self.spec.theta)
    }

    pub fn observations(&self) -> Result<Observations> {
        Observations::complete(self.sulfate.clone())
    }

    /// The in-memory equivalent of loading the written run directory.
    pub fn dataset(&self) -> Result<Dataset> {
        let operator = Arc::new(TransportOperator::new(&self.grid, &self.wind)?);
        Ok(Dataset {
            grid: self.grid.clone(),
            wind: self.wind.clone(),
            operator,
            inventory: rasterize_emissions(&self.facilities, &self.grid)?,
            obs: self.observations()?,
            population: PopulationGrid::new(&self.grid, self.population.clone())?,
        })
    }

    /// Writes rasters, emissions and a `run.json` into `dir`; returns the config path.
    pub fn write_run_dir(&self, dir: &Path, mcmc: &McmcConfig) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_emissions_csv(&dir.join("emissions.csv"), &self.facilities)?;
        self.wind_u.write(&dir.join("wind_u.asc"))?;
        self.wind_v.write(&dir.join("wind_v.asc"))?;
        AsciiRaster::from_grid(&self.grid, self.sulfate.clone())?.write(&dir.join("sulfate.asc"))?;
        AsciiRaster::from_grid(&self.grid, self.population.clone())?.write(&dir.join("population.asc"))?;

        #[derive(Serialize)]
        struct Files<'a> {
            emissions: &'a str,
            wind_u: &'a str,
            wind_v: &'a str,
            sulfate: &'a str,
            population: &'a str,
        }
        #[derive(Serialize)]
        struct Run<'a> {
            grid: GridSpec,
            files: Files<'a>,
            delta: f64,
            #[serde(rename = "T")]
            t: f64,
            mcmc: &'a McmcConfig,
            forecast: ForecastSettings,
        }
        let run = Run {
            grid: GridSpec::of(&self.grid),
            files: Files {
                emissions: "emissions.csv",
                wind_u: "wind_u.asc",
                wind_v: "wind_v.asc",
                sulfate: "sulfate.asc",
                population: "population.asc",
            },
            delta: self.spec.theta.delta,
            t: self.spec.theta.t,
            mcmc,
            forecast: ForecastSettings {
                n_draws: 500,
                ..ForecastSettings::default()
            },
        };
        let path = dir.join("run.json");
        let text = crate::io::to_json_pretty(&run)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// A short MCMC configuration suited to fixture-sized problems.
pub fn quick_mcmc(seed: u64) -> McmcConfig {
    McmcConfig {
        chains: 2,
        iterations: 2000,
        burn_in: 500,
        seed,
        ..McmcConfig::default()
    }
}
