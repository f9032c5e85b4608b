//! Emission-intervention scenarios and posterior-predictive reduction forecasts.
//!
//! A scenario removes a fraction of selected facilities' SO2. The removed
//! tonnage X* drives a reduction field through the same coupled model, so each
//! draw is `N(mu(theta, X*), Sigma_theta)` with theta resampled from the trace.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{EmissionsInventory, PopulationGrid};
use crate::inference::{pooled, quantile, stable_mean, substream, Trace};
use crate::sulfate::{SulfateModel, Theta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub label: String,
    /// Facility id to fraction of its SO2 removed.
    pub reductions: BTreeMap<String, f64>,
}

impl Scenario {
    pub fn new(label: impl Into<String>, reductions: BTreeMap<String, f64>, inv: &EmissionsInventory) -> Result<Self> {
        for (id, &f) in &reductions {
            if inv.facility_index(id).is_none() {
                return Err(Error::UnknownFacility(id.clone()));
            }
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Domain(format!("fraction for {id} is {f}, must lie in [0, 1]")));
            }
        }
        Ok(Scenario {
            label: label.into(),
            reductions,
        })
    }

    pub fn single(id: &str, fraction: f64, inv: &EmissionsInventory) -> Result<Self> {
        Scenario::new(id, BTreeMap::from([(id.to_string(), fraction)]), inv)
    }

    pub fn none(label: impl Into<String>) -> Self {
        Scenario {
            label: label.into(),
            reductions: BTreeMap::new(),
        }
    }
}

/// Per-cell removed emissions X* for a scenario.
pub fn apply_scenario(inv: &EmissionsInventory, sc: &Scenario) -> Result<Vec<f64>> {
    let mut xs = vec![0.0; inv.x.len()];
    for (id, &f) in &sc.reductions {
        let i = inv.facility_index(id).ok_or_else(|| Error::UnknownFacility(id.clone()))?;
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Domain(format!("fraction for {id} is {f}, must lie in [0, 1]")));
        }
        if let Some(k) = inv.cells[i] {
            xs[k] += f * inv.facilities[i].so2_tons;
        }
    }
    Ok(xs)
}

/// Inventory after the scenario: each facility keeps `(1 - fraction)` of its tons.
pub fn reduced_inventory(inv: &EmissionsInventory, sc: &Scenario) -> Result<EmissionsInventory> {
    let xs = apply_scenario(inv, sc)?;
    let mut out = inv.clone();
    for (id, &f) in &sc.reductions {
        let i = inv.facility_index(id).expect("validated by apply_scenario");
        out.facilities[i].so2_tons *= 1.0 - f;
    }
    for (x, r) in out.x.iter_mut().zip(&xs) {
        *x = (*x - r).max(0.0);
    }
    Ok(out)
}

/// Population-weighted average of a field.
pub fn population_exposure(field: &[f64], pop: &PopulationGrid) -> Result<f64> {
    if field.len() != pop.pop.len() {
        return Err(Error::Dimension(format!(
            "field has {} cells, population has {}",
            field.len(),
            pop.pop.len()
        )));
    }
    let total = pop.total();
    if !(total > 0.0) {
        return Err(Error::DegenerateWeights("population sums to zero".into()));
    }
    Ok(field.iter().zip(&pop.pop).map(|(f, p)| f * p).sum::<f64>() / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureSummary {
    pub label: String,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    /// Monte Carlo standard error of `mean`.
    pub se: f64,
    pub n_draws: usize,
    pub per_draw: Vec<f64>,
}

impl ExposureSummary {
    pub fn from_draws(label: impl Into<String>, per_draw: Vec<f64>) -> Result<Self> {
        let n = per_draw.len();
        if n == 0 {
            return Err(Error::Domain("exposure summary needs at least one draw".into()));
        }
        let mean = stable_mean(&per_draw);
        let se = if n > 1 {
            (per_draw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0) / n as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = per_draw.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(ExposureSummary {
            label: label.into(),
            mean,
            lo: quantile(&sorted, 0.025),
            hi: quantile(&sorted, 0.975),
            se,
            n_draws: n,
            per_draw,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub scenario: Scenario,
    pub mean_field: Vec<f64>,
    pub exposure: ExposureSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFacility {
    pub id: String,
    pub summary: ExposureSummary,
}

/// Posterior-predictive forecasts from a fitted model.
#[derive(Debug, Clone)]
pub struct Forecaster {
    model: SulfateModel,
    inventory: EmissionsInventory,
    draws: Vec<Theta>,
    include_noise: bool,
}

impl Forecaster {
    /// Uses the pooled post-burn-in rows of `traces`.
    pub fn new(model: SulfateModel, inventory: EmissionsInventory, traces: &[Trace]) -> Result<Self> {
        Forecaster::from_thetas(model, inventory, pooled(traces))
    }

    pub fn from_thetas(model: SulfateModel, inventory: EmissionsInventory, draws: Vec<Theta>) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Domain("trace has no post-burn-in samples".into()));
        }
        if inventory.x.len() != model.n() {
            return Err(Error::Dimension(format!(
                "inventory has {} cells, model has {}",
                inventory.x.len(),
                model.n()
            )));
        }
        for th in &draws {
            th.validate()?;
        }
        Ok(Forecaster {
            model,
            inventory,
            draws,
            include_noise: true,
        })
    }

    /// Posterior-mean-only forecasts when `false`.
    pub fn with_noise(mut self, include_noise: bool) -> Self {
        self.include_noise = include_noise;
        self
    }

    pub fn include_noise(&self) -> bool {
        self.include_noise
    }

    pub fn inventory(&self) -> &EmissionsInventory {
        &self.inventory
    }

    pub fn thetas(&self) -> &[Theta] {
        &self.draws
    }

    pub fn n(&self) -> usize {
        self.model.n()
    }

    /// Forecaster over the inventory left after `sc` has been carried out.
    pub fn committed(&self, sc: &Scenario) -> Result<Forecaster> {
        Ok(Forecaster {
            inventory: reduced_inventory(&self.inventory, sc)?,
            ..self.clone()
        })
    }

    /// `n_draws` reduction fields; draw `k` uses its own substream of `seed`.
    pub fn forecast_reduction(&self, sc: &Scenario, n_draws: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if n_draws == 0 {
            return Err(Error::Domain("n_draws must be >= 1".into()));
        }
        let xs = apply_scenario(&self.inventory, sc)?;
        (0..n_draws)
            .into_par_iter()
            .map_init(
                || self.model.clone(),
                |model, k| {
                    let (th, mut rng) = self.draw_theta(seed, k);
                    if self.include_noise {
                        model.sample_field_for(&th, &xs, &mut rng)
                    } else {
                        model.so4_mean_for(&th, &xs)
                    }
                },
            )
            .collect()
    }

    fn draw_theta(&self, seed: u64, k: usize) -> (Theta, rand_chacha::ChaCha8Rng) {
        let mut rng = substream(seed, k as u64);
        let th = self.draws[rng.random_range(0..self.draws.len())];
        (th, rng)
    }

    /// Average of the mean reduction fields `mu(theta_k, X*)` over the same
    /// theta draws `forecast_reduction` uses for `seed`, without field noise.
    pub fn expected_reduction(&self, sc: &Scenario, n_draws: usize, seed: u64) -> Result<Vec<f64>> {
        if n_draws == 0 {
            return Err(Error::Domain("n_draws must be >= 1".into()));
        }
        let xs = apply_scenario(&self.inventory, sc)?;
        let fields: Vec<Vec<f64>> = (0..n_draws)
            .into_par_iter()
            .map_init(
                || self.model.clone(),
                |model, k| model.so4_mean_for(&self.draw_theta(seed, k).0, &xs),
            )
            .collect::<Result<_>>()?;
        Ok(mean_of_fields(&fields, self.n()))
    }

    pub fn forecast(&self, sc: &Scenario, n_draws: usize, seed: u64, pop: &PopulationGrid) -> Result<Forecast> {
        let fields = self.forecast_reduction(sc, n_draws, seed)?;
        let mean_field = mean_of_fields(&fields, self.n());
        let per_draw = fields
            .iter()
            .map(|f| population_exposure(f, pop))
            .collect::<Result<Vec<_>>>()?;
        Ok(Forecast {
            scenario: sc.clone(),
            mean_field,
            exposure: ExposureSummary::from_draws(sc.label.clone(), per_draw)?,
        })
    }

    /// Single-facility scenarios ranked by mean exposure reduction, largest first.
    ///
    /// Every candidate uses the same seed, so the comparison runs on common random numbers.
    pub fn rank_facilities(
        &self,
        candidates: &[String],
        fraction: f64,
        n_draws: usize,
        pop: &PopulationGrid,
        seed: u64,
    ) -> Result<Vec<RankedFacility>> {
        if candidates.is_empty() {
            return Err(Error::Domain("no candidate facilities to rank".into()));
        }
        let mut out = Vec::with_capacity(candidates.len());
        for id in candidates {
            let sc = Scenario::single(id, fraction, &self.inventory)?;
            let f = self.forecast(&sc, n_draws, seed, pop)?;
            out.push(RankedFacility {
                id: id.clone(),
                summary: f.exposure,
            });
        }
        out.sort_by(|a, b| b.summary.mean.total_cmp(&a.summary.mean).then_with(|| a.id.cmp(&b.id)));
        Ok(out)
    }

    /// Ranking after `committed` has already been applied to the inventory.
    pub fn rank_facilities_after(
        &self,
        committed: &Scenario,
        candidates: &[String],
        fraction: f64,
        n_draws: usize,
        pop: &PopulationGrid,
        seed: u64,
    ) -> Result<Vec<RankedFacility>> {
        self.committed(committed)?
            .rank_facilities(candidates, fraction, n_draws, pop, seed)
    }
}

fn mean_of_fields(fields: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut mean = vec![0.0; n];
    for f in fields {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= fields.len() as f64);
    mean
}

/// Mean SO4 response to one ton removed at each facility, at a fixed theta.
///
/// Facilities outside the grid get an all-zero field.
pub fn unit_responses(model: &mut SulfateModel, theta: &Theta, inv: &EmissionsInventory) -> Result<Vec<Vec<f64>>> {
    let n = model.n();
    let mut by_cell: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut out = Vec::with_capacity(inv.facilities.len());
    for cell in &inv.cells {
        match cell {
            None => out.push(vec![0.0; n]),
            Some(k) => {
                if !by_cell.contains_key(k) {
                    let mut e = vec![0.0; n];
                    e[*k] = 1.0;
                    by_cell.insert(*k, model.so4_mean_for(theta, &e)?);
                }
                out.push(by_cell[k].clone());
            }
        }
    }
    Ok(out)
}

/// JSON export of one forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastExport {
    pub scenario: Scenario,
    pub n_draws: usize,
    pub mean_field: Vec<f64>,
    pub exposure: Interval,
    pub per_draw_exposures: Vec<f64>,
    pub include_noise: bool,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl ForecastExport {
    pub fn new(f: &Forecast, include_noise: bool, seed: u64, config_hash: Option<String>) -> Self {
        ForecastExport {
            scenario: f.scenario.clone(),
            n_draws: f.exposure.n_draws,
            mean_field: f.mean_field.clone(),
            exposure: Interval {
                mean: f.exposure.mean,
                lo: f.exposure.lo,
                hi: f.exposure.hi,
            },
            per_draw_exposures: f.exposure.per_draw.clone(),
            include_noise,
            seed,
            config_hash,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, rasterize_emissions, Facility, FaceWind, Grid};
    use crate::operator::TransportOperator;
    use std::sync::Arc;

    fn fac(id: &str, lon: f64, lat: f64, tons: f64) -> Facility {
        Facility {
            facility_id: id.into(),
            name: format!("Plant {id}"),
            lon,
            lat,
            so2_tons: tons,
        }
    }

    fn theta() -> Theta {
        Theta {
            gamma: 1510.0,
            alpha: 0.53,
            eta: 0.5,
            beta: 3.45,
            sigma2: 24_000.0,
            delta: 50.0,
            t: 1.0,
        }
    }

    struct Fixture {
        grid: Grid,
        inv: EmissionsInventory,
        model: SulfateModel,
    }

    fn fixture(n: usize, wind: (f64, f64), facilities: Vec<Facility>) -> Fixture {
        let grid = build_grid(n, n, (-85.0, 37.0), 14.2, 14.2).unwrap();
        let w = FaceWind::uniform(&grid, wind.0, wind.1);
        let op = Arc::new(TransportOperator::new(&grid, &w).unwrap());
        let inv = rasterize_emissions(&facilities, &grid).unwrap();
        let model = SulfateModel::new(op, inv.x.clone(), theta()).unwrap();
        Fixture { grid, inv, model }
    }

    fn center_of(g: &Grid, i: usize, j: usize) -> (f64, f64) {
        g.cell_center(i, j)
    }

    fn two_plants(n: usize) -> Fixture {
        let g = build_grid(n, n, (-85.0, 37.0), 14.2, 14.2).unwrap();
        let (a, b) = (center_of(&g, 1, 1), center_of(&g, n - 2, n - 2));
        fixture(
            n,
            (5.0, 0.0),
            vec![fac("A", a.0, a.1, 10_000.0), fac("B", b.0, b.1, 4_000.0)],
        )
    }

    #[test]
    fn scenario_arithmetic() {
        let f = two_plants(5);
        let xs = apply_scenario(&f.inv, &Scenario::none("null")).unwrap();
        assert!(xs.iter().all(|v| *v == 0.0));
        let xs = apply_scenario(&f.inv, &Scenario::single("A", 0.8, &f.inv).unwrap()).unwrap();
        let k = f.inv.cells[0].unwrap();
        assert_eq!(xs[k], 8000.0);
        assert_eq!(xs.iter().sum::<f64>(), 8000.0);
    }

    #[test]
    fn shared_cell_scenario_adds() {
        let g = build_grid(3, 3, (-85.0, 37.0), 14.2, 14.2).unwrap();
        let c = g.cell_center(1, 1);
        let f = fixture(3, (0.0, 0.0), vec![fac("p", c.0, c.1, 100.0), fac("q", c.0, c.1, 200.0)]);
        let sc = Scenario::new("both", BTreeMap::from([("p".into(), 1.0), ("q".into(), 0.5)]), &f.inv).unwrap();
        let xs = apply_scenario(&f.inv, &sc).unwrap();
        assert_eq!(xs[g.index(1, 1)], 200.0);
        let red = reduced_inventory(&f.inv, &sc).unwrap();
        assert_eq!(red.x[g.index(1, 1)], 100.0);
        assert_eq!(red.facilities[0].so2_tons, 0.0);
    }

    #[test]
    fn scenario_validation() {
        let f = two_plants(5);
        assert!(matches!(
            Scenario::single("nope", 0.5, &f.inv),
            Err(Error::UnknownFacility(_))
        ));
        assert!(Scenario::single("A", 1.5, &f.inv).is_err());
        assert!(Scenario::single("A", -0.1, &f.inv).is_err());
    }

    #[test]
    fn exposure_arithmetic() {
        let g = build_grid(2, 2, (0.0, 0.0), 1.0, 1.0).unwrap();
        let uniform = PopulationGrid::new(&g, vec![5.0; 4]).unwrap();
        assert_eq!(population_exposure(&[3.0; 4], &uniform).unwrap(), 3.0);
        let point = PopulationGrid::new(&g, vec![0.0, 0.0, 7.0, 0.0]).unwrap();
        assert_eq!(population_exposure(&[1.0, 2.0, 3.0, 4.0], &point).unwrap(), 3.0);
        let p = PopulationGrid::new(&g, vec![1.0, 3.0, 0.0, 0.0]).unwrap();
        assert_eq!(population_exposure(&[2.0, 6.0, 0.0, 0.0], &p).unwrap(), 5.0);
        let zero = PopulationGrid::new(&g, vec![0.0; 4]).unwrap();
        assert!(matches!(
            population_exposure(&[1.0; 4], &zero),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn deterministic_limit() {
        let f = two_plants(5);
        let th = theta().with(crate::sulfate::Param::Sigma2, 1e-20);
        let fc = Forecaster::from_thetas(f.model.clone(), f.inv.clone(), vec![th]).unwrap();
        let sc = Scenario::single("A", 0.8, &f.inv).unwrap();
        let mu = f.model.clone().so4_mean_for(&th, &apply_scenario(&f.inv, &sc).unwrap()).unwrap();
        for d in fc.forecast_reduction(&sc, 5, 1).unwrap() {
            for (a, b) in d.iter().zip(&mu) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn expected_reduction_follows_noise_free_draws() {
        let f = two_plants(5);
        let ths = vec![theta(), theta().with(crate::sulfate::Param::Gamma, 800.0)];
        let fc = Forecaster::from_thetas(f.model.clone(), f.inv.clone(), ths).unwrap();
        let sc = Scenario::single("B", 0.5, &f.inv).unwrap();
        let exp = fc.expected_reduction(&sc, 9, 3).unwrap();
        let quiet = fc.clone().with_noise(false).forecast_reduction(&sc, 9, 3).unwrap();
        let avg = mean_of_fields(&quiet, 25);
        assert_eq!(exp, avg);
        let null = fc.expected_reduction(&Scenario::none("null"), 1, 3).unwrap();
        assert!(null.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn draw_mean_matches_model_mean() {
        let f = two_plants(5);
        let th = theta();
        let fc = Forecaster::from_thetas(f.model.clone(), f.inv.clone(), vec![th]).unwrap();
        let sc = Scenario::single("A", 1.0, &f.inv).unwrap();
        let draws = fc.forecast_reduction(&sc, 2000, 17).unwrap();
        let mu = f.model.clone().so4_mean_for(&th, &apply_scenario(&f.inv, &sc).unwrap()).unwrap();
        let n = draws.len() as f64;
        for k in 0..mu.len() {
            let col: Vec<f64> = draws.iter().map(|d| d[k]).collect();
            let m = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!((m - mu[k]).abs() < 3.0 * sd / n.sqrt(), "cell {k}: {m} vs {}", mu[k]);
        }
    }

    #[test]
    fn mean_field_is_linear_and_superposes() {
        let f = two_plants(6);
        let pop = PopulationGrid::new(&f.grid, vec![1.0; 36]).unwrap();
        let fc = Forecaster::from_thetas(f.model.clone(), f.inv.clone(), vec![theta()])
            .unwrap()
            .with_noise(false);
        let mean = |sc: &Scenario| fc.forecast(sc, 1, 0, &pop).unwrap().mean_field;
        let full = mean(&Scenario::single("A", 1.0, &f.inv).unwrap());
        let part = mean(&Scenario::single("A", 0.35, &f.inv).unwrap());
        let b = mean(&Scenario::single("B", 1.0, &f.inv).unwrap());
        let both = mean(
            &Scenario::new("AB", BTreeMap::from([("A".into(), 1.0), ("B".into(), 1.0)]), &f.inv).unwrap(),
        );
        let rel = |x: &[f64], y: &[f64]| {
            let num: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            num / y.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let scaled: Vec<f64> = full.iter().map(|v| 0.35 * v).collect();
        assert!(rel(&part, &scaled) <= 1e-10);
        let sum: Vec<f64> = full.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert!(rel(&both, &sum) <= 1e-10);
    }

    #[test]
    fn symmetric_plants_tie() {
        let g = build_grid(7, 7, (-85.0, 37.0), 14.2, 14.2).unwrap();
        let (a, b) = (g.cell_center(1, 3), g.cell_center(5, 3));
        let f = fixture(7, (0.0, 3.0), vec![fac("east", b.0, b.1, 5000.0), fac("west", a.0, a.1, 5000.0)]);
        let pop = PopulationGrid::new(&g, vec![1.0; 49]).unwrap();
        let fc = Forecaster::from_thetas(f.model.clone(), f.inv.clone(), vec![theta()]).unwrap();
        let ids = vec!["east".to_string(), "west".to_string()];
        let r = fc.rank_facilities(&ids, 0.8, 400, &pop, 3).unwrap();
        let (x, y) = (&r[0].summary, &r[1].summary);
        assert!((x.mean - y.mean).abs() <= 3.0 * (x.se * x.se + y.se * y.se).sqrt());
        assert!(x.lo <= x.mean && x.mean <= x.hi);
    }

    #[test]
    fn large_upwind_emitter_dominates() {
        // population sits in the east; wind blows west to east
        let g = build_grid(9, 5, (-85.0, 37.0), 14.2, 14.2).unwrap();
        let (big, small) = (g.cell_center(4, 2), g.cell_center(1, 2));
        let f = fixture(
            9,
            (0.0, 0.0),
            vec![fac("big", big.0, big.1, 20_000.0), fac("small", small.0, small.1, 10_000.0)],
        );
        let g = f.grid.clone();
        let w = FaceWind::uniform(&g, 40.0, 0.0);
        let op = Arc::new(TransportOperator::new(&g, &w).unwrap());
        let model = SulfateModel::new(op, f.inv.x.clone(), theta()).unwrap();
        let pop: Vec<f64> = (0..g.n_cells())
            .map(|k| if k % g.nx >= 6 && k / g.nx == 2 { 1000.0 } else { 1.0 })
            .collect();
        let pop = PopulationGrid::new(&g, pop).unwrap();
        let fc = Forecaster::from_thetas(model, f.inv.clone(), vec![theta()]).unwrap();
        let ids = vec!["small".to_string(), "big".to_string()];
        let r = fc.rank_facilities(&ids, 0.8, 200, &pop, 5).unwrap();
        assert_eq!(r[0].id, "big");
        assert!(r[0].summary.mean > 2.0 * r[1].summary.mean);
    }

    #[test]
    fn ranking_is_deterministic_and_sequential_mode_shrinks() {
        let f = two_plants(5);
        let pop = PopulationGrid::new(&f.grid, vec![1.0; 25]).unwrap();
        let fc = Forecaster::from_thetas(f.model.clone(), f.inv.clone(), vec![theta()]).unwrap();
        let ids = vec!["A".to_string(), "B".to_string()];
        let r1 = fc.rank_facilities(&ids, 0.8, 50, &pop, 9).unwrap();
        let r2 = fc.rank_facilities(&ids, 0.8, 50, &pop, 9).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1[0].id, "A");
        let single = fc.rank_facilities(&ids[..1], 0.8, 10, &pop, 9).unwrap();
        assert_eq!(single.len(), 1);
        let committed = Scenario::single("A", 0.8, &f.inv).unwrap();
        let fc = fc.with_noise(false);
        let before = fc.rank_facilities(&ids, 0.8, 50, &pop, 9).unwrap();
        let after = fc.rank_facilities_after(&committed, &ids, 0.8, 50, &pop, 9).unwrap();
        let a_before = before.iter().find(|r| r.id == "A").unwrap().summary.mean;
        let a_after = after.iter().find(|r| r.id == "A").unwrap().summary.mean;
        assert!((a_after / a_before - 0.2).abs() < 1e-9);
    }

    #[test]
    fn unit_responses_scale_to_forecast_mean() {
        let f = two_plants(5);
        let mut m = f.model.clone();
        let u = unit_responses(&mut m, &theta(), &f.inv).unwrap();
        let fc = Forecaster::from_thetas(f.model.clone(), f.inv.clone(), vec![theta()])
            .unwrap()
            .with_noise(false);
        let sc = Scenario::single("B", 0.5, &f.inv).unwrap();
        let pop = PopulationGrid::new(&f.grid, vec![1.0; 25]).unwrap();
        let mean = fc.forecast(&sc, 1, 0, &pop).unwrap().mean_field;
        for (a, b) in mean.iter().zip(&u[1]) {
            assert!((a - 2000.0 * b).abs() <= 1e-10 * a.abs());
        }
    }

    #[test]
    fn empty_trace_rejected() {
        let f = two_plants(5);
        assert!(Forecaster::from_thetas(f.model, f.inv, vec![]).is_err());
    }
}
