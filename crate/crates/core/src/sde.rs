//! Euler-Maruyama simulation of OU systems and of the coupled SO2/SO4 model.
//!
//! This is the brute-force reference for the closed-form distributions in
//! `ou_dist`; it only uses sparse products and Gaussian increments.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::substream;
use crate::ou_dist::{self, NoiseLoading, OuSystem};
use crate::sparse::CsrMatrix;
use crate::sulfate::{SulfateModel, Theta};

const BLOW_UP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialCondition {
    #[default]
    Zero,
    /// A draw from the closed-form stationary law.
    Stationary,
    Given(Vec<f64>),
    /// A draw from `N(mean, cov)`.
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub init: InitialCondition,
    /// Keep every `store_every`-th state (the last one is always kept).
    pub store_every: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1e-3,
            t: 1.0,
            n_paths: 1,
            seed: 0,
            init: InitialCondition::Zero,
            store_every: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::config("sim.dt", format!("must be > 0, got {}", self.dt)));
        }
        if !(self.t.is_finite() && self.t >= self.dt) {
            return Err(Error::config("sim.T", format!("must be >= dt, got {}", self.t)));
        }
        if self.store_every == 0 {
            return Err(Error::config("sim.store_every", "must be >= 1"));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t / self.dt).round().max(1.0) as usize
    }
}

/// Stored states of one path; `states[k]` is the state at `times[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Path {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("paths are never empty")
    }

    /// One row per stored step: `t,y0,y1,...`, keeping every `thin`-th row.
    pub fn write_csv<W: Write>(&self, w: W, thin: usize) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let n = self.states.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|k| format!("y{k}")));
        let to_err = |e: csv::Error| Error::Data(format!("writing path CSV: {e}"));
        out.write_record(&header).map_err(to_err)?;
        for (t, y) in self.times.iter().zip(&self.states).step_by(thin.max(1)) {
            let mut row = vec![format!("{t:e}")];
            row.extend(y.iter().map(|v| format!("{v:e}")));
            out.write_record(&row).map_err(to_err)?;
        }
        out.flush().map_err(|e| Error::Data(format!("writing path CSV: {e}")))?;
        Ok(())
    }
}

/// Rejects steps with `dt * max_k A_kk >= 0.5`.
pub fn check_stability(a: &CsrMatrix, dt: f64) -> Result<()> {
    let dmax = a.diag().into_iter().fold(0.0f64, f64::max);
    if dt * dmax >= 0.5 {
        return Err(Error::Stability(format!(
            "dt * max diag(A) = {} >= 0.5; reduce dt below {:e}",
            dt * dmax,
            0.5 / dmax
        )));
    }
    Ok(())
}

/// Trapezoidal time average of a stored path.
pub fn time_average_path(path: &Path) -> Vec<f64> {
    let n = path.states.first().map_or(0, Vec::len);
    if path.states.len() == 1 {
        return path.states[0].clone();
    }
    let span = path.times.last().unwrap() - path.times[0];
    let mut acc = vec![0.0; n];
    for w in 0..path.states.len() - 1 {
        let h = path.times[w + 1] - path.times[w];
        for (a, (y0, y1)) in acc.iter_mut().zip(path.states[w].iter().zip(&path.states[w + 1])) {
            *a += 0.5 * h * (y0 + y1);
        }
    }
    acc.iter_mut().for_each(|a| *a /= span);
    acc
}

fn initial_state<R: Rng + ?Sized>(sys: &OuSystem, init: &InitialCondition, rng: &mut R) -> Result<Vec<f64>> {
    let n = sys.n();
    match init {
        InitialCondition::Zero => Ok(vec![0.0; n]),
        InitialCondition::Given(y) => {
            if y.len() != n {
                return Err(Error::Dimension(format!("initial state has {} entries, system has {n}", y.len())));
            }
            Ok(y.clone())
        }
        InitialCondition::Stationary => Ok(ou_dist::stationary(sys)?.sample(rng)),
        InitialCondition::Gaussian { mean, cov } => {
            if mean.len() != n || cov.len() != n {
                return Err(Error::Dimension("initial Gaussian does not match the system".into()));
            }
            let c = DMatrix::from_fn(n, n, |i, j| cov[i][j]);
            let l = c
                .cholesky()
                .ok_or_else(|| Error::Numerical("initial covariance is not positive definite".into()))?
                .l();
            let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            Ok((0..n).map(|i| mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>()).collect())
        }
    }
}

/// One Euler-Maruyama integrator with reusable buffers.
struct Stepper<'a> {
    sys: &'a OuSystem,
    sd: f64,
    ay: Vec<f64>,
    eps: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(sys: &'a OuSystem, dt: f64) -> Self {
        let k = match &sys.b {
            NoiseLoading::Identity => sys.n(),
            NoiseLoading::Dense(b) => b.ncols(),
        };
        Stepper {
            sys,
            sd: (sys.sigma2 * dt).sqrt(),
            ay: vec![0.0; sys.n()],
            eps: vec![0.0; k],
        }
    }

    fn step<R: Rng + ?Sized>(&mut self, y: &mut [f64], dt: f64, step: usize, rng: &mut R) -> Result<()> {
        self.sys.a.mul_vec_into(y, &mut self.ay);
        for e in self.eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let mut norm = 0.0f64;
        match &self.sys.b {
            NoiseLoading::Identity => {
                for k in 0..y.len() {
                    y[k] += (self.sys.m[k] - self.ay[k]) * dt + self.sd * self.eps[k];
                    norm = norm.max(y[k].abs());
                }
            }
            NoiseLoading::Dense(b) => {
                for k in 0..y.len() {
                    let bw: f64 = (0..b.ncols()).map(|j| b[(k, j)] * self.eps[j]).sum();
                    y[k] += (self.sys.m[k] - self.ay[k]) * dt + self.sd * bw;
                    norm = norm.max(y[k].abs());
                }
            }
        }
        if !(norm <= BLOW_UP) {
            return Err(Error::BlowUp { step, norm });
        }
        Ok(())
    }
}

/// Simulates one path on `[0, T]`, storing every `store_every`-th state.
pub fn simulate_path<R: Rng + ?Sized>(sys: &OuSystem, cfg: &SimConfig, rng: &mut R) -> Result<Path> {
    cfg.validate()?;
    check_stability(&sys.a, cfg.dt)?;
    let mut y = initial_state(sys, &cfg.init, rng)?;
    let steps = cfg.n_steps();
    let mut path = Path {
        times: vec![0.0],
        states: vec![y.clone()],
    };
    let mut st = Stepper::new(sys, cfg.dt);
    for s in 1..=steps {
        st.step(&mut y, cfg.dt, s, rng)?;
        if s % cfg.store_every == 0 || s == steps {
            path.times.push(s as f64 * cfg.dt);
            path.states.push(y.clone());
        }
    }
    Ok(path)
}

/// Trapezoidal average over `[0, T]` accumulated during the run, without storing the path.
pub fn simulate_average<R: Rng + ?Sized>(sys: &OuSystem, cfg: &SimConfig, rng: &mut R) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_stability(&sys.a, cfg.dt)?;
    let mut y = initial_state(sys, &cfg.init, rng)?;
    let steps = cfg.n_steps();
    let mut acc: Vec<f64> = y.iter().map(|v| 0.5 * v).collect();
    let mut st = Stepper::new(sys, cfg.dt);
    for s in 1..=steps {
        st.step(&mut y, cfg.dt, s, rng)?;
        let w = if s == steps { 0.5 } else { 1.0 };
        for (a, v) in acc.iter_mut().zip(&y) {
            *a += w * v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= steps as f64);
    Ok(acc)
}

/// Time averages of `cfg.n_paths` independent paths; path `p` uses substream `p` of the seed.
pub fn ensemble_averages(sys: &OuSystem, cfg: &SimConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    check_stability(&sys.a, cfg.dt)?;
    (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| simulate_average(sys, cfg, &mut substream(cfg.seed, p as u64)))
        .collect()
}

/// Long-run samples: each path is burned in for `burn` time units, then
/// recorded `per_path` times at intervals of `spacing`.
pub fn ensemble_stationary(
    sys: &OuSystem,
    cfg: &SimConfig,
    burn: f64,
    spacing: f64,
    per_path: usize,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    check_stability(&sys.a, cfg.dt)?;
    let burn_steps = (burn / cfg.dt).round() as usize;
    let gap = ((spacing / cfg.dt).round() as usize).max(1);
    let chunks: Vec<Vec<Vec<f64>>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = substream(cfg.seed, p as u64);
            let mut y = initial_state(sys, &cfg.init, &mut rng)?;
            let mut st = Stepper::new(sys, cfg.dt);
            let mut out = Vec::with_capacity(per_path);
            let mut s = 0;
            for _ in 0..burn_steps {
                s += 1;
                st.step(&mut y, cfg.dt, s, &mut rng)?;
            }
            for _ in 0..per_path {
                for _ in 0..gap {
                    s += 1;
                    st.step(&mut y, cfg.dt, s, &mut rng)?;
                }
                out.push(y.clone());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Sample mean and (n - 1)-normalised covariance of row vectors.
pub fn empirical_moments(samples: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = samples.first().map_or(0, Vec::len);
    let m = samples.len() as f64;
    let mut mean = vec![0.0; n];
    for s in samples {
        for (a, v) in mean.iter_mut().zip(s) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m);
    let mut cov = DMatrix::zeros(n, n);
    let mut d = vec![0.0; n];
    for s in samples {
        for k in 0..n {
            d[k] = s[k] - mean[k];
        }
        for i in 0..n {
            for j in 0..=i {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..=i {
            let v = cov[(i, j)] / (m - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum So2Init {
    #[default]
    SteadyState,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPath {
    pub so4: Path,
    pub so2: Path,
}

/// `dz = (-A_z z + beta X) dt` and `dy = (-A_y y + eta z) dt + sigma dW` on `[0, T]`.
pub fn simulate_coupled<R: Rng + ?Sized>(
    model: &mut SulfateModel,
    th: &Theta,
    z_init: So2Init,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<CoupledPath> {
    th.validate()?;
    cfg.validate()?;
    let op = model.operator().clone();
    let ay = op.assemble(th.gamma, th.alpha, th.delta)?;
    let az = op.assemble(th.gamma, th.alpha, th.eta)?;
    check_stability(&ay, cfg.dt)?;
    check_stability(&az, cfg.dt)?;
    let n = model.n();
    let bx: Vec<f64> = model.emissions().iter().map(|v| th.beta * v).collect();
    let mut z = match z_init {
        So2Init::SteadyState => model.so2_steady_state_for(th, &model.emissions().to_vec())?,
        So2Init::Zero => vec![0.0; n],
    };
    let sys = OuSystem::new(ay, vec![0.0; n], th.sigma2)?;
    let mut y = initial_state(&sys, &cfg.init, rng)?;
    let steps = cfg.n_steps();
    let mut so4 = Path {
        times: vec![0.0],
        states: vec![y.clone()],
    };
    let mut so2 = Path {
        times: vec![0.0],
        states: vec![z.clone()],
    };
    let sd = (th.sigma2 * cfg.dt).sqrt();
    let (mut azz, mut ayy) = (vec![0.0; n], vec![0.0; n]);
    for s in 1..=steps {
        az.mul_vec_into(&z, &mut azz);
        sys.a.mul_vec_into(&y, &mut ayy);
        let mut norm = 0.0f64;
        for k in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            y[k] += (th.eta * z[k] - ayy[k]) * cfg.dt + sd * e;
            z[k] += (bx[k] - azz[k]) * cfg.dt;
            norm = norm.max(y[k].abs()).max(z[k].abs());
        }
        if !(norm <= BLOW_UP) {
            return Err(Error::BlowUp { step: s, norm });
        }
        if s % cfg.store_every == 0 || s == steps {
            let t = s as f64 * cfg.dt;
            so4.times.push(t);
            so4.states.push(y.clone());
            so2.times.push(t);
            so2.states.push(z.clone());
        }
    }
    Ok(CoupledPath { so4, so2 })
}
