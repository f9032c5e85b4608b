//! Coupled SO2 to SO4 model on a transport grid.
//!
//! SO2 sits at the steady state `Z = (gamma D + alpha C + eta I)^{-1} beta X`
//! and drives time-averaged sulfate `V ~ N(mu, (sigma^2 / T) (A^T A)^{-1})`
//! with `A = gamma D + alpha C + delta I` and `A mu = eta Z`.

use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::TransportOperator;
use crate::sparse::{BandedLu, CsrMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    /// Sub-annual wind transport (diffusion) rate.
    pub gamma: f64,
    /// Annual wind advection rate.
    pub alpha: f64,
    /// SO2 to SO4 reaction rate.
    pub eta: f64,
    /// Proportional SO2 emission rate.
    pub beta: f64,
    pub sigma2: f64,
    /// SO4 deposition rate, fixed during inference.
    pub delta: f64,
    /// Averaging window in years, fixed during inference.
    #[serde(rename = "T")]
    pub t: f64,
}

/// The five sampled parameters, in sweep order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    Gamma,
    Alpha,
    Eta,
    Beta,
    Sigma2,
}

impl Param {
    pub const ALL: [Param; 5] = [Param::Gamma, Param::Alpha, Param::Eta, Param::Beta, Param::Sigma2];

    pub fn name(self) -> &'static str {
        match self {
            Param::Gamma => "gamma",
            Param::Alpha => "alpha",
            Param::Eta => "eta",
            Param::Beta => "beta",
            Param::Sigma2 => "sigma2",
        }
    }

    pub fn interpretation(self) -> &'static str {
        match self {
            Param::Gamma => "rate of sub-annual wind transport",
            Param::Alpha => "rate of annual wind advection",
            Param::Eta => "SO2 to SO4 reaction rate",
            Param::Beta => "proportional rate of SO2 emission",
            Param::Sigma2 => "Brownian process variance",
        }
    }
}

impl Theta {
    /// Central estimates reported for the 2011 central-U.S. analysis.
    pub fn reference() -> Theta {
        Theta {
            gamma: 1510.0,
            alpha: 0.53,
            eta: 0.50,
            beta: 3.45,
            sigma2: 24000.0,
            delta: 50.0,
            t: 1.0,
        }
    }

    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::Gamma => self.gamma,
            Param::Alpha => self.alpha,
            Param::Eta => self.eta,
            Param::Beta => self.beta,
            Param::Sigma2 => self.sigma2,
        }
    }

    pub fn set(&mut self, p: Param, v: f64) {
        match p {
            Param::Gamma => self.gamma = v,
            Param::Alpha => self.alpha = v,
            Param::Eta => self.eta = v,
            Param::Beta => self.beta = v,
            Param::Sigma2 => self.sigma2 = v,
        }
    }

    pub fn with(mut self, p: Param, v: f64) -> Theta {
        self.set(p, v);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("gamma", self.gamma, false),
            ("alpha", self.alpha, false),
            ("eta", self.eta, true),
            ("beta", self.beta, true),
            ("sigma2", self.sigma2, true),
            ("delta", self.delta, true),
            ("T", self.t, true),
        ];
        for (name, v, strict) in checks {
            let ok = v.is_finite() && if strict { v > 0.0 } else { v >= 0.0 };
            if !ok {
                let need = if strict { "> 0" } else { ">= 0" };
                return Err(Error::Domain(format!("{name} must be {need}, got {v}")));
            }
        }
        Ok(())
    }
}

/// Observed time-averaged field with a validity mask.
#[derive(Debug, Clone)]
pub struct Observations {
    v: Vec<f64>,
    valid: Vec<bool>,
    valid_idx: Vec<usize>,
    mask_id: u64,
}

impl Observations {
    /// `mask[k]` is true for cells that enter the likelihood.
    pub fn new(v: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if v.len() != mask.len() {
            return Err(Error::Dimension(format!(
                "observations have {} cells but mask has {}",
                v.len(),
                mask.len()
            )));
        }
        for (k, (&x, &ok)) in v.iter().zip(&mask).enumerate() {
            if ok && !x.is_finite() {
                return Err(Error::Data(format!("nonfinite observation {x} in valid cell {k}")));
            }
        }
        let valid_idx: Vec<usize> = (0..v.len()).filter(|&k| mask[k]).collect();
        let mut h = DefaultHasher::new();
        valid_idx.hash(&mut h);
        v.len().hash(&mut h);
        Ok(Observations {
            v,
            valid: mask,
            valid_idx,
            mask_id: h.finish(),
        })
    }

    pub fn complete(v: Vec<f64>) -> Result<Self> {
        let n = v.len();
        Self::new(v, vec![true; n])
    }

    /// Every cell masked: the likelihood is flat.
    pub fn none(n: usize) -> Self {
        Self::new(vec![f64::NAN; n], vec![false; n]).expect("masked cells accept any value")
    }

    pub fn n(&self) -> usize {
        self.v.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.v
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn n_valid(&self) -> usize {
        self.valid_idx.len()
    }

    pub fn valid_indices(&self) -> &[usize] {
        &self.valid_idx
    }

    pub fn is_complete(&self) -> bool {
        self.valid_idx.len() == self.v.len()
    }
}

type Key = [u64; 3];

fn key(gamma: f64, alpha: f64, r: f64) -> Key {
    [gamma.to_bits(), alpha.to_bits(), r.to_bits()]
}

#[derive(Debug)]
struct Factor {
    a: CsrMatrix,
    lu: BandedLu,
    /// LU of the principal submatrix on valid cells, keyed by mask id.
    sub: Mutex<Option<(u64, SubFactor)>>,
}

#[derive(Debug, Default)]
struct Lru {
    entries: VecDeque<(Key, Arc<Factor>)>,
    hits: u64,
    misses: u64,
}

const CACHE_SLOTS: usize = 2;

impl Lru {
    fn get_or_factor(&mut self, op: &TransportOperator, gamma: f64, alpha: f64, r: f64) -> Result<Arc<Factor>> {
        let k = key(gamma, alpha, r);
        if let Some(pos) = self.entries.iter().position(|(kk, _)| *kk == k) {
            self.hits += 1;
            let e = self.entries.remove(pos).expect("position is valid");
            let f = e.1.clone();
            self.entries.push_front(e);
            return Ok(f);
        }
        self.misses += 1;
        let a = op.assemble(gamma, alpha, r)?;
        let lu = BandedLu::factor(&a)?;
        if lu.det_sign() < 0.0 {
            return Err(Error::Numerical(format!(
                "det A < 0 at gamma={gamma}, alpha={alpha}, r={r}; LU is unreliable"
            )));
        }
        let f = Arc::new(Factor {
            a,
            lu,
            sub: Mutex::new(None),
        });
        self.entries.push_front((k, f.clone()));
        self.entries.truncate(CACHE_SLOTS);
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

/// Coupled SO2/SO4 model with per-operator factorization caches.
#[derive(Debug)]
pub struct SulfateModel {
    op: Arc<TransportOperator>,
    x: Vec<f64>,
    theta: Theta,
    cache_y: Lru,
    cache_z: Lru,
}

impl Clone for SulfateModel {
    fn clone(&self) -> Self {
        SulfateModel {
            op: self.op.clone(),
            x: self.x.clone(),
            theta: self.theta,
            cache_y: Lru::default(),
            cache_z: Lru::default(),
        }
    }
}

impl SulfateModel {
    pub fn new(op: Arc<TransportOperator>, x: Vec<f64>, theta: Theta) -> Result<Self> {
        if x.len() != op.n() {
            return Err(Error::Dimension(format!("emissions have {} cells, grid has {}", x.len(), op.n())));
        }
        if let Some(k) = x.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Data(format!("emissions must be finite and >= 0 (cell {k} = {})", x[k])));
        }
        theta.validate()?;
        Ok(SulfateModel {
            op,
            x,
            theta,
            cache_y: Lru::default(),
            cache_z: Lru::default(),
        })
    }

    pub fn operator(&self) -> &Arc<TransportOperator> {
        &self.op
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn emissions(&self) -> &[f64] {
        &self.x
    }

    pub fn theta(&self) -> &Theta {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: Theta) -> Result<()> {
        theta.validate()?;
        self.theta = theta;
        Ok(())
    }

    pub fn cache_stats(&self) -> (CacheStats, CacheStats) {
        (
            CacheStats {
                hits: self.cache_y.hits,
                misses: self.cache_y.misses,
            },
            CacheStats {
                hits: self.cache_z.hits,
                misses: self.cache_z.misses,
            },
        )
    }

    fn factor_y(&mut self, th: &Theta) -> Result<Arc<Factor>> {
        self.cache_y.get_or_factor(&self.op, th.gamma, th.alpha, th.delta)
    }

    fn factor_z(&mut self, th: &Theta) -> Result<Arc<Factor>> {
        self.cache_z.get_or_factor(&self.op, th.gamma, th.alpha, th.eta)
    }

    /// `A_y = gamma D + alpha C + delta I` at `th`.
    pub fn operator_y(&mut self, th: &Theta) -> Result<CsrMatrix> {
        Ok(self.factor_y(th)?.a.clone())
    }

    /// `Z` for emissions `x` at `th`.
    pub fn so2_steady_state_for(&mut self, th: &Theta, x: &[f64]) -> Result<Vec<f64>> {
        th.validate()?;
        let fz = self.factor_z(th)?;
        let bx: Vec<f64> = x.iter().map(|v| th.beta * v).collect();
        let z = fz.lu.solve(&bx);
        let res = fz.a.mul_vec(&z).iter().zip(&bx).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = bx.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(res <= 1e-10 * scale) && !(scale == 0.0 && res == 0.0) {
            return Err(Error::Numerical(format!("SO2 solve residual {res:e} exceeds 1e-10 relative")));
        }
        Ok(z)
    }

    pub fn so2_steady_state(&mut self) -> Result<Vec<f64>> {
        let (th, x) = (self.theta, self.x.clone());
        self.so2_steady_state_for(&th, &x)
    }

    /// `mu = A_y^{-1} eta Z` for emissions `x` at `th`.
    pub fn so4_mean_for(&mut self, th: &Theta, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.so2_steady_state_for(th, x)?;
        let fy = self.factor_y(th)?;
        let ez: Vec<f64> = z.iter().map(|v| th.eta * v).collect();
        Ok(fy.lu.solve(&ez))
    }

    pub fn so4_mean(&mut self) -> Result<Vec<f64>> {
        let (th, x) = (self.theta, self.x.clone());
        self.so4_mean_for(&th, &x)
    }

    /// Gaussian log-density of the observations under the SAR law at `th`.
    ///
    /// Masked cells are set to the model mean, so the density is that of the
    /// SAR field restricted to the valid rows and columns of `A`.
    pub fn log_likelihood_at(&mut self, th: &Theta, obs: &Observations) -> Result<f64> {
        if obs.n() != self.n() {
            return Err(Error::Dimension(format!("observations have {} cells, model has {}", obs.n(), self.n())));
        }
        th.validate()?;
        let nv = obs.n_valid();
        if nv == 0 {
            return Ok(0.0);
        }
        let x = self.x.clone();
        let z = self.so2_steady_state_for(th, &x)?;
        let fy = self.factor_y(th)?;
        let prec = th.t / th.sigma2;
        if obs.is_complete() {
            let av = fy.a.mul_vec(obs.values());
            let ss: f64 = av.iter().zip(&z).map(|(a, zk)| (a - th.eta * zk).powi(2)).sum();
            return Ok(0.5 * nv as f64 * (prec / (2.0 * std::f64::consts::PI)).ln() + fy.lu.log_abs_det()
                - 0.5 * prec * ss);
        }
        let ez: Vec<f64> = z.iter().map(|v| th.eta * v).collect();
        let mu = fy.lu.solve(&ez);
        let filled: Vec<f64> = (0..obs.n())
            .map(|k| if obs.mask()[k] { obs.values()[k] } else { mu[k] })
            .collect();
        let av = fy.a.mul_vec(&filled);
        let ss: f64 = obs.valid_indices().iter().map(|&k| (av[k] - ez[k]).powi(2)).sum();
        let logdet = sub_log_det(&fy, obs)?;
        Ok(0.5 * nv as f64 * (prec / (2.0 * std::f64::consts::PI)).ln() + logdet - 0.5 * prec * ss)
    }

    pub fn log_likelihood(&mut self, obs: &Observations) -> Result<f64> {
        let th = self.theta;
        self.log_likelihood_at(&th, obs)
    }

    /// Pieces of the Gaussian likelihood in `beta` at `th` (other parameters fixed).
    ///
    /// Returns `(c^T c, c^T a)` where the valid-row residual is `a - beta c`.
    pub fn beta_design(&mut self, th: &Theta, obs: &Observations) -> Result<(f64, f64)> {
        // A_z^{-1} is entrywise positive, so w = 0 exactly when X = 0
        if self.x.iter().all(|v| *v == 0.0) {
            return Err(Error::DegenerateDesign("emissions are zero, beta is not identified".into()));
        }
        th.validate()?;
        if obs.n_valid() == 0 {
            return Ok((0.0, 0.0));
        }
        let unit = th.with(Param::Beta, 1.0);
        let x = self.x.clone();
        // same solve as the likelihood at th, rescaled to unit beta
        let w: Vec<f64> = self
            .so2_steady_state_for(th, &x)?
            .iter()
            .map(|v| th.eta * v / th.beta)
            .collect();
        let fy = self.factor_y(&unit)?;
        if obs.is_complete() {
            let a = fy.a.mul_vec(obs.values());
            let ctc = w.iter().map(|v| v * v).sum();
            let cta = w.iter().zip(&a).map(|(c, r)| c * r).sum();
            return Ok((ctc, cta));
        }
        // c = A_VV u_V with u the unit-beta mean; a = A_VV v_V
        let u = fy.lu.solve(&w);
        let sub = sub_factor(&fy, obs)?;
        let sub = &sub.0;
        let idx = obs.valid_indices();
        let uv: Vec<f64> = idx.iter().map(|&k| u[k]).collect();
        let vv: Vec<f64> = idx.iter().map(|&k| obs.values()[k]).collect();
        let c = sub.mul_vec(&uv);
        let a = sub.mul_vec(&vv);
        Ok((c.iter().map(|v| v * v).sum(), c.iter().zip(&a).map(|(x, y)| x * y).sum()))
    }

    /// Exact draw `mu + A^{-1} w`, `w ~ N(0, sigma^2 / T I)`, for emissions `x`.
    pub fn sample_field_for<R: Rng + ?Sized>(&mut self, th: &Theta, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let mu = self.so4_mean_for(th, x)?;
        let fy = self.factor_y(th)?;
        let sd = (th.sigma2 / th.t).sqrt();
        let w: Vec<f64> = (0..mu.len()).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        let dev = fy.lu.solve(&w);
        Ok(mu.iter().zip(dev).map(|(m, d)| m + d).collect())
    }

    pub fn sample_field<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<f64>> {
        let (th, x) = (self.theta, self.x.clone());
        self.sample_field_for(&th, &x, rng)
    }
}

type SubFactor = Arc<(CsrMatrix, BandedLu)>;

fn sub_factor(f: &Factor, obs: &Observations) -> Result<SubFactor> {
    let mut slot = f.sub.lock().expect("factor cache lock poisoned");
    if let Some((id, sub)) = slot.as_ref() {
        if *id == obs.mask_id {
            return Ok(sub.clone());
        }
    }
    let sub = f.a.principal_submatrix(obs.valid_indices());
    let lu = BandedLu::factor(&sub)?;
    if lu.det_sign() < 0.0 {
        return Err(Error::Numerical("det A_VV < 0; LU is unreliable".into()));
    }
    let out = Arc::new((sub, lu));
    *slot = Some((obs.mask_id, out.clone()));
    Ok(out)
}

fn sub_log_det(f: &Factor, obs: &Observations) -> Result<f64> {
    Ok(sub_factor(f, obs)?.1.log_abs_det())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FaceWind, Grid};
    use crate::operator::min_real_eigenvalue;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn theta(gamma: f64, alpha: f64, eta: f64, beta: f64, sigma2: f64, delta: f64) -> Theta {
        Theta {
            gamma,
            alpha,
            eta,
            beta,
            sigma2,
            delta,
            t: 1.0,
        }
    }

    fn windy_op(nx: usize, ny: usize, seed: u64) -> Arc<TransportOperator> {
        let g = Grid::unit(nx, ny).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = (0..(nx + 1) * ny).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v = (0..nx * (ny + 1)).map(|_| rng.random_range(-2.0..2.0)).collect();
        Arc::new(TransportOperator::new(&g, &FaceWind::new(&g, u, v).unwrap()).unwrap())
    }

    fn strip_op() -> Arc<TransportOperator> {
        let g = Grid::strip(3, 1.0).unwrap();
        Arc::new(TransportOperator::new(&g, &FaceWind::calm(&g)).unwrap())
    }

    fn dense_log_density(a: &DMatrix<f64>, mu: &[f64], v: &[f64], sigma2: f64, t: f64) -> f64 {
        let n = mu.len();
        let ata = a.transpose() * a;
        let cov = ata.try_inverse().unwrap() * (sigma2 / t);
        let chol = cov.clone().cholesky().unwrap();
        let r = DVector::from_iterator(n, v.iter().zip(mu).map(|(x, m)| x - m));
        let quad = r.dot(&(cov.try_inverse().unwrap() * &r));
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
    }

    #[test]
    fn theta_validation() {
        assert!(Theta::reference().validate().is_ok());
        assert!(Theta::reference().with(Param::Gamma, 0.0).validate().is_ok());
        assert!(Theta::reference().with(Param::Eta, 0.0).validate().is_err());
        assert!(Theta::reference().with(Param::Alpha, -1.0).validate().is_err());
        assert!(Theta::reference().with(Param::Sigma2, f64::NAN).validate().is_err());
        let json = serde_json::to_string(&Theta::reference()).unwrap();
        assert!(json.contains("\"T\":1.0"), "{json}");
    }

    #[test]
    fn steady_state_without_transport_is_scaled_emissions() {
        let op = windy_op(3, 3, 1);
        let x: Vec<f64> = (0..9).map(|k| k as f64 * 10.0).collect();
        let th = theta(0.0, 0.0, 0.5, 3.0, 1.0, 50.0);
        let mut m = SulfateModel::new(op, x.clone(), th).unwrap();
        let z = m.so2_steady_state().unwrap();
        let mu = m.so4_mean().unwrap();
        for k in 0..9 {
            assert!((z[k] - 3.0 / 0.5 * x[k]).abs() <= 1e-12 * x[k].max(1.0));
            assert!((mu[k] - 3.0 * x[k] / 50.0).abs() <= 1e-12 * x[k].max(1.0));
        }
    }

    #[test]
    fn zero_emissions_give_zero_fields() {
        let mut m = SulfateModel::new(windy_op(3, 3, 2), vec![0.0; 9], Theta::reference()).unwrap();
        assert!(m.so2_steady_state().unwrap().iter().all(|v| *v == 0.0));
        assert!(m.so4_mean().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn strip_steady_state_by_hand() {
        // (D + I) Z = (0, 1, 0): 2z0 - z1 = 0, -z0 + 3z1 - z2 = 1, symmetric
        let th = theta(1.0, 0.0, 1.0, 1.0, 1.0, 50.0);
        let mut m = SulfateModel::new(strip_op(), vec![0.0, 1.0, 0.0], th).unwrap();
        let z = m.so2_steady_state().unwrap();
        for (got, want) in z.iter().zip([0.25, 0.5, 0.25]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_likelihood() {
        // single cell: V ~ N(0, sigma^2 / (T a^2)) = N(0, 0.25)
        let g = Grid::strip(2, 1.0).unwrap();
        let op = Arc::new(TransportOperator::new(&g, &FaceWind::calm(&g)).unwrap());
        let th = theta(0.0, 0.0, 1.0, 1.0, 1.0, 2.0);
        let mut m = SulfateModel::new(op, vec![0.0; 2], th).unwrap();
        let obs = Observations::new(vec![0.0, f64::NAN], vec![true, false]).unwrap();
        let ll = m.log_likelihood(&obs).unwrap();
        let oracle = -0.5 * (2.0 * std::f64::consts::PI * 0.25).ln();
        assert!((ll - oracle).abs() < 1e-14, "{ll} vs {oracle}");
        assert!((ll - -0.225791).abs() < 1e-6);
    }

    #[test]
    fn likelihood_matches_dense_oracle() {
        let op = windy_op(4, 4, 3);
        let x: Vec<f64> = (0..16).map(|k| if k % 5 == 0 { 100.0 } else { 0.0 }).collect();
        let th = theta(1.3, 0.7, 0.5, 3.45, 2.0, 5.0);
        let mut m = SulfateModel::new(op, x, th).unwrap();
        let mu = m.so4_mean().unwrap();
        let v: Vec<f64> = mu.iter().enumerate().map(|(k, m)| m + ((k * 7) % 5) as f64 * 0.3 - 0.6).collect();
        let obs = Observations::complete(v.clone()).unwrap();
        let ll = m.log_likelihood(&obs).unwrap();
        let a = m.operator_y(&th).unwrap().to_dense();
        let oracle = dense_log_density(&a, &mu, &v, th.sigma2, th.t);
        assert!((ll - oracle).abs() < 1e-8, "{ll} vs {oracle}");
    }

    #[test]
    fn masked_likelihood_is_sar_on_valid_block() {
        let op = windy_op(4, 3, 4);
        let x: Vec<f64> = (0..12).map(|k| (k % 4) as f64 * 20.0).collect();
        let th = theta(0.9, 1.1, 0.8, 2.0, 1.5, 3.0);
        let mut m = SulfateModel::new(op, x, th).unwrap();
        let mu = m.so4_mean().unwrap();
        let mask: Vec<bool> = (0..12).map(|k| k != 0 && k != 7).collect();
        let v: Vec<f64> = mu.iter().enumerate().map(|(k, m)| m + 0.1 * k as f64 - 0.5).collect();
        let obs = Observations::new(v.clone(), mask.clone()).unwrap();
        let ll = m.log_likelihood(&obs).unwrap();
        let a = m.operator_y(&th).unwrap().to_dense();
        let idx: Vec<usize> = (0..12).filter(|&k| mask[k]).collect();
        let avv = a.select_rows(&idx).select_columns(&idx);
        let mv: Vec<f64> = idx.iter().map(|&k| mu[k]).collect();
        let vv: Vec<f64> = idx.iter().map(|&k| v[k]).collect();
        let oracle = dense_log_density(&avv, &mv, &vv, th.sigma2, th.t);
        assert!((ll - oracle).abs() < 1e-8, "{ll} vs {oracle}");
    }

    #[test]
    fn fully_masked_likelihood_is_flat() {
        let mut m = SulfateModel::new(windy_op(3, 3, 5), vec![1.0; 9], Theta::reference()).unwrap();
        assert_eq!(m.log_likelihood(&Observations::none(9)).unwrap(), 0.0);
    }

    #[test]
    fn nonfinite_valid_observation_rejected() {
        let err = Observations::complete(vec![1.0, f64::INFINITY]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn likelihood_peaks_at_the_mean() {
        let op = windy_op(3, 3, 6);
        let th = theta(1.0, 0.5, 0.5, 2.0, 1.0, 4.0);
        let mut m = SulfateModel::new(op, vec![5.0; 9], th).unwrap();
        let mu = m.so4_mean().unwrap();
        let at_mu = m.log_likelihood(&Observations::complete(mu.clone()).unwrap()).unwrap();
        let a = m.operator_y(&th).unwrap();
        let n = mu.len() as f64;
        let expected = 0.5 * n * (1.0 / (2.0 * std::f64::consts::PI)).ln() + BandedLu::factor(&a).unwrap().log_abs_det();
        assert!((at_mu - expected).abs() < 1e-10);
        let mut off = mu.clone();
        off[4] += 0.01;
        assert!(m.log_likelihood(&Observations::complete(off).unwrap()).unwrap() < at_mu);
    }

    #[test]
    fn single_cell_density_integrates_to_one() {
        let g = Grid::strip(2, 1.0).unwrap();
        let op = Arc::new(TransportOperator::new(&g, &FaceWind::calm(&g)).unwrap());
        let th = theta(0.0, 0.0, 1.0, 1.0, 0.7, 2.0);
        let mut m = SulfateModel::new(op, vec![3.0, 0.0], th).unwrap();
        let mu = m.so4_mean().unwrap()[0];
        let sd = (th.sigma2 / (th.t * th.delta * th.delta)).sqrt();
        let (lo, hi, n) = (mu - 12.0 * sd, mu + 12.0 * sd, 20_000);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let v = lo + i as f64 * h;
            let obs = Observations::new(vec![v, 0.0], vec![true, false]).unwrap();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * m.log_likelihood(&obs).unwrap().exp();
        }
        assert!((total * h - 1.0).abs() < 1e-6, "{}", total * h);
    }

    #[test]
    fn mean_is_linear_in_beta() {
        let op = windy_op(4, 4, 7);
        let x: Vec<f64> = (0..16).map(|k| (k * 13 % 7) as f64).collect();
        let th = theta(1.5, 0.53, 0.5, 1.7, 1.0, 50.0);
        let mut m = SulfateModel::new(op, x.clone(), th).unwrap();
        let one = m.so4_mean_for(&th, &x).unwrap();
        let two = m.so4_mean_for(&th.with(Param::Beta, 3.4), &x).unwrap();
        let norm = one.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = one.iter().zip(&two).map(|(a, b)| (2.0 * a - b).powi(2)).sum::<f64>().sqrt();
        assert!(diff <= 1e-12 * 2.0 * norm);
    }

    #[test]
    fn logdet_matches_dense() {
        for (nx, ny) in [(3, 3), (6, 4), (10, 10)] {
            let op = windy_op(nx, ny, (nx * ny) as u64);
            let a = op.assemble(2.0, 1.3, 0.5).unwrap();
            let lu = BandedLu::factor(&a).unwrap();
            let dense = a.to_dense().determinant();
            assert!(dense > 0.0);
            assert!((lu.log_abs_det() - dense.ln()).abs() < 1e-8);
            assert!(min_real_eigenvalue(&a).unwrap() >= 0.5 - 1e-8);
        }
    }

    #[test]
    fn cache_reuses_factorizations() {
        let mut m = SulfateModel::new(windy_op(3, 3, 8), vec![1.0; 9], Theta::reference()).unwrap();
        let obs = Observations::complete(vec![0.1; 9]).unwrap();
        let th = Theta::reference();
        m.log_likelihood_at(&th, &obs).unwrap();
        // beta and sigma2 reuse both; eta refactors A_z only
        m.log_likelihood_at(&th.with(Param::Beta, 2.0).with(Param::Sigma2, 3.0), &obs).unwrap();
        let (y, z) = m.cache_stats();
        assert_eq!((y.misses, z.misses), (1, 1));
        m.log_likelihood_at(&th.with(Param::Eta, 0.7), &obs).unwrap();
        let (y, z) = m.cache_stats();
        assert_eq!((y.misses, z.misses), (1, 2));
        // current and proposal both stay resident
        m.log_likelihood_at(&th, &obs).unwrap();
        assert_eq!(m.cache_stats().1.misses, 2);
        m.log_likelihood_at(&th.with(Param::Gamma, 10.0), &obs).unwrap();
        assert_eq!(m.cache_stats().0.misses, 2);
    }

    #[test]
    fn degenerate_noise_draw_equals_mean() {
        let th = theta(1.0, 0.5, 0.5, 2.0, 1e-20, 4.0);
        let mut m = SulfateModel::new(windy_op(3, 3, 9), vec![10.0; 9], th).unwrap();
        let mu = m.so4_mean().unwrap();
        let d = m.sample_field(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (a, b) in mu.iter().zip(&d) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn draws_are_seeded() {
        let mut m = SulfateModel::new(windy_op(3, 3, 10), vec![10.0; 9], Theta::reference()).unwrap();
        let a = m.sample_field(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = m.sample_field(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let c = m.sample_field(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn draw_covariance_matches_sar() {
        let th = theta(1.0, 0.8, 0.5, 2.0, 1.0, 2.0);
        let mut m = SulfateModel::new(windy_op(3, 3, 11), vec![1.0; 9], th).unwrap();
        let mu = m.so4_mean().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 50_000;
        let mut cov = DMatrix::<f64>::zeros(9, 9);
        for _ in 0..n {
            let d = m.sample_field(&mut rng).unwrap();
            let r = DVector::from_iterator(9, d.iter().zip(&mu).map(|(a, b)| a - b));
            cov += &r * r.transpose();
        }
        cov /= n as f64;
        let a = m.operator_y(&th).unwrap().to_dense();
        let exact = (a.transpose() * a).try_inverse().unwrap() * (th.sigma2 / th.t);
        assert!((cov - &exact).norm() <= 0.05 * exact.norm());
    }

    #[test]
    fn beta_design_without_mask_is_w() {
        let op = windy_op(3, 3, 13);
        let x: Vec<f64> = (0..9).map(|k| k as f64).collect();
        let th = theta(1.0, 0.5, 0.6, 2.0, 1.0, 3.0);
        let mut m = SulfateModel::new(op.clone(), x.clone(), th).unwrap();
        let v: Vec<f64> = (0..9).map(|k| 0.2 * k as f64).collect();
        let obs = Observations::complete(v.clone()).unwrap();
        let (ctc, cta) = m.beta_design(&th, &obs).unwrap();
        let az = op.assemble(1.0, 0.5, 0.6).unwrap();
        let w: Vec<f64> = BandedLu::factor(&az).unwrap().solve(&x).iter().map(|v| 0.6 * v).collect();
        let r = op.assemble(1.0, 0.5, 3.0).unwrap().mul_vec(&v);
        let wtw: f64 = w.iter().map(|v| v * v).sum();
        let wtr: f64 = w.iter().zip(&r).map(|(a, b)| a * b).sum();
        assert!((ctc - wtw).abs() <= 1e-12 * wtw);
        assert!((cta - wtr).abs() <= 1e-12 * wtr.abs());
        let mut zero = SulfateModel::new(op, vec![0.0; 9], th).unwrap();
        assert!(matches!(zero.beta_design(&th, &obs), Err(Error::DegenerateDesign(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn more_emissions_never_lower_sulfate(seed in any::<u64>(), cell in 0usize..25, bump in 0.1f64..1000.0,
                                                  gamma in 0.0f64..5.0, alpha in 0.0f64..5.0) {
                let op = windy_op(5, 5, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
                let x: Vec<f64> = (0..25).map(|_| if rng.random_bool(0.3) { rng.random_range(0.0..500.0) } else { 0.0 }).collect();
                let th = theta(gamma, alpha, 0.5, 2.0, 1.0, 3.0);
                let mut m = SulfateModel::new(op, x.clone(), th).unwrap();
                let base = m.so4_mean().unwrap();
                prop_assert!(base.iter().all(|v| *v >= -1e-12));
                prop_assert!(m.so2_steady_state().unwrap().iter().all(|v| *v >= -1e-12));
                let mut x2 = x;
                x2[cell] += bump;
                let more = m.so4_mean_for(&th, &x2).unwrap();
                for (a, b) in base.iter().zip(&more) {
                    prop_assert!(*b >= a - 1e-12 * a.abs().max(1.0));
                }
            }
        }
    }
}
