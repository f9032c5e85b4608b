//! Gaussian laws of the multivariate OU process `dy = (-A y + m) dt + sigma B dW`.
//!
//! Dense paths (Lyapunov, transient, exact time average) are limited to
//! [`DENSE_THRESHOLD`] cells. The sparse paths (symmetric CAR stationary law
//! and the SAR approximation of the time average) work at any size.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::operator::DENSE_THRESHOLD;
use crate::sparse::{BandedCholesky, BandedLu, CsrMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Transient,
    Stationary,
    TimeAveragedExact,
    TimeAveragedSar,
}

#[derive(Debug, Clone)]
pub struct SparsePrecision {
    q: CsrMatrix,
    chol: BandedCholesky,
}

impl SparsePrecision {
    pub fn new(q: CsrMatrix) -> Result<Self> {
        if !q.is_symmetric() {
            return Err(Error::Numerical("precision matrix is not symmetric".into()));
        }
        let chol = BandedCholesky::factor(&q)?;
        Ok(SparsePrecision { q, chol })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.q
    }

    pub fn cholesky(&self) -> &BandedCholesky {
        &self.chol
    }
}

#[derive(Debug, Clone)]
pub enum SecondMoment {
    Covariance(DMatrix<f64>),
    Precision(SparsePrecision),
}

/// Multivariate Gaussian over grid cells.
#[derive(Debug, Clone)]
pub struct GaussianField {
    mean: Vec<f64>,
    moment: SecondMoment,
    provenance: Provenance,
}

impl GaussianField {
    pub fn from_covariance(mean: Vec<f64>, cov: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        check_mean(&mean, cov.nrows())?;
        if cov.nrows() != cov.ncols() {
            return Err(Error::Dimension("covariance is not square".into()));
        }
        let asym = (&cov - cov.transpose()).norm();
        if asym > 1e-10 * cov.norm() {
            return Err(Error::Numerical(format!(
                "covariance asymmetry {asym:e} exceeds tolerance"
            )));
        }
        Ok(GaussianField {
            mean,
            moment: SecondMoment::Covariance(cov),
            provenance,
        })
    }

    pub fn from_precision(mean: Vec<f64>, q: CsrMatrix, provenance: Provenance) -> Result<Self> {
        check_mean(&mean, q.n())?;
        Ok(GaussianField {
            mean,
            moment: SecondMoment::Precision(SparsePrecision::new(q)?),
            provenance,
        })
    }

    pub fn n(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn moment(&self) -> &SecondMoment {
        &self.moment
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Dense covariance; inverts the precision when needed.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        match &self.moment {
            SecondMoment::Covariance(c) => Ok(c.clone()),
            SecondMoment::Precision(p) => {
                let n = self.n();
                gate(n)?;
                let mut cov = DMatrix::zeros(n, n);
                let mut e = vec![0.0; n];
                for j in 0..n {
                    e[j] = 1.0;
                    let col = p.chol.solve(&e);
                    e[j] = 0.0;
                    cov.column_mut(j).copy_from_slice(&col);
                }
                Ok(symmetrize(cov))
            }
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let n = self.n();
        if x.len() != n {
            return Err(Error::Dimension(format!("point has {} entries, expected {n}", x.len())));
        }
        let r: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        match &self.moment {
            SecondMoment::Covariance(c) => {
                let chol = c
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
                let z = chol.l().solve_lower_triangular(&DVector::from_vec(r)).expect("nonsingular");
                let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                Ok(-0.5 * (n as f64 * ln2pi + logdet + z.norm_squared()))
            }
            SecondMoment::Precision(p) => {
                let lt = p.chol.lt_mul(&r);
                let quad: f64 = lt.iter().map(|v| v * v).sum();
                Ok(-0.5 * (n as f64 * ln2pi - p.chol.log_det() + quad))
            }
        }
    }

    /// One exact draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.n();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let dev = match &self.moment {
            SecondMoment::Covariance(c) => {
                // eigen factor tolerates singular covariances (t = 0, sigma = 0)
                let eig = c.clone().symmetric_eigen();
                let scaled = DVector::from_iterator(
                    n,
                    eig.eigenvalues.iter().zip(&z).map(|(l, zi)| l.max(0.0).sqrt() * zi),
                );
                (eig.eigenvectors * scaled).data.as_vec().clone()
            }
            SecondMoment::Precision(p) => p.chol.solve_upper(&z),
        };
        self.mean.iter().zip(dev).map(|(m, d)| m + d).collect()
    }

    /// Mean as plain text, one value per line.
    pub fn mean_text(&self) -> String {
        self.mean.iter().map(|v| format!("{v:e}\n")).collect()
    }

    /// Covariance (dense) or precision (sparse) as MatrixMarket.
    pub fn moment_matrix_market(&self) -> String {
        match &self.moment {
            SecondMoment::Covariance(c) => CsrMatrix::from_dense(c).to_matrix_market(),
            SecondMoment::Precision(p) => p.q.to_matrix_market(),
        }
    }
}

fn check_mean(mean: &[f64], n: usize) -> Result<()> {
    if mean.len() != n {
        return Err(Error::Dimension(format!("mean has {} entries, expected {n}", mean.len())));
    }
    if !mean.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("mean has nonfinite entries".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseLoading {
    Identity,
    Dense(DMatrix<f64>),
}

/// `dy = (-A y + m) dt + sigma B dW`.
#[derive(Debug, Clone)]
pub struct OuSystem {
    pub a: CsrMatrix,
    pub m: Vec<f64>,
    pub b: NoiseLoading,
    pub sigma2: f64,
}

impl OuSystem {
    pub fn new(a: CsrMatrix, m: Vec<f64>, sigma2: f64) -> Result<Self> {
        Self::with_loading(a, m, NoiseLoading::Identity, sigma2)
    }

    pub fn with_loading(a: CsrMatrix, m: Vec<f64>, b: NoiseLoading, sigma2: f64) -> Result<Self> {
        let n = a.n();
        if m.len() != n {
            return Err(Error::Dimension(format!("source has {} entries, expected {n}", m.len())));
        }
        if let NoiseLoading::Dense(b) = &b {
            if b.nrows() != n || b.ncols() != n {
                return Err(Error::Dimension(format!("B is {}x{}, expected {n}x{n}", b.nrows(), b.ncols())));
            }
        }
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::Domain(format!("sigma2 must be positive, got {sigma2}")));
        }
        Ok(OuSystem { a, m, b, sigma2 })
    }

    /// Scalar system `a`, `m`, `sigma^2`.
    pub fn scalar(a: f64, m: f64, sigma2: f64) -> Result<Self> {
        Self::new(CsrMatrix::diagonal(&[a]), vec![m], sigma2)
    }

    pub fn n(&self) -> usize {
        self.a.n()
    }

    /// `sigma^2 B B^T`.
    pub fn noise_covariance(&self) -> DMatrix<f64> {
        match &self.b {
            NoiseLoading::Identity => DMatrix::identity(self.n(), self.n()) * self.sigma2,
            NoiseLoading::Dense(b) => b * b.transpose() * self.sigma2,
        }
    }

    /// `A^{-1} m` by banded LU.
    pub fn stationary_mean(&self) -> Result<Vec<f64>> {
        let lu = BandedLu::factor(&self.a)?;
        Ok(lu.solve(&self.m))
    }
}

fn gate(n: usize) -> Result<()> {
    if n > DENSE_THRESHOLD {
        Err(Error::UnsupportedSize {
            n,
            threshold: DENSE_THRESHOLD,
        })
    } else {
        Ok(())
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn dense_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Stability("operator is singular".into()))
}

/// Solves `A X + X A^T = Q`.
///
/// Uses `X = (q/2) A^{-1}` when `A` is symmetric and `Q = q I`, Bartels-Stewart otherwise.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_lyapunov_inputs(a, q)?;
    let n = a.nrows();
    let q0 = q[(0, 0)];
    if a == &a.transpose() && *q == DMatrix::identity(n, n) * q0 {
        let chol = a.clone().cholesky().ok_or_else(|| {
            Error::Stability("symmetric operator is not positive definite".into())
        })?;
        let x = chol.inverse() * (0.5 * q0);
        let x = symmetrize(x);
        check_residual(a, &x, q)?;
        return Ok(x);
    }
    bartels_stewart(a, q)
}

fn check_lyapunov_inputs(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::Dimension(format!(
            "Lyapunov needs square A and Q of equal size, got {}x{} and {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    gate(n)?;
    if !(a.iter().all(|v| v.is_finite()) && q.iter().all(|v| v.is_finite())) {
        return Err(Error::Numerical("Lyapunov inputs have nonfinite entries".into()));
    }
    if (q - q.transpose()).norm() > 1e-12 * q.norm() {
        return Err(Error::Domain("Q must be symmetric".into()));
    }
    Ok(())
}

fn check_residual(a: &DMatrix<f64>, x: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<()> {
    let res = (a * x + x * a.transpose() - q).norm();
    if res > 1e-8 * q.norm() {
        return Err(Error::Numerical(format!(
            "Lyapunov residual {res:e} exceeds 1e-8 * |Q|_F = {:e}",
            1e-8 * q.norm()
        )));
    }
    Ok(())
}

/// Bartels-Stewart on the real Schur form, with no symmetric shortcut.
pub fn bartels_stewart(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_lyapunov_inputs(a, q)?;
    let n = a.nrows();
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("real Schur decomposition did not converge".into()))?;
    let (u, t) = schur.unpack();

    // diagonal blocks of the quasi-triangular factor
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut k = 0;
    while k < n {
        let size = if k + 1 < n && t[(k + 1, k)] != 0.0 { 2 } else { 1 };
        blocks.push((k, size));
        k += size;
    }
    for &(s, p) in &blocks {
        let re = if p == 1 {
            t[(s, s)]
        } else {
            0.5 * (t[(s, s)] + t[(s + 1, s + 1)])
        };
        if !(re > 0.0) {
            return Err(Error::Stability(format!(
                "eigenvalue with real part {re:e} <= 0; no stationary covariance"
            )));
        }
    }

    let f = u.transpose() * q * &u;
    let mut y = DMatrix::<f64>::zeros(n, n);
    let nb = blocks.len();
    for bi in (0..nb).rev() {
        let (si, p) = blocks[bi];
        for bj in (0..nb).rev() {
            let (sj, qn) = blocks[bj];
            let mut rhs = f.view((si, sj), (p, qn)).into_owned();
            if si + p < n {
                let rest = n - si - p;
                rhs -= t.view((si, si + p), (p, rest)) * y.view((si + p, sj), (rest, qn));
            }
            if sj + qn < n {
                let rest = n - sj - qn;
                rhs -= y.view((si, sj + qn), (p, rest)) * t.view((sj, sj + qn), (qn, rest)).transpose();
            }
            let tii = t.view((si, si), (p, p)).into_owned();
            let tjj = t.view((sj, sj), (qn, qn)).into_owned();
            let blk = small_sylvester(&tii, &tjj, &rhs)?;
            y.view_mut((si, sj), (p, qn)).copy_from(&blk);
        }
    }
    let x = symmetrize(&u * y * u.transpose());
    check_residual(a, &x, q)?;
    Ok(x)
}

/// Solves `T Y + Y S^T = R` for blocks of size at most 2 via the Kronecker form.
fn small_sylvester(t: &DMatrix<f64>, s: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (p, q) = (t.nrows(), s.nrows());
    if p == 1 && q == 1 {
        let d = t[(0, 0)] + s[(0, 0)];
        return Ok(DMatrix::from_element(1, 1, r[(0, 0)] / d));
    }
    // column-major vec: (I_q (x) T + S (x) I_p) vec(Y) = vec(R)
    let m = DMatrix::identity(q, q).kronecker(t) + s.kronecker(&DMatrix::identity(p, p));
    let rhs = DVector::from_column_slice(r.as_slice());
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular block in Bartels-Stewart".into()))?;
    Ok(DMatrix::from_column_slice(p, q, sol.as_slice()))
}

/// `e^{-A t}` for a dense matrix.
pub fn expm_dense(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Domain(format!("time must be >= 0, got {t}")));
    }
    gate(a.nrows())?;
    if t == 0.0 {
        return Ok(DMatrix::identity(a.nrows(), a.ncols()));
    }
    let e = (a * -t).exp();
    if !e.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("matrix exponential overflowed".into()));
    }
    Ok(e)
}

/// `e^{-A t} V` by truncated Taylor series with scaling; works at any size.
pub fn expm_action(a: &CsrMatrix, t: f64, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Domain(format!("time must be >= 0, got {t}")));
    }
    let n = a.n();
    if v.nrows() != n {
        return Err(Error::Dimension(format!("V has {} rows, expected {n}", v.nrows())));
    }
    if t == 0.0 {
        return Ok(v.clone());
    }
    let norm1 = a.transpose().norm_inf() * t;
    let steps = norm1.ceil().max(1.0) as usize;
    let h = t / steps as f64;
    let mut out = v.clone();
    let mut col = vec![0.0; n];
    for j in 0..v.ncols() {
        let mut x: Vec<f64> = out.column(j).iter().copied().collect();
        for _ in 0..steps {
            let mut term = x.clone();
            let mut acc = x.clone();
            let xn = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut converged = false;
            for k in 1..=60 {
                a.mul_vec_into(&term, &mut col);
                let c = -h / k as f64;
                let mut tn = 0.0f64;
                let mut an = 0.0f64;
                for i in 0..n {
                    term[i] = c * col[i];
                    acc[i] += term[i];
                    tn = tn.max(term[i].abs());
                    an = an.max(acc[i].abs());
                }
                if tn <= f64::EPSILON * an.max(xn) {
                    converged = true;
                    break;
                }
            }
            if !converged || !acc.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical("Taylor series for exp(-At)V did not converge".into()));
            }
            x = acc;
        }
        out.column_mut(j).copy_from_slice(&x);
    }
    Ok(out)
}

/// Law of `y_t` given `y_0`.
pub fn transient(sys: &OuSystem, y0: &[f64], t: f64) -> Result<GaussianField> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Domain(format!("time must be >= 0, got {t}")));
    }
    let n = sys.n();
    if y0.len() != n {
        return Err(Error::Dimension(format!("y0 has {} entries, expected {n}", y0.len())));
    }
    let a = sys.a.to_dense_checked()?;
    let sigma_inf = solve_lyapunov(&a, &sys.noise_covariance())?;
    let e = expm_dense(&a, t)?;
    let mean_inf = DVector::from_vec(sys.stationary_mean()?);
    let y0 = DVector::from_column_slice(y0);
    let mean = &e * &y0 + &mean_inf - &e * &mean_inf;
    let cov = symmetrize(&sigma_inf - &e * &sigma_inf * e.transpose());
    GaussianField::from_covariance(mean.data.into(), cov, Provenance::Transient)
}

/// Stationary law `N(A^{-1} m, Sigma)`.
///
/// Symmetric `A` with `B = I` yields the sparse CAR precision `(2 / sigma^2) A`.
pub fn stationary(sys: &OuSystem) -> Result<GaussianField> {
    let mean = sys.stationary_mean()?;
    if sys.a.is_symmetric() && sys.b == NoiseLoading::Identity {
        let q = sys.a.scale(2.0 / sys.sigma2);
        return GaussianField::from_precision(mean, q, Provenance::Stationary).map_err(|e| match e {
            Error::Numerical(msg) => Error::Stability(format!("symmetric operator is not positive definite: {msg}")),
            other => other,
        });
    }
    let a = sys.a.to_dense_checked()?;
    let cov = solve_lyapunov(&a, &sys.noise_covariance())?;
    GaussianField::from_covariance(mean, cov, Provenance::Stationary)
}

/// Law of the time average `(1/T) int_0^T y_s ds` of the stationary process.
pub fn time_avg_exact(sys: &OuSystem, t_avg: f64) -> Result<GaussianField> {
    if !(t_avg.is_finite() && t_avg > 0.0) {
        return Err(Error::Domain(format!("averaging window must be > 0, got {t_avg}")));
    }
    let a = sys.a.to_dense_checked()?;
    let n = a.nrows();
    let q = sys.noise_covariance();
    let sigma = solve_lyapunov(&a, &q)?;
    let ainv = dense_inverse(&a)?;
    let ainv2 = &ainv * &ainv;
    let e = expm_dense(&a, t_avg)?;
    let id = DMatrix::<f64>::identity(n, n);
    let phi = &ainv * &q * ainv.transpose() / t_avg;
    let right = (&id - &e) * &ainv2 * &sigma;
    let left = &sigma * (&id - e.transpose()) * ainv2.transpose();
    let psi = phi - (left + right) / (t_avg * t_avg);
    let asym = (&psi - psi.transpose()).norm();
    if asym > 1e-8 * psi.norm() {
        return Err(Error::Numerical(format!(
            "time-averaged covariance asymmetry {asym:e} exceeds 1e-8 relative"
        )));
    }
    let mean = sys.stationary_mean()?;
    GaussianField::from_covariance(mean, symmetrize(psi), Provenance::TimeAveragedExact)
}

/// SAR approximation with precision `(T / sigma^2) A^T A`.
pub fn time_avg_sar(sys: &OuSystem, t_avg: f64) -> Result<GaussianField> {
    if !(t_avg.is_finite() && t_avg > 0.0) {
        return Err(Error::Domain(format!("averaging window must be > 0, got {t_avg}")));
    }
    if sys.b != NoiseLoading::Identity {
        return Err(Error::Unsupported("SAR form requires B = I".into()));
    }
    let mean = sys.stationary_mean()?;
    let q = sys.a.gram().scale(t_avg / sys.sigma2);
    GaussianField::from_precision(mean, q, Provenance::TimeAveragedSar)
}

/// Spectral-norm bound on `Psi - Phi` for `A = gamma D + delta I` and unit noise variance.
pub fn phi_error_bound(delta: f64, t_avg: f64) -> Result<f64> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::Domain(format!("delta must be > 0, got {delta}")));
    }
    if !(t_avg.is_finite() && t_avg > 0.0) {
        return Err(Error::Domain(format!("T must be > 0, got {t_avg}")));
    }
    Ok(-(-delta * t_avg).exp_m1() / (t_avg * t_avg * delta.powi(3)))
}

/// Solves `(I (x) A + A (x) I) vec X = vec Q` directly; quartic cost, test sizes only.
pub fn lyapunov_kronecker(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n > 40 {
        return Err(Error::UnsupportedSize { n, threshold: 40 });
    }
    let id = DMatrix::<f64>::identity(n, n);
    let k = id.kronecker(a) + a.kronecker(&id);
    let sol = k
        .lu()
        .solve(&DVector::from_column_slice(q.as_slice()))
        .ok_or_else(|| Error::Stability("Kronecker Lyapunov system is singular".into()))?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FaceWind, Grid};
    use crate::operator::{assemble_diffusion, TransportOperator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    pub(crate) fn random_stable(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let shift = g.norm() + 0.1;
        g + DMatrix::identity(n, n) * shift
    }

    fn strip_system() -> OuSystem {
        let g = Grid::strip(3, 1.0).unwrap();
        let a = CsrMatrix::linear_combination(&[(1.0, &assemble_diffusion(&g))], 1.0);
        OuSystem::new(a, vec![1.0; 3], 1.0).unwrap()
    }

    fn windy_system(nx: usize, ny: usize, delta: f64) -> OuSystem {
        let g = Grid::unit(nx, ny).unwrap();
        let mut w = FaceWind::uniform(&g, 0.8, -0.4);
        for (k, u) in w.u_face.iter_mut().enumerate() {
            *u += 0.3 * ((k as f64) * 0.7).sin();
        }
        let op = TransportOperator::new(&g, &w).unwrap();
        let a = op.assemble(1.0, 1.0, delta).unwrap();
        let m = (0..g.n_cells()).map(|k| (k % 3) as f64).collect();
        OuSystem::new(a, m, 1.0).unwrap()
    }

    #[test]
    fn scalar_lyapunov() {
        let x = solve_lyapunov(&DMatrix::from_element(1, 1, 2.0), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!(close(x[(0, 0)], 0.25, 1e-15));
        let x = bartels_stewart(&DMatrix::from_element(1, 1, 2.0), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!(close(x[(0, 0)], 0.25, 1e-15));
    }

    #[test]
    fn symmetric_shortcut_matches_schur_path() {
        let a = strip_system().a.to_dense();
        let q = DMatrix::identity(3, 3);
        let fast = solve_lyapunov(&a, &q).unwrap();
        let bs = bartels_stewart(&a, &q).unwrap();
        assert!((&fast - &bs).norm() <= 1e-10 * fast.norm());
        let half_inv = a.clone().try_inverse().unwrap() * 0.5;
        assert!((&fast - half_inv).norm() <= 1e-12);
    }

    #[test]
    fn random_nonsymmetric_matches_kronecker_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [2, 3, 5, 8] {
            let a = random_stable(n, &mut rng);
            let b = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let q = &b * b.transpose();
            let x = bartels_stewart(&a, &q).unwrap();
            let oracle = lyapunov_kronecker(&a, &q).unwrap();
            assert!((&x - &oracle).norm() <= 1e-9 * oracle.norm(), "n = {n}");
        }
    }

    #[test]
    fn complex_pair_blocks() {
        // rotation-dominated drift has 2x2 Schur blocks
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 5.0, 0.0, -5.0, 1.0, 0.3, 0.0, 0.2, 2.0]);
        let q = DMatrix::identity(3, 3);
        let x = bartels_stewart(&a, &q).unwrap();
        let oracle = lyapunov_kronecker(&a, &q).unwrap();
        assert!((&x - &oracle).norm() <= 1e-12 * oracle.norm());
    }

    #[test]
    fn unstable_operator_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        let err = solve_lyapunov(&a, &DMatrix::identity(2, 2)).unwrap_err();
        assert!(matches!(err, Error::Stability(_)), "{err}");
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, -0.5]);
        let err = solve_lyapunov(&a, &DMatrix::identity(2, 2)).unwrap_err();
        assert!(matches!(err, Error::Stability(_)), "{err}");
    }

    #[test]
    fn scalar_transient_closed_form() {
        let sys = OuSystem::scalar(1.0, 0.0, 1.0).unwrap();
        let f = transient(&sys, &[3.0], 1.0).unwrap();
        assert!(close(f.mean()[0], 3.0 * (-1.0f64).exp(), 1e-10));
        let var = f.covariance().unwrap()[(0, 0)];
        assert!(close(var, (1.0 - (-2.0f64).exp()) / 2.0, 1e-10));
        assert!(close(f.mean()[0], 1.10364, 1e-5));
        assert!(close(var, 0.43233, 1e-5));
    }

    #[test]
    fn transient_at_zero_is_point_mass() {
        let sys = windy_system(3, 3, 2.0);
        let y0: Vec<f64> = (0..9).map(|k| k as f64 - 4.0).collect();
        let f = transient(&sys, &y0, 0.0).unwrap();
        assert_eq!(f.mean(), &y0[..]);
        assert_eq!(f.covariance().unwrap(), DMatrix::zeros(9, 9));
    }

    #[test]
    fn transient_converges_to_stationary() {
        let sys = windy_system(3, 3, 2.0);
        let lam = crate::operator::min_real_eigenvalue(&sys.a).unwrap();
        let f = transient(&sys, &[5.0; 9], 50.0 / lam).unwrap();
        let s = stationary(&sys).unwrap();
        let dm = DVector::from_column_slice(f.mean()) - DVector::from_column_slice(s.mean());
        assert!(dm.norm() <= 1e-6 * DVector::from_column_slice(s.mean()).norm());
        let sc = s.covariance().unwrap();
        assert!((f.covariance().unwrap() - &sc).norm() <= 1e-6 * sc.norm());
    }

    #[test]
    fn transient_semigroup_on_means() {
        let sys = windy_system(3, 3, 1.0);
        let y0: Vec<f64> = (0..9).map(|k| (k as f64).cos()).collect();
        let (s, t) = (0.3, 0.45);
        let mid = transient(&sys, &y0, s).unwrap();
        let two = transient(&sys, mid.mean(), t).unwrap();
        let one = transient(&sys, &y0, s + t).unwrap();
        let diff = DVector::from_column_slice(two.mean()) - DVector::from_column_slice(one.mean());
        assert!(diff.norm() <= 1e-9 * DVector::from_column_slice(one.mean()).norm());
    }

    #[test]
    fn negative_time_rejected() {
        let sys = OuSystem::scalar(1.0, 0.0, 1.0).unwrap();
        assert!(matches!(transient(&sys, &[0.0], -1.0), Err(Error::Domain(_))));
        assert!(matches!(time_avg_exact(&sys, 0.0), Err(Error::Domain(_))));
        assert!(matches!(time_avg_sar(&sys, -2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn scalar_stationary() {
        let sys = OuSystem::scalar(2.0, 4.0, 1.0).unwrap();
        let f = stationary(&sys).unwrap();
        assert!(close(f.mean()[0], 2.0, 1e-15));
        assert!(close(f.covariance().unwrap()[(0, 0)], 0.25, 1e-15));
        assert!(matches!(f.moment(), SecondMoment::Precision(_)));
    }

    #[test]
    fn constant_mode_mean() {
        let f = stationary(&strip_system()).unwrap();
        for v in f.mean() {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn car_precision_inverts_lyapunov_solution() {
        let g = Grid::unit(4, 3).unwrap();
        let a = CsrMatrix::linear_combination(&[(2.5, &assemble_diffusion(&g))], 0.7);
        let sys = OuSystem::new(a, vec![0.0; 12], 1.7).unwrap();
        let ad = sys.a.to_dense();
        let sigma = bartels_stewart(&ad, &sys.noise_covariance()).unwrap();
        let prod = &sigma * (&ad * (2.0 / sys.sigma2)) - DMatrix::<f64>::identity(12, 12);
        assert!(prod.norm() <= 1e-8 * (12f64).sqrt());
    }

    #[test]
    fn general_loading_uses_dense_path() {
        let sys = strip_system();
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.2, 0.0, 1.0]);
        let sys = OuSystem::with_loading(sys.a, sys.m, NoiseLoading::Dense(b), 2.0).unwrap();
        let f = stationary(&sys).unwrap();
        assert!(matches!(f.moment(), SecondMoment::Covariance(_)));
        let oracle = lyapunov_kronecker(&sys.a.to_dense(), &sys.noise_covariance()).unwrap();
        assert!((f.covariance().unwrap() - oracle.clone()).norm() <= 1e-10 * oracle.norm());
        assert!(matches!(time_avg_sar(&sys, 1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn scalar_time_average() {
        let sys = OuSystem::scalar(2.0, 0.0, 1.0).unwrap();
        let psi = time_avg_exact(&sys, 1.0).unwrap().covariance().unwrap()[(0, 0)];
        // Var of the window mean: (2/T^2) int_0^T (T - u) k(u) du with k(u) = e^{-2u}/4
        let oracle = 2.0 * (1.0 / 2.0 - (1.0 - (-2.0f64).exp()) / 4.0) / 4.0;
        assert!(close(psi, oracle, 1e-12));
        assert!((psi - 0.141917).abs() < 1e-6);
        let phi = time_avg_sar(&sys, 1.0).unwrap().covariance().unwrap()[(0, 0)];
        assert!(close(phi, 0.25, 1e-15));
    }

    #[test]
    fn long_window_shrinks_to_zero() {
        let sys = windy_system(3, 3, 1.0);
        let short = time_avg_exact(&sys, 10.0).unwrap();
        let long = time_avg_exact(&sys, 1000.0).unwrap();
        // Psi <= Phi = sigma^2 A^{-1} A^{-T} / T in the Loewner order, so entries decay like 1/T
        let ainv = sys.a.to_dense().try_inverse().unwrap();
        let c = (&ainv * ainv.transpose()).amax();
        for (t, f) in [(10.0, &short), (1000.0, &long)] {
            assert!(f.covariance().unwrap().amax() <= c / t * (1.0 + 1e-9));
        }
        assert_eq!(short.mean(), long.mean());
    }

    #[test]
    fn error_bound_values() {
        let b = phi_error_bound(50.0, 1.0).unwrap();
        assert!(close(b, (1.0 - (-50.0f64).exp()) / 125000.0, 1e-15));
        assert!(b <= 8.0e-6 && b > 7.9999e-6);
        assert!(phi_error_bound(1.0, 0.01).unwrap() > phi_error_bound(1.0, 0.1).unwrap());
        assert!(phi_error_bound(0.0, 1.0).is_err());
        assert!(phi_error_bound(1.0, -1.0).is_err());
    }

    #[test]
    fn appendix_bound_holds_on_diffusion_family() {
        let g = Grid::unit(4, 4).unwrap();
        let d = assemble_diffusion(&g);
        for delta in [1.0, 5.0, 50.0] {
            for t in [0.1, 1.0] {
                let a = CsrMatrix::linear_combination(&[(1.0, &d)], delta);
                let sys = OuSystem::new(a, vec![0.0; 16], 1.0).unwrap();
                let psi = time_avg_exact(&sys, t).unwrap().covariance().unwrap();
                let phi = time_avg_sar(&sys, t).unwrap().covariance().unwrap();
                let gap = (psi - phi).symmetric_eigen().eigenvalues.amax();
                let bound = phi_error_bound(delta, t).unwrap();
                // D has a zero eigenvalue, so the bound is attained up to rounding
                assert!(gap <= bound * (1.0 + 1e-9), "delta={delta} T={t}: {gap:e} > {bound:e}");
            }
        }
    }

    #[test]
    fn expm_identity_and_diagonal() {
        let v = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        let a = CsrMatrix::diagonal(&[1.0, 2.0, 3.0]);
        assert_eq!(expm_action(&a, 0.0, &v).unwrap(), v);
        let a = CsrMatrix::diagonal(&[1.0, 2.0]);
        let e = expm_action(&a, 1.0, &DMatrix::identity(2, 2)).unwrap();
        assert!(close(e[(0, 0)], (-1.0f64).exp(), 1e-14));
        assert!(close(e[(1, 1)], (-2.0f64).exp(), 1e-14));
        assert_eq!(e[(0, 1)], 0.0);
        let ed = expm_dense(&a.to_dense(), 1.0).unwrap();
        assert!(close(ed[(1, 1)], (-2.0f64).exp(), 1e-14));
    }

    #[test]
    fn expm_jordan_block() {
        // M = a I + N with N nilpotent: e^{-tM} = e^{-at} (I - tN + t^2 N^2 / 2)
        let (a, t) = (0.7f64, 1.3f64);
        let m = DMatrix::from_row_slice(3, 3, &[a, 1.0, 0.0, 0.0, a, 1.0, 0.0, 0.0, a]);
        let s = (-a * t).exp();
        let exact = DMatrix::from_row_slice(3, 3, &[s, -t * s, 0.5 * t * t * s, 0.0, s, -t * s, 0.0, 0.0, s]);
        let dense = expm_dense(&m, t).unwrap();
        assert!((&dense - &exact).amax() <= 1e-12);
        let act = expm_action(&CsrMatrix::from_dense(&m), t, &DMatrix::identity(3, 3)).unwrap();
        assert!((&act - &exact).amax() <= 1e-12);
    }

    #[test]
    fn expm_action_agrees_with_dense_on_operator() {
        let sys = windy_system(5, 4, 3.0);
        let v = DMatrix::from_fn(20, 3, |i, j| ((i * 7 + j) % 5) as f64 - 2.0);
        let act = expm_action(&sys.a, 0.8, &v).unwrap();
        let dense = expm_dense(&sys.a.to_dense(), 0.8).unwrap() * &v;
        assert!((&act - &dense).norm() <= 1e-10 * dense.norm());
    }

    #[test]
    fn log_density_paths_agree() {
        let sys = windy_system(3, 2, 1.5);
        let g = Grid::unit(3, 2).unwrap();
        let a = CsrMatrix::linear_combination(&[(1.0, &assemble_diffusion(&g))], 1.5);
        let sym = OuSystem::new(a, sys.m.clone(), 0.8).unwrap();
        let sparse = stationary(&sym).unwrap();
        let dense = GaussianField::from_covariance(
            sparse.mean().to_vec(),
            sparse.covariance().unwrap(),
            Provenance::Stationary,
        )
        .unwrap();
        let x: Vec<f64> = (0..6).map(|k| 0.3 * k as f64).collect();
        assert!((sparse.log_density(&x).unwrap() - dense.log_density(&x).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn sampling_is_seeded() {
        let f = time_avg_sar(&windy_system(3, 3, 2.0), 1.0).unwrap();
        let a = f.sample(&mut ChaCha8Rng::seed_from_u64(1));
        let b = f.sample(&mut ChaCha8Rng::seed_from_u64(1));
        let c = f.sample(&mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn exports() {
        let f = stationary(&OuSystem::scalar(2.0, 4.0, 1.0).unwrap()).unwrap();
        assert_eq!(f.mean_text(), "2e0\n");
        assert!(f.moment_matrix_market().starts_with("%%MatrixMarket matrix coordinate real general\n1 1 1\n"));
    }

    #[test]
    fn oversize_dense_paths_refused() {
        let n = DENSE_THRESHOLD + 1;
        let sys = OuSystem::new(CsrMatrix::identity(n), vec![0.0; n], 1.0).unwrap();
        assert!(matches!(time_avg_exact(&sys, 1.0), Err(Error::UnsupportedSize { .. })));
        assert!(time_avg_sar(&sys, 1.0).is_ok());
        assert!(stationary(&sys).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn lyapunov_residual(n in 2usize..=30, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_stable(n, &mut rng);
                let b = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let q = &b * b.transpose();
                let x = solve_lyapunov(&a, &q).unwrap();
                let res = (&a * &x + &x * a.transpose() - &q).norm();
                prop_assert!(res <= 1e-8 * q.norm());
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn transient_covariance_psd(t in 0.0f64..5.0, delta in 0.1f64..3.0) {
                let sys = windy_system(3, 3, delta);
                let f = transient(&sys, &[0.0; 9], t).unwrap();
                let c = f.covariance().unwrap();
                let min = c.clone().symmetric_eigen().eigenvalues.min();
                prop_assert!(min >= -1e-9 * c.trace().max(f64::MIN_POSITIVE));
            }
        }
    }
}
