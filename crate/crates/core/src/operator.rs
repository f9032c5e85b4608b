//! Finite-volume transport operators on a rectangular grid.
//!
//! Sign convention: the drift of the process is `-A y`, so `A = γD + αC + rI`
//! with `D` the (positive semidefinite) negative discrete Laplacian and `C` the
//! donor-cell upwind advection operator. Cell lengths in km are folded into
//! both matrices at assembly.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{FaceWind, Grid};
use crate::sparse::{CsrMatrix, TripletBuilder};

/// Dense algorithms (Schur, Lyapunov, matrix exponentials) are gated at this size.
pub const DENSE_THRESHOLD: usize = 3000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    ZeroFlux,
    Periodic,
}

/// Neighbor of cell (i, j) one step along an axis, honoring the boundary rule.
fn neighbor(i: usize, n: usize, step: isize, boundary: Boundary) -> Option<usize> {
    let k = i as isize + step;
    if (0..n as isize).contains(&k) {
        return Some(k as usize);
    }
    match boundary {
        Boundary::ZeroFlux => None,
        Boundary::Periodic if n > 1 => Some(k.rem_euclid(n as isize) as usize),
        Boundary::Periodic => None,
    }
}

/// Negative discrete Laplacian with zero-flux boundaries.
pub fn assemble_diffusion(grid: &Grid) -> CsrMatrix {
    assemble_diffusion_with(grid, Boundary::ZeroFlux)
}

pub fn assemble_diffusion_with(grid: &Grid, boundary: Boundary) -> CsrMatrix {
    let (nx, ny) = (grid.nx, grid.ny);
    let (wx, wy) = (1.0 / (grid.dx * grid.dx), 1.0 / (grid.dy * grid.dy));
    let mut b = TripletBuilder::new(grid.n_cells());
    for j in 0..ny {
        for i in 0..nx {
            let p = grid.index(i, j);
            let mut couple = |q: usize, w: f64| {
                if q != p {
                    b.add(p, p, w);
                    b.add(p, q, -w);
                }
            };
            for step in [-1, 1] {
                if let Some(ii) = neighbor(i, nx, step, boundary) {
                    couple(grid.index(ii, j), wx);
                }
                if let Some(jj) = neighbor(j, ny, step, boundary) {
                    couple(grid.index(i, jj), wy);
                }
            }
            b.add(p, p, 0.0);
        }
    }
    b.build()
}

/// Donor-cell upwind advection with zero-flux boundaries.
pub fn assemble_advection(grid: &Grid, wind: &FaceWind) -> Result<CsrMatrix> {
    assemble_advection_with(grid, wind, Boundary::ZeroFlux)
}

pub fn assemble_advection_with(grid: &Grid, wind: &FaceWind, boundary: Boundary) -> Result<CsrMatrix> {
    if !wind.matches(grid) {
        return Err(Error::Dimension(format!(
            "face wind is {}x{}, grid is {}x{}",
            wind.nx, wind.ny, grid.nx, grid.ny
        )));
    }
    let (nx, ny) = (grid.nx, grid.ny);
    for j in 0..ny {
        for i in 0..=nx {
            if !wind.u(i, j).is_finite() {
                return Err(Error::Assembly(format!("u_face[i={i}, j={j}] is {}", wind.u(i, j))));
            }
        }
    }
    for j in 0..=ny {
        for i in 0..nx {
            if !wind.v(i, j).is_finite() {
                return Err(Error::Assembly(format!("v_face[i={i}, j={j}] is {}", wind.v(i, j))));
            }
        }
    }

    // Velocity on a face; domain-edge faces carry no flux under zero-flux,
    // and the west/south edge value stands for the wrapped face when periodic.
    let u_at = |i: usize, j: usize| -> f64 {
        match (boundary, i == 0 || i == nx) {
            (Boundary::ZeroFlux, true) => 0.0,
            (Boundary::Periodic, true) => wind.u(0, j),
            _ => wind.u(i, j),
        }
    };
    let v_at = |i: usize, j: usize| -> f64 {
        match (boundary, j == 0 || j == ny) {
            (Boundary::ZeroFlux, true) => 0.0,
            (Boundary::Periodic, true) => wind.v(i, 0),
            _ => wind.v(i, j),
        }
    };

    let mut b = TripletBuilder::new(grid.n_cells());
    for j in 0..ny {
        for i in 0..nx {
            let p = grid.index(i, j);
            b.add(p, p, 0.0);
            let mut axis = |v_l: f64, v_r: f64, h: f64, low: Option<usize>, high: Option<usize>| {
                if let Some(l) = low.filter(|&l| l != p) {
                    b.add(p, l, -v_l.max(0.0) / h);
                    b.add(p, p, (-v_l).max(0.0) / h);
                }
                if let Some(r) = high.filter(|&r| r != p) {
                    b.add(p, r, -(-v_r).max(0.0) / h);
                    b.add(p, p, v_r.max(0.0) / h);
                }
            };
            axis(
                u_at(i, j),
                u_at(i + 1, j),
                grid.dx,
                neighbor(i, nx, -1, boundary).map(|ii| grid.index(ii, j)),
                neighbor(i, nx, 1, boundary).map(|ii| grid.index(ii, j)),
            );
            axis(
                v_at(i, j),
                v_at(i, j + 1),
                grid.dy,
                neighbor(j, ny, -1, boundary).map(|jj| grid.index(i, jj)),
                neighbor(j, ny, 1, boundary).map(|jj| grid.index(i, jj)),
            );
        }
    }
    Ok(b.build())
}

/// `γD + αC + rI`. Rejects negative rates and nonpositive `r`.
pub fn assemble_transport(d: &CsrMatrix, c: &CsrMatrix, gamma: f64, alpha: f64, r: f64) -> Result<CsrMatrix> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::Domain(format!("gamma must be >= 0, got {gamma}")));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Domain(format!("alpha must be >= 0, got {alpha}")));
    }
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::Domain(format!(
            "reaction/deposition rate must be > 0 for a stationary process, got {r}"
        )));
    }
    if d.n() != c.n() {
        return Err(Error::Dimension(format!("D is {}, C is {}", d.n(), c.n())));
    }
    Ok(CsrMatrix::linear_combination(&[(gamma, d), (alpha, c)], r))
}

/// Diffusion and advection components for one grid and wind field.
#[derive(Debug, Clone)]
pub struct TransportOperator {
    pub grid: Grid,
    pub diffusion: CsrMatrix,
    pub advection: CsrMatrix,
}

impl TransportOperator {
    pub fn new(grid: &Grid, wind: &FaceWind) -> Result<Self> {
        Self::with_boundary(grid, wind, Boundary::ZeroFlux)
    }

    pub fn with_boundary(grid: &Grid, wind: &FaceWind, boundary: Boundary) -> Result<Self> {
        Ok(TransportOperator {
            grid: grid.clone(),
            diffusion: assemble_diffusion_with(grid, boundary),
            advection: assemble_advection_with(grid, wind, boundary)?,
        })
    }

    pub fn n(&self) -> usize {
        self.grid.n_cells()
    }

    pub fn assemble(&self, gamma: f64, alpha: f64, r: f64) -> Result<CsrMatrix> {
        assemble_transport(&self.diffusion, &self.advection, gamma, alpha, r)
    }

    /// Structural diagnostics of `γD + αC + rI`.
    pub fn report(&self, gamma: f64, alpha: f64, r: f64) -> Result<OperatorReport> {
        let flux = assemble_transport(&self.diffusion, &self.advection, gamma, alpha, f64::MIN_POSITIVE)?;
        let a = self.assemble(gamma, alpha, r)?;
        let flux_norm = flux.norm_inf();
        let column_sum_defect = flux.column_sums().iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let diffusion_row_defect = self.diffusion.row_sums().iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let min_eigenvalue = if a.n() <= DENSE_THRESHOLD {
            Some(min_real_eigenvalue(&a)?)
        } else {
            None
        };
        Ok(OperatorReport {
            n: a.n(),
            nnz: a.nnz(),
            max_row_nnz: a.max_row_nnz(),
            flux_norm_inf: flux_norm,
            column_sum_defect,
            diffusion_row_defect,
            m_matrix_sign_pattern: has_m_matrix_sign_pattern(&a),
            gershgorin_lower_bound: gershgorin_column_lower_bound(&a),
            min_eigenvalue,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorReport {
    pub n: usize,
    pub nnz: usize,
    pub max_row_nnz: usize,
    /// ‖γD + αC‖_∞.
    pub flux_norm_inf: f64,
    /// max_j |1ᵀ(γD + αC) e_j|.
    pub column_sum_defect: f64,
    /// max_i |(D 1)_i|.
    pub diffusion_row_defect: f64,
    pub m_matrix_sign_pattern: bool,
    pub gershgorin_lower_bound: f64,
    pub min_eigenvalue: Option<f64>,
}

impl OperatorReport {
    /// Column sums vanish to `1e-10 ‖γD + αC‖_∞`.
    pub fn conserves_mass(&self) -> bool {
        self.column_sum_defect <= 1e-10 * self.flux_norm_inf.max(f64::MIN_POSITIVE)
    }
}

/// Nonpositive off-diagonal entries and strictly positive diagonal.
pub fn has_m_matrix_sign_pattern(a: &CsrMatrix) -> bool {
    a.triplets().all(|(r, c, v)| if r == c { v > 0.0 } else { v <= 0.0 })
        && a.diag().iter().all(|d| *d > 0.0)
}

/// min_j (a_jj - Σ_{i≠j} |a_ij|): every eigenvalue has real part at least this.
pub fn gershgorin_column_lower_bound(a: &CsrMatrix) -> f64 {
    let n = a.n();
    let mut radius = vec![0.0; n];
    let mut diag = vec![0.0; n];
    for (r, c, v) in a.triplets() {
        if r == c {
            diag[c] += v;
        } else {
            radius[c] += v.abs();
        }
    }
    (0..n).map(|j| diag[j] - radius[j]).fold(f64::INFINITY, f64::min)
}

/// Minimum real part over the spectrum (dense eigensolve).
pub fn min_real_eigenvalue(a: &CsrMatrix) -> Result<f64> {
    min_real_eigenvalue_dense(&a.to_dense_checked()?)
}

pub fn min_real_eigenvalue_dense(a: &DMatrix<f64>) -> Result<f64> {
    let n = a.nrows();
    if n > DENSE_THRESHOLD {
        return Err(Error::UnsupportedSize {
            n,
            threshold: DENSE_THRESHOLD,
        });
    }
    if n == 0 {
        return Err(Error::Dimension("empty matrix".into()));
    }
    if a == &a.transpose() {
        let eig = a.clone().symmetric_eigen();
        return Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min));
    }
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("Schur decomposition did not converge".into()))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::INFINITY, f64::min))
}

impl CsrMatrix {
    /// Dense copy, refusing sizes above [`DENSE_THRESHOLD`].
    pub fn to_dense_checked(&self) -> Result<DMatrix<f64>> {
        if self.n() > DENSE_THRESHOLD {
            return Err(Error::UnsupportedSize {
                n: self.n(),
                threshold: DENSE_THRESHOLD,
            });
        }
        Ok(self.to_dense())
    }
}
