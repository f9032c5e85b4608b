//! Compressed sparse row matrices and banded direct solvers.
//!
//! Five-point stencils on an `nx * ny` grid have bandwidth `nx`, so LU and
//! Cholesky factors stay inside the band. LU runs without pivoting, which is
//! stable for the column diagonally dominant transport operators built here;
//! a vanishing pivot is reported as a stability error.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    symmetric: bool,
}

/// Accumulates (row, col, value) triplets; duplicates are summed.
#[derive(Debug, Default)]
pub struct TripletBuilder {
    n: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        TripletBuilder {
            n,
            entries: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n && col < self.n);
        *self.entries.entry((row, col)).or_insert(0.0) += value;
    }

    pub fn build(self) -> CsrMatrix {
        let n = self.n;
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut values = Vec::with_capacity(self.entries.len());
        for ((r, c), v) in self.entries {
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        let mut m = CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
            symmetric: false,
        };
        m.symmetric = m.is_structurally_symmetric_exact();
        m
    }
}

impl CsrMatrix {
    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        CsrMatrix {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: d.to_vec(),
            symmetric: true,
        }
    }

    pub fn zeros(n: usize) -> Self {
        CsrMatrix {
            n,
            row_ptr: vec![0; n + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
            symmetric: true,
        }
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "square matrices only");
        let mut b = TripletBuilder::new(a.nrows());
        for r in 0..a.nrows() {
            for c in 0..a.ncols() {
                if a[(r, c)] != 0.0 {
                    b.add(r, c, a[(r, c)]);
                }
            }
        }
        b.build()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Exact symmetry of stored values.
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    fn is_structurally_symmetric_exact(&self) -> bool {
        self.triplets().all(|(r, c, v)| self.get(c, r) == v)
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.col_idx[a..b].iter().copied().zip(self.values[a..b].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        match self.col_idx[a..b].binary_search(&c) {
            Ok(p) => self.values[a + p],
            Err(_) => 0.0,
        }
    }

    pub fn max_row_nnz(&self) -> usize {
        (0..self.n)
            .map(|r| self.row_ptr[r + 1] - self.row_ptr[r])
            .max()
            .unwrap_or(0)
    }

    /// Largest |row - col| over stored entries.
    pub fn bandwidth(&self) -> usize {
        self.triplets().map(|(r, c, _)| r.abs_diff(c)).max().unwrap_or(0)
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.get(r, r)).collect()
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for (r, yr) in y.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let mut s = 0.0;
            for p in a..b {
                s += self.values[p] * x[self.col_idx[p]];
            }
            *yr = s;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for (r, c, v) in self.triplets() {
            y[c] += v * x[r];
        }
        y
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut b = TripletBuilder::new(self.n);
        for (r, c, v) in self.triplets() {
            b.add(c, r, v);
        }
        b.build()
    }

    pub fn scale(&self, s: f64) -> CsrMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `sum_i w_i M_i + shift * I` over matrices of equal size.
    pub fn linear_combination(terms: &[(f64, &CsrMatrix)], shift: f64) -> CsrMatrix {
        let n = terms.first().map(|t| t.1.n).expect("at least one term");
        let mut b = TripletBuilder::new(n);
        for (w, m) in terms {
            assert_eq!(m.n, n, "size mismatch in linear combination");
            for (r, c, v) in m.triplets() {
                b.add(r, c, w * v);
            }
        }
        for k in 0..n {
            b.add(k, k, shift);
        }
        b.build()
    }

    /// `A^T A`, symmetric by construction.
    pub fn gram(&self) -> CsrMatrix {
        let mut b = TripletBuilder::new(self.n);
        // (A^T A)_{ij} = sum_k A_{ki} A_{kj}
        for k in 0..self.n {
            let row: Vec<_> = self.row(k).collect();
            for &(i, vi) in &row {
                for &(j, vj) in &row {
                    b.add(i, j, vi * vj);
                }
            }
        }
        let mut m = b.build();
        m.symmetric = true;
        m
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n];
        for (_, c, v) in self.triplets() {
            s[c] += v;
        }
        s
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }

    /// Max absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|r| self.row(r).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    /// Principal submatrix on `keep` (sorted indices), reindexed compactly.
    pub fn principal_submatrix(&self, keep: &[usize]) -> CsrMatrix {
        let mut map = vec![usize::MAX; self.n];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let mut b = TripletBuilder::new(keep.len());
        for (new_r, &old_r) in keep.iter().enumerate() {
            for (c, v) in self.row(old_r) {
                if map[c] != usize::MAX {
                    b.add(new_r, map[c], v);
                }
            }
        }
        b.build()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// MatrixMarket coordinate export (1-based indices).
    pub fn to_matrix_market(&self) -> String {
        let mut s = String::new();
        s.push_str("%%MatrixMarket matrix coordinate real general\n");
        let _ = writeln!(s, "{} {} {}", self.n, self.n, self.nnz());
        for (r, c, v) in self.triplets() {
            let _ = writeln!(s, "{} {} {:e}", r + 1, c + 1, v);
        }
        s
    }

    pub fn from_matrix_market(text: &str) -> Result<CsrMatrix> {
        let mut lines = text.lines().filter(|l| !l.starts_with('%') && !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty MatrixMarket file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Data(format!("bad size line `{header}`"))))
            .collect::<Result<_>>()?;
        if dims.len() != 3 || dims[0] != dims[1] {
            return Err(Error::Data(format!("expected square size line, got `{header}`")));
        }
        let mut b = TripletBuilder::new(dims[0]);
        for line in lines {
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 3 {
                return Err(Error::Data(format!("bad entry `{line}`")));
            }
            let r: usize = t[0].parse().map_err(|_| Error::Data(format!("bad row in `{line}`")))?;
            let c: usize = t[1].parse().map_err(|_| Error::Data(format!("bad col in `{line}`")))?;
            let v: f64 = t[2].parse().map_err(|_| Error::Data(format!("bad value in `{line}`")))?;
            if r == 0 || c == 0 || r > dims[0] || c > dims[0] {
                return Err(Error::Data(format!("index out of range in `{line}`")));
            }
            b.add(r - 1, c - 1, v);
        }
        Ok(b.build())
    }
}

/// Dense band storage: row `i` holds columns `i - bw ..= i + bw`.
#[derive(Debug, Clone)]
struct Band {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl Band {
    fn from_csr(a: &CsrMatrix, bw: usize) -> Self {
        let width = 2 * bw + 1;
        let mut data = vec![0.0; a.n * width];
        for (r, c, v) in a.triplets() {
            data[r * width + bw + c - r] += v;
        }
        Band { n: a.n, bw, data }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * (2 * self.bw + 1) + self.bw + c - r]
    }

    #[inline]
    fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        let w = 2 * self.bw + 1;
        &mut self.data[r * w + self.bw + c - r]
    }
}

/// LU factorization `A = L U` restricted to the band, without pivoting.
#[derive(Debug, Clone)]
pub struct BandedLu {
    band: Band,
    log_abs_det: f64,
    det_sign: f64,
}

impl BandedLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        if !a.all_finite() {
            return Err(Error::Numerical("matrix has nonfinite entries".into()));
        }
        let n = a.n;
        let bw = a.bandwidth();
        let mut band = Band::from_csr(a, bw);
        let scale = a.norm_inf().max(f64::MIN_POSITIVE);
        let mut log_abs_det = 0.0;
        let mut det_sign = 1.0;
        for k in 0..n {
            let pivot = band.at(k, k);
            if !(pivot.abs() > 1e-14 * scale) {
                return Err(Error::Stability(format!(
                    "zero pivot {pivot:e} at row {k} in banded LU"
                )));
            }
            log_abs_det += pivot.abs().ln();
            if pivot < 0.0 {
                det_sign = -det_sign;
            }
            let last = (k + bw).min(n - 1);
            for i in k + 1..=last {
                let l = band.at(i, k) / pivot;
                if l == 0.0 {
                    continue;
                }
                *band.at_mut(i, k) = l;
                for j in k + 1..=last {
                    let ukj = band.at(k, j);
                    if ukj != 0.0 {
                        *band.at_mut(i, j) -= l * ukj;
                    }
                }
            }
        }
        Ok(BandedLu {
            band,
            log_abs_det,
            det_sign,
        })
    }

    pub fn n(&self) -> usize {
        self.band.n
    }

    pub fn log_abs_det(&self) -> f64 {
        self.log_abs_det
    }

    pub fn det_sign(&self) -> f64 {
        self.det_sign
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw) = (self.band.n, self.band.bw);
        for i in 0..n {
            let first = i.saturating_sub(bw);
            let mut s = x[i];
            for k in first..i {
                s -= self.band.at(i, k) * x[k];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let last = (i + bw).min(n - 1);
            let mut s = x[i];
            for j in i + 1..=last {
                s -= self.band.at(i, j) * x[j];
            }
            x[i] = s / self.band.at(i, i);
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Solves `A^T x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.band.n, self.band.bw);
        let mut x = b.to_vec();
        // U^T y = b
        for i in 0..n {
            let first = i.saturating_sub(bw);
            let mut s = x[i];
            for k in first..i {
                s -= self.band.at(k, i) * x[k];
            }
            x[i] = s / self.band.at(i, i);
        }
        // L^T x = y
        for i in (0..n).rev() {
            let last = (i + bw).min(n - 1);
            let mut s = x[i];
            for j in i + 1..=last {
                s -= self.band.at(j, i) * x[j];
            }
            x[i] = s;
        }
        x
    }
}

/// Cholesky factorization `A = L L^T` of a symmetric positive definite band matrix.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    band: Band,
}

impl BandedCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        if !a.all_finite() {
            return Err(Error::Numerical("matrix has nonfinite entries".into()));
        }
        let n = a.n;
        let bw = a.bandwidth();
        let mut band = Band::from_csr(a, bw);
        for j in 0..n {
            let first = j.saturating_sub(bw);
            let mut d = band.at(j, j);
            for k in first..j {
                let l = band.at(j, k);
                d -= l * l;
            }
            if !(d > 0.0) {
                return Err(Error::Numerical(format!(
                    "matrix is not positive definite (pivot {d:e} at row {j})"
                )));
            }
            let d = d.sqrt();
            *band.at_mut(j, j) = d;
            let last = (j + bw).min(n - 1);
            for i in j + 1..=last {
                let lo = i.saturating_sub(bw).max(first);
                let mut s = band.at(i, j);
                for k in lo..j {
                    s -= band.at(i, k) * band.at(j, k);
                }
                *band.at_mut(i, j) = s / d;
            }
        }
        // zero the upper half so the band holds L only
        for i in 0..n {
            for j in i + 1..=(i + bw).min(n - 1) {
                *band.at_mut(i, j) = 0.0;
            }
        }
        Ok(BandedCholesky { band })
    }

    pub fn n(&self) -> usize {
        self.band.n
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.band.n).map(|i| self.band.at(i, i).ln()).sum::<f64>()
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.band.n, self.band.bw);
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.band.at(i, k) * x[k];
            }
            x[i] = s / self.band.at(i, i);
        }
        x
    }

    /// Solves `L^T x = y`.
    pub fn solve_upper(&self, y: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.band.n, self.band.bw);
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..=(i + bw).min(n - 1) {
                s -= self.band.at(j, i) * x[j];
            }
            x[i] = s / self.band.at(i, i);
        }
        x
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `L^T x` (used for quadratic forms).
    pub fn lt_mul(&self, x: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.band.n, self.band.bw);
        (0..n)
            .map(|i| (i..=(i + bw).min(n - 1)).map(|j| self.band.at(j, i) * x[j]).sum())
            .collect()
    }
}

pub fn dvec(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}
