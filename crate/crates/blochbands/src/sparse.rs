//! Complex sparse matrices in compressed sparse row format.
//!
//! All assembled operators (stiffness, mass, lifting, prolongations and
//! their Galerkin products) are stored here. Entries within a row are kept
//! sorted by column, duplicates from assembly are summed, and matvec is
//! O(nnz).

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<Complex64>,
}

impl CsrMatrix {
    /// Builds a matrix from (row, col, value) triplets, summing duplicates.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, Complex64)],
    ) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet out of bounds");
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![Complex64::default(); triplets.len()];
        let mut fill = counts.clone();
        for &(r, c, v) in triplets {
            let slot = fill[r];
            cols[slot] = c;
            vals[slot] = v;
            fill[r] += 1;
        }
        // Sort each row by column and merge duplicates.
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut out_cols = Vec::with_capacity(triplets.len());
        let mut out_vals = Vec::with_capacity(triplets.len());
        let mut scratch: Vec<(usize, Complex64)> = Vec::new();
        for r in 0..nrows {
            scratch.clear();
            for i in counts[r]..counts[r + 1] {
                scratch.push((cols[i], vals[i]));
            }
            scratch.sort_unstable_by_key(|&(c, _)| c);
            let mut iter = scratch.iter().copied().peekable();
            while let Some((c, mut v)) = iter.next() {
                while iter.peek().is_some_and(|&(c2, _)| c2 == c) {
                    v += iter.next().unwrap().1;
                }
                out_cols.push(c);
                out_vals.push(v);
            }
            row_ptr[r + 1] = out_cols.len();
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx: out_cols,
            values: out_vals,
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Columns and values of row `r`.
    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[Complex64]) {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(pos) => vals[pos],
            Err(_) => Complex64::default(),
        }
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[Complex64], y: &mut [Complex64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            let mut acc = Complex64::default();
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c];
            }
            y[r] = acc;
        }
    }

    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![Complex64::default(); self.nrows];
        self.matvec(x, &mut y);
        y
    }

    /// `y = A^H x` without forming the transpose.
    pub fn apply_adjoint(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![Complex64::default(); self.ncols];
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                y[*c] += v.conj() * x[r];
            }
        }
        y
    }

    /// Conjugate transpose as a new matrix.
    pub fn adjoint(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for i in 0..self.ncols {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![Complex64::default(); self.nnz()];
        let mut fill = counts;
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                let slot = fill[*c];
                col_idx[slot] = r;
                values[slot] = v.conj();
                fill[*c] += 1;
            }
        }
        CsrMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Sparse-sparse product `A * B`.
    pub fn matmul(&self, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!(
            self.ncols, other.nrows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.nrows, self.ncols, other.nrows, other.ncols
        );
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        // Dense accumulator per row; marker avoids clearing the whole row.
        let mut acc = vec![Complex64::default(); other.ncols];
        let mut marker = vec![usize::MAX; other.ncols];
        let mut active: Vec<usize> = Vec::new();
        for r in 0..self.nrows {
            active.clear();
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                let (bcols, bvals) = other.row(*c);
                for (bc, bv) in bcols.iter().zip(bvals) {
                    if marker[*bc] != r {
                        marker[*bc] = r;
                        acc[*bc] = Complex64::default();
                        active.push(*bc);
                    }
                    acc[*bc] += v * bv;
                }
            }
            active.sort_unstable();
            for &c in &active {
                col_idx.push(c);
                values.push(acc[c]);
            }
            row_ptr[r + 1] = col_idx.len();
        }
        CsrMatrix {
            nrows: self.nrows,
            ncols: other.ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// `self + factor * other`, used to regularize the stiffness matrix.
    pub fn add_scaled(&self, factor: Complex64, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut triplets = Vec::with_capacity(self.nnz() + other.nnz());
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                triplets.push((r, *c, *v));
            }
            let (cols, vals) = other.row(r);
            for (c, v) in cols.iter().zip(vals) {
                triplets.push((r, *c, factor * v));
            }
        }
        CsrMatrix::from_triplets(self.nrows, self.ncols, &triplets)
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest deviation from `A = A^H` over all entries.
    pub fn hermitian_defect(&self) -> f64 {
        let mut defect = 0.0f64;
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                defect = defect.max((v - self.get(*c, r).conj()).norm());
            }
        }
        defect
    }

    pub fn diagonal(&self) -> Vec<Complex64> {
        (0..self.nrows.min(self.ncols))
            .map(|i| self.get(i, i))
            .collect()
    }

    /// Drops entries with modulus below `threshold`; keeps shapes intact.
    pub fn pruned(&self, threshold: f64) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                if v.norm() > threshold {
                    triplets.push((r, *c, *v));
                }
            }
        }
        CsrMatrix::from_triplets(self.nrows, self.ncols, &triplets)
    }
}

/// Galerkin triple product `P^H A P`.
pub fn galerkin_product(prolongation: &CsrMatrix, a: &CsrMatrix) -> CsrMatrix {
    prolongation.adjoint().matmul(&a.matmul(prolongation))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let a = CsrMatrix::from_triplets(
            2,
            3,
            &[
                (0, 2, c(1.0, 0.0)),
                (0, 0, c(2.0, 1.0)),
                (0, 2, c(0.5, -1.0)),
                (1, 1, c(3.0, 0.0)),
            ],
        );
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(0, 2), c(1.5, -1.0));
        assert_eq!(a.get(0, 0), c(2.0, 1.0));
        assert_eq!(a.get(0, 1), c(0.0, 0.0));
        let (cols, _) = a.row(0);
        assert_eq!(cols, &[0, 2]);
    }

    #[test]
    fn matvec_adjoint_and_matmul_agree_with_dense() {
        let a = CsrMatrix::from_triplets(
            3,
            2,
            &[
                (0, 0, c(1.0, 2.0)),
                (1, 1, c(-1.0, 0.5)),
                (2, 0, c(0.0, 1.0)),
                (2, 1, c(2.0, 0.0)),
            ],
        );
        let x = vec![c(1.0, -1.0), c(2.0, 0.5)];
        let y = a.apply(&x);
        assert!((y[0] - c(1.0, 2.0) * x[0]).norm() < 1e-15);
        assert!((y[2] - (c(0.0, 1.0) * x[0] + c(2.0, 0.0) * x[1])).norm() < 1e-15);

        let z = vec![c(1.0, 0.0), c(0.0, 1.0), c(1.0, 1.0)];
        let w = a.apply_adjoint(&z);
        let at = a.adjoint();
        let w2 = at.apply(&z);
        for (u, v) in w.iter().zip(&w2) {
            assert!((u - v).norm() < 1e-15);
        }

        let b = CsrMatrix::from_triplets(2, 2, &[(0, 1, c(1.0, 1.0)), (1, 0, c(2.0, -1.0))]);
        let ab = a.matmul(&b);
        for r in 0..3 {
            for col in 0..2 {
                let mut acc = Complex64::default();
                for t in 0..2 {
                    acc += a.get(r, t) * b.get(t, col);
                }
                assert!((ab.get(r, col) - acc).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn hermitian_defect_detects_asymmetry() {
        let h = CsrMatrix::from_triplets(
            2,
            2,
            &[
                (0, 1, c(1.0, 1.0)),
                (1, 0, c(1.0, -1.0)),
                (0, 0, c(2.0, 0.0)),
            ],
        );
        assert!(h.hermitian_defect() < 1e-15);
        let g = CsrMatrix::from_triplets(2, 2, &[(0, 1, c(1.0, 1.0)), (1, 0, c(1.0, 1.0))]);
        assert!(g.hermitian_defect() > 1.0);
    }

    #[test]
    fn add_scaled_regularizes() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, c(1.0, 0.0))]);
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 0, c(2.0, 0.0)), (1, 1, c(1.0, 0.0))]);
        let s = a.add_scaled(c(0.5, 0.0), &m);
        assert_eq!(s.get(0, 0), c(2.0, 0.0));
        assert_eq!(s.get(1, 1), c(0.5, 0.0));
    }
}
