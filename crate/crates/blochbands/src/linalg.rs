//! Complex dense and block kernels.
//!
//! Provides the mass-matrix inner product, the generalized Householder
//! factorization used to keep iteration blocks M-orthonormal, a cyclic
//! Jacobi eigendecomposition for small Hermitian matrices (the Ritz step),
//! and a dense generalized eigensolver that serves as the coarse-grid
//! direct solver and as an independent test oracle.

use num_complex::Complex64;
use thiserror::Error;

use crate::sparse::CsrMatrix;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not Hermitian (defect {defect:.3e} exceeds {limit:.3e})")]
    NotHermitian { defect: f64, limit: f64 },
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { pivot: f64, index: usize },
    #[error("basis is not M-orthonormal (defect {defect:.3e})")]
    BasisNotOrthonormal { defect: f64 },
    #[error("cannot build {requested} M-orthonormal basis vectors in dimension {dim}")]
    BasisExhausted { requested: usize, dim: usize },
}

// ============================================================================
// Vector helpers
// ============================================================================

/// `x^H y`, conjugate-linear in the first argument.
#[inline]
pub fn dot(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

#[inline]
pub fn norm2(x: &[Complex64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// `y += factor * x`.
#[inline]
pub fn axpy(factor: Complex64, x: &[Complex64], y: &mut [Complex64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += factor * xi;
    }
}

/// `x^H M y`; conjugate-symmetric in its vector arguments.
pub fn m_inner(m: &CsrMatrix, x: &[Complex64], y: &[Complex64]) -> Result<Complex64, LinalgError> {
    if x.len() != m.nrows() || y.len() != m.ncols() {
        return Err(LinalgError::ShapeMismatch(format!(
            "m_inner with {}x{} operator on vectors of length {} and {}",
            m.nrows(),
            m.ncols(),
            x.len(),
            y.len()
        )));
    }
    Ok(dot(x, &m.apply(y)))
}

pub fn m_norm(m: &CsrMatrix, x: &[Complex64]) -> f64 {
    m_inner(m, x, x)
        .expect("shape checked by caller")
        .re
        .max(0.0)
        .sqrt()
}

// ============================================================================
// Dense matrices (row-major)
// ============================================================================

#[derive(Debug, Clone)]
pub struct DenseMatrix {
    nrows: usize,
    ncols: usize,
    data: Vec<Complex64>,
}

impl DenseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            data: vec![Complex64::default(); nrows * ncols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            out.set(i, i, Complex64::new(1.0, 0.0));
        }
        out
    }

    pub fn from_csr(a: &CsrMatrix) -> Self {
        let mut out = Self::zeros(a.nrows(), a.ncols());
        for r in 0..a.nrows() {
            let (cols, vals) = a.row(r);
            for (c, v) in cols.iter().zip(vals) {
                out.set(r, *c, *v);
            }
        }
        out
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.ncols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.data[r * self.ncols + c] = v;
    }

    pub fn mul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.ncols, other.nrows);
        let mut out = DenseMatrix::zeros(self.nrows, other.ncols);
        for i in 0..self.nrows {
            for k in 0..self.ncols {
                let aik = self.get(i, k);
                if aik == Complex64::default() {
                    continue;
                }
                for j in 0..other.ncols {
                    out.data[i * other.ncols + j] += aik * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn adjoint(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.ncols, self.nrows);
        for r in 0..self.nrows {
            for c in 0..self.ncols {
                out.set(c, r, self.get(r, c).conj());
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn hermitian_defect(&self) -> f64 {
        let mut defect = 0.0f64;
        for r in 0..self.nrows {
            for c in 0..self.ncols {
                defect = defect.max((self.get(r, c) - self.get(c, r).conj()).norm());
            }
        }
        defect
    }

    /// Lower Cholesky factor of a Hermitian positive definite matrix.
    pub fn cholesky(&self) -> Result<DenseMatrix, LinalgError> {
        assert_eq!(self.nrows, self.ncols);
        let n = self.nrows;
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = self.get(j, j).re;
            for k in 0..j {
                d -= l.get(j, k).norm_sqr();
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(LinalgError::NotPositiveDefinite { pivot: d, index: j });
            }
            let ljj = d.sqrt();
            l.set(j, j, Complex64::new(ljj, 0.0));
            for i in j + 1..n {
                let mut v = self.get(i, j);
                for k in 0..j {
                    v -= l.get(i, k) * l.get(j, k).conj();
                }
                l.set(i, j, v / ljj);
            }
        }
        Ok(l)
    }

    /// Solves `L x = b` in place for lower-triangular `self`.
    pub fn solve_lower(&self, b: &mut [Complex64]) {
        let n = self.nrows;
        for i in 0..n {
            let mut v = b[i];
            for k in 0..i {
                v -= self.get(i, k) * b[k];
            }
            b[i] = v / self.get(i, i);
        }
    }

    /// Solves `L^H x = b` in place for lower-triangular `self`.
    pub fn solve_lower_adjoint(&self, b: &mut [Complex64]) {
        let n = self.nrows;
        for i in (0..n).rev() {
            let mut v = b[i];
            for k in i + 1..n {
                v -= self.get(k, i).conj() * b[k];
            }
            b[i] = v / self.get(i, i).conj();
        }
    }
}

// ============================================================================
// Iteration blocks
// ============================================================================

/// A block of complex coefficient vectors sharing one grid level.
#[derive(Debug, Clone)]
pub struct Block {
    dim: usize,
    cols: Vec<Vec<Complex64>>,
}

impl Block {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            cols: Vec::new(),
        }
    }

    pub fn zeros(dim: usize, ncols: usize) -> Self {
        Self {
            dim,
            cols: vec![vec![Complex64::default(); dim]; ncols],
        }
    }

    pub fn from_columns(cols: Vec<Vec<Complex64>>) -> Self {
        let dim = cols.first().map_or(0, |c| c.len());
        assert!(cols.iter().all(|c| c.len() == dim));
        Self { dim, cols }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    pub fn col(&self, i: usize) -> &[Complex64] {
        &self.cols[i]
    }

    pub fn col_mut(&mut self, i: usize) -> &mut Vec<Complex64> {
        &mut self.cols[i]
    }

    pub fn push(&mut self, col: Vec<Complex64>) {
        assert_eq!(col.len(), self.dim);
        self.cols.push(col);
    }

    pub fn columns(&self) -> &[Vec<Complex64>] {
        &self.cols
    }

    pub fn concat(blocks: &[&Block]) -> Block {
        let dim = blocks.first().map_or(0, |b| b.dim);
        let mut cols = Vec::new();
        for b in blocks {
            assert_eq!(b.dim, dim);
            cols.extend(b.cols.iter().cloned());
        }
        Block { dim, cols }
    }

    /// Applies a sparse operator column-wise: `A * self`.
    pub fn apply(&self, a: &CsrMatrix) -> Block {
        Block {
            dim: a.nrows(),
            cols: self.cols.iter().map(|c| a.apply(c)).collect(),
        }
    }

    /// `self * u` for a small dense `u` with `nrows == self.ncols()`.
    pub fn mul_dense(&self, u: &DenseMatrix) -> Block {
        assert_eq!(u.nrows(), self.ncols());
        let mut out = Block::zeros(self.dim, u.ncols());
        for j in 0..u.ncols() {
            let target = out.col_mut(j);
            for l in 0..u.nrows() {
                axpy(u.get(l, j), &self.cols[l], target);
            }
        }
        out
    }

    /// Keeps the first `count` columns.
    pub fn truncated(mut self, count: usize) -> Block {
        self.cols.truncate(count);
        self
    }
}

/// `X^H Y` for two blocks of equal dimension.
pub fn block_gram(x: &Block, y: &Block) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(x.ncols(), y.ncols());
    for i in 0..x.ncols() {
        for j in 0..y.ncols() {
            out.set(i, j, dot(x.col(i), y.col(j)));
        }
    }
    out
}

/// `E^H M E` as a dense matrix.
pub fn m_gram(m: &CsrMatrix, e: &Block) -> DenseMatrix {
    let me = e.apply(m);
    block_gram(e, &me)
}

/// Largest entry of `E^H M E - I`.
pub fn orthonormality_defect(m: &CsrMatrix, e: &Block) -> f64 {
    let gram = m_gram(m, e);
    let mut defect = 0.0f64;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::default()
            };
            defect = defect.max((gram.get(i, j) - target).norm());
        }
    }
    defect
}

// ============================================================================
// Generalized Householder reflections
// ============================================================================

/// An M-reflection `Q = I - 2 v (v^H M) / (v^H M v)`.
///
/// Reflections are involutive and M-selfadjoint; products of reflections
/// applied to an M-orthonormal basis stay M-orthonormal by construction.
#[derive(Debug, Clone)]
pub struct MReflection {
    v: Vec<Complex64>,
    mv: Vec<Complex64>,
    vmv: f64,
}

impl MReflection {
    pub fn new(m: &CsrMatrix, v: Vec<Complex64>) -> Self {
        let mv = m.apply(&v);
        let vmv = dot(&v, &mv).re;
        Self { v, mv, vmv }
    }

    fn from_parts(v: Vec<Complex64>, mv: Vec<Complex64>) -> Self {
        let vmv = dot(&v, &mv).re;
        Self { v, mv, vmv }
    }

    pub fn apply(&self, x: &mut [Complex64]) {
        let factor = -2.0 * dot(&self.mv, x) / self.vmv;
        axpy(factor, &self.v, x);
    }
}

/// Result of the generalized Householder factorization.
pub struct MQrResult {
    /// M-orthonormal basis whose range contains the candidate range.
    pub basis: Block,
    /// Upper-triangular factor; a zero diagonal entry marks a candidate
    /// column that was rank-deficient and replaced by basis completion.
    pub r: DenseMatrix,
}

/// Factorizes the concatenated candidate blocks as `E R` with `E^H M E = I`.
///
/// Applies M-reflections mapping candidate columns onto the prescribed
/// M-orthonormal basis `p_basis`; rank-deficient columns get a zero diagonal
/// in `R` and the corresponding basis direction is kept as completion, so the
/// returned basis is always M-orthonormal with full column count.
pub fn generalized_householder_qr(
    m: &CsrMatrix,
    candidates: &[&Block],
    p_basis: &Block,
) -> Result<MQrResult, LinalgError> {
    let mut work = Block::concat(candidates);
    let q = work.ncols();
    if p_basis.ncols() < q {
        return Err(LinalgError::ShapeMismatch(format!(
            "prescribed basis has {} columns, candidates have {}",
            p_basis.ncols(),
            q
        )));
    }
    let mp: Vec<Vec<Complex64>> = (0..q).map(|i| m.apply(p_basis.col(i))).collect();
    // Contract check on the prescribed basis.
    let mut defect = 0.0f64;
    for i in 0..q {
        for j in i..q {
            let g = dot(p_basis.col(i), &mp[j]);
            let target = if i == j {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::default()
            };
            defect = defect.max((g - target).norm());
        }
    }
    if defect > 1e-8 {
        return Err(LinalgError::BasisNotOrthonormal { defect });
    }

    let col_scales: Vec<f64> = (0..q).map(|i| m_norm(m, work.col(i))).collect();
    let mut r = DenseMatrix::zeros(q, q);
    let mut reflections: Vec<Option<MReflection>> = Vec::with_capacity(q);

    for i in 0..q {
        // Components along the already fixed basis directions, subtracted
        // one at a time against the updated column.
        let mut w = work.col(i).to_vec();
        for l in 0..i {
            let rli = dot(&mp[l], &w);
            r.set(l, i, rli);
            axpy(-rli, p_basis.col(l), &mut w);
        }
        // M w is recomputed from the subtracted vector: for nearly
        // dependent columns w is a tiny difference of large vectors, and an
        // accumulated M w would be wrong relative to ||w||, silently
        // breaking the M-unitarity of the reflection built from it.
        let mw = m.apply(&w);
        let s = dot(&w, &mw).re.max(0.0).sqrt();
        if s <= 1e-10 * col_scales[i].max(1e-300) {
            // Rank-deficient column: no reflection, basis completion keeps
            // the prescribed direction p_i.
            reflections.push(None);
            continue;
        }
        let g = dot(p_basis.col(i), &mw);
        let rho = if g.norm() > 1e-300 {
            g / g.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        let rii = -rho * s;
        r.set(i, i, rii);
        let mut v = w;
        axpy(-rii, p_basis.col(i), &mut v);
        let mv = m.apply(&v);
        let refl = MReflection::from_parts(v, mv);
        for j in i + 1..q {
            refl.apply(work.col_mut(j));
        }
        reflections.push(Some(refl));
    }

    // E = Q_1 Q_2 ... Q_q P restricted to the first q prescribed columns.
    let mut basis = Block::new(p_basis.dim());
    for j in 0..q {
        let mut col = p_basis.col(j).to_vec();
        for refl in reflections.iter().rev().flatten() {
            refl.apply(&mut col);
        }
        basis.push(col);
    }
    Ok(MQrResult { basis, r })
}

/// Canonical M-unit vectors with disjoint supports, greedily picked by
/// smallest mass diagonal; falls back to M-Gram-Schmidt over canonical
/// vectors when not enough disjoint supports exist.
pub fn default_p_basis(m: &CsrMatrix, count: usize) -> Result<Block, LinalgError> {
    let dim = m.nrows();
    if count > dim {
        return Err(LinalgError::BasisExhausted {
            requested: count,
            dim,
        });
    }
    let diag = m.diagonal();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| diag[a].re.partial_cmp(&diag[b].re).unwrap());

    let mut blocked = vec![false; dim];
    let mut picked = Vec::new();
    for &idx in &order {
        if picked.len() == count {
            break;
        }
        if blocked[idx] || diag[idx].re <= 0.0 {
            continue;
        }
        picked.push(idx);
        let (cols, _) = m.row(idx);
        for &c in cols {
            blocked[c] = true;
        }
    }

    let mut basis = Block::new(dim);
    for &idx in &picked {
        let mut col = vec![Complex64::default(); dim];
        col[idx] = Complex64::new(1.0 / diag[idx].re.sqrt(), 0.0);
        basis.push(col);
    }
    if basis.ncols() == count {
        return Ok(basis);
    }

    // Completion by sequential M-Gram-Schmidt of canonical vectors.
    // Candidates that lose most of their mass to the projection are
    // skipped: normalizing a tiny residual would amplify rounding noise
    // past the orthonormality contract.
    let mut m_cols: Vec<Vec<Complex64>> = basis.columns().iter().map(|c| m.apply(c)).collect();
    for &idx in &order {
        if basis.ncols() == count {
            break;
        }
        if picked.contains(&idx) {
            continue;
        }
        let scale = diag[idx].re.max(0.0).sqrt();
        let mut v = vec![Complex64::default(); dim];
        v[idx] = Complex64::new(1.0, 0.0);
        for _ in 0..2 {
            for (p, mp) in basis.columns().iter().zip(&m_cols) {
                let coeff = dot(mp, &v);
                axpy(-coeff, p, &mut v);
            }
        }
        let nrm = m_norm(m, &v);
        if nrm > 1e-4 * scale.max(1e-300) {
            for entry in v.iter_mut() {
                *entry /= nrm;
            }
            // One cleanup pass after normalization keeps the defect at
            // rounding level.
            for (p, mp) in basis.columns().iter().zip(&m_cols) {
                let coeff = dot(mp, &v);
                axpy(-coeff, p, &mut v);
            }
            let nrm = m_norm(m, &v);
            for entry in v.iter_mut() {
                *entry /= nrm;
            }
            m_cols.push(m.apply(&v));
            basis.push(v);
        }
    }
    if basis.ncols() < count {
        return Err(LinalgError::BasisExhausted {
            requested: count,
            dim,
        });
    }
    Ok(basis)
}

// ============================================================================
// Small Hermitian eigendecomposition (cyclic Jacobi)
// ============================================================================

/// Eigendecomposition `U^H H U = diag(d)` of a Hermitian matrix, eigenvalues
/// ascending. Rejects inputs whose Hermitian defect exceeds `1e-8 * |H|`.
pub fn hermitian_eig_small(h: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), LinalgError> {
    assert_eq!(h.nrows(), h.ncols());
    let n = h.nrows();
    let scale = h.max_abs();
    let limit = 1e-8 * scale.max(1e-300);
    let defect = h.hermitian_defect();
    if defect > limit {
        return Err(LinalgError::NotHermitian { defect, limit });
    }
    // Work on the Hermitian part so rounding noise cannot accumulate.
    let mut a = DenseMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            a.set(r, c, 0.5 * (h.get(r, c) + h.get(c, r).conj()));
        }
    }
    let mut u = DenseMatrix::identity(n);
    let frob = a.frobenius().max(1e-300);

    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off += a.get(p, q).norm_sqr();
            }
        }
        if off.sqrt() <= 1e-14 * frob {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                let mag = apq.norm();
                if mag <= 1e-300 {
                    continue;
                }
                let phi = apq / mag;
                let app = a.get(p, p).re;
                let aqq = a.get(q, q).re;
                let tau = (aqq - app) / (2.0 * mag);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Plane transform G: columns (p,q) mix with a phase that
                // makes the pivot real before the real rotation.
                let gpp = Complex64::new(c, 0.0);
                let gpq = Complex64::new(s, 0.0);
                let gqp = -s * phi.conj();
                let gqq = c * phi.conj();
                // A <- A G
                for r in 0..n {
                    let arp = a.get(r, p);
                    let arq = a.get(r, q);
                    a.set(r, p, arp * gpp + arq * gqp);
                    a.set(r, q, arp * gpq + arq * gqq);
                }
                // A <- G^H A
                for col in 0..n {
                    let apc = a.get(p, col);
                    let aqc = a.get(q, col);
                    a.set(p, col, gpp.conj() * apc + gqp.conj() * aqc);
                    a.set(q, col, gpq.conj() * apc + gqq.conj() * aqc);
                }
                // U <- U G
                for r in 0..n {
                    let urp = u.get(r, p);
                    let urq = u.get(r, q);
                    u.set(r, p, urp * gpp + urq * gqp);
                    u.set(r, q, urp * gpq + urq * gqq);
                }
            }
        }
    }

    let mut eigs: Vec<(f64, usize)> = (0..n).map(|i| (a.get(i, i).re, i)).collect();
    eigs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let mut u_sorted = DenseMatrix::zeros(n, n);
    for (new_col, &(_, old_col)) in eigs.iter().enumerate() {
        for r in 0..n {
            u_sorted.set(r, new_col, u.get(r, old_col));
        }
    }
    Ok((u_sorted, eigs.into_iter().map(|(v, _)| v).collect()))
}

// ============================================================================
// Dense generalized eigensolver (oracle / coarse direct solve)
// ============================================================================

/// Full spectrum of `A e = lambda M e` with M-orthonormal eigenvectors and
/// ascending eigenvalues. `M` must be positive definite. Reduces to a
/// standard Hermitian problem via the Cholesky factor of `M`.
pub fn dense_generalized_eig(
    a: &DenseMatrix,
    m: &DenseMatrix,
) -> Result<(Vec<f64>, Block), LinalgError> {
    assert_eq!(a.nrows(), a.ncols());
    assert_eq!(m.nrows(), m.ncols());
    if a.nrows() != m.nrows() {
        return Err(LinalgError::ShapeMismatch(format!(
            "A is {0}x{0}, M is {1}x{1}",
            a.nrows(),
            m.nrows()
        )));
    }
    let n = a.nrows();
    let l = m.cholesky()?;
    // C = L^-1 A L^-H
    let mut y = DenseMatrix::zeros(n, n);
    let mut buf = vec![Complex64::default(); n];
    for col in 0..n {
        for r in 0..n {
            buf[r] = a.get(r, col);
        }
        l.solve_lower(&mut buf);
        for r in 0..n {
            y.set(r, col, buf[r]);
        }
    }
    let yh = y.adjoint();
    let mut c = DenseMatrix::zeros(n, n);
    for col in 0..n {
        for r in 0..n {
            buf[r] = yh.get(r, col);
        }
        l.solve_lower(&mut buf);
        for r in 0..n {
            c.set(col, r, buf[r].conj());
        }
    }
    let (u, eigs) = hermitian_eig_small(&c)?;
    let mut vectors = Block::new(n);
    for col in 0..n {
        for r in 0..n {
            buf[r] = u.get(r, col);
        }
        l.solve_lower_adjoint(&mut buf);
        vectors.push(buf.clone());
    }
    Ok((eigs, vectors))
}
