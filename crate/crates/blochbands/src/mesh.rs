//! Rectangular unit-cell meshes with Bloch-periodic index wrapping.
//!
//! The unit cell `[0,a] x [0,b]` is split into `n x m` rectangular cells.
//! Nodes live at `(i1*h1, i2*h2)` for `i1 in [0,n)`, `i2 in [0,m)`; opposite
//! boundaries are identified, so there are exactly `n*m` nodes. Every node
//! owns one horizontal ("x") edge leading to its right neighbor and one
//! vertical ("y") edge leading to its upper neighbor, giving `2*n*m` edge
//! degrees of freedom. A coefficient referenced across a periodic boundary
//! picks up the Bloch phase `alpha = exp(i*k1*a)` per period in the first
//! coordinate and `beta = exp(i*k2*b)` per period in the second.

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("unit cell dimensions must be positive, got a = {a}, b = {b}")]
    CellDimensions { a: f64, b: f64 },
    #[error("grid must have at least 2 cells per direction, got {n} x {m}")]
    GridTooCoarse { n: usize, m: usize },
}

/// Rectangular unit cell with periods `a` and `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitCell {
    pub a: f64,
    pub b: f64,
}

impl UnitCell {
    pub fn new(a: f64, b: f64) -> Result<Self, MeshError> {
        if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(MeshError::CellDimensions { a, b });
        }
        Ok(Self { a, b })
    }

    pub fn square() -> Self {
        Self { a: 1.0, b: 1.0 }
    }
}

/// Bloch wave vector together with its boundary phase factors.
///
/// All assembled operators depend on `k` only through `(alpha, beta)`;
/// shifting `k1` by `2*pi/a` leaves the discrete problem unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlochParameter {
    pub k1: f64,
    pub k2: f64,
    alpha: Complex64,
    beta: Complex64,
}

impl BlochParameter {
    pub fn new(k1: f64, k2: f64, cell: &UnitCell) -> Self {
        Self {
            k1,
            k2,
            alpha: Complex64::from_polar(1.0, k1 * cell.a),
            beta: Complex64::from_polar(1.0, k2 * cell.b),
        }
    }

    pub fn gamma(cell: &UnitCell) -> Self {
        Self::new(0.0, 0.0, cell)
    }

    /// Phase picked up by a coefficient one period up in the first coordinate.
    pub fn alpha(&self) -> Complex64 {
        self.alpha
    }

    /// Phase picked up by a coefficient one period up in the second coordinate.
    pub fn beta(&self) -> Complex64 {
        self.beta
    }

    /// True when both boundary phases are 1, i.e. plain periodicity.
    ///
    /// The special handling of the curl null space keys off the phases, not
    /// off `k` itself, so aliases like `k1 = 2*pi/a` are treated correctly.
    pub fn is_gamma(&self) -> bool {
        (self.alpha - 1.0).norm() < 1e-12 && (self.beta - 1.0).norm() < 1e-12
    }

    /// `alpha^p * beta^q` with conjugation for negative exponents.
    ///
    /// Negative powers use the conjugate rather than division so that the
    /// result stays exactly unit-modulus-symmetric: `phase(p,q) * phase(-p,-q)`
    /// multiplies out to 1 up to floating-point rounding of the product.
    pub fn phase(&self, p: i64, q: i64) -> Complex64 {
        if p == 0 && q == 0 {
            return Complex64::new(1.0, 0.0);
        }
        let mut out = Complex64::new(1.0, 0.0);
        let fa = if p >= 0 {
            self.alpha
        } else {
            self.alpha.conj()
        };
        for _ in 0..p.unsigned_abs() {
            out *= fa;
        }
        let fb = if q >= 0 { self.beta } else { self.beta.conj() };
        for _ in 0..q.unsigned_abs() {
            out *= fb;
        }
        out
    }
}

/// Edge orientation: `X` edges are horizontal, `Y` edges vertical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    X,
    Y,
}

/// One level of the mesh hierarchy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridLevel {
    pub n: usize,
    pub m: usize,
    pub h1: f64,
    pub h2: f64,
}

impl GridLevel {
    pub fn new(cell: &UnitCell, n: usize, m: usize) -> Result<Self, MeshError> {
        if n < 2 || m < 2 {
            return Err(MeshError::GridTooCoarse { n, m });
        }
        Ok(Self {
            n,
            m,
            h1: cell.a / n as f64,
            h2: cell.b / m as f64,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n * self.m
    }

    pub fn edge_count(&self) -> usize {
        2 * self.n * self.m
    }

    pub fn cell_count(&self) -> usize {
        self.n * self.m
    }

    /// Linear index of the node `(i1, i2)`, row-major in `i2`.
    #[inline]
    pub fn node_index(&self, i1: usize, i2: usize) -> usize {
        debug_assert!(i1 < self.n && i2 < self.m);
        i2 * self.n + i1
    }

    /// Linear index of an edge; the x family occupies `[0, n*m)`, the y
    /// family `[n*m, 2*n*m)`.
    #[inline]
    pub fn edge_index(&self, kind: EdgeKind, i1: usize, i2: usize) -> usize {
        debug_assert!(i1 < self.n && i2 < self.m);
        let base = match kind {
            EdgeKind::X => 0,
            EdgeKind::Y => self.n * self.m,
        };
        base + i2 * self.n + i1
    }

    /// Canonicalizes a possibly out-of-range node index and returns the
    /// period counts `(p, q)` the raw index was away from its canonical image.
    #[inline]
    pub fn wrap_node_offsets(&self, raw1: i64, raw2: i64) -> (usize, i64, i64) {
        let n = self.n as i64;
        let m = self.m as i64;
        let p = raw1.div_euclid(n);
        let q = raw2.div_euclid(m);
        let i1 = raw1.rem_euclid(n) as usize;
        let i2 = raw2.rem_euclid(m) as usize;
        (self.node_index(i1, i2), p, q)
    }

    /// Canonical node index plus the phase a coefficient referenced through
    /// the raw index carries.
    #[inline]
    pub fn wrap_node(&self, raw1: i64, raw2: i64, k: &BlochParameter) -> (usize, Complex64) {
        let (idx, p, q) = self.wrap_node_offsets(raw1, raw2);
        (idx, k.phase(p, q))
    }

    /// Canonicalizes a raw edge index, returning the period offsets.
    #[inline]
    pub fn wrap_edge_offsets(&self, kind: EdgeKind, raw1: i64, raw2: i64) -> (usize, i64, i64) {
        let n = self.n as i64;
        let m = self.m as i64;
        let p = raw1.div_euclid(n);
        let q = raw2.div_euclid(m);
        let i1 = raw1.rem_euclid(n) as usize;
        let i2 = raw2.rem_euclid(m) as usize;
        (self.edge_index(kind, i1, i2), p, q)
    }

    /// Canonical edge index plus the multiplicative phase to apply to a
    /// coefficient referenced through the raw index: `alpha^p * beta^q`
    /// where `(p, q)` counts the periods wrapped in each direction.
    #[inline]
    pub fn wrap_edge(
        &self,
        kind: EdgeKind,
        raw1: i64,
        raw2: i64,
        k: &BlochParameter,
    ) -> (usize, Complex64) {
        let (idx, p, q) = self.wrap_edge_offsets(kind, raw1, raw2);
        (idx, k.phase(p, q))
    }

    /// Refined level with twice the cells per direction.
    pub fn refined(&self) -> Self {
        Self {
            n: 2 * self.n,
            m: 2 * self.m,
            h1: 0.5 * self.h1,
            h2: 0.5 * self.h2,
        }
    }

    /// True when `fine` is the bisection refinement of `self`.
    pub fn is_refinement_of(&self, coarse: &GridLevel) -> bool {
        self.n == 2 * coarse.n && self.m == 2 * coarse.m
    }
}

/// Nested mesh levels from coarsest (index 0) to finest.
#[derive(Debug, Clone)]
pub struct GridHierarchy {
    pub cell: UnitCell,
    levels: Vec<GridLevel>,
}

impl GridHierarchy {
    pub fn levels(&self) -> &[GridLevel] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &GridLevel {
        &self.levels[l]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn coarsest(&self) -> &GridLevel {
        &self.levels[0]
    }

    pub fn finest(&self) -> &GridLevel {
        self.levels
            .last()
            .expect("hierarchy has at least one level")
    }
}

/// Builds `refinements + 1` nested levels by repeated bisection of the
/// `n0 x m0` coarse grid.
pub fn build_hierarchy(
    cell: UnitCell,
    n0: usize,
    m0: usize,
    refinements: usize,
) -> Result<GridHierarchy, MeshError> {
    let coarsest = GridLevel::new(&cell, n0, m0)?;
    let mut levels = Vec::with_capacity(refinements + 1);
    levels.push(coarsest);
    for _ in 0..refinements {
        let next = levels.last().unwrap().refined();
        levels.push(next);
    }
    Ok(GridHierarchy { cell, levels })
}
