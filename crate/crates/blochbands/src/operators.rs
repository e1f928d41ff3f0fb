//! Assembly of the Bloch-periodic bilinear edge element operators.
//!
//! On each mesh cell the two incident x-edge basis functions are linear
//! ramps in the vertical direction scaled by `1/h1`, the two y-edge basis
//! functions ramps in the horizontal direction scaled by `1/h2`. Their
//! scalar curl is constant `±1/(h1*h2)` per cell, so all element integrals
//! of the stiffness form `int conj(curl v) curl u / eps` and the mass form
//! `int <v, u>` have closed forms; no quadrature is involved. Couplings
//! across the periodic boundary carry the Bloch phases.
//!
//! Gradients of the bilinear nodal basis are exactly representable in the
//! edge basis; the sparse lifting map realizes this with four unit-modulus
//! entries per node. `stiffness * lifting = 0` holds to rounding, which the
//! eigensolver relies on to remove the curl null space.
//!
//! Coarse-level operators come from Galerkin products with the inter-level
//! prolongations; because bisection-coarse basis functions lie exactly in
//! the fine space, this reproduces direct assembly wherever the coefficient
//! is resolved on the coarse mesh.

use num_complex::Complex64;
use thiserror::Error;

use crate::mesh::{BlochParameter, EdgeKind, GridHierarchy, GridLevel};
use crate::sparse::{galerkin_product, CsrMatrix};

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("permittivity must be strictly positive, got {0}")]
    NonPositivePermittivity(f64),
    #[error("permittivity raster is {actual} values, level needs {expected}")]
    RasterSizeMismatch { expected: usize, actual: usize },
    #[error("per-cell permittivity has {actual} values, level has {expected} cells")]
    CellDataMismatch { expected: usize, actual: usize },
    #[error("levels are not in bisection relation: coarse {0}x{1}, fine {2}x{3}")]
    NotBisection(usize, usize, usize, usize),
    #[error("operator shapes do not match: {0}")]
    ShapeMismatch(String),
    #[error("malformed permittivity raster: {0}")]
    RasterParse(String),
}

// ============================================================================
// Permittivity
// ============================================================================

/// Description of the periodic relative permittivity on the unit cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Permittivity {
    Constant(f64),
    /// Circular inclusion; membership is decided at cell midpoints.
    Disc {
        center: (f64, f64),
        radius: f64,
        inside: f64,
        outside: f64,
    },
    /// One value per cell of the finest level, row-major in the second index.
    Raster {
        n: usize,
        m: usize,
        values: Vec<f64>,
    },
}

impl Permittivity {
    pub fn validate(&self) -> Result<(), OperatorError> {
        let check = |v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(OperatorError::NonPositivePermittivity(v))
            }
        };
        match self {
            Permittivity::Constant(v) => check(*v),
            Permittivity::Disc {
                inside, outside, ..
            } => {
                check(*inside)?;
                check(*outside)
            }
            Permittivity::Raster { n, m, values } => {
                if values.len() != n * m {
                    return Err(OperatorError::RasterSizeMismatch {
                        expected: n * m,
                        actual: values.len(),
                    });
                }
                values.iter().try_for_each(|&v| check(v))
            }
        }
    }

    /// Parses the plain-text raster format: first line `n m`, then `n*m`
    /// positive reals in row-major order.
    pub fn raster_from_str(text: &str) -> Result<Self, OperatorError> {
        let mut tokens = text.split_whitespace();
        let mut dim = |name: &str| -> Result<usize, OperatorError> {
            tokens
                .next()
                .ok_or_else(|| OperatorError::RasterParse(format!("missing {name}")))?
                .parse::<usize>()
                .map_err(|e| OperatorError::RasterParse(format!("bad {name}: {e}")))
        };
        let n = dim("cell count n")?;
        let m = dim("cell count m")?;
        let values: Result<Vec<f64>, _> = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| OperatorError::RasterParse(format!("bad value {t:?}: {e}")))
            })
            .collect();
        let values = values?;
        let raster = Permittivity::Raster { n, m, values };
        raster.validate()?;
        Ok(raster)
    }
}

/// Samples the permittivity to one value per cell of `level`, deciding disc
/// membership at the cell midpoint.
pub fn sample_permittivity(
    level: &GridLevel,
    eps: &Permittivity,
) -> Result<Vec<f64>, OperatorError> {
    eps.validate()?;
    let mut out = Vec::with_capacity(level.cell_count());
    match eps {
        Permittivity::Constant(v) => out.resize(level.cell_count(), *v),
        Permittivity::Disc {
            center,
            radius,
            inside,
            outside,
        } => {
            for c2 in 0..level.m {
                for c1 in 0..level.n {
                    let x = (c1 as f64 + 0.5) * level.h1;
                    let y = (c2 as f64 + 0.5) * level.h2;
                    let d = ((x - center.0).powi(2) + (y - center.1).powi(2)).sqrt();
                    out.push(if d <= *radius { *inside } else { *outside });
                }
            }
        }
        Permittivity::Raster { n, m, values } => {
            if *n != level.n || *m != level.m {
                return Err(OperatorError::RasterSizeMismatch {
                    expected: level.cell_count(),
                    actual: n * m,
                });
            }
            out.extend_from_slice(values);
        }
    }
    Ok(out)
}

// ============================================================================
// Edge operators
// ============================================================================

/// The four edge slots of a cell `(c1, c2)` as raw indices with their curl
/// signs: bottom and top x-edges, left and right y-edges.
#[inline]
fn cell_slots(c1: i64, c2: i64) -> [(EdgeKind, i64, i64, f64); 4] {
    [
        (EdgeKind::X, c1, c2, -1.0),
        (EdgeKind::X, c1, c2 + 1, 1.0),
        (EdgeKind::Y, c1, c2, 1.0),
        (EdgeKind::Y, c1 + 1, c2, -1.0),
    ]
}

/// Assembles the stiffness matrix `A` (curl-curl weighted by `1/eps`) and
/// the mass matrix `M` on one level. `eps_cells` holds one value per cell.
///
/// `A` is Hermitian positive semidefinite, `M` Hermitian positive definite;
/// both depend on the Bloch parameter only through its boundary phases.
pub fn assemble_edge_operators(
    level: &GridLevel,
    eps_cells: &[f64],
    k: &BlochParameter,
) -> Result<(CsrMatrix, CsrMatrix), OperatorError> {
    if eps_cells.len() != level.cell_count() {
        return Err(OperatorError::CellDataMismatch {
            expected: level.cell_count(),
            actual: eps_cells.len(),
        });
    }
    let dim = level.edge_count();
    let area = level.h1 * level.h2;
    // Local mass coupling of the two ramps sharing a direction.
    let mass_x = level.h2 / level.h1;
    let mass_y = level.h1 / level.h2;
    let mut a_triplets = Vec::with_capacity(16 * level.cell_count());
    let mut m_triplets = Vec::with_capacity(8 * level.cell_count());

    for c2 in 0..level.m {
        for c1 in 0..level.n {
            let eps = eps_cells[c2 * level.n + c1];
            if eps <= 0.0 {
                return Err(OperatorError::NonPositivePermittivity(eps));
            }
            let slots = cell_slots(c1 as i64, c2 as i64);
            let resolved: Vec<(usize, Complex64, f64)> = slots
                .iter()
                .map(|&(kind, r1, r2, sign)| {
                    let (idx, phase) = level.wrap_edge(kind, r1, r2, k);
                    (idx, phase, sign)
                })
                .collect();
            // Stiffness: rank-one block (s_r s_s) / (eps * h1 * h2).
            let curl_factor = 1.0 / (eps * area);
            for &(ri, rphase, rsign) in &resolved {
                for &(si, sphase, ssign) in &resolved {
                    let value = rphase.conj() * sphase * (rsign * ssign * curl_factor);
                    a_triplets.push((ri, si, value));
                }
            }
            // Mass: ramps of the same family couple as [[1/3,1/6],[1/6,1/3]].
            for (fst, snd, factor) in [(0usize, 1usize, mass_x), (2, 3, mass_y)] {
                let (i0, p0, _) = resolved[fst];
                let (i1, p1, _) = resolved[snd];
                let diag = factor / 3.0;
                let cross = factor / 6.0;
                m_triplets.push((i0, i0, Complex64::new(diag, 0.0)));
                m_triplets.push((i1, i1, Complex64::new(diag, 0.0)));
                m_triplets.push((i0, i1, p0.conj() * p1 * cross));
                m_triplets.push((i1, i0, p1.conj() * p0 * cross));
            }
        }
    }
    Ok((
        CsrMatrix::from_triplets(dim, dim, &a_triplets),
        CsrMatrix::from_triplets(dim, dim, &m_triplets),
    ))
}

/// Sparse map expressing nodal gradients in edge coefficients.
///
/// The column of node `(j1, j2)` carries `-1` on the x-edge leaving the node
/// to the right, `+1` on the x-edge arriving from the left, `-1` on the
/// y-edge leaving upward and `+1` on the y-edge arriving from below; entries
/// referenced across the periodic boundary pick up the boundary phase.
/// Every column has exactly four unit-modulus entries and satisfies
/// `stiffness * lifting = 0` up to rounding.
pub fn assemble_lifting(level: &GridLevel, k: &BlochParameter) -> CsrMatrix {
    let mut triplets = Vec::with_capacity(4 * level.node_count());
    let one = Complex64::new(1.0, 0.0);
    for j2 in 0..level.m {
        for j1 in 0..level.n {
            let col = level.node_index(j1, j2);
            let j1i = j1 as i64;
            let j2i = j2 as i64;
            // Edge coefficients are line integrals: the value on an edge is
            // the potential difference of its endpoints.
            let entries: [(EdgeKind, i64, i64, Complex64); 4] = [
                (EdgeKind::X, j1i, j2i, -one),
                (EdgeKind::X, j1i - 1, j2i, one),
                (EdgeKind::Y, j1i, j2i, -one),
                (EdgeKind::Y, j1i, j2i - 1, one),
            ];
            for (kind, r1, r2, nominal) in entries {
                let (idx, phase) = level.wrap_edge(kind, r1, r2, k);
                // Scattering a basis expansion through a raw slot uses the
                // conjugate of the coefficient-read phase.
                triplets.push((idx, col, nominal * phase.conj()));
            }
        }
    }
    CsrMatrix::from_triplets(level.edge_count(), level.node_count(), &triplets)
}

/// `P = L^H M L`, the nodal Laplace operator with Bloch boundary conditions.
/// Positive definite away from plain periodicity; at the periodic point the
/// constant nodal vector spans its null space.
pub fn assemble_nodal(mass: &CsrMatrix, lifting: &CsrMatrix) -> Result<CsrMatrix, OperatorError> {
    if mass.nrows() != lifting.nrows() || mass.ncols() != lifting.nrows() {
        return Err(OperatorError::ShapeMismatch(format!(
            "mass {}x{} vs lifting {}x{}",
            mass.nrows(),
            mass.ncols(),
            lifting.nrows(),
            lifting.ncols()
        )));
    }
    Ok(galerkin_product(lifting, mass))
}

// ============================================================================
// Transfer operators
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferKind {
    Edge,
    Nodal,
}

/// Prolongation from `coarse` into its bisection refinement `fine`.
///
/// Edge entries are tangential line integrals of the coarse basis over fine
/// edges, nodal entries point values of the coarse nodal basis at fine
/// nodes; both reproduce coarse functions exactly in the fine space.
pub fn assemble_prolongation(
    coarse: &GridLevel,
    fine: &GridLevel,
    k: &BlochParameter,
    kind: TransferKind,
) -> Result<CsrMatrix, OperatorError> {
    if !fine.is_refinement_of(coarse) {
        return Err(OperatorError::NotBisection(
            coarse.n, coarse.m, fine.n, fine.m,
        ));
    }
    match kind {
        TransferKind::Edge => Ok(edge_prolongation(coarse, fine, k)),
        TransferKind::Nodal => Ok(nodal_prolongation(coarse, fine, k)),
    }
}

fn edge_prolongation(coarse: &GridLevel, fine: &GridLevel, k: &BlochParameter) -> CsrMatrix {
    let mut triplets = Vec::with_capacity(6 * coarse.edge_count());
    for e2 in 0..coarse.m {
        for e1 in 0..coarse.n {
            let f1 = 2 * e1 as i64;
            let f2 = 2 * e2 as i64;
            // Coarse x-edge: two collinear fine halves plus the four fine
            // edges one fine row above and below, where the ramp is at half
            // height. Line integrals give 1/2 and 1/4.
            let col = coarse.edge_index(EdgeKind::X, e1, e2);
            for (d1, d2, w) in [
                (0i64, 0i64, 0.5),
                (1, 0, 0.5),
                (0, 1, 0.25),
                (1, 1, 0.25),
                (0, -1, 0.25),
                (1, -1, 0.25),
            ] {
                let (row, phase) = fine.wrap_edge(EdgeKind::X, f1 + d1, f2 + d2, k);
                triplets.push((row, col, phase.conj() * w));
            }
            // Coarse y-edge, transposed picture.
            let col = coarse.edge_index(EdgeKind::Y, e1, e2);
            for (d1, d2, w) in [
                (0i64, 0i64, 0.5),
                (0, 1, 0.5),
                (1, 0, 0.25),
                (1, 1, 0.25),
                (-1, 0, 0.25),
                (-1, 1, 0.25),
            ] {
                let (row, phase) = fine.wrap_edge(EdgeKind::Y, f1 + d1, f2 + d2, k);
                triplets.push((row, col, phase.conj() * w));
            }
        }
    }
    CsrMatrix::from_triplets(fine.edge_count(), coarse.edge_count(), &triplets)
}

fn nodal_prolongation(coarse: &GridLevel, fine: &GridLevel, k: &BlochParameter) -> CsrMatrix {
    let mut triplets = Vec::with_capacity(9 * coarse.node_count());
    for e2 in 0..coarse.m {
        for e1 in 0..coarse.n {
            let col = coarse.node_index(e1, e2);
            let f1 = 2 * e1 as i64;
            let f2 = 2 * e2 as i64;
            for d1 in -1i64..=1 {
                for d2 in -1i64..=1 {
                    let w = (1.0 - 0.5 * d1.abs() as f64) * (1.0 - 0.5 * d2.abs() as f64);
                    let (row, phase) = fine.wrap_node(f1 + d1, f2 + d2, k);
                    triplets.push((row, col, phase.conj() * w));
                }
            }
        }
    }
    CsrMatrix::from_triplets(fine.node_count(), coarse.node_count(), &triplets)
}

/// Galerkin coarse operator `P^H A P`.
pub fn galerkin_coarsen(
    a_fine: &CsrMatrix,
    prolongation: &CsrMatrix,
) -> Result<CsrMatrix, OperatorError> {
    if a_fine.nrows() != prolongation.nrows() || a_fine.ncols() != prolongation.nrows() {
        return Err(OperatorError::ShapeMismatch(format!(
            "operator {}x{} vs prolongation {}x{}",
            a_fine.nrows(),
            a_fine.ncols(),
            prolongation.nrows(),
            prolongation.ncols()
        )));
    }
    Ok(galerkin_product(prolongation, a_fine))
}

// ============================================================================
// Per-hierarchy operator stack
// ============================================================================

/// Operators for one level of the hierarchy at a fixed Bloch parameter.
#[derive(Debug, Clone)]
pub struct LevelOperators {
    pub level: GridLevel,
    pub stiffness: CsrMatrix,
    pub mass: CsrMatrix,
    pub lifting: CsrMatrix,
    pub nodal: CsrMatrix,
}

/// All operators a solve needs: per-level matrices plus the transfers,
/// with every coarse level obtained by Galerkin coarsening of the finest
/// (the permittivity is only ever sampled on the finest mesh).
#[derive(Debug, Clone)]
pub struct OperatorStack {
    pub k: BlochParameter,
    pub levels: Vec<LevelOperators>,
    /// `edge_prolongations[l]` maps level `l` into level `l+1`.
    pub edge_prolongations: Vec<CsrMatrix>,
    pub nodal_prolongations: Vec<CsrMatrix>,
}

impl OperatorStack {
    pub fn assemble(
        hierarchy: &GridHierarchy,
        eps_finest: &[f64],
        k: &BlochParameter,
    ) -> Result<Self, OperatorError> {
        let nlevels = hierarchy.num_levels();
        let mut edge_prolongations = Vec::with_capacity(nlevels.saturating_sub(1));
        let mut nodal_prolongations = Vec::with_capacity(nlevels.saturating_sub(1));
        for l in 0..nlevels - 1 {
            let coarse = hierarchy.level(l);
            let fine = hierarchy.level(l + 1);
            edge_prolongations.push(assemble_prolongation(coarse, fine, k, TransferKind::Edge)?);
            nodal_prolongations.push(assemble_prolongation(coarse, fine, k, TransferKind::Nodal)?);
        }

        let finest = *hierarchy.finest();
        let (a_fine, m_fine) = assemble_edge_operators(&finest, eps_finest, k)?;
        let l_fine = assemble_lifting(&finest, k);
        let p_fine = assemble_nodal(&m_fine, &l_fine)?;

        let mut levels = vec![LevelOperators {
            level: finest,
            stiffness: a_fine,
            mass: m_fine,
            lifting: l_fine,
            nodal: p_fine,
        }];
        for l in (0..nlevels - 1).rev() {
            let finer = &levels[0];
            let pe = &edge_prolongations[l];
            let pn = &nodal_prolongations[l];
            let grid = *hierarchy.level(l);
            let stiffness = galerkin_coarsen(&finer.stiffness, pe)?;
            let mass = galerkin_coarsen(&finer.mass, pe)?;
            let nodal = galerkin_coarsen(&finer.nodal, pn)?;
            let lifting = assemble_lifting(&grid, k);
            levels.insert(
                0,
                LevelOperators {
                    level: grid,
                    stiffness,
                    mass,
                    lifting,
                    nodal,
                },
            );
        }
        Ok(Self {
            k: *k,
            levels,
            edge_prolongations,
            nodal_prolongations,
        })
    }

    pub fn finest(&self) -> &LevelOperators {
        self.levels.last().expect("stack has at least one level")
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}
