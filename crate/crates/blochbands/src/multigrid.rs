//! Geometric multigrid preconditioners.
//!
//! Two hierarchies are maintained per Bloch parameter: one for the
//! regularized edge operator `A + mu*M` preconditioning the eigensolver,
//! and a nodal one for the Laplace-type operator `P = L^H M L` behind the
//! null-space projection. Coarse operators are Galerkin products, the
//! coarsest level is solved exactly.
//!
//! The edge smoother is an overlapping block Gauss-Seidel over node
//! patches: the four edges meeting at a node form one block. Each patch has
//! one eigenvalue of order `mu` (the direction of the local nodal gradient,
//! an exact null vector of the patch stiffness) far below the rest, so the
//! block is first rotated by a Householder transform that separates this
//! direction before the Cholesky solve.

use num_complex::Complex64;
use thiserror::Error;

use crate::linalg::{dot, hermitian_eig_small, norm2, Block, DenseMatrix};
use crate::mesh::EdgeKind;
use crate::operators::OperatorStack;
use crate::sparse::CsrMatrix;

#[derive(Debug, Error)]
pub enum MultigridError {
    #[error("node patch at level {level}, node {node} is not positive definite (pivot {pivot:.3e}); check assembly and mu > 0")]
    PatchNotPositiveDefinite {
        level: usize,
        node: usize,
        pivot: f64,
    },
    #[error("regularization parameter must be positive, got {0}")]
    NonPositiveMu(f64),
    #[error("coarsest-level factorization failed: {0}")]
    CoarseFactorization(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepDirection {
    Forward,
    Backward,
}

// ============================================================================
// 4x4 patch solver
// ============================================================================

const PATCH: usize = 4;

/// Pre-factored solver of one node patch of the regularized edge operator.
#[derive(Debug, Clone)]
struct NodePatch {
    /// Canonical indices of [left x, right x, lower y, upper y] edge.
    edges: [usize; 4],
    /// Householder vector mapping the local gradient direction onto the
    /// first axis; `None` when the gradient already is that axis.
    reflector: Option<[Complex64; 4]>,
    /// Lower Cholesky factor of the transformed patch block.
    chol: [[Complex64; 4]; 4],
}

fn reflect4(u: &[Complex64; 4], x: &mut [Complex64; 4]) {
    let uu: f64 = u.iter().map(|v| v.norm_sqr()).sum();
    let mut proj = Complex64::default();
    for i in 0..PATCH {
        proj += u[i].conj() * x[i];
    }
    let factor = 2.0 * proj / uu;
    for i in 0..PATCH {
        x[i] -= factor * u[i];
    }
}

impl NodePatch {
    fn build(
        level_idx: usize,
        node: usize,
        edges: [usize; 4],
        gradient: [Complex64; 4],
        op: &CsrMatrix,
    ) -> Result<Self, MultigridError> {
        // Normalize the gradient direction and build the reflector g -> e1.
        let gnorm: f64 = gradient.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let g: Vec<Complex64> = gradient.iter().map(|v| v / gnorm).collect();
        let phase = if g[0].norm() > 1e-14 {
            g[0] / g[0].norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        let mut u = [Complex64::default(); 4];
        for i in 0..PATCH {
            u[i] = g[i];
        }
        // u = g + phase * e1 avoids cancellation; the reflection maps g onto
        // a unit vector along the first axis.
        u[0] += phase;
        let unorm: f64 = u.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let reflector = if unorm < 1e-14 { None } else { Some(u) };

        // Gather the patch block and transform it.
        let mut block = [[Complex64::default(); 4]; 4];
        for (r, &er) in edges.iter().enumerate() {
            let (cols, vals) = op.row(er);
            for (c, &ec) in edges.iter().enumerate() {
                if let Ok(pos) = cols.binary_search(&ec) {
                    block[r][c] = vals[pos];
                }
            }
        }
        if let Some(u) = &reflector {
            // C = T B T with T = I - 2 u u^H / (u^H u): transform the
            // columns, then the rows (rows via conjugation).
            for c in 0..PATCH {
                let mut col = [block[0][c], block[1][c], block[2][c], block[3][c]];
                reflect4(u, &mut col);
                for r in 0..PATCH {
                    block[r][c] = col[r];
                }
            }
            for r in 0..PATCH {
                let mut row = [
                    block[r][0].conj(),
                    block[r][1].conj(),
                    block[r][2].conj(),
                    block[r][3].conj(),
                ];
                reflect4(u, &mut row);
                for c in 0..PATCH {
                    block[r][c] = row[c].conj();
                }
            }
        }

        // In-place 4x4 Cholesky.
        let mut chol = [[Complex64::default(); 4]; 4];
        for j in 0..PATCH {
            let mut d = block[j][j].re;
            for k in 0..j {
                d -= chol[j][k].norm_sqr();
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(MultigridError::PatchNotPositiveDefinite {
                    level: level_idx,
                    node,
                    pivot: d,
                });
            }
            let ljj = d.sqrt();
            chol[j][j] = Complex64::new(ljj, 0.0);
            for i in j + 1..PATCH {
                let mut v = block[i][j];
                for k in 0..j {
                    v -= chol[i][k] * chol[j][k].conj();
                }
                chol[i][j] = v / ljj;
            }
        }
        Ok(Self {
            edges,
            reflector,
            chol,
        })
    }

    /// Solves `B delta = r` for the untransformed patch block.
    fn solve(&self, r: [Complex64; 4]) -> [Complex64; 4] {
        let mut y = r;
        if let Some(u) = &self.reflector {
            reflect4(u, &mut y);
        }
        // Forward then backward substitution with the Cholesky factor.
        for i in 0..PATCH {
            let mut v = y[i];
            for k in 0..i {
                v -= self.chol[i][k] * y[k];
            }
            y[i] = v / self.chol[i][i];
        }
        for i in (0..PATCH).rev() {
            let mut v = y[i];
            for k in i + 1..PATCH {
                v -= self.chol[k][i].conj() * y[k];
            }
            y[i] = v / self.chol[i][i];
        }
        if let Some(u) = &self.reflector {
            reflect4(u, &mut y);
        }
        y
    }
}

// ============================================================================
// Coarsest-level direct solvers
// ============================================================================

enum CoarseSolver {
    /// Dense Cholesky factor for positive definite coarsest operators.
    Cholesky(DenseMatrix),
    /// Spectral pseudo-inverse for the semidefinite nodal operator at the
    /// periodic point; eigenvalues below the cutoff are dropped.
    PseudoInverse { vectors: Block, inv_eigs: Vec<f64> },
}

impl CoarseSolver {
    fn solve(&self, rhs: &[Complex64]) -> Vec<Complex64> {
        match self {
            CoarseSolver::Cholesky(l) => {
                let mut x = rhs.to_vec();
                l.solve_lower(&mut x);
                l.solve_lower_adjoint(&mut x);
                x
            }
            CoarseSolver::PseudoInverse { vectors, inv_eigs } => {
                let mut x = vec![Complex64::default(); rhs.len()];
                for (col, inv) in vectors.columns().iter().zip(inv_eigs) {
                    if *inv == 0.0 {
                        continue;
                    }
                    let coeff = dot(col, rhs) * *inv;
                    crate::linalg::axpy(coeff, col, &mut x);
                }
                x
            }
        }
    }
}

// ============================================================================
// Edge multigrid
// ============================================================================

struct EdgeLevel {
    op: CsrMatrix,
    patches: Vec<NodePatch>,
}

/// Multigrid for the regularized edge operator `A + mu*M`.
pub struct EdgeMultigrid {
    levels: Vec<EdgeLevel>,
    /// `prolongations[l]` maps level `l` to `l + 1`.
    prolongations: Vec<CsrMatrix>,
    coarse: CoarseSolver,
    pub mu: f64,
    pub pre_sweeps: usize,
    pub post_sweeps: usize,
}

/// The four patch edges of a node: left and right x-edge, lower and upper
/// y-edge, periodicity taken into account.
pub fn node_patch_edges(level: &crate::mesh::GridLevel, j1: usize, j2: usize) -> [usize; 4] {
    let n = level.n as i64;
    let m = level.m as i64;
    let left1 = (j1 as i64 - 1).rem_euclid(n) as usize;
    let lower2 = (j2 as i64 - 1).rem_euclid(m) as usize;
    [
        level.edge_index(EdgeKind::X, left1, j2),
        level.edge_index(EdgeKind::X, j1, j2),
        level.edge_index(EdgeKind::Y, j1, lower2),
        level.edge_index(EdgeKind::Y, j1, j2),
    ]
}

fn build_patches(
    level_idx: usize,
    grid: &crate::mesh::GridLevel,
    lifting: &CsrMatrix,
    op: &CsrMatrix,
) -> Result<Vec<NodePatch>, MultigridError> {
    let lifting_adj = lifting.adjoint();
    let mut patches = Vec::with_capacity(grid.node_count());
    for j2 in 0..grid.m {
        for j1 in 0..grid.n {
            let node = grid.node_index(j1, j2);
            let edges = node_patch_edges(grid, j1, j2);
            // Local gradient: the lifting column of this node restricted to
            // the patch edges (rows of the adjoint are conjugated columns).
            let (cols, vals) = lifting_adj.row(node);
            let mut gradient = [Complex64::default(); 4];
            for (slot, &e) in edges.iter().enumerate() {
                if let Ok(pos) = cols.binary_search(&e) {
                    gradient[slot] = vals[pos].conj();
                }
            }
            patches.push(NodePatch::build(level_idx, node, edges, gradient, op)?);
        }
    }
    Ok(patches)
}

impl EdgeMultigrid {
    pub fn build(stack: &OperatorStack, mu: f64) -> Result<Self, MultigridError> {
        if !(mu > 0.0) {
            return Err(MultigridError::NonPositiveMu(mu));
        }
        let mu_c = Complex64::new(mu, 0.0);
        let mut levels = Vec::with_capacity(stack.num_levels());
        for (idx, ops) in stack.levels.iter().enumerate() {
            let op = ops.stiffness.add_scaled(mu_c, &ops.mass);
            let patches = build_patches(idx, &ops.level, &ops.lifting, &op)?;
            levels.push(EdgeLevel { op, patches });
        }
        let coarse_dense = DenseMatrix::from_csr(&levels[0].op);
        let coarse = CoarseSolver::Cholesky(
            coarse_dense
                .cholesky()
                .map_err(|e| MultigridError::CoarseFactorization(e.to_string()))?,
        );
        Ok(Self {
            levels,
            prolongations: stack.edge_prolongations.clone(),
            coarse,
            mu,
            pre_sweeps: 2,
            post_sweeps: 2,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn operator(&self, level: usize) -> &CsrMatrix {
        &self.levels[level].op
    }

    /// Overlapping block Gauss-Seidel sweeps over all node patches.
    pub fn smooth(
        &self,
        level: usize,
        x: &mut [Complex64],
        rhs: &[Complex64],
        sweeps: usize,
        direction: SweepDirection,
    ) {
        let lvl = &self.levels[level];
        for _ in 0..sweeps {
            let iter: Box<dyn Iterator<Item = &NodePatch>> = match direction {
                SweepDirection::Forward => Box::new(lvl.patches.iter()),
                SweepDirection::Backward => Box::new(lvl.patches.iter().rev()),
            };
            for patch in iter {
                let mut local = [Complex64::default(); 4];
                for (slot, &e) in patch.edges.iter().enumerate() {
                    let (cols, vals) = lvl.op.row(e);
                    let mut acc = rhs[e];
                    for (c, v) in cols.iter().zip(vals) {
                        acc -= v * x[*c];
                    }
                    local[slot] = acc;
                }
                let delta = patch.solve(local);
                for (slot, &e) in patch.edges.iter().enumerate() {
                    x[e] += delta[slot];
                }
            }
        }
    }

    /// One V-cycle on `level`, improving `x` for `op x = rhs`.
    pub fn vcycle(
        &self,
        level: usize,
        x: &mut Vec<Complex64>,
        rhs: &[Complex64],
        nu1: usize,
        nu2: usize,
    ) {
        if level == 0 {
            *x = self.coarse.solve(rhs);
            return;
        }
        self.smooth(level, x, rhs, nu1, SweepDirection::Forward);
        let lvl = &self.levels[level];
        let mut residual = lvl.op.apply(x);
        for (r, b) in residual.iter_mut().zip(rhs) {
            *r = b - *r;
        }
        let transfer = &self.prolongations[level - 1];
        let coarse_rhs = transfer.apply_adjoint(&residual);
        let mut correction = vec![Complex64::default(); coarse_rhs.len()];
        self.vcycle(level - 1, &mut correction, &coarse_rhs, nu1, nu2);
        let fine_correction = transfer.apply(&correction);
        for (xi, c) in x.iter_mut().zip(&fine_correction) {
            *xi += c;
        }
        self.smooth(level, x, rhs, nu2, SweepDirection::Backward);
    }

    /// The preconditioner `B`: fixed number of V-cycles from a zero start.
    /// Linear in `r` and self-adjoint for the symmetric sweep schedule.
    pub fn precondition(&self, level: usize, r: &[Complex64], cycles: usize) -> Vec<Complex64> {
        let mut x = vec![Complex64::default(); r.len()];
        for _ in 0..cycles {
            self.vcycle(level, &mut x, r, self.pre_sweeps, self.post_sweeps);
        }
        x
    }
}

// ============================================================================
// Nodal multigrid
// ============================================================================

struct NodalLevel {
    op: CsrMatrix,
    inv_diag: Vec<f64>,
}

/// Multigrid for the nodal operator `P = L^H M L` used by the null-space
/// projection. At the periodic point `P` is semidefinite with the constant
/// vector as null space; the coarse solve then uses a spectral
/// pseudo-inverse and every cycle output has its mean removed.
pub struct NodalMultigrid {
    levels: Vec<NodalLevel>,
    prolongations: Vec<CsrMatrix>,
    coarse: CoarseSolver,
    gamma: bool,
}

impl NodalMultigrid {
    pub fn build(stack: &OperatorStack) -> Result<Self, MultigridError> {
        let gamma = stack.k.is_gamma();
        let mut levels = Vec::with_capacity(stack.num_levels());
        for ops in &stack.levels {
            let op = ops.nodal.clone();
            let inv_diag: Vec<f64> = op
                .diagonal()
                .iter()
                .map(|d| {
                    debug_assert!(d.re > 0.0);
                    1.0 / d.re
                })
                .collect();
            levels.push(NodalLevel { op, inv_diag });
        }
        let coarse_dense = DenseMatrix::from_csr(&levels[0].op);
        let coarse = if gamma {
            let (u, eigs) = hermitian_eig_small(&coarse_dense)
                .map_err(|e| MultigridError::CoarseFactorization(e.to_string()))?;
            let cutoff = 1e-12 * eigs.last().copied().unwrap_or(0.0).abs().max(1e-300);
            let dim = coarse_dense.nrows();
            let mut vectors = Block::new(dim);
            let mut inv_eigs = Vec::with_capacity(dim);
            for (i, &lambda) in eigs.iter().enumerate() {
                let mut col = vec![Complex64::default(); dim];
                for r in 0..dim {
                    col[r] = u.get(r, i);
                }
                vectors.push(col);
                inv_eigs.push(if lambda > cutoff { 1.0 / lambda } else { 0.0 });
            }
            CoarseSolver::PseudoInverse { vectors, inv_eigs }
        } else {
            CoarseSolver::Cholesky(
                coarse_dense
                    .cholesky()
                    .map_err(|e| MultigridError::CoarseFactorization(e.to_string()))?,
            )
        };
        Ok(Self {
            levels,
            prolongations: stack.nodal_prolongations.clone(),
            coarse,
            gamma,
        })
    }

    fn smooth(
        &self,
        level: usize,
        x: &mut [Complex64],
        rhs: &[Complex64],
        sweeps: usize,
        direction: SweepDirection,
    ) {
        let lvl = &self.levels[level];
        let n = x.len();
        for _ in 0..sweeps {
            let order: Box<dyn Iterator<Item = usize>> = match direction {
                SweepDirection::Forward => Box::new(0..n),
                SweepDirection::Backward => Box::new((0..n).rev()),
            };
            for j in order {
                let (cols, vals) = lvl.op.row(j);
                let mut acc = rhs[j];
                for (c, v) in cols.iter().zip(vals) {
                    acc -= v * x[*c];
                }
                x[j] += acc * lvl.inv_diag[j];
            }
        }
    }

    pub fn vcycle(&self, level: usize, x: &mut Vec<Complex64>, rhs: &[Complex64]) {
        if level == 0 {
            *x = self.coarse.solve(rhs);
        } else {
            self.smooth(level, x, rhs, 2, SweepDirection::Forward);
            let lvl = &self.levels[level];
            let mut residual = lvl.op.apply(x);
            for (r, b) in residual.iter_mut().zip(rhs) {
                *r = b - *r;
            }
            let transfer = &self.prolongations[level - 1];
            let coarse_rhs = transfer.apply_adjoint(&residual);
            let mut correction = vec![Complex64::default(); coarse_rhs.len()];
            self.vcycle(level - 1, &mut correction, &coarse_rhs);
            let fine_correction = transfer.apply(&correction);
            for (xi, c) in x.iter_mut().zip(&fine_correction) {
                *xi += c;
            }
            self.smooth(level, x, rhs, 2, SweepDirection::Backward);
        }
        if self.gamma {
            // Keep the iterate orthogonal to the constant null vector.
            let mean = x.iter().sum::<Complex64>() / x.len() as f64;
            for xi in x.iter_mut() {
                *xi -= mean;
            }
        }
    }

    /// Approximately solves `P phi = rhs` with `cycles` V-cycles.
    pub fn solve(&self, level: usize, rhs: &[Complex64], cycles: usize) -> Vec<Complex64> {
        let mut phi = vec![Complex64::default(); rhs.len()];
        for _ in 0..cycles {
            self.vcycle(level, &mut phi, rhs);
        }
        phi
    }
}

/// Removes the gradient components from every column of `block`: solves
/// `P phi = L^H M u` approximately and returns `u - L phi` per column.
///
/// With exact inner solves the result is M-orthogonal to the range of the
/// lifting; each V-cycle reduces the remaining defect by the nodal
/// contraction factor.
pub fn project_out_gradients(
    mass: &CsrMatrix,
    lifting: &CsrMatrix,
    nodal_mg: &NodalMultigrid,
    level: usize,
    block: &Block,
    cycles: usize,
) -> Block {
    let mut out = Block::new(block.dim());
    for col in block.columns() {
        let rhs = lifting.apply_adjoint(&mass.apply(col));
        let phi = nodal_mg.solve(level, &rhs, cycles);
        let grad = lifting.apply(&phi);
        let mut cleaned = col.clone();
        for (c, g) in cleaned.iter_mut().zip(&grad) {
            *c -= g;
        }
        out.push(cleaned);
    }
    out
}

/// Size of the remaining gradient component, `||L^H M u||`, per column.
pub fn gradient_defect(mass: &CsrMatrix, lifting: &CsrMatrix, block: &Block) -> Vec<f64> {
    block
        .columns()
        .iter()
        .map(|col| norm2(&lifting.apply_adjoint(&mass.apply(col))))
        .collect()
}
