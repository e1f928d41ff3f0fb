//! Block preconditioned inverse iteration for the smallest non-zero
//! eigenvalues of `A e = lambda M e`.
//!
//! One iteration updates the M-orthonormal block `E` by the preconditioned
//! residual step `E - B (A E - M E Lambda)`, removes the gradient components
//! with the nodal multigrid, re-orthonormalizes with the generalized
//! Householder factorization and extracts Ritz pairs. The subspace for the
//! Ritz step can be just the updated block (plain), enriched by the current
//! block (gradient method) or additionally by the previous block (LOBPCG).
//!
//! Beyond the `p` wanted eigenpairs the block carries `q` throw-away
//! columns that only widen the spectral gap governing the convergence rate;
//! they are excluded from the stopping test. At the periodic point the two
//! constant fields are curl-free but not gradients, so they are deflated
//! explicitly and the solver reports the smallest eigenvalues above them.

use num_complex::Complex64;
use thiserror::Error;

use crate::linalg::{
    axpy, block_gram, dot, generalized_householder_qr, hermitian_eig_small, norm2,
    orthonormality_defect, Block, DenseMatrix, LinalgError,
};
use crate::mesh::BlochParameter;
use crate::multigrid::{project_out_gradients, EdgeMultigrid, MultigridError, NodalMultigrid};
use crate::operators::LevelOperators;
use crate::rng::SplitMix64;
use crate::sparse::CsrMatrix;

#[derive(Debug, Error)]
pub enum EigenError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Multigrid(#[from] MultigridError),
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("initial block is not M-orthonormal (defect {0:.3e})")]
    InitialBlockNotOrthonormal(f64),
}

/// Subspace used for the Ritz extraction in each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubspaceMode {
    /// Only the updated block.
    Plain,
    /// Updated block plus the current block.
    Gradient,
    /// Updated block, current block and previous block.
    Lobpcg,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Number of wanted eigenpairs.
    pub wanted: usize,
    /// Extra throw-away columns excluded from the stopping test.
    pub throwaway: usize,
    pub mode: SubspaceMode,
    /// Per-column defect threshold `||A e - lambda M e||_2`.
    pub tol: f64,
    pub max_iter: usize,
    /// V-cycles per preconditioner application.
    pub precond_cycles: usize,
    /// Nodal V-cycles per null-space projection.
    pub projection_cycles: usize,
    /// Record per-iteration defects and Ritz values of the wanted columns.
    pub record_history: bool,
}

impl SolverOptions {
    /// Defaults for `p` wanted pairs: LOBPCG, `q = ceil(p/2)`, tolerance
    /// 1e-2 on the defect norm.
    pub fn new(wanted: usize) -> Self {
        Self {
            wanted,
            throwaway: wanted.div_ceil(2),
            mode: SubspaceMode::Lobpcg,
            tol: 1e-2,
            max_iter: 100,
            precond_cycles: 2,
            projection_cycles: 3,
            record_history: false,
        }
    }

    pub fn block_size(&self) -> usize {
        self.wanted + self.throwaway
    }

    fn validate(&self) -> Result<(), EigenError> {
        if self.wanted == 0 {
            return Err(EigenError::InvalidOptions("wanted must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(EigenError::InvalidOptions(format!(
                "tolerance must be positive, got {}",
                self.tol
            )));
        }
        if self.precond_cycles == 0 || self.projection_cycles == 0 {
            return Err(EigenError::InvalidOptions(
                "preconditioner and projection cycle counts must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    /// The `p` wanted eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    /// M-orthonormal, A-orthogonal Ritz basis of the wanted pairs.
    pub basis: Block,
    /// Number of preconditioned updates performed.
    pub iterations: usize,
    /// Final defect norms of the wanted pairs.
    pub residuals: Vec<f64>,
    pub converged: bool,
    /// Per-iteration defects of the wanted columns (with `record_history`).
    pub defect_history: Vec<Vec<f64>>,
    /// Per-iteration Ritz values of the wanted columns (with `record_history`).
    pub ritz_history: Vec<Vec<f64>>,
}

// ============================================================================
// Building blocks
// ============================================================================

/// `E^H A E` for an M-orthonormal block, with an orthonormality spot check.
pub fn rayleigh_block(a: &CsrMatrix, m: &CsrMatrix, e: &Block) -> Result<DenseMatrix, EigenError> {
    let ncols = e.ncols();
    if ncols > 0 {
        // Cheap spot check on a few columns.
        let probes = [0, ncols / 2, ncols - 1];
        for &i in &probes {
            let mei = m.apply(e.col(i));
            let nrm = dot(e.col(i), &mei);
            if (nrm - 1.0).norm() > 1e-6 {
                return Err(EigenError::InitialBlockNotOrthonormal((nrm - 1.0).norm()));
            }
            let j = (i + 1) % ncols;
            if j != i {
                let off = dot(e.col(j), &mei);
                if off.norm() > 1e-6 {
                    return Err(EigenError::InitialBlockNotOrthonormal(off.norm()));
                }
            }
        }
    }
    Ok(rayleigh_unchecked(a, e))
}

fn rayleigh_unchecked(a: &CsrMatrix, e: &Block) -> DenseMatrix {
    let ae = e.apply(a);
    let gram = block_gram(e, &ae);
    // Hermitianize to keep rounding noise out of the Ritz step.
    let n = gram.nrows();
    let mut h = DenseMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            h.set(r, c, 0.5 * (gram.get(r, c) + gram.get(c, r).conj()));
        }
    }
    h
}

/// The exactly representable constant fields at the periodic point,
/// M-orthonormalized; empty away from it.
///
/// Both fields are curl-free but are not gradients of periodic potentials,
/// so the null-space projection does not remove them; the solver deflates
/// them explicitly.
pub fn deflation_vectors(ops: &LevelOperators, k: &BlochParameter) -> Block {
    let mut out = Block::new(ops.level.edge_count());
    if !k.is_gamma() {
        return out;
    }
    let level = &ops.level;
    let nm = level.node_count();
    // All x-coefficients h1 is the field (1, 0); all y-coefficients h2 the
    // field (0, 1). They are M-orthogonal because the mass matrix has no
    // x-y coupling; the M-energy of each is the cell area.
    let area = (level.n as f64 * level.h1) * (level.m as f64 * level.h2);
    let scale_x = Complex64::new(level.h1 / area.sqrt(), 0.0);
    let scale_y = Complex64::new(level.h2 / area.sqrt(), 0.0);
    let mut vx = vec![Complex64::default(); 2 * nm];
    let mut vy = vec![Complex64::default(); 2 * nm];
    for i in 0..nm {
        vx[i] = scale_x;
        vy[nm + i] = scale_y;
    }
    out.push(vx);
    out.push(vy);
    out
}

/// M-orthogonalizes every column of `block` against the deflation basis.
pub fn deflate_against(m: &CsrMatrix, deflation: &Block, block: &mut Block) {
    if deflation.ncols() == 0 {
        return;
    }
    let md: Vec<Vec<Complex64>> = deflation.columns().iter().map(|d| m.apply(d)).collect();
    for i in 0..block.ncols() {
        let col = block.col_mut(i);
        for (d, mdc) in deflation.columns().iter().zip(&md) {
            let coeff = dot(mdc, col);
            axpy(-coeff, d, col);
        }
    }
}

/// M-orthonormalizes the concatenation of `blocks` via the generalized
/// Householder factorization against the default prescribed basis.
pub fn orthonormalize(m: &CsrMatrix, blocks: &[&Block]) -> Result<Block, EigenError> {
    let total: usize = blocks.iter().map(|b| b.ncols()).sum();
    let p_basis = crate::linalg::default_p_basis(m, total)?;
    let result = generalized_householder_qr(m, blocks, &p_basis)?;
    Ok(result.basis)
}

/// Ritz step: rotates an M-orthonormal block onto its `count` smallest
/// Ritz pairs of `A`.
pub fn ritz_select(
    a: &CsrMatrix,
    e_orth: &Block,
    count: usize,
) -> Result<(Block, Vec<f64>), EigenError> {
    let h = rayleigh_unchecked(a, e_orth);
    let (u, theta) = hermitian_eig_small(&h)?;
    let keep = count.min(e_orth.ncols());
    let mut u_keep = DenseMatrix::zeros(u.nrows(), keep);
    for c in 0..keep {
        for r in 0..u.nrows() {
            u_keep.set(r, c, u.get(r, c));
        }
    }
    Ok((e_orth.mul_dense(&u_keep), theta[..keep].to_vec()))
}

/// Per-column defect norms `||A e_i - theta_i M e_i||_2`.
fn defects(ae: &Block, me: &Block, ritz: &[f64]) -> Vec<f64> {
    ritz.iter()
        .enumerate()
        .map(|(i, &theta)| {
            let mut r = ae.col(i).to_vec();
            axpy(Complex64::new(-theta, 0.0), me.col(i), &mut r);
            norm2(&r)
        })
        .collect()
}

/// Prepares an arbitrary candidate block for the iteration: removes
/// gradients, deflates the constant fields at the periodic point,
/// M-orthonormalizes and rotates onto the `count` smallest Ritz pairs.
pub fn prepare_block(
    ops: &LevelOperators,
    nodal_mg: &NodalMultigrid,
    level: usize,
    k: &BlochParameter,
    candidates: &[&Block],
    count: usize,
    projection_cycles: usize,
) -> Result<Block, EigenError> {
    let mut concat = Block::concat(candidates);
    if concat.ncols() < count {
        // Too few candidate directions (a tiny coarse spectrum or a
        // degraded warm-start window): pad with canonical directions,
        // which the projection and orthonormalization below turn into
        // valid basis columns.
        let pad = crate::linalg::default_p_basis(&ops.mass, count)?;
        for i in concat.ncols()..count {
            concat.push(pad.col(i).to_vec());
        }
    }
    let mut projected = project_out_gradients(
        &ops.mass,
        &ops.lifting,
        nodal_mg,
        level,
        &concat,
        projection_cycles,
    );
    let deflation = deflation_vectors(ops, k);
    deflate_against(&ops.mass, &deflation, &mut projected);
    let orth = orthonormalize(&ops.mass, &[&projected])?;
    let (basis, _) = ritz_select(&ops.stiffness, &orth, count)?;
    Ok(basis)
}

/// Deterministic random start: seeded entries, gradients removed,
/// deflated, orthonormalized and Ritz-sorted.
pub fn random_start(
    ops: &LevelOperators,
    nodal_mg: &NodalMultigrid,
    level: usize,
    k: &BlochParameter,
    count: usize,
    seed: u64,
    projection_cycles: usize,
) -> Result<Block, EigenError> {
    let mut rng = SplitMix64::new(seed);
    let dim = ops.level.edge_count();
    let raw = Block::from_columns((0..count).map(|_| rng.complex_vector(dim)).collect());
    prepare_block(ops, nodal_mg, level, k, &[&raw], count, projection_cycles)
}

// ============================================================================
// The iteration
// ============================================================================

struct IterationState {
    e: Block,
    /// Implicit difference block: the components of the current Ritz
    /// vectors outside the previous block's span, M-orthonormalized.
    /// Together with `e` it spans the same space as keeping the previous
    /// block explicitly, but it is formed from Ritz coefficients instead of
    /// differences of nearly equal vectors, which would cap the attainable
    /// defect at the cancellation level.
    direction: Option<Block>,
    ritz: Vec<f64>,
}

struct StepOutcome {
    state: IterationState,
}

/// Prescribed basis for the in-iteration Householder factorizations:
/// canonical M-unit vectors cleaned of gradient and deflation components.
///
/// The Ritz step keeps the smallest Rayleigh quotients, so any null-space
/// content that enters the subspace is amplified instead of damped. Basis
/// completion for rank-deficient candidates must therefore only ever
/// introduce directions that are themselves free of null-space components.
fn clean_p_basis(
    ops: &LevelOperators,
    nodal_mg: &NodalMultigrid,
    level: usize,
    deflation: &Block,
    count: usize,
    projection_cycles: usize,
) -> Result<Block, EigenError> {
    let raw = crate::linalg::default_p_basis(&ops.mass, count)?;
    let mut projected = project_out_gradients(
        &ops.mass,
        &ops.lifting,
        nodal_mg,
        level,
        &raw,
        projection_cycles.max(3),
    );
    deflate_against(&ops.mass, deflation, &mut projected);
    let result = generalized_householder_qr(&ops.mass, &[&projected], &raw)?;
    Ok(result.basis)
}

fn pinvit_step(
    ops: &LevelOperators,
    edge_mg: &EdgeMultigrid,
    nodal_mg: &NodalMultigrid,
    level: usize,
    deflation: &Block,
    p_basis: &Block,
    state: &IterationState,
    mode: SubspaceMode,
    opts: &SolverOptions,
    ae: &Block,
    me: &Block,
) -> Result<StepOutcome, EigenError> {
    let block_size = state.e.ncols();
    // Preconditioned residuals.
    let mut w = Block::new(state.e.dim());
    for i in 0..block_size {
        let mut r = ae.col(i).to_vec();
        axpy(Complex64::new(-state.ritz[i], 0.0), me.col(i), &mut r);
        w.push(edge_mg.precondition(level, &r, opts.precond_cycles));
    }

    // Subspace assembly. The updated block of the textbook formulation is
    // `E - W`, so the enriched spans are identical to those over
    // [E, W] and [E, W, direction]; arranging the factorization this way
    // keeps the new search directions well scaled instead of extracting
    // them as differences of nearly converged columns.
    //
    // All candidate columns pass through the null-space elimination, not
    // only the residual block: the approximate projection leaves a residue
    // on every column, and re-cleaning each iteration keeps the subspace
    // contamination at the single-application level instead of letting the
    // Ritz selection accumulate it.
    let candidates: Vec<&Block> = match (mode, &state.direction) {
        (SubspaceMode::Plain, _) => vec![&state.e, &w],
        (SubspaceMode::Gradient, _) | (SubspaceMode::Lobpcg, None) => vec![&state.e, &w],
        (SubspaceMode::Lobpcg, Some(dir)) => vec![&state.e, &w, dir],
    };
    let concat = Block::concat(&candidates);
    let mut cleaned = project_out_gradients(
        &ops.mass,
        &ops.lifting,
        nodal_mg,
        level,
        &concat,
        opts.projection_cycles,
    );
    deflate_against(&ops.mass, deflation, &mut cleaned);
    if mode == SubspaceMode::Plain {
        // Plain inverse iteration: only the updated block E - B R enters
        // the Ritz space. Reconstruct it from the cleaned columns so it
        // enjoys the same hygiene.
        let mut updated = Block::new(state.e.dim());
        for i in 0..block_size {
            let mut col = cleaned.col(i).to_vec();
            axpy(
                Complex64::new(-1.0, 0.0),
                cleaned.col(block_size + i),
                &mut col,
            );
            updated.push(col);
        }
        let qr = generalized_householder_qr(&ops.mass, &[&updated], p_basis)?;
        let (e_next, ritz_next) = ritz_select(&ops.stiffness, &qr.basis, block_size)?;
        return Ok(StepOutcome {
            state: IterationState {
                e: e_next,
                direction: None,
                ritz: ritz_next,
            },
        });
    }

    let qr = generalized_householder_qr(&ops.mass, &[&cleaned], p_basis)?;
    let subspace = &qr.basis;

    // Ritz step over the enriched space.
    let h = rayleigh_unchecked(&ops.stiffness, subspace);
    let (u, theta) = hermitian_eig_small(&h)?;
    let total = subspace.ncols();
    let mut u_keep = DenseMatrix::zeros(total, block_size);
    for c in 0..block_size {
        for r in 0..total {
            u_keep.set(r, c, u.get(r, c));
        }
    }
    let e_next = subspace.mul_dense(&u_keep);
    let ritz_next = theta[..block_size].to_vec();

    // Implicit difference block: the part of the new Ritz vectors outside
    // the previous block's span, read off the trailing Ritz coefficients.
    let direction = if mode == SubspaceMode::Lobpcg && total > block_size {
        let mut dir = Block::new(state.e.dim());
        for c in 0..block_size {
            let mut coeff_norm_sq = 0.0f64;
            for r in block_size..total {
                coeff_norm_sq += u_keep.get(r, c).norm_sqr();
            }
            let coeff_norm = coeff_norm_sq.sqrt();
            if coeff_norm <= 1e-12 {
                continue;
            }
            let mut col = vec![Complex64::default(); state.e.dim()];
            for r in block_size..total {
                axpy(u_keep.get(r, c) / coeff_norm, subspace.col(r), &mut col);
            }
            dir.push(col);
        }
        if dir.ncols() > 0 {
            Some(dir)
        } else {
            None
        }
    } else {
        None
    };

    Ok(StepOutcome {
        state: IterationState {
            e: e_next,
            direction,
            ritz: ritz_next,
        },
    })
}

/// Runs the preconditioned block inverse iteration until the defects of the
/// `p` wanted Ritz pairs drop below the tolerance.
///
/// The initial block must be M-orthonormal with `p + q` columns, already
/// gradient-projected, and at the periodic point M-orthogonal to the two
/// constant deflation fields ([`prepare_block`] produces such blocks).
/// Hitting the iteration cap is not an error; the best iterate is returned
/// with `converged = false`.
pub fn pinvit_solve(
    ops: &LevelOperators,
    edge_mg: &EdgeMultigrid,
    nodal_mg: &NodalMultigrid,
    level: usize,
    k: &BlochParameter,
    e0: Block,
    opts: &SolverOptions,
) -> Result<SolveResult, EigenError> {
    pinvit_solve_full(ops, edge_mg, nodal_mg, level, k, e0, opts).map(|(result, _)| result)
}

/// Like [`pinvit_solve`] but also returns the full iteration block
/// including the throw-away columns, so a band scan can warm-start
/// neighboring Bloch parameters from the whole space.
pub fn pinvit_solve_full(
    ops: &LevelOperators,
    edge_mg: &EdgeMultigrid,
    nodal_mg: &NodalMultigrid,
    level: usize,
    k: &BlochParameter,
    e0: Block,
    opts: &SolverOptions,
) -> Result<(SolveResult, Block), EigenError> {
    opts.validate()?;
    let block_size = opts.block_size().min(e0.ncols());
    if e0.ncols() != opts.block_size() {
        return Err(EigenError::InvalidOptions(format!(
            "initial block has {} columns, options require p + q = {}",
            e0.ncols(),
            opts.block_size()
        )));
    }
    let defect0 = orthonormality_defect(&ops.mass, &e0);
    if defect0 > 1e-6 {
        return Err(EigenError::InitialBlockNotOrthonormal(defect0));
    }
    let deflation = deflation_vectors(ops, k);
    let p_basis = clean_p_basis(
        ops,
        nodal_mg,
        level,
        &deflation,
        3 * block_size,
        opts.projection_cycles,
    )?;

    // Initial Ritz rotation so the residual uses a diagonal Rayleigh block.
    let (e, ritz) = ritz_select(&ops.stiffness, &e0, block_size)?;
    let mut state = IterationState {
        e,
        direction: None,
        ritz,
    };

    let mut defect_history = Vec::new();
    let mut ritz_history = Vec::new();
    let mut iterations = 0usize;
    let mut converged = false;
    let mut last_defects;

    loop {
        let ae = state.e.apply(&ops.stiffness);
        let me = state.e.apply(&ops.mass);
        let d = defects(&ae, &me, &state.ritz);
        if opts.record_history {
            defect_history.push(d[..opts.wanted.min(d.len())].to_vec());
            ritz_history.push(state.ritz[..opts.wanted.min(state.ritz.len())].to_vec());
        }
        last_defects = d;
        if last_defects[..opts.wanted.min(block_size)]
            .iter()
            .all(|&v| v <= opts.tol)
        {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        let outcome = pinvit_step(
            ops, edge_mg, nodal_mg, level, &deflation, &p_basis, &state, opts.mode, opts, &ae, &me,
        )?;
        state = outcome.state;
        iterations += 1;
    }

    let wanted = opts.wanted.min(block_size);
    let basis = Block::from_columns(state.e.columns()[..wanted].to_vec());
    let result = SolveResult {
        eigenvalues: state.ritz[..wanted].to_vec(),
        basis,
        iterations,
        residuals: last_defects[..wanted].to_vec(),
        converged,
        defect_history,
        ritz_history,
    };
    Ok((result, state.e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dense_generalized_eig, m_gram};
    use crate::mesh::{build_hierarchy, GridHierarchy, UnitCell};
    use crate::operators::{sample_permittivity, OperatorStack, Permittivity};

    struct Setup {
        stack: OperatorStack,
        edge_mg: EdgeMultigrid,
        nodal_mg: NodalMultigrid,
        #[allow(dead_code)]
        hierarchy: GridHierarchy,
    }

    fn setup(n0: usize, refinements: usize, eps: &Permittivity, k1: f64, k2: f64) -> Setup {
        let cell = UnitCell::square();
        let hierarchy = build_hierarchy(cell, n0, n0, refinements).unwrap();
        let cells = sample_permittivity(hierarchy.finest(), eps).unwrap();
        let k = BlochParameter::new(k1, k2, &cell);
        let stack = OperatorStack::assemble(&hierarchy, &cells, &k).unwrap();
        let edge_mg = EdgeMultigrid::build(&stack, 1.0).unwrap();
        let nodal_mg = NodalMultigrid::build(&stack).unwrap();
        Setup {
            stack,
            edge_mg,
            nodal_mg,
            hierarchy,
        }
    }

    /// Nonzero oracle eigenpairs of the finest level, ascending.
    fn oracle_nonzero(stack: &OperatorStack) -> (Vec<f64>, Block) {
        let ops = stack.finest();
        let a = DenseMatrix::from_csr(&ops.stiffness);
        let m = DenseMatrix::from_csr(&ops.mass);
        let (eigs, vectors) = dense_generalized_eig(&a, &m).unwrap();
        let scale = eigs.last().copied().unwrap_or(1.0).abs();
        let mut vals = Vec::new();
        let mut cols = Vec::new();
        for (i, &v) in eigs.iter().enumerate() {
            if v > 1e-8 * scale {
                vals.push(v);
                cols.push(vectors.col(i).to_vec());
            }
        }
        (vals, Block::from_columns(cols))
    }

    #[test]
    fn exact_invariant_subspace_is_a_fixed_point() {
        let s = setup(4, 1, &Permittivity::Constant(1.0), 1.1, 0.6);
        let top = s.stack.num_levels() - 1;
        let ops = s.stack.finest();
        let (vals, vecs) = oracle_nonzero(&s.stack);
        let mut opts = SolverOptions::new(4);
        opts.throwaway = 2;
        opts.tol = 1e-8;
        let e0 = Block::from_columns(vecs.columns()[..6].to_vec());
        let result =
            pinvit_solve(ops, &s.edge_mg, &s.nodal_mg, top, &s.stack.k, e0, &opts).unwrap();
        assert!(result.converged);
        assert!(result.iterations <= 1);
        for (got, want) in result.eigenvalues.iter().zip(&vals[..4]) {
            assert!((got - want).abs() <= 1e-8 * want.abs());
        }
    }

    #[test]
    fn matches_oracle_on_small_grid_to_high_accuracy() {
        for eps in [
            Permittivity::Constant(1.0),
            Permittivity::Disc {
                center: (0.5, 0.5),
                radius: 1.0 / 3.0,
                inside: 100.0,
                outside: 1.0,
            },
        ] {
            let s = setup(4, 1, &eps, 0.77, -1.21);
            let top = s.stack.num_levels() - 1;
            let ops = s.stack.finest();
            let (oracle_vals, _) = oracle_nonzero(&s.stack);
            let mut opts = SolverOptions::new(6);
            opts.throwaway = 2;
            opts.tol = 1e-10;
            opts.max_iter = 400;
            let e0 = random_start(
                ops,
                &s.nodal_mg,
                top,
                &s.stack.k,
                8,
                42,
                opts.projection_cycles,
            )
            .unwrap();
            let result =
                pinvit_solve(ops, &s.edge_mg, &s.nodal_mg, top, &s.stack.k, e0, &opts).unwrap();
            assert!(result.converged, "did not converge for {eps:?}");
            for (got, want) in result.eigenvalues.iter().zip(&oracle_vals[..6]) {
                assert!(
                    (got - want).abs() <= 1e-8 * want.abs(),
                    "{got} vs oracle {want} for {eps:?}"
                );
            }
            // Null-space avoidance: everything reported sits well above zero.
            for v in &result.eigenvalues {
                assert!(*v >= 10.0 * opts.tol);
            }
        }
    }

    #[test]
    fn biorthogonality_contract_at_return() {
        let s = setup(4, 1, &Permittivity::Constant(1.0), 0.9, 0.35);
        let top = s.stack.num_levels() - 1;
        let ops = s.stack.finest();
        let mut opts = SolverOptions::new(5);
        opts.throwaway = 3;
        opts.tol = 1e-6;
        opts.max_iter = 300;
        let e0 = random_start(ops, &s.nodal_mg, top, &s.stack.k, 8, 7, 3).unwrap();
        let result =
            pinvit_solve(ops, &s.edge_mg, &s.nodal_mg, top, &s.stack.k, e0, &opts).unwrap();
        assert!(result.converged);
        assert!(orthonormality_defect(&ops.mass, &result.basis) <= 1e-8);
        let h = m_gram(&ops.stiffness, &result.basis);
        for r in 0..h.nrows() {
            for c in 0..h.ncols() {
                if r != c {
                    assert!(h.get(r, c).norm() <= 10.0 * opts.tol);
                }
            }
        }
        // Returned iterates carry no gradient components beyond the
        // projection tolerance.
        let mass_scale = ops.mass.max_abs();
        for col in result.basis.columns() {
            let defect = ops.lifting.apply_adjoint(&ops.mass.apply(col));
            let max_entry = defect.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
            assert!(max_entry <= 1e-6 * mass_scale);
        }
    }

    #[test]
    fn gamma_point_reports_positive_eigenvalues_with_deflation() {
        // eps = 1 at the periodic point: the smallest nonzero eigenvalue is
        // 4 pi^2 with multiplicity four.
        let s = setup(8, 2, &Permittivity::Constant(1.0), 0.0, 0.0);
        let top = s.stack.num_levels() - 1;
        let ops = s.stack.finest();
        let mut opts = SolverOptions::new(4);
        opts.throwaway = 4;
        opts.tol = 1e-6;
        opts.max_iter = 200;
        let e0 = random_start(ops, &s.nodal_mg, top, &s.stack.k, 8, 11, 3).unwrap();
        let result =
            pinvit_solve(ops, &s.edge_mg, &s.nodal_mg, top, &s.stack.k, e0, &opts).unwrap();
        assert!(result.converged);
        let target = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
        for v in &result.eigenvalues {
            assert!(*v > 10.0 * opts.tol);
            // 32x32 grid: second-order accuracy leaves a few percent.
            assert!((v - target).abs() <= 0.05 * target, "{v} vs {target}");
        }
    }

    #[test]
    fn deflation_vectors_contract() {
        let cell = UnitCell::square();
        let s = setup(4, 0, &Permittivity::Constant(1.0), 0.0, 0.0);
        let ops = s.stack.finest();
        let k0 = BlochParameter::gamma(&cell);
        let vectors = deflation_vectors(ops, &k0);
        assert_eq!(vectors.ncols(), 2);
        // Curl-free: A v = 0.
        for col in vectors.columns() {
            let av = ops.stiffness.apply(col);
            assert!(norm2(&av) <= 1e-12 * ops.stiffness.max_abs());
        }
        // M-orthonormal pair.
        assert!(orthonormality_defect(&ops.mass, &vectors) < 1e-12);
        // Not gradients: the null-space projection leaves them unchanged.
        let projected = project_out_gradients(
            &ops.mass,
            &ops.lifting,
            &s.nodal_mg,
            s.stack.num_levels() - 1,
            &vectors,
            8,
        );
        for (before, after) in vectors.columns().iter().zip(projected.columns()) {
            let mut diff = before.clone();
            axpy(Complex64::new(-1.0, 0.0), after, &mut diff);
            assert!(norm2(&diff) <= 1e-8);
        }

        // Away from the periodic point there is nothing to deflate.
        let k1 = BlochParameter::new(0.3, 0.0, &cell);
        assert_eq!(deflation_vectors(ops, &k1).ncols(), 0);
    }

    #[test]
    fn rayleigh_block_contract() {
        let s = setup(4, 0, &Permittivity::Constant(1.0), 0.9, -0.2);
        let ops = s.stack.finest();
        let (vals, vecs) = oracle_nonzero(&s.stack);
        let e = Block::from_columns(vecs.columns()[..4].to_vec());
        let h = rayleigh_block(&ops.stiffness, &ops.mass, &e).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expect = if r == c { vals[r] } else { 0.0 };
                assert!((h.get(r, c) - expect).norm() <= 1e-8 * vals[3]);
            }
        }
        // Identity pencil sanity: a single M-unit column gives value 1.
        let single = Block::from_columns(vec![vecs.col(0).to_vec()]);
        let hm = rayleigh_block(&ops.mass, &ops.mass, &single).unwrap();
        assert!((hm.get(0, 0) - Complex64::new(1.0, 0.0)).norm() < 1e-10);

        // Courant-Fischer: the trace of any M-orthonormal section dominates
        // the sum of the smallest eigenvalues.
        let all = dense_generalized_eig(
            &DenseMatrix::from_csr(&ops.stiffness),
            &DenseMatrix::from_csr(&ops.mass),
        )
        .unwrap();
        let e_rand = random_start(
            ops,
            &s.nodal_mg,
            s.stack.num_levels() - 1,
            &s.stack.k,
            4,
            23,
            3,
        )
        .unwrap();
        let hr = rayleigh_block(&ops.stiffness, &ops.mass, &e_rand).unwrap();
        let trace: f64 = (0..4).map(|i| hr.get(i, i).re).sum();
        let smallest: f64 = all.0[..4].iter().sum();
        assert!(trace >= smallest - 1e-9);
    }

    #[test]
    fn ritz_values_decrease_monotonically_for_lobpcg() {
        let s = setup(4, 1, &Permittivity::Constant(1.0), 1.3, 0.2);
        let top = s.stack.num_levels() - 1;
        let ops = s.stack.finest();
        let mut opts = SolverOptions::new(4);
        opts.throwaway = 2;
        opts.tol = 1e-9;
        opts.max_iter = 200;
        opts.record_history = true;
        let e0 = random_start(ops, &s.nodal_mg, top, &s.stack.k, 6, 3, 3).unwrap();
        let result =
            pinvit_solve(ops, &s.edge_mg, &s.nodal_mg, top, &s.stack.k, e0, &opts).unwrap();
        assert!(result.converged);
        for step in result.ritz_history.windows(2) {
            for (prev, next) in step[0].iter().zip(&step[1]) {
                assert!(*next <= prev + 1e-10 * prev.abs().max(1.0));
            }
        }
    }

    #[test]
    fn richer_subspaces_dominate_per_step() {
        let s = setup(4, 1, &Permittivity::Constant(1.0), 0.45, 1.05);
        let top = s.stack.num_levels() - 1;
        let ops = s.stack.finest();
        let opts = {
            let mut o = SolverOptions::new(4);
            o.throwaway = 2;
            o.tol = 1e-12;
            o
        };
        let deflation = deflation_vectors(ops, &s.stack.k);
        let p_basis = clean_p_basis(ops, &s.nodal_mg, top, &deflation, 18, 3).unwrap();
        let e0 = random_start(ops, &s.nodal_mg, top, &s.stack.k, 6, 17, 3).unwrap();
        let (e, ritz) = ritz_select(&ops.stiffness, &e0, 6).unwrap();
        // Two warm-up iterations so a previous block exists.
        let mut state = IterationState {
            e,
            direction: None,
            ritz,
        };
        for _ in 0..2 {
            let ae = state.e.apply(&ops.stiffness);
            let me = state.e.apply(&ops.mass);
            state = pinvit_step(
                ops,
                &s.edge_mg,
                &s.nodal_mg,
                top,
                &deflation,
                &p_basis,
                &state,
                SubspaceMode::Lobpcg,
                &opts,
                &ae,
                &me,
            )
            .unwrap()
            .state;
        }
        let ae = state.e.apply(&ops.stiffness);
        let me = state.e.apply(&ops.mass);
        let mut theta_by_mode = Vec::new();
        for mode in [
            SubspaceMode::Plain,
            SubspaceMode::Gradient,
            SubspaceMode::Lobpcg,
        ] {
            let next = pinvit_step(
                ops,
                &s.edge_mg,
                &s.nodal_mg,
                top,
                &deflation,
                &p_basis,
                &state,
                mode,
                &opts,
                &ae,
                &me,
            )
            .unwrap()
            .state;
            theta_by_mode.push(next.ritz[opts.wanted - 1]);
        }
        let slack = 1e-10 * theta_by_mode[0].abs().max(1.0);
        assert!(theta_by_mode[2] <= theta_by_mode[1] + slack);
        assert!(theta_by_mode[1] <= theta_by_mode[0] + slack);
    }

    #[test]
    fn throwaway_columns_widen_the_gap_at_the_stated_rate() {
        // Unpreconditioned block inverse iteration with the exact inverse on
        // the non-null spectrum: column i converges to eigenvector i at rate
        // lambda_i / lambda_{P+1}, so measured rates must not exceed it by
        // more than the stated slack.
        let s = setup(
            6,
            0,
            &Permittivity::Disc {
                center: (0.5, 0.5),
                radius: 1.0 / 3.0,
                inside: 100.0,
                outside: 1.0,
            },
            0.9,
            0.4,
        );
        let ops = s.stack.finest();
        let (vals, vecs) = oracle_nonzero(&s.stack);
        let block_size = 5usize;
        let me_oracle: Vec<Vec<Complex64>> =
            vecs.columns().iter().map(|v| ops.mass.apply(v)).collect();

        // Exact inverse on the complement of the null space, applied to M e.
        let inverse_step = |e: &Block| -> Block {
            let mut out = Block::new(e.dim());
            for col in e.columns() {
                let mut acc = vec![Complex64::default(); e.dim()];
                for ((v, mv), lambda) in vecs.columns().iter().zip(&me_oracle).zip(&vals) {
                    let coeff = dot(mv, col) / *lambda;
                    axpy(coeff, v, &mut acc);
                }
                out.push(acc);
            }
            out
        };

        let top = s.stack.num_levels() - 1;
        let mut e = random_start(ops, &s.nodal_mg, top, &s.stack.k, block_size, 31, 6).unwrap();
        // Tangent of the M-angle between column i and oracle eigenvector i.
        let tangent = |e: &Block, i: usize| -> f64 {
            let col = e.col(i);
            let along = dot(&me_oracle[i], col);
            let mut rest = col.to_vec();
            axpy(-along, vecs.col(i), &mut rest);
            let rest_norm = crate::linalg::m_norm(&ops.mass, &rest);
            rest_norm / along.norm().max(1e-300)
        };
        let mut history: Vec<Vec<f64>> = Vec::new();
        for _ in 0..14 {
            let next = inverse_step(&e);
            let orth = orthonormalize(&ops.mass, &[&next]).unwrap();
            let (rotated, _) = ritz_select(&ops.stiffness, &orth, block_size).unwrap();
            e = rotated;
            history.push((0..block_size).map(|i| tangent(&e, i)).collect());
        }
        // Geometric rate over the last few steps, skipping the transient.
        let lo = 6usize;
        let hi = history.len() - 1;
        for i in 0..block_size {
            let t_lo = history[lo][i];
            let t_hi = history[hi][i];
            if t_hi < 1e-13 {
                continue; // converged to rounding, rate unmeasurable
            }
            let rate = (t_hi / t_lo).powf(1.0 / (hi - lo) as f64);
            let bound = vals[i] / vals[block_size];
            assert!(
                rate <= bound + 0.05,
                "column {i}: measured {rate:.3} vs bound {bound:.3}"
            );
        }
    }

    #[test]
    fn iteration_cap_reports_nonconvergence() {
        let s = setup(4, 1, &Permittivity::Constant(1.0), 0.7, 0.7);
        let top = s.stack.num_levels() - 1;
        let ops = s.stack.finest();
        let mut opts = SolverOptions::new(4);
        opts.throwaway = 2;
        opts.tol = 1e-14; // unreachable
        opts.max_iter = 3;
        let e0 = random_start(ops, &s.nodal_mg, top, &s.stack.k, 6, 5, 3).unwrap();
        let result =
            pinvit_solve(ops, &s.edge_mg, &s.nodal_mg, top, &s.stack.k, e0, &opts).unwrap();
        assert!(!result.converged);
        assert_eq!(result.iterations, 3);
        assert_eq!(result.eigenvalues.len(), 4);
    }

    #[test]
    fn rejects_bad_options_and_bad_initial_block() {
        let s = setup(4, 0, &Permittivity::Constant(1.0), 0.5, 0.1);
        let ops = s.stack.finest();
        let mut opts = SolverOptions::new(2);
        opts.tol = -1.0;
        let e0 = Block::zeros(ops.level.edge_count(), 3);
        assert!(matches!(
            pinvit_solve(ops, &s.edge_mg, &s.nodal_mg, 0, &s.stack.k, e0, &opts),
            Err(EigenError::InvalidOptions(_))
        ));
        let opts = SolverOptions::new(2);
        let bad = Block::zeros(ops.level.edge_count(), opts.block_size());
        assert!(matches!(
            pinvit_solve(ops, &s.edge_mg, &s.nodal_mg, 0, &s.stack.k, bad, &opts),
            Err(EigenError::InitialBlockNotOrthonormal(_))
        ));
    }
}
