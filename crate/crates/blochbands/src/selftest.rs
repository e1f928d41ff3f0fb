//! Built-in release gate: fast versions of the core correctness checks.
//!
//! Runs on grids no larger than 16x16 in a few seconds: the null-space
//! identity of the lifting, agreement of the block solver with the dense
//! oracle, the known spectrum of the homogeneous medium, and the
//! orthonormalization contract.

use num_complex::Complex64;

use crate::eigensolver::{pinvit_solve, random_start, SolverOptions};
use crate::linalg::{
    dense_generalized_eig, generalized_householder_qr, orthonormality_defect, Block, DenseMatrix,
};
use crate::mesh::{build_hierarchy, BlochParameter, UnitCell};
use crate::operators::Permittivity;
use crate::rng::SplitMix64;
use crate::scan::SolveContext;
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Largest entry of `A * L` relative to the largest entry of `A`; the
/// discrete gradients span the curl null space, so this must vanish.
pub fn lifting_annihilation_defect(stiffness: &CsrMatrix, lifting: &CsrMatrix) -> f64 {
    stiffness.matmul(lifting).max_abs() / stiffness.max_abs().max(1e-300)
}

fn check_null_space() -> CheckReport {
    let cell = UnitCell::square();
    let hierarchy = build_hierarchy(cell, 8, 8, 0).unwrap();
    let mut rng = SplitMix64::new(1);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let k = BlochParameter::new(6.0 * rng.next_signed(), 6.0 * rng.next_signed(), &cell);
        let eps =
            crate::operators::sample_permittivity(hierarchy.finest(), &Permittivity::Constant(1.0))
                .unwrap();
        let (a, _) =
            crate::operators::assemble_edge_operators(hierarchy.finest(), &eps, &k).unwrap();
        let lifting = crate::operators::assemble_lifting(hierarchy.finest(), &k);
        worst = worst.max(lifting_annihilation_defect(&a, &lifting));
    }
    CheckReport {
        name: "null-space: stiffness annihilates lifting",
        passed: worst <= 1e-12,
        detail: format!("max |A L| / |A| = {worst:.3e} (limit 1e-12)"),
    }
}

fn check_oracle_equivalence() -> CheckReport {
    let cell = UnitCell::square();
    let hierarchy = build_hierarchy(cell, 4, 4, 1).unwrap();
    let eps = Permittivity::Disc {
        center: (0.5, 0.5),
        radius: 1.0 / 3.0,
        inside: 100.0,
        outside: 1.0,
    };
    let eps_cells = crate::operators::sample_permittivity(hierarchy.finest(), &eps).unwrap();
    let k = BlochParameter::new(1.05, -0.6, &cell);
    let ctx = match SolveContext::assemble(&hierarchy, &eps_cells, &k, 1.0) {
        Ok(ctx) => ctx,
        Err(e) => {
            return CheckReport {
                name: "oracle equivalence on an 8x8 grid",
                passed: false,
                detail: format!("setup failed: {e}"),
            }
        }
    };
    let top = ctx.top_level();
    let ops = &ctx.stack.levels[top];
    let (oracle, _) = dense_generalized_eig(
        &DenseMatrix::from_csr(&ops.stiffness),
        &DenseMatrix::from_csr(&ops.mass),
    )
    .unwrap();
    let scale = oracle.last().copied().unwrap_or(1.0);
    let nonzero: Vec<f64> = oracle
        .iter()
        .copied()
        .filter(|&v| v > 1e-8 * scale)
        .collect();

    let mut opts = SolverOptions::new(4);
    opts.throwaway = 2;
    opts.tol = 1e-8;
    opts.max_iter = 300;
    let e0 = random_start(ops, &ctx.nodal_mg, top, &k, opts.block_size(), 42, 3).unwrap();
    let result = match pinvit_solve(ops, &ctx.edge_mg, &ctx.nodal_mg, top, &k, e0, &opts) {
        Ok(r) => r,
        Err(e) => {
            return CheckReport {
                name: "oracle equivalence on an 8x8 grid",
                passed: false,
                detail: format!("solver failed: {e}"),
            }
        }
    };
    let mut worst = 0.0f64;
    for (got, want) in result.eigenvalues.iter().zip(&nonzero) {
        worst = worst.max((got - want).abs() / want.abs());
    }
    CheckReport {
        name: "oracle equivalence on an 8x8 grid",
        passed: result.converged && worst <= 1e-6,
        detail: format!(
            "max relative eigenvalue error {worst:.3e} (limit 1e-6), converged = {}",
            result.converged
        ),
    }
}

fn check_analytic_spectrum() -> CheckReport {
    // Homogeneous medium at the Brillouin-zone corner: the four smallest
    // eigenvalues approximate 2 pi^2.
    let cell = UnitCell::square();
    let hierarchy = build_hierarchy(cell, 8, 8, 1).unwrap();
    let eps_cells =
        crate::operators::sample_permittivity(hierarchy.finest(), &Permittivity::Constant(1.0))
            .unwrap();
    let k = BlochParameter::new(std::f64::consts::PI, std::f64::consts::PI, &cell);
    let ctx = SolveContext::assemble(&hierarchy, &eps_cells, &k, 1.0).unwrap();
    let top = ctx.top_level();
    let ops = &ctx.stack.levels[top];
    let mut opts = SolverOptions::new(4);
    opts.throwaway = 2;
    opts.tol = 1e-6;
    opts.max_iter = 200;
    let e0 = random_start(ops, &ctx.nodal_mg, top, &k, opts.block_size(), 7, 3).unwrap();
    let result = pinvit_solve(ops, &ctx.edge_mg, &ctx.nodal_mg, top, &k, e0, &opts).unwrap();
    let target = 2.0 * std::f64::consts::PI * std::f64::consts::PI;
    let mut worst = 0.0f64;
    for v in &result.eigenvalues {
        worst = worst.max((v - target).abs() / target);
    }
    CheckReport {
        name: "analytic spectrum of the homogeneous medium",
        passed: result.converged && worst <= 0.05,
        detail: format!(
            "four eigenvalues near 2 pi^2, max relative deviation {worst:.3e} (limit 5e-2)"
        ),
    }
}

fn check_orthonormalization() -> CheckReport {
    let cell = UnitCell::square();
    let hierarchy = build_hierarchy(cell, 8, 8, 0).unwrap();
    let eps_cells =
        crate::operators::sample_permittivity(hierarchy.finest(), &Permittivity::Constant(2.0))
            .unwrap();
    let k = BlochParameter::new(0.4, 1.7, &cell);
    let (_, mass) =
        crate::operators::assemble_edge_operators(hierarchy.finest(), &eps_cells, &k).unwrap();
    let dim = hierarchy.finest().edge_count();
    let mut rng = SplitMix64::new(9);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let ncols = 2 + trial % 5;
        let mut cand = Block::new(dim);
        for c in 0..ncols {
            if c > 0 && trial % 4 == 0 {
                // Inject rank deficiency.
                cand.push(cand.col(c - 1).to_vec());
            } else {
                cand.push(rng.complex_vector(dim));
            }
        }
        let p = crate::linalg::default_p_basis(&mass, ncols).unwrap();
        let result = generalized_householder_qr(&mass, &[&cand], &p).unwrap();
        worst = worst.max(orthonormality_defect(&mass, &result.basis));
        // Range containment via the least-squares reconstruction.
        let coeffs = crate::linalg::block_gram(&result.basis, &cand.apply(&mass));
        let rec = result.basis.mul_dense(&coeffs);
        for c in 0..ncols {
            let mut resid = cand.col(c).to_vec();
            crate::linalg::axpy(Complex64::new(-1.0, 0.0), rec.col(c), &mut resid);
            let rel = crate::linalg::norm2(&resid) / crate::linalg::norm2(cand.col(c)).max(1e-300);
            worst = worst.max(rel * 1e-2); // containment limit is 1e-8, scale to shared budget
        }
    }
    CheckReport {
        name: "generalized Householder orthonormalization",
        passed: worst <= 1e-10,
        detail: format!("worst defect {worst:.3e} (limit 1e-10)"),
    }
}

/// Runs all checks and returns their reports; the CLI prints one line per
/// check and exits nonzero when any fail.
pub fn selftest() -> Vec<CheckReport> {
    vec![
        check_null_space(),
        check_oracle_equivalence(),
        check_analytic_spectrum(),
        check_orthonormalization(),
    ]
}
