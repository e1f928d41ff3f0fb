//! Python bindings: single-parameter solves, band scans and the selftest.
//!
//! The module mirrors the CLI surface. Permittivities are given as strings
//! in the configuration syntax (`"constant 1.0"` or
//! `"disc 0.5 0.5 0.18 11.56 1.0"`), results come back as plain lists plus
//! a `BandSurface` class for scans.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use blochbands::eigensolver::{SolverOptions, SubspaceMode};
use blochbands::mesh::{build_hierarchy, BlochParameter, GridHierarchy, UnitCell};
use blochbands::operators::Permittivity;
use blochbands::output::render_bands;
use blochbands::scan::{run_band_scan, solve_single, BlochGrid, ScanOptions};

fn parse_eps(text: &str) -> PyResult<Permittivity> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let bad = || PyValueError::new_err(format!("bad permittivity spec {text:?}"));
    let num = |t: &str| t.parse::<f64>().map_err(|_| bad());
    match tokens.as_slice() {
        ["constant", v] => Ok(Permittivity::Constant(num(v)?)),
        ["disc", cx, cy, r, inside, outside] => Ok(Permittivity::Disc {
            center: (num(cx)?, num(cy)?),
            radius: num(r)?,
            inside: num(inside)?,
            outside: num(outside)?,
        }),
        _ => Err(bad()),
    }
}

fn parse_subspace(text: &str) -> PyResult<SubspaceMode> {
    match text {
        "plain" => Ok(SubspaceMode::Plain),
        "gradient" => Ok(SubspaceMode::Gradient),
        "lobpcg" => Ok(SubspaceMode::Lobpcg),
        other => Err(PyValueError::new_err(format!(
            "subspace must be plain|gradient|lobpcg, got {other:?}"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn build_problem(
    a: f64,
    b: f64,
    n0: usize,
    m0: usize,
    levels: usize,
    eps: &str,
    p: usize,
    q: Option<usize>,
    tol: f64,
    max_iter: usize,
    mu: f64,
    subspace: &str,
    seed: u64,
    threads: usize,
) -> PyResult<(GridHierarchy, Permittivity, ScanOptions)> {
    let cell = UnitCell::new(a, b).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let hierarchy =
        build_hierarchy(cell, n0, m0, levels).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let eps = parse_eps(eps)?;
    let mut solver = SolverOptions::new(p);
    solver.throwaway = q.unwrap_or_else(|| p.div_ceil(2));
    solver.tol = tol;
    solver.max_iter = max_iter;
    solver.mode = parse_subspace(subspace)?;
    let mut opts = ScanOptions::new(solver);
    opts.mu = mu;
    opts.seed = seed;
    opts.threads = threads;
    Ok((hierarchy, eps, opts))
}

/// Eigenvalues and solver statistics over the Bloch grid.
#[pyclass(name = "BandSurface")]
struct PyBandSurface {
    surface: blochbands::scan::BandSurface,
}

#[pymethods]
impl PyBandSurface {
    #[getter]
    fn kappa(&self) -> usize {
        self.surface.kappa
    }

    #[getter]
    fn bands(&self) -> usize {
        self.surface.wanted
    }

    /// Ascending eigenvalues at grid sample `(i, j)`.
    fn eigenvalues(&self, i: usize, j: usize) -> Vec<f64> {
        self.surface.point(i, j).eigenvalues.clone()
    }

    fn iterations(&self, i: usize, j: usize) -> usize {
        self.surface.point(i, j).iterations
    }

    fn converged(&self, i: usize, j: usize) -> bool {
        self.surface.point(i, j).converged
    }

    /// The wave vector of grid sample `(i, j)`.
    fn k_point(&self, i: usize, j: usize) -> (f64, f64) {
        let p = self.surface.point(i, j);
        (p.k1, p.k2)
    }

    /// The whole surface as the CSV text the CLI writes.
    fn to_csv(&self) -> String {
        render_bands(&self.surface)
    }

    fn __repr__(&self) -> String {
        format!(
            "BandSurface(kappa={}, bands={})",
            self.surface.kappa, self.surface.wanted
        )
    }
}

/// Smallest non-zero eigenvalues at one Bloch parameter, solved by nested
/// iteration over the mesh hierarchy.
///
/// Returns `(eigenvalues, iterations, converged, residuals)`.
#[pyfunction]
#[pyo3(signature = (k1, k2, *, a=1.0, b=1.0, n0=8, m0=8, levels=2, eps="constant 1.0",
    p=8, q=None, tol=1e-2, max_iter=100, mu=1.0, subspace="lobpcg", seed=42))]
#[allow(clippy::too_many_arguments)]
fn solve_at(
    k1: f64,
    k2: f64,
    a: f64,
    b: f64,
    n0: usize,
    m0: usize,
    levels: usize,
    eps: &str,
    p: usize,
    q: Option<usize>,
    tol: f64,
    max_iter: usize,
    mu: f64,
    subspace: &str,
    seed: u64,
) -> PyResult<(Vec<f64>, usize, bool, Vec<f64>)> {
    let (hierarchy, eps, opts) = build_problem(
        a, b, n0, m0, levels, eps, p, q, tol, max_iter, mu, subspace, seed, 1,
    )?;
    let cell = hierarchy.cell;
    let k = BlochParameter::new(k1, k2, &cell);
    let result = solve_single(&hierarchy, &eps, &k, &opts)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((
        result.eigenvalues,
        result.iterations,
        result.converged,
        result.residuals,
    ))
}

/// Full band scan over the `kappa x kappa` Bloch grid.
#[pyfunction]
#[pyo3(signature = (kappa, *, a=1.0, b=1.0, n0=8, m0=8, levels=2, eps="constant 1.0",
    p=8, q=None, tol=1e-2, max_iter=100, mu=1.0, subspace="lobpcg", seed=42, threads=0))]
#[allow(clippy::too_many_arguments)]
fn band_scan(
    kappa: usize,
    a: f64,
    b: f64,
    n0: usize,
    m0: usize,
    levels: usize,
    eps: &str,
    p: usize,
    q: Option<usize>,
    tol: f64,
    max_iter: usize,
    mu: f64,
    subspace: &str,
    seed: u64,
    threads: usize,
) -> PyResult<PyBandSurface> {
    let (hierarchy, eps, opts) = build_problem(
        a, b, n0, m0, levels, eps, p, q, tol, max_iter, mu, subspace, seed, threads,
    )?;
    let cell = hierarchy.cell;
    let grid = BlochGrid::new(cell, kappa).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let surface = run_band_scan(&hierarchy, &eps, &grid, &opts)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(PyBandSurface { surface })
}

/// Runs the built-in correctness checks; returns `(name, passed, detail)`
/// per check.
#[pyfunction]
fn selftest() -> Vec<(String, bool, String)> {
    blochbands::selftest::selftest()
        .into_iter()
        .map(|r| (r.name.to_string(), r.passed, r.detail))
        .collect()
}

#[pymodule]
fn blochbands_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBandSurface>()?;
    m.add_function(wrap_pyfunction!(solve_at, m)?)?;
    m.add_function(wrap_pyfunction!(band_scan, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
