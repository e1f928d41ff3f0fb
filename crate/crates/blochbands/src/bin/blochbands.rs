//! Command line front end: band scans, single-parameter solves and the
//! built-in selftest, driven by a plain-text configuration file.
//!
//! Exit codes: 0 success, 1 configuration error, 2 non-convergence in
//! single mode, 3 selftest failure.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use blochbands::config::{parse_config, EpsSpec, RunConfig, RunMode};
use blochbands::eigensolver::SolverOptions;
use blochbands::mesh::{build_hierarchy, BlochParameter, UnitCell};
use blochbands::operators::Permittivity;
use blochbands::output::{emit_bands, format_float};
use blochbands::scan::{run_band_scan, solve_single, BlochGrid, ScanOptions};
use blochbands::selftest::selftest;

const USAGE: &str = "\
usage: blochbands <config> [--mode scan|single|selftest] [--out PATH]

The configuration file holds one `key = value` pair per line with `#`
comments; see the project README for the key list and defaults. The
BLOCHBANDS_THREADS environment variable overrides the `threads` key.";

struct CliArgs {
    config_path: String,
    mode_override: Option<RunMode>,
    out_override: Option<String>,
}

fn parse_args(args: &[String]) -> Result<CliArgs, String> {
    let mut config_path = None;
    let mut mode_override = None;
    let mut out_override = None;
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        match arg.as_str() {
            "--mode" => {
                let value = iter.next().ok_or("--mode needs a value")?;
                mode_override = Some(match value.as_str() {
                    "scan" => RunMode::Scan,
                    "single" => RunMode::Single,
                    "selftest" => RunMode::Selftest,
                    other => return Err(format!("unknown mode {other:?}")),
                });
            }
            "--out" => {
                out_override = Some(iter.next().ok_or("--out needs a value")?.clone());
            }
            "--help" | "-h" => return Err(String::new()),
            other if other.starts_with('-') => {
                return Err(format!("unknown flag {other:?}"));
            }
            other => {
                if config_path.replace(other.to_string()).is_some() {
                    return Err("more than one config path given".to_string());
                }
            }
        }
    }
    Ok(CliArgs {
        config_path: config_path.ok_or("missing config path")?,
        mode_override,
        out_override,
    })
}

fn resolve_permittivity(cfg: &RunConfig) -> Result<Permittivity, String> {
    match &cfg.eps {
        EpsSpec::Inline(eps) => Ok(eps.clone()),
        EpsSpec::File(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read permittivity raster {path:?}: {e}"))?;
            Permittivity::raster_from_str(&text).map_err(|e| e.to_string())
        }
    }
}

fn solver_options(cfg: &RunConfig) -> SolverOptions {
    let mut opts = SolverOptions::new(cfg.wanted);
    opts.throwaway = cfg.throwaway;
    opts.mode = cfg.subspace;
    opts.tol = cfg.tol;
    opts.max_iter = cfg.max_iter;
    opts.precond_cycles = cfg.precond_cycles;
    opts.projection_cycles = cfg.projection_cycles;
    opts
}

fn run(cfg: &RunConfig) -> Result<u8, String> {
    let cell = UnitCell::new(cfg.a, cfg.b).map_err(|e| e.to_string())?;
    let hierarchy = build_hierarchy(cell, cfg.n0, cfg.m0, cfg.levels).map_err(|e| e.to_string())?;
    let eps = resolve_permittivity(cfg)?;
    let mut scan_opts = ScanOptions::new(solver_options(cfg));
    scan_opts.mu = cfg.mu;
    scan_opts.seed = cfg.seed;
    scan_opts.threads = cfg.threads;

    match cfg.mode {
        RunMode::Scan => {
            let grid = BlochGrid::new(cell, cfg.kappa).map_err(|e| e.to_string())?;
            let started = Instant::now();
            let surface =
                run_band_scan(&hierarchy, &eps, &grid, &scan_opts).map_err(|e| e.to_string())?;
            let elapsed = started.elapsed().as_secs_f64();
            emit_bands(&surface, Path::new(&cfg.out))
                .map_err(|e| format!("cannot write {}: {e}", cfg.out))?;
            let converged = surface.points().iter().filter(|p| p.converged).count();
            let mut iters: Vec<usize> = surface.points().iter().map(|p| p.iterations).collect();
            iters.sort_unstable();
            println!(
                "scan: {} points, {} converged, median iterations {}, {:.1} s",
                surface.points().len(),
                converged,
                iters[iters.len() / 2],
                elapsed
            );
            println!("wrote {} and {}.iters.csv", cfg.out, cfg.out);
            Ok(0)
        }
        RunMode::Single => {
            let k = BlochParameter::new(cfg.k1, cfg.k2, &cell);
            let result =
                solve_single(&hierarchy, &eps, &k, &scan_opts).map_err(|e| e.to_string())?;
            let mut text = String::from("band,lambda,residual\n");
            for (band, (lambda, residual)) in
                result.eigenvalues.iter().zip(&result.residuals).enumerate()
            {
                text.push_str(&format!(
                    "{},{},{}\n",
                    band + 1,
                    format_float(*lambda),
                    format_float(*residual)
                ));
            }
            std::fs::write(&cfg.out, text).map_err(|e| format!("cannot write {}: {e}", cfg.out))?;
            for (band, lambda) in result.eigenvalues.iter().enumerate() {
                println!("lambda_{} = {}", band + 1, format_float(*lambda));
            }
            println!(
                "single solve at k = ({}, {}): {} iterations, converged = {}",
                cfg.k1, cfg.k2, result.iterations, result.converged
            );
            println!("wrote {}", cfg.out);
            Ok(if result.converged { 0 } else { 2 })
        }
        RunMode::Selftest => {
            let mut failed = false;
            for report in selftest() {
                let status = if report.passed { "PASS" } else { "FAIL" };
                println!("[{status}] {} - {}", report.name, report.detail);
                failed |= !report.passed;
            }
            Ok(if failed { 3 } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse_args(&args) {
        Ok(cli) => cli,
        Err(message) => {
            if !message.is_empty() {
                eprintln!("error: {message}");
            }
            eprintln!("{USAGE}");
            return ExitCode::from(1);
        }
    };
    let text = match std::fs::read_to_string(&cli.config_path) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", cli.config_path);
            return ExitCode::from(1);
        }
    };
    let mut cfg = match parse_config(&text) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(mode) = cli.mode_override {
        cfg.mode = mode;
    }
    if let Some(out) = cli.out_override {
        cfg.out = out;
    }
    if let Ok(value) = std::env::var("BLOCHBANDS_THREADS") {
        match value.parse::<usize>() {
            Ok(threads) => cfg.threads = threads,
            Err(e) => {
                eprintln!("error: BLOCHBANDS_THREADS={value:?}: {e}");
                return ExitCode::from(1);
            }
        }
    }

    // Echo the fully resolved configuration before computing.
    println!("# resolved configuration");
    for line in cfg.to_string().lines() {
        println!("# {line}");
    }

    match run(&cfg) {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}
