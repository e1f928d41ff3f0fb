//! CSV emission of band surfaces.
//!
//! One row per Bloch sample, outer loop over the second grid index, with
//! eigenvalues at 12 significant digits so external plotting tools can
//! reproduce them bit-for-bit at that precision. A companion
//! `<path>.iters.csv` holds the iteration-count map.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::scan::BandSurface;

/// 12 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.11e}")
}

/// Renders the band CSV: header `i,j,k1,k2,iters,converged,lambda_1,...`,
/// rows ordered j-major then i.
pub fn render_bands(surface: &BandSurface) -> String {
    let mut out = String::new();
    out.push_str("i,j,k1,k2,iters,converged");
    for band in 1..=surface.wanted {
        let _ = write!(out, ",lambda_{band}");
    }
    out.push('\n');
    for j in 0..surface.kappa {
        for i in 0..surface.kappa {
            let point = surface.point(i, j);
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                point.i,
                point.j,
                format_float(point.k1),
                format_float(point.k2),
                point.iterations,
                u8::from(point.converged),
            );
            for lambda in &point.eigenvalues {
                let _ = write!(out, ",{}", format_float(*lambda));
            }
            out.push('\n');
        }
    }
    out
}

fn render_iterations(surface: &BandSurface) -> String {
    let mut out = String::from("i,j,iters\n");
    for j in 0..surface.kappa {
        for i in 0..surface.kappa {
            let point = surface.point(i, j);
            let _ = writeln!(out, "{},{},{}", point.i, point.j, point.iterations);
        }
    }
    out
}

/// Writes the band CSV to `path` and the iteration map to
/// `<path>.iters.csv`.
pub fn emit_bands(surface: &BandSurface, path: &Path) -> io::Result<()> {
    fs::write(path, render_bands(surface))?;
    let mut iters_path = path.as_os_str().to_owned();
    iters_path.push(".iters.csv");
    fs::write(Path::new(&iters_path), render_iterations(surface))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::{BandSurface, PointResult};

    fn toy_surface(kappa: usize, wanted: usize) -> BandSurface {
        let mut points = Vec::new();
        for j in 0..kappa {
            for i in 0..kappa {
                points.push(PointResult {
                    i,
                    j,
                    k1: -1.0 + i as f64,
                    k2: -1.0 + j as f64,
                    eigenvalues: (1..=wanted)
                        .map(|b| b as f64 * std::f64::consts::PI + i as f64)
                        .collect(),
                    iterations: i + j,
                    converged: true,
                    residuals: vec![1e-3; wanted],
                });
            }
        }
        BandSurface::from_points(kappa, wanted, points)
    }

    #[test]
    fn header_and_row_counts() {
        let surface = toy_surface(2, 1);
        let text = render_bands(&surface);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "i,j,k1,k2,iters,converged,lambda_1");
        // j-major ordering: (0,0), (1,0), (0,1), (1,1).
        assert!(lines[1].starts_with("0,0,"));
        assert!(lines[2].starts_with("1,0,"));
        assert!(lines[3].starts_with("0,1,"));
    }

    #[test]
    fn eigenvalues_round_trip_at_twelve_digits() {
        let surface = toy_surface(2, 3);
        let text = render_bands(&surface);
        for (line_no, line) in text.lines().skip(1).enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            let i = line_no % 2;
            let j = line_no / 2;
            let point = surface.point(i, j);
            for (band, &lambda) in point.eigenvalues.iter().enumerate() {
                let printed = fields[6 + band];
                let parsed: f64 = printed.parse().unwrap();
                assert_eq!(format_float(parsed), printed);
                assert!((parsed - lambda).abs() <= 1e-11 * lambda.abs());
            }
        }
    }

    #[test]
    fn full_size_grid_emits_one_row_per_sample() {
        // A 30 x 30 scan produces 900 data rows.
        let surface = toy_surface(30, 16);
        let text = render_bands(&surface);
        assert_eq!(text.lines().count(), 901);
    }

    #[test]
    fn writes_band_and_iteration_files() {
        let surface = toy_surface(3, 2);
        let dir = std::env::temp_dir().join("blochbands_output_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bands.csv");
        emit_bands(&surface, &path).unwrap();
        let bands = std::fs::read_to_string(&path).unwrap();
        assert_eq!(bands.lines().count(), 10);
        let iters = std::fs::read_to_string(dir.join("bands.csv.iters.csv")).unwrap();
        assert_eq!(iters.lines().next().unwrap(), "i,j,iters");
        assert_eq!(iters.lines().count(), 10);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let surface = toy_surface(2, 1);
        assert!(emit_bands(&surface, Path::new("/nonexistent-dir/bands.csv")).is_err());
    }
}
