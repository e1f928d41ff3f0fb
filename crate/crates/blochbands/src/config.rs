//! Plain-text run configuration for the command line front end.
//!
//! The format is one `key = value` pair per line with `#` comments. Every
//! key except `mode` has a documented default; `mode` selects between a
//! full band scan, a single-parameter solve and the built-in selftest.

use std::fmt;

use thiserror::Error;

use crate::eigensolver::SubspaceMode;
use crate::operators::Permittivity;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: malformed value for {key}: {detail}")]
    BadValue {
        line: usize,
        key: String,
        detail: String,
    },
    #[error("line {line}: {key} violates {invariant}")]
    Invariant {
        line: usize,
        key: String,
        invariant: String,
    },
    #[error("mode is required (scan, single or selftest)")]
    ModeMissing,
    #[error("line {line}: expected key = value, got {text:?}")]
    Syntax { line: usize, text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Scan,
    Single,
    Selftest,
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunMode::Scan => write!(f, "scan"),
            RunMode::Single => write!(f, "single"),
            RunMode::Selftest => write!(f, "selftest"),
        }
    }
}

/// Permittivity description as written in the configuration; a `file` spec
/// is loaded lazily by the caller so parsing stays pure.
#[derive(Debug, Clone, PartialEq)]
pub enum EpsSpec {
    Inline(Permittivity),
    File(String),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub a: f64,
    pub b: f64,
    pub n0: usize,
    pub m0: usize,
    /// Number of bisection refinements; the hierarchy has `levels + 1` grids.
    pub levels: usize,
    pub eps: EpsSpec,
    pub kappa: usize,
    pub wanted: usize,
    pub throwaway: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub mu: f64,
    pub precond_cycles: usize,
    pub projection_cycles: usize,
    pub subspace: SubspaceMode,
    pub out: String,
    pub mode: RunMode,
    pub k1: f64,
    pub k2: f64,
    pub threads: usize,
    pub seed: u64,
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let subspace = match self.subspace {
            SubspaceMode::Plain => "plain",
            SubspaceMode::Gradient => "gradient",
            SubspaceMode::Lobpcg => "lobpcg",
        };
        let eps = match &self.eps {
            EpsSpec::Inline(Permittivity::Constant(v)) => format!("constant {v}"),
            EpsSpec::Inline(Permittivity::Disc {
                center,
                radius,
                inside,
                outside,
            }) => format!(
                "disc {} {} {} {} {}",
                center.0, center.1, radius, inside, outside
            ),
            EpsSpec::Inline(Permittivity::Raster { n, m, .. }) => {
                format!("raster {n}x{m} (inline)")
            }
            EpsSpec::File(path) => format!("file {path}"),
        };
        writeln!(f, "mode = {}", self.mode)?;
        writeln!(f, "a = {}", self.a)?;
        writeln!(f, "b = {}", self.b)?;
        writeln!(f, "n0 = {}", self.n0)?;
        writeln!(f, "m0 = {}", self.m0)?;
        writeln!(f, "levels = {}", self.levels)?;
        writeln!(f, "eps = {eps}")?;
        writeln!(f, "kappa = {}", self.kappa)?;
        writeln!(f, "p = {}", self.wanted)?;
        writeln!(f, "q = {}", self.throwaway)?;
        writeln!(f, "tol = {:e}", self.tol)?;
        writeln!(f, "max_iter = {}", self.max_iter)?;
        writeln!(f, "mu = {}", self.mu)?;
        writeln!(f, "precond_cycles = {}", self.precond_cycles)?;
        writeln!(f, "projection_cycles = {}", self.projection_cycles)?;
        writeln!(f, "subspace = {subspace}")?;
        writeln!(f, "k1 = {}", self.k1)?;
        writeln!(f, "k2 = {}", self.k2)?;
        writeln!(f, "threads = {}", self.threads)?;
        writeln!(f, "seed = {}", self.seed)?;
        write!(f, "out = {}", self.out)
    }
}

fn parse_number<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        line,
        key: key.to_string(),
        detail: e.to_string(),
    })
}

fn invariant(line: usize, key: &str, what: &str) -> ConfigError {
    ConfigError::Invariant {
        line,
        key: key.to_string(),
        invariant: what.to_string(),
    }
}

/// Parses a configuration text into a fully validated `RunConfig`.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig {
        a: 1.0,
        b: 1.0,
        n0: 16,
        m0: 16,
        levels: 2,
        eps: EpsSpec::Inline(Permittivity::Constant(1.0)),
        kappa: 30,
        wanted: 16,
        throwaway: 0, // resolved below unless given
        tol: 1e-2,
        max_iter: 100,
        mu: 1.0,
        precond_cycles: 2,
        projection_cycles: 3,
        subspace: SubspaceMode::Lobpcg,
        out: "bands.csv".to_string(),
        mode: RunMode::Scan, // placeholder; mode must be given explicitly
        k1: 0.0,
        k2: 0.0,
        threads: 0,
        seed: 42,
    };
    let mut mode_given = false;
    let mut q_given = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                text: content.to_string(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "a" => {
                cfg.a = parse_number(line, key, value)?;
                if !(cfg.a > 0.0) {
                    return Err(invariant(line, key, "a > 0"));
                }
            }
            "b" => {
                cfg.b = parse_number(line, key, value)?;
                if !(cfg.b > 0.0) {
                    return Err(invariant(line, key, "b > 0"));
                }
            }
            "n0" => {
                cfg.n0 = parse_number(line, key, value)?;
                if cfg.n0 < 2 {
                    return Err(invariant(line, key, "n0 >= 2"));
                }
            }
            "m0" => {
                cfg.m0 = parse_number(line, key, value)?;
                if cfg.m0 < 2 {
                    return Err(invariant(line, key, "m0 >= 2"));
                }
            }
            "levels" => cfg.levels = parse_number(line, key, value)?,
            "eps" => cfg.eps = parse_eps(line, value)?,
            "kappa" => {
                cfg.kappa = parse_number(line, key, value)?;
                if cfg.kappa < 2 {
                    return Err(invariant(line, key, "kappa >= 2"));
                }
            }
            "p" => {
                cfg.wanted = parse_number(line, key, value)?;
                if cfg.wanted == 0 {
                    return Err(invariant(line, key, "p >= 1"));
                }
            }
            "q" => {
                cfg.throwaway = parse_number(line, key, value)?;
                q_given = true;
            }
            "tol" => {
                cfg.tol = parse_number(line, key, value)?;
                if !(cfg.tol > 0.0) {
                    return Err(invariant(line, key, "tol > 0"));
                }
            }
            "max_iter" => {
                cfg.max_iter = parse_number(line, key, value)?;
                if cfg.max_iter == 0 {
                    return Err(invariant(line, key, "max_iter >= 1"));
                }
            }
            "mu" => {
                cfg.mu = parse_number(line, key, value)?;
                if !(cfg.mu > 0.0) {
                    return Err(invariant(line, key, "mu > 0"));
                }
            }
            "precond_cycles" => {
                cfg.precond_cycles = parse_number(line, key, value)?;
                if cfg.precond_cycles == 0 {
                    return Err(invariant(line, key, "precond_cycles >= 1"));
                }
            }
            "projection_cycles" => {
                cfg.projection_cycles = parse_number(line, key, value)?;
                if cfg.projection_cycles == 0 {
                    return Err(invariant(line, key, "projection_cycles >= 1"));
                }
            }
            "subspace" => {
                cfg.subspace = match value {
                    "plain" => SubspaceMode::Plain,
                    "gradient" => SubspaceMode::Gradient,
                    "lobpcg" => SubspaceMode::Lobpcg,
                    other => {
                        return Err(ConfigError::BadValue {
                            line,
                            key: key.to_string(),
                            detail: format!("expected plain|gradient|lobpcg, got {other:?}"),
                        })
                    }
                };
            }
            "out" => cfg.out = value.to_string(),
            "mode" => {
                cfg.mode = match value {
                    "scan" => RunMode::Scan,
                    "single" => RunMode::Single,
                    "selftest" => RunMode::Selftest,
                    other => {
                        return Err(ConfigError::BadValue {
                            line,
                            key: key.to_string(),
                            detail: format!("expected scan|single|selftest, got {other:?}"),
                        })
                    }
                };
                mode_given = true;
            }
            "k1" => cfg.k1 = parse_number(line, key, value)?,
            "k2" => cfg.k2 = parse_number(line, key, value)?,
            "threads" => cfg.threads = parse_number(line, key, value)?,
            "seed" => cfg.seed = parse_number(line, key, value)?,
            other => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: other.to_string(),
                })
            }
        }
    }

    if !mode_given {
        return Err(ConfigError::ModeMissing);
    }
    if !q_given {
        cfg.throwaway = cfg.wanted.div_ceil(2);
    }
    Ok(cfg)
}

fn parse_eps(line: usize, value: &str) -> Result<EpsSpec, ConfigError> {
    let bad = |detail: String| ConfigError::BadValue {
        line,
        key: "eps".to_string(),
        detail,
    };
    let mut tokens = value.split_whitespace();
    let kind = tokens.next().ok_or_else(|| bad("empty value".into()))?;
    let mut reals = |n: usize| -> Result<Vec<f64>, ConfigError> {
        let vals: Result<Vec<f64>, _> = tokens
            .by_ref()
            .take(n)
            .map(|t| t.parse::<f64>().map_err(|e| bad(format!("{t:?}: {e}"))))
            .collect();
        let vals = vals?;
        if vals.len() != n {
            return Err(bad(format!("expected {n} numbers after {kind:?}")));
        }
        Ok(vals)
    };
    let spec = match kind {
        "constant" => {
            let v = reals(1)?;
            if v[0] <= 0.0 {
                return Err(invariant(line, "eps", "permittivity > 0"));
            }
            EpsSpec::Inline(Permittivity::Constant(v[0]))
        }
        "disc" => {
            let v = reals(5)?;
            if v[3] <= 0.0 || v[4] <= 0.0 {
                return Err(invariant(line, "eps", "permittivity > 0"));
            }
            if v[2] < 0.0 {
                return Err(invariant(line, "eps", "radius >= 0"));
            }
            EpsSpec::Inline(Permittivity::Disc {
                center: (v[0], v[1]),
                radius: v[2],
                inside: v[3],
                outside: v[4],
            })
        }
        "file" => {
            let path = tokens
                .next()
                .ok_or_else(|| bad("expected a path after \"file\"".into()))?;
            EpsSpec::File(path.to_string())
        }
        other => return Err(bad(format!("expected constant|disc|file, got {other:?}"))),
    };
    if tokens.next().is_some() {
        return Err(bad("trailing tokens".into()));
    }
    Ok(spec)
}
