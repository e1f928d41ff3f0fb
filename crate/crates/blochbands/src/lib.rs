//! Photonic band structures of 2D periodic dielectric media.
//!
//! The library discretizes the time-harmonic Maxwell curl-curl eigenvalue
//! problem on a rectangular unit cell with Bloch-periodic bilinear edge
//! elements and computes the smallest non-zero eigenvalues with a
//! multigrid-preconditioned block inverse iteration. Gradients of nodal
//! potentials span the null space of the curl operator; they are removed
//! from the iteration through a lifting map and a secondary nodal multigrid.
//! Band surfaces over a grid of Bloch parameters are computed with warm
//! starts obtained by minimizing the Rayleigh quotient over the bases of
//! neighboring parameters.
//!
//! The main entry points are [`scan::run_band_scan`] for a full band
//! surface and [`eigensolver::pinvit_solve`] for a single Bloch parameter.
//! The `blochbands` binary drives both from a plain-text configuration
//! file, see the crate README.

pub mod config;
pub mod eigensolver;
pub mod linalg;
pub mod mesh;
pub mod multigrid;
pub mod operators;
pub mod output;
pub mod rng;
pub mod scan;
pub mod selftest;
pub mod sparse;

pub use mesh::{BlochParameter, GridHierarchy, GridLevel, UnitCell};
pub use operators::Permittivity;
