//! Spectral simulator for a curvature flow of conformally balanced Hermitian
//! metrics on flat complex tori, together with its scalar Monge-Ampere
//! reduction and a battery of exact pointwise identities used as runtime
//! self-checks.
//!
//! Layers, bottom up:
//! - [`linalg`]: dense complex n x n helpers (n <= 6).
//! - [`forms`]: pointwise (p,q)-form components, wedge, trace, Hodge star on
//!   (n-1,n-1)-forms, torsion contractions.
//! - [`torus`]: periodic grids, FFT derivatives, integration, snapshots.
//! - [`geometry`]: torsion and Chern curvature of a metric field.
//! - [`flow`]: the scalar parabolic flow, its stationary-point solver, and
//!   monitors.
//! - [`anomaly`]: the lifted metric flow, dilaton functional, diagnostics.
//! - [`bruteforce`]: slow reference implementations used as oracles.
//! - [`driver`]: experiment configs, CSV/snapshot output, CLI entry points.

pub mod anomaly;
pub mod bruteforce;
pub mod driver;
pub mod error;
pub mod flow;
pub mod forms;
pub mod geometry;
pub mod linalg;
pub mod torus;

pub use error::{Error, Result};
