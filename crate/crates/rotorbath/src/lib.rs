//! Simulation of a central nitrogen-vacancy (NV) electron spin decohering in a
//! bath of `13C` nuclear spins inside a physically rotating diamond.
//!
//! The crate builds the coupled electron-nuclear Hamiltonian for small spin
//! clusters, transforms it into the frame co-rotating with the crystal
//! (including the rotational pseudo-field), propagates Hahn-echo sequences
//! with a piecewise-constant time-ordered integrator, and post-processes the
//! resulting signals into coherence times, fringe fits, revival detections
//! and magic-angle-hopping residuals.
//!
//! Entry points:
//! * [`bath`] generates seeded `13C` configurations on the diamond lattice and
//!   partitions them into disjoint clusters.
//! * [`hamiltonian`] assembles lab- and rotating-frame cluster Hamiltonians
//!   and the effective-field / Larmor-frequency diagnostics.
//! * [`echo`] propagates spin-echo sequences (two cross-validating engines)
//!   and averages them over bath ensembles.
//! * [`analysis`] fits stretched exponentials and damped sinusoids, builds
//!   coherence-time maps and detects rotational revivals.
//! * [`config`]/[`scenario`] drive complete runs from a TOML description, as
//!   used by the `rotorbath` binary and the runnable examples.

pub mod analysis;
pub mod bath;
pub mod config;
pub mod constants;
pub mod coupling;
pub mod echo;
mod error;
pub mod hamiltonian;
mod lm;
pub mod output;
pub mod scenario;
pub mod spin;

pub use error::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;

/// Real 3-vector. Units depend on context: positions are nm, fields gauss.
pub type Vector3 = nalgebra::Vector3<f64>;

/// Real 3x3 interaction tensor (hyperfine, nuclear dipolar, effective g).
pub type Tensor3 = nalgebra::Matrix3<f64>;

/// Dense complex matrix used for spin operators, Hamiltonians and propagators.
pub type CMatrix = nalgebra::DMatrix<num_complex::Complex64>;
