//! Geometric GENERIC (metriplectic) systems on coordinate patches.
//!
//! A system bundles a degenerate Poisson structure `J`, a degenerate
//! co-metric `K`, a reference volume density `m dx`, and energy/entropy
//! functions `E`, `S` subject to the non-interaction conditions
//! `J dS = 0`, `K dE = 0` and the unimodularity condition
//! `div(m J) = 0`. The crate verifies those axioms numerically, simulates
//! the associated deterministic and stochastic (Ito and Stratonovich)
//! dynamics with a counter-based reproducible noise contract, and
//! certifies the structural invariants: almost-sure energy conservation,
//! stationarity of the measures `h(E) e^S m dx`, coordinate invariance of
//! the generator, and the zero-noise limit.

pub mod dual;
pub mod error;
pub mod expr;
pub mod fields;
pub mod fpgrid;
pub mod frames;
pub mod generator;
pub mod integrate;
pub mod quad;
pub mod rng;
pub mod system;
pub mod transform;
pub mod verifier;

pub use error::{Error, Result};
pub use fields::{
    divergence_nu, jet_matrix, jet_scalar, CoordinatePatch, MatrixField, Point, ScalarField,
    SymmetryTag, VectorField, VolumeDensity,
};
pub use system::{CatalogId, GenericSystem, SystemSpec};
