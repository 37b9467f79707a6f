//! Score-process tests for a perturbation component in mixture models.
//!
//! The library builds the normalized score process of the mixing
//! proportion over a compact parameter domain, computes the geometry
//! constants of its correlation manifold, converts them to tail
//! probabilities and critical values through the volume-of-tube
//! expansion, and validates every analytic step against Monte Carlo
//! oracles for the supremum of the limiting Gaussian field.

pub mod covariance;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod quad;
pub mod score;

pub use error::{Error, Result};
