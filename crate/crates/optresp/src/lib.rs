//! Transfer operators of interval maps with additive reflected noise:
//! Ulam discretization, spectral data, linear-response formulas, and the
//! closed-form perturbations (of the noise kernel or of the map) that
//! maximally change an observable's expectation or the mixing rate.

pub mod discretization;
pub mod dynamics;
pub mod error;
pub mod optimal;
pub mod quadrature;
pub mod response;
pub mod spectral;

pub use error::{Error, Result};
