//! Quasi-maximum likelihood estimation of dynamic network panels with
//! unit-specific observation windows, with an analytic bias correction and
//! sandwich inference.

pub mod dgp;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod io;
pub mod likelihood;
pub mod montecarlo;
pub mod operators;
pub mod panel;
pub mod rng;
pub mod sparse_lu;
pub mod weights;

pub use error::{Error, Result};
pub use panel::{PanelData, PanelLayout, Theta};
pub use weights::{Adjacency, TimeVaryingNetwork};
