//! Bayesian survival extrapolation with flexible M-spline hazards.
//!
//! Short-term individual-level trial data are combined with aggregate
//! long-term survivor counts and background mortality rates to predict
//! long-term survival and restricted mean survival time, optionally
//! under treatment-effect waning. A data-generating mechanism and a
//! replication harness for evaluating extrapolation accuracy are
//! included.

pub mod background;
pub mod bayes;
pub mod datagen;
pub mod dataio;
pub mod error;
pub mod inference;
pub mod model;
pub mod mspline;
pub mod optim;
pub mod predict;
pub mod quadrature;
pub mod simstudy;

pub use error::{Error, Result};
