//! Space-time panels and fixed-effects count models for place-based
//! intervention evaluation.
//!
//! The crate builds hexagonal grids over a boundary polygon, ingests
//! point-located event records and interval-located intervention records into
//! a balanced cell x day x period panel, constructs spatial and temporal lag
//! columns, fits fixed-effects Poisson and linear regressions with
//! cluster-robust and spatial-HAC covariance, and converts coefficients into
//! effect sizes, optimal dosage, counterfactuals, and cost-benefit summaries.
//! A synthetic data-generating process with known truth closes the loop for
//! estimator validation.

pub mod effects;
pub mod error;
pub mod estimator;
pub mod geo;
pub mod grid;
pub mod ingest;
pub mod panel;
pub mod simkit;
pub mod weights;

pub use error::{Error, Result};
pub use geo::{great_circle_distance, Boundary, GeoPoint};
pub use grid::{build_hex_grid, Cell, HexGrid};
pub use weights::{apply_weights, build_weights, WeightMatrix, WeightScheme};
