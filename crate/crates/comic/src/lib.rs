//! Corner detection on maximally stable iso-intensity curve segments,
//! curve-side-separated SSD matching, and multi-frame resilience
//! evaluation with a synthetic changing-background benchmark.

pub mod cli;
pub mod cornerness;
pub mod detector;
pub mod evalbench;
pub mod isocurve;
pub mod matcher;
pub mod raster;
