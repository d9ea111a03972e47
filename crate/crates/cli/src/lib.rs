//! Experiment pipeline behind the `icgp` binary: flat-file configuration,
//! manifest-driven stages (collect, train, infer, eval), and the CSV/SVG
//! outputs of the equilibrium-gap comparisons.

pub mod config;
pub mod pipeline;
