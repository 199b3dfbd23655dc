//! Configuration, file formats, parallel execution and the check battery
//! for the off-policy TD laboratory. The numerics live in `gtdlab-core`;
//! this crate only binds them to JSON configs, CSV/JSON outputs and the
//! command line.

pub mod checks;
pub mod config;
pub mod output;
pub mod runner;
