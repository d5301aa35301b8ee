//! Standard-library companion to `drcf-core`: run configuration,
//! dataset CSV with unit-cube rescaling, report emission, a
//! rayon-backed replication executor, and the command implementations
//! behind the `drcf` binary.

pub mod commands;
pub mod config;
pub mod data;
pub mod parallel;
pub mod report;
