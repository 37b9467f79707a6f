//! Configuration parsing, CSV ingestion, report emission, and command
//! dispatch behind the `tubetest` binary. The binary itself only maps
//! arguments and exit codes onto these pieces.

pub mod config;
pub mod data;
pub mod report;
pub mod run;
