//! File formats, configuration and commands for the `sdemem` binary.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod kde;
pub mod report;
pub mod trace_io;

use std::path::Path;

pub use error::{AppError, Result};

/// Shortest decimal that parses back to `x`; exponent form outside
/// `[1e-5, 1e16)`.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || !x.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| AppError::io(path, e))
}
