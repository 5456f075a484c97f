//! Experiment runner behind the `bilevel` command: configuration, sweeps
//! with CSV output, bound reports, hypergradient checks and the
//! curse-of-dimensionality check.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod report;
pub mod sweep;

pub use error::{HarnessError, Result};

/// Parse a comma-separated seed list such as `0,1,2`.
pub fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    let seeds = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u64>()
                .map_err(|e| HarnessError::Config(format!("seeds: `{s}` is not a seed ({e})")))
        })
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(HarnessError::Config("seeds: empty list".into()));
    }
    Ok(seeds)
}
