//! Run configurations and class-prior files.

use std::path::Path;

use hyperalign_core::model::RunConfig;
use hyperalign_core::supervision::NUM_CATEGORIES;

use crate::error::{Error, Result};
use crate::fsio;

/// Parses a flat JSON object of RunConfig fields. Missing fields take the
/// paper-scale defaults; unknown fields are rejected.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&fsio::read_string(path)?, path)
}

pub fn config_json(config: &RunConfig) -> String {
    let mut s = serde_json::to_string_pretty(config).expect("config serializes");
    s.push('\n');
    s
}

/// A priors file is a JSON array of one Positive rate per category.
pub fn parse_priors(text: &str, path: &Path) -> Result<[f64; NUM_CATEGORIES]> {
    let values: Vec<f64> = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
    values.as_slice().try_into().map_err(|_| {
        Error::format(
            path,
            format!("expected {NUM_CATEGORIES} priors, found {}", values.len()),
        )
    })
}

pub fn load_priors(path: &Path) -> Result<[f64; NUM_CATEGORIES]> {
    parse_priors(&fsio::read_string(path)?, path)
}
