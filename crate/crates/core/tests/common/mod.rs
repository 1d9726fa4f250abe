#![allow(dead_code)]

use std::path::PathBuf;

use fspm_core::engine::SimConfig;
use fspm_core::ingest::{MeasurementPaths, MeasurementSet};
use fspm_core::synthetic;
use fspm_core::HiddenParams;

pub const FIXTURE_SEED: u64 = 2024;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture(name: &str) -> PathBuf {
    fixture_dir().join(name)
}

pub fn fixture_paths() -> MeasurementPaths {
    MeasurementPaths {
        axes: fixture("axes.csv"),
        gus: fixture("gus.csv"),
        internodes: fixture("internodes.csv"),
        leaves: fixture("leaves.csv"),
    }
}

pub fn reference_hidden() -> Vec<HiddenParams> {
    (0..4).map(synthetic::reference_hidden).collect()
}

/// The campaign the committed CSV fixtures were generated from.
pub fn fixture_campaign() -> MeasurementSet {
    synthetic::reference_measurements(
        &synthetic::fixture_direct_params(),
        &reference_hidden(),
        &SimConfig::default(),
        FIXTURE_SEED,
    )
}

pub fn regenerate() -> bool {
    std::env::var_os("FSPM_REGEN_GOLDEN").is_some()
}
