//! Calibration toolkit for a deterministic source-sink tree growth model.
//!
//! The crate covers the whole desk workflow for organ-level field data:
//!
//! * [`topology`]: axes of growth units bearing internodes and blades.
//! * [`ingest`]: measurement CSV parsing and per-(PA, CA) target series.
//! * [`pa_classify`]: exact 1-D clustering of terminal internode weights
//!   into physiological-age classes.
//! * [`direct_estim`]: sink ratios, internode allometry and specific leaf
//!   weight estimated straight from measurements.
//! * [`engine`]: the production/allocation recursion, over an explicit
//!   topology or over cohort counts of a generative branching rule.
//! * [`calibrate`]: multi-tree weighted least squares for seed biomass,
//!   leaf resistance and ring sink.
//! * [`export`]: plot-ready comparison tables and a 3-D line skeleton.

pub mod calibrate;
pub mod direct_estim;
pub mod engine;
pub mod export;
pub mod ingest;
pub mod pa_classify;
pub mod synthetic;
pub mod topology;

pub use calibrate::{FitOptions, FitProblem, FitResult};
pub use direct_estim::DirectParams;
pub use engine::{HiddenParams, SimConfig, SimulationTrace};
pub use ingest::TargetSeries;
pub use topology::{PhysioAge, TreeTopology};

/// Crate-wide error, one variant per module.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Topology(#[from] topology::TopologyError),
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error(transparent)]
    Classify(#[from] pa_classify::ClassifyError),
    #[error(transparent)]
    Estimate(#[from] direct_estim::EstimateError),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error(transparent)]
    Calibrate(#[from] calibrate::CalibrateError),
    #[error(transparent)]
    Export(#[from] export::ExportError),
}
