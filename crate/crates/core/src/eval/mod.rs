//! Assemblies from segmentations, and the metrics that score them.

mod assembly;
mod metrics;
mod report;
#[cfg(test)]
mod tests;

pub use assembly::{
    assemble, assemble_segments, oracle_result, segments_from_result, Assembly, Segments, DEFAULT_MIN_POINTS,
};
pub use metrics::{chamfer_report, match_parts, part_accuracy, seg_accuracy, ChamferReport, PartMatch, DEFAULT_TAU};
pub use report::{
    bottleneck_curve, evaluate, evaluate_sample, evaluate_with, export_outcome_ply, regime_sample, write_curve_csv,
    Aggregate, CurvePoint, EvalConfig, MetricsReport, PoseRegime, Regime, SampleOutcome, SampleRow,
};

use thiserror::Error;

use crate::datagen::DataError;
use crate::geometry::GeometryError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate prediction: {0}")]
    Degenerate(String),
    #[error("result does not match sample: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
