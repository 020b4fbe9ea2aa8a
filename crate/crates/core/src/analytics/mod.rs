//! Plan evaluation: dose-volume metrics, fluence similarity and the paired
//! statistics used for non-inferiority comparisons.

mod dvh;
mod fluence;
mod stats;

pub use dvh::{
    conformity_index, dmean, dose_percentile, dvh, evaluate_dose, homogeneity_index, DvhCurve, MetricReport,
    StructureMetrics, CI_ISODOSE,
};
pub use fluence::{fluence_metrics, FluenceMetrics};
pub use stats::{
    noninferiority_test, wilcoxon_signed_rank, Alternative, Direction, NonInferiorityResult, WilcoxonResult,
};
