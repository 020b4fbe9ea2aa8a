//! Deterministic dose-feedback VMAT planning.
//!
//! Pipeline: synthetic phantom -> conformal arc proposal -> linear dose
//! operator -> dose-error feedback iterations -> rule-based MLC leaf
//! sequencing -> DVH / homogeneity / conformity analytics.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file name the double-precision types used by
//! the CLI and service.

// `!(x > 0.0)` rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod dose;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod objective;
pub mod optimizer;
pub mod phantom;
pub mod pipeline;
pub mod ray;
pub mod scalar;
pub mod sequencer;

pub use analytics::{evaluate_dose, MetricReport};
pub use dose::{adjoint_dose, ct_normalize, forward_dose, BeamModel, DoseOperator, FluenceStack};
pub use error::{Error, Result};
pub use geometry::{
    build_arc_geometry, central_ray_hits, project_stack, project_to_bev, ArcConfig, BevStack, ControlPointGeometry,
};
pub use grid::{GridGeometry, Mask, VoxelGrid};
pub use objective::{AsymmetricQuadratic, Objective, ObjectiveConfig, Penalty, SquaredHinge};
pub use optimizer::{
    deliverability_reg, feedback_correct, propose_initial_fluence, OptimizerConfig, PlanningResult, Proposal,
};
pub use phantom::{augment, dilate_margin, generate_phantom, AugmentParams, Phantom, PhantomSpec, StructureSet};
pub use pipeline::{prepare_case, replan, PlanningConfig, PreparedCase, ReplanOutcome, ReplanRequest, Timings};
pub use scalar::Scalar;
pub use sequencer::{
    reconstruct_fluence, sequence_plan, Aperture, AperturePlan, MlcModel, SequencerConfig, TravelReport,
};

pub type VoxelGridF64 = VoxelGrid<f64>;
pub type VoxelGridF32 = VoxelGrid<f32>;
pub type FluenceStackF64 = FluenceStack<f64>;
pub type FluenceStackF32 = FluenceStack<f32>;
pub type DoseOperatorF64 = DoseOperator<f64>;
pub type DoseOperatorF32 = DoseOperator<f32>;
pub type PhantomF64 = Phantom<f64>;
pub type ObjectiveF64 = Objective<f64>;
pub type PlanningResultF64 = PlanningResult<f64>;
pub type PreparedCaseF64 = PreparedCase<f64>;
pub type ReplanOutcomeF64 = ReplanOutcome<f64>;
