//! End-to-end planning: phantom -> arc -> dose operator -> proposal ->
//! baseline -> feedback iterations -> sequencing -> delivered dose.
//!
//! [`prepare_case`] does the work shared by every replan of a case and fixes
//! the baseline dose `D^(0)` (the dose of the conformal proposal). [`replan`]
//! freezes the OAR references against that baseline for a given set of
//! controls and runs the rest of the pipeline.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analytics::{evaluate_dose, MetricReport};
use crate::dose::{ct_normalize, BeamModel, DoseOperator, FluenceStack};
use crate::error::{Error, Result};
use crate::geometry::ArcConfig;
use crate::grid::VoxelGrid;
use crate::objective::{Objective, ObjectiveConfig};
use crate::optimizer::{
    feedback_correct, propose_initial_fluence, target_rays, OptimizerConfig, PlanningResult, Proposal,
};
use crate::phantom::Phantom;
use crate::scalar::Scalar;
use crate::sequencer::{reconstruct_fluence, sequence_plan, AperturePlan, SequencerConfig, TravelReport};

/// Everything needed to plan a case, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanningConfig {
    pub arc: ArcConfig,
    pub beam: BeamModel,
    /// mm, PTV growth defining the proposal apertures
    pub proposal_margin: f64,
    /// mm, PTV growth defining the rays the optimizer may modulate
    pub support_margin: f64,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerConfig,
    pub sequencer: SequencerConfig,
}

impl Default for PlanningConfig {
    fn default() -> Self {
        Self {
            arc: ArcConfig::default(),
            beam: BeamModel::default(),
            proposal_margin: 10.0,
            support_margin: 20.0,
            objective: ObjectiveConfig::default(),
            optimizer: OptimizerConfig::default(),
            sequencer: SequencerConfig::default(),
        }
    }
}

impl PlanningConfig {
    pub fn validate(&self) -> Result<()> {
        self.beam.validate()?;
        self.objective.validate()?;
        self.optimizer.validate()?;
        self.sequencer.validate()?;
        if !(self.proposal_margin >= 0.0) || !(self.support_margin >= self.proposal_margin) {
            return Err(Error::Config(format!(
                "need 0 <= proposal_margin <= support_margin, got {} and {}",
                self.proposal_margin, self.support_margin
            )));
        }
        Ok(())
    }
}

/// Wall time of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<StageTime>,
    /// wall time of the whole call, including anything not attributed
    pub total_ms: f64,
}

impl Timings {
    /// Runs `f` and appends its wall time under `stage`.
    pub fn record<R>(&mut self, stage: &str, f: impl FnOnce() -> R) -> R {
        let t = Instant::now();
        let out = f();
        self.stages.push(StageTime { stage: stage.to_string(), ms: t.elapsed().as_secs_f64() * 1e3 });
        out
    }

    pub fn attributed_ms(&self) -> f64 {
        self.stages.iter().map(|s| s.ms).sum()
    }

    /// Fixed-width table, one stage per line, then the total.
    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>10}\n", "stage", "ms");
        for st in &self.stages {
            s.push_str(&format!("{:<24} {:>10.1}\n", st.stage, st.ms));
        }
        let other = (self.total_ms - self.attributed_ms()).max(0.0);
        s.push_str(&format!("{:<24} {:>10.1}\n", "unattributed", other));
        s.push_str(&format!("{:<24} {:>10.1}\n", "total", self.total_ms));
        s
    }
}

/// Shared state of a planning session.
#[derive(Debug, Clone)]
pub struct PreparedCase<T: Scalar> {
    pub config: PlanningConfig,
    pub phantom: Phantom<T>,
    pub operator: DoseOperator<T>,
    pub proposal: Proposal<T>,
    /// `D^(0)`, the dose of the proposal
    pub baseline: VoxelGrid<T>,
    pub timings: Timings,
}

/// Builds the arc, the support-restricted operator, the proposal and the
/// baseline dose.
pub fn prepare_case<T: Scalar>(config: &PlanningConfig, phantom: Phantom<T>) -> Result<PreparedCase<T>> {
    config.validate()?;
    phantom.structures.validate()?;
    let start = Instant::now();
    let mut timings = Timings::default();
    let ct = timings.record("ct normalization", || ct_normalize(&phantom.ct));
    let geoms = timings.record("arc geometry", || config.arc.build(phantom.isocenter))?;
    let ptv = phantom.structures.ptv()?;
    let support = timings.record("target rays", || target_rays(ptv, &geoms, config.support_margin))?;
    let operator =
        timings.record("dose operator", || DoseOperator::with_support(&ct, &geoms, &config.beam, &support))?;
    let rx = config.objective.prescription(&phantom.structures);
    let proposal = timings
        .record("proposal", || propose_initial_fluence(&operator, &phantom.structures, config.proposal_margin, rx))?;
    let baseline = timings.record("baseline dose", || operator.forward(&proposal.fluence))?;
    timings.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(PreparedCase { config: config.clone(), phantom, operator, proposal, baseline, timings })
}

/// Controls and settings of one replan; defaults come from the case config.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplanRequest {
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerConfig,
    pub sequencer: SequencerConfig,
}

impl<T: Scalar> PreparedCase<T> {
    pub fn default_request(&self) -> ReplanRequest {
        ReplanRequest {
            objective: self.config.objective.clone(),
            optimizer: self.config.optimizer.clone(),
            sequencer: self.config.sequencer.clone(),
        }
    }

    pub fn gantry_angles(&self) -> Vec<f64> {
        self.operator.geoms().iter().map(|g| g.gantry_angle).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ReplanOutcome<T: Scalar> {
    pub result: PlanningResult<T>,
    pub plan: AperturePlan,
    pub travel: TravelReport,
    /// fluence the sequenced plan delivers
    pub delivered_fluence: FluenceStack<T>,
    pub delivered_dose: VoxelGrid<T>,
    /// metrics of the delivered dose
    pub metrics: MetricReport,
    pub timings: Timings,
}

/// Feedback iterations from the proposal, then sequencing and evaluation of
/// the delivered plan.
pub fn replan<T: Scalar>(case: &PreparedCase<T>, request: &ReplanRequest) -> Result<ReplanOutcome<T>> {
    let start = Instant::now();
    let mut timings = Timings::default();
    let structures = &case.phantom.structures;
    let objective = timings.record("freeze references", || -> Result<Objective<T>> {
        let mut o = Objective::new(&request.objective, structures)?;
        o.freeze_references(&case.baseline)?;
        Ok(o)
    })?;
    let result = timings.record("feedback iterations", || {
        feedback_correct(&case.operator, &case.proposal.fluence, &objective, &request.optimizer)
    })?;
    let angles = case.gantry_angles();
    let (plan, travel) =
        timings.record("leaf sequencing", || sequence_plan(&result.fluence, &angles, &request.sequencer))?;
    let delivered_fluence = timings.record("fluence reconstruction", || reconstruct_fluence::<T>(&plan))?;
    let delivered_dose = timings.record("delivered dose", || case.operator.forward(&delivered_fluence))?;
    let metrics = timings.record("analytics", || evaluate_dose(&delivered_dose, structures))?;
    timings.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(ReplanOutcome { result, plan, travel, delivered_fluence, delivered_dose, metrics, timings })
}
