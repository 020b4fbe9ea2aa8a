//! Subcommand implementations. Each returns the text to print on stdout.

use std::path::{Path, PathBuf};
use std::time::Instant;

use arcplan_core::phantom::{BLADDER, RECTUM};
use arcplan_core::{
    augment, ct_normalize, evaluate_dose, generate_phantom, prepare_case, reconstruct_fluence, replan, sequence_plan,
    DoseOperator, Phantom, ReplanRequest, Timings,
};

use crate::documents::{
    dose_from_tensor, dose_tensor, fluence_from_tensor, fluence_tensor, read_phantom, write_phantom, write_timings,
    PlanDocument, RunConfig, RunOutputs,
};
use crate::error::{CliError, Result};
use crate::report::{compare, comparison_csv, read_report, render_comparison, render_csv, render_report, Margins};
use crate::tensor_file::Tensor;

pub struct PhantomGenArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub augment: Option<u64>,
    pub out: PathBuf,
}

pub fn phantom_gen(args: &PhantomGenArgs) -> Result<String> {
    let config = RunConfig::load(args.config.as_deref())?;
    let mut spec = config.phantom;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let phantom = generate_phantom::<f64>(&spec)?;
    let (phantom, applied) = match args.augment {
        None => (phantom, None),
        Some(seed) => {
            let a = augment(&phantom.ct, &phantom.structures, &config.augment, seed)?;
            (Phantom { ct: a.ct, structures: a.structures, isocenter: phantom.isocenter }, Some(a.applied))
        }
    };
    write_phantom(&args.out, &phantom, &spec, applied)?;
    let counts: Vec<String> =
        phantom.structures.masks.iter().map(|(name, m)| format!("{name} {} voxels", m.count())).collect();
    Ok(format!("wrote phantom to {} ({})\n", args.out.display(), counts.join(", ")))
}

/// Controls shared by `plan run` and the service.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControlArgs {
    pub s_bladder: Option<f64>,
    pub s_rectum: Option<f64>,
    pub iters: Option<usize>,
}

impl ControlArgs {
    pub fn apply(&self, request: &mut ReplanRequest) {
        for (organ, s) in [(BLADDER, self.s_bladder), (RECTUM, self.s_rectum)] {
            request.objective.oar_controls.insert(organ.to_string(), s.unwrap_or(0.0));
        }
        if let Some(n) = self.iters {
            request.optimizer.max_iters = n;
        }
    }
}

pub struct PlanRunArgs {
    pub config: Option<PathBuf>,
    pub phantom: PathBuf,
    pub out: PathBuf,
    pub controls: ControlArgs,
}

pub fn plan_run(args: &PlanRunArgs) -> Result<String> {
    let start = Instant::now();
    let mut timings = Timings::default();
    let config = timings.record("load config", || RunConfig::load(args.config.as_deref()))?;
    let (phantom, _) = timings.record("load phantom", || read_phantom(&args.phantom))?;
    let case = prepare_case(&config.planning, phantom)?;
    timings.stages.extend(case.timings.stages.iter().cloned());
    let mut request = case.default_request();
    args.controls.apply(&mut request);
    let outcome = replan(&case, &request)?;
    timings.stages.extend(outcome.timings.stages.iter().cloned());
    let outputs = RunOutputs::in_dir(&args.out)?;
    timings.record("write outputs", || -> Result<()> {
        PlanDocument::new(outcome.plan.clone(), outcome.travel, Some(request.objective.clone()))
            .write(&outputs.plan)?;
        fluence_tensor(&outcome.result.fluence)?.write(&outputs.fluence)?;
        fluence_tensor(&outcome.delivered_fluence)?.write(&outputs.delivered_fluence)?;
        dose_tensor(&outcome.delivered_dose)?.write(&outputs.dose)
    })?;
    timings.total_ms = start.elapsed().as_secs_f64() * 1e3;
    write_timings(&outputs.timings, &timings)?;
    let trace = &outcome.result.objective_trace;
    Ok(format!(
        "{}\n{} feedback iterations, objective {:.6} -> {:.6}; plan written to {}\n",
        timings.table(),
        outcome.result.iterations_used,
        trace[0],
        trace[trace.len() - 1],
        args.out.display()
    ))
}

pub struct PlanSequenceArgs {
    pub config: Option<PathBuf>,
    pub fluence: PathBuf,
    pub out: PathBuf,
}

pub fn plan_sequence(args: &PlanSequenceArgs) -> Result<String> {
    let config = RunConfig::load(args.config.as_deref())?;
    let arc = config.planning.arc;
    let fluence =
        fluence_from_tensor(&Tensor::read(&args.fluence)?, arc.bev_spacing).map_err(|e| e.context(&args.fluence))?;
    let geoms = arc.build([0.0; 3])?;
    if geoms.len() != fluence.n_cp {
        return Err(CliError::Config(format!("arc has {} control points, fluence has {}", geoms.len(), fluence.n_cp)));
    }
    let angles: Vec<f64> = geoms.iter().map(|g| g.gantry_angle).collect();
    let (plan, travel) = sequence_plan(&fluence, &angles, &config.planning.sequencer)?;
    PlanDocument::new(plan, travel, None).write(&args.out)?;
    Ok(format!(
        "sequenced {} control points ({} leaf positions adjusted for travel) into {}\n",
        angles.len(),
        travel.adjusted,
        args.out.display()
    ))
}

pub struct PlanEvalArgs {
    pub config: Option<PathBuf>,
    pub phantom: PathBuf,
    pub plan: Option<PathBuf>,
    pub dose: Option<PathBuf>,
    pub case: String,
    pub out: PathBuf,
    pub csv: Option<PathBuf>,
}

/// Dose delivered by a plan document on `phantom`.
fn plan_dose(phantom: &Phantom<f64>, config: &RunConfig, path: &Path) -> Result<arcplan_core::VoxelGrid<f64>> {
    let doc = PlanDocument::read(path)?;
    let fluence = reconstruct_fluence::<f64>(&doc.plan)?;
    let geoms = config.planning.arc.build(phantom.isocenter)?;
    if geoms.len() != fluence.n_cp || geoms[0].raster() != fluence.width {
        return Err(CliError::Config(format!(
            "plan has {} control points of width {}, arc config has {} of width {}",
            fluence.n_cp,
            fluence.width,
            geoms.len(),
            geoms[0].raster()
        )));
    }
    let support: Vec<bool> = fluence.values.iter().map(|&v| v != 0.0).collect();
    let op = DoseOperator::with_support(&ct_normalize(&phantom.ct), &geoms, &config.planning.beam, &support)?;
    Ok(op.forward(&fluence)?)
}

pub fn plan_eval(args: &PlanEvalArgs) -> Result<String> {
    let config = RunConfig::load(args.config.as_deref())?;
    let (phantom, _) = read_phantom(&args.phantom)?;
    let dose = match (&args.plan, &args.dose) {
        (Some(plan), None) => plan_dose(&phantom, &config, plan)?,
        (None, Some(path)) => dose_from_tensor(&Tensor::read(path)?, phantom.ct.geometry, path)?,
        _ => return Err(CliError::Config("give exactly one of --plan and --dose".into())),
    };
    let metrics = evaluate_dose(&dose, &phantom.structures)?;
    let text = render_report(&args.case, &metrics)?;
    std::fs::write(&args.out, &text).map_err(|e| CliError::io(&args.out, e))?;
    if let Some(csv) = &args.csv {
        std::fs::write(csv, render_csv(&metrics)).map_err(|e| CliError::io(csv, e))?;
    }
    Ok(text)
}

pub struct PlanCompareArgs {
    pub candidate: PathBuf,
    pub reference: PathBuf,
    pub margins: Margins,
    pub csv: Option<PathBuf>,
}

pub fn plan_compare(args: &PlanCompareArgs) -> Result<String> {
    let rows = compare(&read_report(&args.candidate)?, &read_report(&args.reference)?, &args.margins)?;
    if let Some(csv) = &args.csv {
        std::fs::write(csv, comparison_csv(&rows)).map_err(|e| CliError::io(csv, e))?;
    }
    Ok(render_comparison(&rows))
}
