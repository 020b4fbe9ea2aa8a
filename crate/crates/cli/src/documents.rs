//! On-disk documents: run configuration (TOML), phantom directories, plan
//! documents (JSON) and fluence / dose tensors.

use std::path::{Path, PathBuf};

use arcplan_core::phantom::AppliedTransforms;
use arcplan_core::sequencer::TravelReport;
use arcplan_core::{
    AperturePlan, AugmentParams, FluenceStack, GridGeometry, Mask, ObjectiveConfig, Phantom, PhantomSpec,
    PlanningConfig, StructureSet, VoxelGrid,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::tensor_file::Tensor;

/// Everything a TOML config file may set; each section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    pub planning: PlanningConfig,
    pub augment: AugmentParams,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config: Self =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        config.phantom.validate()?;
        config.planning.validate()?;
        config.augment.validate()?;
        Ok(config)
    }
}

pub const PHANTOM_FORMAT: &str = "arcplan-phantom";
pub const PLAN_FORMAT: &str = "arcplan-plan";
pub const VERSION: u32 = 1;

/// `phantom.json` of a phantom directory. `ct.tensor` holds HU as f64
/// `[nz, ny, nx]`; `masks.tensor` holds one f32 0/1 volume per entry of
/// `structures`, stacked as `[n_structures, nz, ny, nx]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomDocument {
    pub format: String,
    pub version: u32,
    pub grid: GridGeometry,
    pub isocenter: [f64; 3],
    pub prescription_dose: f64,
    pub structures: Vec<String>,
    pub spec: PhantomSpec,
    /// present when the case is an augmented variant
    pub augmentation: Option<AppliedTransforms>,
}

pub fn grid_shape(g: &GridGeometry) -> Vec<usize> {
    vec![g.dims[2], g.dims[1], g.dims[0]]
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

pub fn write_phantom(
    dir: &Path,
    phantom: &Phantom<f64>,
    spec: &PhantomSpec,
    augmentation: Option<AppliedTransforms>,
) -> Result<()> {
    ensure_dir(dir)?;
    let grid = phantom.ct.geometry;
    let names: Vec<String> = phantom.structures.masks.keys().cloned().collect();
    let doc = PhantomDocument {
        format: PHANTOM_FORMAT.into(),
        version: VERSION,
        grid,
        isocenter: phantom.isocenter,
        prescription_dose: phantom.structures.prescription_dose,
        structures: names.clone(),
        spec: spec.clone(),
        augmentation,
    };
    write_json(&dir.join("phantom.json"), &doc)?;
    Tensor::f64(grid_shape(&grid), phantom.ct.values.clone())?.write(&dir.join("ct.tensor"))?;
    let mut masks = Vec::with_capacity(names.len() * grid.len());
    for m in phantom.structures.masks.values() {
        masks.extend(m.values.iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
    }
    let mut shape = vec![names.len()];
    shape.extend(grid_shape(&grid));
    Tensor::f32(shape, masks)?.write(&dir.join("masks.tensor"))
}

pub fn read_phantom(dir: &Path) -> Result<(Phantom<f64>, PhantomDocument)> {
    let doc: PhantomDocument = read_json(&dir.join("phantom.json"))?;
    if doc.format != PHANTOM_FORMAT || doc.version != VERSION {
        return Err(CliError::Format(format!(
            "{}: expected {PHANTOM_FORMAT} v{VERSION}, found {} v{}",
            dir.display(),
            doc.format,
            doc.version
        )));
    }
    let grid = GridGeometry::new(doc.grid.dims, doc.grid.spacing, doc.grid.origin)?;
    let ct_path = dir.join("ct.tensor");
    let ct = Tensor::read(&ct_path)?;
    ct.expect_shape(&grid_shape(&grid), "ct.tensor").map_err(|e| e.context(&ct_path))?;
    let masks_path = dir.join("masks.tensor");
    let masks = Tensor::read(&masks_path)?;
    let mut shape = vec![doc.structures.len()];
    shape.extend(grid_shape(&grid));
    masks.expect_shape(&shape, "masks.tensor").map_err(|e| e.context(&masks_path))?;
    let values = masks.to_f64();
    let mut set = StructureSet { masks: Default::default(), prescription_dose: doc.prescription_dose };
    for (k, name) in doc.structures.iter().enumerate() {
        let chunk = &values[k * grid.len()..(k + 1) * grid.len()];
        if chunk.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(CliError::Format(format!("{}: mask '{name}' is not 0/1", masks_path.display())));
        }
        let mask = Mask::from_values(grid, chunk.iter().map(|&v| v == 1.0).collect())?;
        set.masks.insert(name.clone(), mask);
    }
    set.validate()?;
    let ct = VoxelGrid::from_values(grid, ct.to_f64())?;
    Ok((Phantom { ct, structures: set, isocenter: doc.isocenter }, doc))
}

/// JSON plan document: the sequenced apertures plus the controls that
/// produced them, when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub format: String,
    pub version: u32,
    pub controls: Option<ObjectiveConfig>,
    pub travel: TravelReport,
    pub plan: AperturePlan,
}

impl PlanDocument {
    pub fn new(plan: AperturePlan, travel: TravelReport, controls: Option<ObjectiveConfig>) -> Self {
        Self { format: PLAN_FORMAT.into(), version: VERSION, controls, travel, plan }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let doc: Self = read_json(path)?;
        if doc.format != PLAN_FORMAT || doc.version != VERSION {
            return Err(CliError::Format(format!(
                "{}: expected {PLAN_FORMAT} v{VERSION}, found {} v{}",
                path.display(),
                doc.format,
                doc.version
            )));
        }
        doc.plan.validate().map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
        Ok(doc)
    }
}

pub fn fluence_tensor(f: &FluenceStack<f64>) -> Result<Tensor> {
    Tensor::f64(vec![f.n_cp, f.height, f.width], f.values.clone())
}

/// Fluence stack from an `[n_cp, height, width]` tensor.
pub fn fluence_from_tensor(t: &Tensor, spacing: f64) -> Result<FluenceStack<f64>> {
    let [n_cp, h, w] = t.shape[..] else {
        return Err(CliError::Format(format!("fluence tensor must be 3-D, got shape {:?}", t.shape)));
    };
    Ok(FluenceStack::from_values(n_cp, h, w, spacing, t.to_f64())?)
}

pub fn dose_tensor(d: &VoxelGrid<f64>) -> Result<Tensor> {
    Tensor::f64(grid_shape(&d.geometry), d.values.clone())
}

pub fn dose_from_tensor(t: &Tensor, grid: GridGeometry, path: &Path) -> Result<VoxelGrid<f64>> {
    t.expect_shape(&grid_shape(&grid), "dose").map_err(|e| e.context(path))?;
    Ok(VoxelGrid::from_values(grid, t.to_f64())?)
}

/// Output files of `plan run` inside its output directory.
pub struct RunOutputs {
    pub plan: PathBuf,
    pub fluence: PathBuf,
    pub delivered_fluence: PathBuf,
    pub dose: PathBuf,
    pub timings: PathBuf,
}

impl RunOutputs {
    pub fn in_dir(dir: &Path) -> Result<Self> {
        ensure_dir(dir)?;
        Ok(Self {
            plan: dir.join("plan.json"),
            fluence: dir.join("fluence.tensor"),
            delivered_fluence: dir.join("delivered_fluence.tensor"),
            dose: dir.join("dose.tensor"),
            timings: dir.join("timings.json"),
        })
    }
}

pub fn write_timings(path: &Path, t: &arcplan_core::Timings) -> Result<()> {
    write_json(path, t)
}
