//! Planning objective `J(D)` and its voxel-wise gradient ("error map").
//!
//! Each structure contributes `sum_i M(i) * phi(D_i - R_i)` for a penalty `phi`
//! and a reference `R` (the prescription for the PTV, a frozen per-voxel dose
//! for each organ at risk). The error map is `dJ/dD`.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_stack, BevStack, ControlPointGeometry};
use crate::grid::{Mask, VoxelGrid};
use crate::phantom::{StructureSet, PTV};
use crate::scalar::Scalar;

/// A differentiable scalar penalty of the signed dose deviation `x = D - R`.
pub trait Penalty<T: Scalar>: Debug + Send + Sync {
    fn value(&self, x: T) -> T;
    /// `d value / d x`; at a kink any subgradient may be returned.
    fn derivative(&self, x: T) -> T;
}

/// `(l+/2) relu(x)^2 + (l-/2) relu(-x)^2`: hot spots cost more than cold spots
/// when `l+ > l-`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymmetricQuadratic {
    pub lambda_plus: f64,
    pub lambda_minus: f64,
}

impl<T: Scalar> Penalty<T> for AsymmetricQuadratic {
    #[inline]
    fn value(&self, x: T) -> T {
        let half = T::of(0.5);
        let (p, m) = (x.relu(), (-x).relu());
        half * T::of(self.lambda_plus) * p * p + half * T::of(self.lambda_minus) * m * m
    }

    #[inline]
    fn derivative(&self, x: T) -> T {
        T::of(self.lambda_plus) * x.relu() - T::of(self.lambda_minus) * (-x).relu()
    }
}

/// `1/2 max(x, 0)^2`: only dose above the reference is penalized.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SquaredHinge;

impl<T: Scalar> Penalty<T> for SquaredHinge {
    #[inline]
    fn value(&self, x: T) -> T {
        let p = x.relu();
        T::of(0.5) * p * p
    }

    #[inline]
    fn derivative(&self, x: T) -> T {
        x.relu()
    }
}

/// User-facing objective settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    /// Gy; `None` takes the structure set's prescription
    pub rx_dose: Option<f64>,
    /// organ name -> suppression fraction `s` in `[0, 1)`
    pub oar_controls: BTreeMap<String, f64>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { lambda_plus: 2.0, lambda_minus: 1.0, rx_dose: None, oar_controls: BTreeMap::new() }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_minus > 0.0) || !self.lambda_minus.is_finite() {
            return Err(Error::Config(format!("lambda_minus must be > 0, got {}", self.lambda_minus)));
        }
        if !(self.lambda_plus > self.lambda_minus) || !self.lambda_plus.is_finite() {
            return Err(Error::Config(format!(
                "lambda_plus ({}) must exceed lambda_minus ({})",
                self.lambda_plus, self.lambda_minus
            )));
        }
        if let Some(rx) = self.rx_dose {
            if !(rx > 0.0) || !rx.is_finite() {
                return Err(Error::Config(format!("rx_dose must be > 0, got {rx}")));
            }
        }
        for (organ, &s) in &self.oar_controls {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::Config(format!("suppression for {organ} must lie in [0, 1), got {s}")));
            }
        }
        Ok(())
    }

    pub fn ptv_penalty(&self) -> AsymmetricQuadratic {
        AsymmetricQuadratic { lambda_plus: self.lambda_plus, lambda_minus: self.lambda_minus }
    }

    /// `rx_dose` or, if unset, the structure set's prescription.
    pub fn prescription(&self, structures: &StructureSet) -> f64 {
        self.rx_dose.unwrap_or(structures.prescription_dose)
    }
}

/// Reference dose of a term.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference<T> {
    Uniform(T),
    /// one value per voxel of the term's mask, in mask-index order
    PerVoxel(Vec<T>),
}

/// One structure's contribution to `J`.
#[derive(Debug, Clone)]
pub struct Term<T: Scalar> {
    pub name: String,
    voxels: Vec<u32>,
    reference: Option<Reference<T>>,
    penalty: Arc<dyn Penalty<T>>,
}

impl<T: Scalar> Term<T> {
    pub fn new(
        name: impl Into<String>,
        mask: &Mask,
        reference: Option<Reference<T>>,
        penalty: Arc<dyn Penalty<T>>,
    ) -> Result<Self> {
        let voxels: Vec<u32> = mask.indices().into_iter().map(|i| i as u32).collect();
        let name = name.into();
        if let Some(Reference::PerVoxel(r)) = &reference {
            if r.len() != voxels.len() {
                return Err(Error::Shape(format!("{name}: {} reference values for {} voxels", r.len(), voxels.len())));
            }
        }
        Ok(Self { name, voxels, reference, penalty })
    }

    pub fn voxels(&self) -> &[u32] {
        &self.voxels
    }

    pub fn reference(&self) -> Option<&Reference<T>> {
        self.reference.as_ref()
    }

    fn reference_at(&self, n: usize) -> Result<T> {
        match &self.reference {
            Some(Reference::Uniform(r)) => Ok(*r),
            Some(Reference::PerVoxel(r)) => Ok(r[n]),
            None => Err(Error::State(format!("reference dose for {} has not been frozen", self.name))),
        }
    }

    pub fn value(&self, dose: &[T]) -> Result<T> {
        let mut acc = T::zero();
        for (n, &v) in self.voxels.iter().enumerate() {
            acc += self.penalty.value(dose[v as usize] - self.reference_at(n)?);
        }
        Ok(acc)
    }

    /// Adds this term's gradient into `error`.
    pub fn accumulate_error(&self, dose: &[T], error: &mut [T]) -> Result<()> {
        for (n, &v) in self.voxels.iter().enumerate() {
            error[v as usize] += self.penalty.derivative(dose[v as usize] - self.reference_at(n)?);
        }
        Ok(())
    }
}

/// The full objective: PTV term first, then one term per controlled organ.
#[derive(Debug, Clone)]
pub struct Objective<T: Scalar> {
    grid: crate::grid::GridGeometry,
    terms: Vec<Term<T>>,
    controls: BTreeMap<String, f64>,
    masks: BTreeMap<String, Mask>,
}

impl<T: Scalar> Objective<T> {
    /// PTV asymmetric term plus an unfrozen squared-hinge term per organ in
    /// `config.oar_controls`.
    pub fn new(config: &ObjectiveConfig, structures: &StructureSet) -> Result<Self> {
        config.validate()?;
        let ptv = structures.ptv()?;
        let rx = T::of(config.prescription(structures));
        let mut terms = vec![Term::new(PTV, ptv, Some(Reference::Uniform(rx)), Arc::new(config.ptv_penalty()))?];
        let mut masks = BTreeMap::new();
        for organ in config.oar_controls.keys() {
            let mask = structures.get(organ)?;
            terms.push(Term::new(organ.clone(), mask, None, Arc::new(SquaredHinge))?);
            masks.insert(organ.clone(), mask.clone());
        }
        Ok(Self { grid: ptv.geometry, terms, controls: config.oar_controls.clone(), masks })
    }

    /// Adds a custom term.
    pub fn push_term(&mut self, term: Term<T>) {
        self.terms.push(term);
    }

    pub fn terms(&self) -> &[Term<T>] {
        &self.terms
    }

    /// Sets `R_o = (1 - s_o) * baseline` on every organ term, replacing any
    /// earlier references.
    pub fn freeze_references(&mut self, baseline: &VoxelGrid<T>) -> Result<()> {
        self.grid.check_same(&baseline.geometry, "baseline dose")?;
        baseline.check_finite("baseline dose")?;
        for term in self.terms.iter_mut() {
            if let Some(&s) = self.controls.get(&term.name) {
                let keep = T::of(1.0 - s);
                let r = term.voxels.iter().map(|&v| keep * baseline.values[v as usize]).collect();
                term.reference = Some(Reference::PerVoxel(r));
            }
        }
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.terms.iter().all(|t| t.reference.is_some())
    }

    /// Mask of an organ with a control, if any.
    pub fn organ_mask(&self, organ: &str) -> Option<&Mask> {
        self.masks.get(organ)
    }

    pub fn value(&self, dose: &VoxelGrid<T>) -> Result<T> {
        self.grid.check_same(&dose.geometry, "dose")?;
        let mut acc = T::zero();
        for t in &self.terms {
            acc += t.value(&dose.values)?;
        }
        Ok(acc)
    }

    /// `(J, dJ/dD)`.
    pub fn value_and_error(&self, dose: &VoxelGrid<T>) -> Result<(T, VoxelGrid<T>)> {
        let j = self.value(dose)?;
        let mut e = VoxelGrid::zeros(self.grid);
        for t in &self.terms {
            t.accumulate_error(&dose.values, &mut e.values)?;
        }
        Ok((j, e))
    }
}

fn check_aligned<T: Scalar>(dose: &VoxelGrid<T>, mask: &Mask) -> Result<()> {
    dose.geometry.check_same(&mask.geometry, "dose vs mask").map_err(|e| Error::Argument(e.to_string()))
}

/// `J_PTV` for prescription `rx` (Gy).
pub fn ptv_objective<T: Scalar>(dose: &VoxelGrid<T>, ptv: &Mask, penalty: &AsymmetricQuadratic, rx: f64) -> Result<T> {
    check_aligned(dose, ptv)?;
    Term::new(PTV, ptv, Some(Reference::Uniform(T::of(rx))), Arc::new(*penalty))?.value(&dose.values)
}

/// `dJ_PTV/dD`.
pub fn ptv_error<T: Scalar>(
    dose: &VoxelGrid<T>,
    ptv: &Mask,
    penalty: &AsymmetricQuadratic,
    rx: f64,
) -> Result<VoxelGrid<T>> {
    check_aligned(dose, ptv)?;
    let mut e = VoxelGrid::zeros(dose.geometry);
    Term::new(PTV, ptv, Some(Reference::Uniform(T::of(rx))), Arc::new(*penalty))?
        .accumulate_error(&dose.values, &mut e.values)?;
    Ok(e)
}

/// `(1 - s) * baseline`, zero outside `mask`.
pub fn freeze_reference<T: Scalar>(baseline: &VoxelGrid<T>, mask: &Mask, s: f64) -> Result<VoxelGrid<T>> {
    check_aligned(baseline, mask)?;
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Config(format!("suppression must lie in [0, 1), got {s}")));
    }
    let keep = T::of(1.0 - s);
    let mut r = VoxelGrid::zeros(baseline.geometry);
    for i in mask.indices() {
        r.values[i] = keep * baseline.values[i];
    }
    Ok(r)
}

fn oar_term<T: Scalar>(dose: &VoxelGrid<T>, mask: &Mask, reference: Option<&VoxelGrid<T>>) -> Result<Term<T>> {
    check_aligned(dose, mask)?;
    let reference = reference.ok_or_else(|| Error::State("organ reference has not been frozen".into()))?;
    check_aligned(reference, mask)?;
    let r = mask.indices().into_iter().map(|i| reference.values[i]).collect();
    Term::new("oar", mask, Some(Reference::PerVoxel(r)), Arc::new(SquaredHinge))
}

/// `J_o = 1/2 sum M_o max(D - R_o, 0)^2`.
pub fn oar_objective<T: Scalar>(dose: &VoxelGrid<T>, mask: &Mask, reference: Option<&VoxelGrid<T>>) -> Result<T> {
    oar_term(dose, mask, reference)?.value(&dose.values)
}

/// `dJ_o/dD = M_o max(D - R_o, 0)`.
pub fn oar_error<T: Scalar>(
    dose: &VoxelGrid<T>,
    mask: &Mask,
    reference: Option<&VoxelGrid<T>>,
) -> Result<VoxelGrid<T>> {
    let term = oar_term(dose, mask, reference)?;
    let mut e = VoxelGrid::zeros(dose.geometry);
    term.accumulate_error(&dose.values, &mut e.values)?;
    Ok(e)
}

/// Voxel-wise sum of error maps.
pub fn total_error<T: Scalar>(parts: &[VoxelGrid<T>]) -> Result<VoxelGrid<T>> {
    let first = parts.first().ok_or_else(|| Error::Argument("no error maps to combine".into()))?;
    let mut out = first.clone();
    for p in &parts[1..] {
        out.geometry.check_same(&p.geometry, "error map").map_err(|e| Error::Argument(e.to_string()))?;
        for (o, &v) in out.values.iter_mut().zip(&p.values) {
            *o += v;
        }
    }
    Ok(out)
}

/// Beam's-eye-view projection of an error map, one slice per control point.
pub fn bev_project_error<T: Scalar>(error: &VoxelGrid<T>, geoms: &[ControlPointGeometry]) -> Result<BevStack<T>> {
    project_stack(error, geoms)
}
