use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Mask, VoxelGrid};
use crate::phantom::{StructureSet, CTV, PTV};
use crate::scalar::Scalar;

/// Cumulative dose-volume histogram: `volume[k]` is the fraction of the
/// structure receiving at least `dose[k]` Gy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvhCurve {
    pub structure: String,
    pub dose: Vec<f64>,
    pub volume: Vec<f64>,
}

fn masked_sorted<T: Scalar>(dose: &VoxelGrid<T>, mask: &Mask) -> Result<Vec<f64>> {
    dose.geometry.check_same(&mask.geometry, "dose vs mask").map_err(|e| Error::Argument(e.to_string()))?;
    let mut v: Vec<f64> = dose.values.iter().zip(&mask.values).filter(|(_, &m)| m).map(|(d, _)| d.f64()).collect();
    if v.is_empty() {
        return Err(Error::Structure("empty mask".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("dose inside the mask".into()));
    }
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Linear interpolation between order statistics at quantile `q` in `[0, 1]`.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn check_percent(x: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&x) {
        return Err(Error::Argument(format!("volume percentage must lie in [0, 100], got {x}")));
    }
    Ok(())
}

/// `D_x`: the dose received by at least `x` percent of the structure.
pub fn dose_percentile<T: Scalar>(dose: &VoxelGrid<T>, mask: &Mask, x: f64) -> Result<f64> {
    check_percent(x)?;
    Ok(quantile_sorted(&masked_sorted(dose, mask)?, 1.0 - x / 100.0))
}

pub fn dmean<T: Scalar>(dose: &VoxelGrid<T>, mask: &Mask) -> Result<f64> {
    let v = masked_sorted(dose, mask)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// DVH on `n_bins + 1` equally spaced dose levels from 0 to the structure maximum.
pub fn dvh<T: Scalar>(dose: &VoxelGrid<T>, mask: &Mask, name: &str, n_bins: usize) -> Result<DvhCurve> {
    if n_bins == 0 {
        return Err(Error::Argument("n_bins must be >= 1".into()));
    }
    let v = masked_sorted(dose, mask)?;
    let top = v[v.len() - 1].max(0.0);
    let n = v.len() as f64;
    let mut levels = Vec::with_capacity(n_bins + 1);
    let mut volume = Vec::with_capacity(n_bins + 1);
    for k in 0..=n_bins {
        let d = top * k as f64 / n_bins as f64;
        // voxels at or above d
        let below = v.partition_point(|&x| x < d);
        levels.push(d);
        volume.push((v.len() - below) as f64 / n);
    }
    Ok(DvhCurve { structure: name.to_string(), dose: levels, volume })
}

/// `(D2 - D98) / D50`.
pub fn homogeneity_index<T: Scalar>(dose: &VoxelGrid<T>, ptv: &Mask) -> Result<f64> {
    let v = masked_sorted(dose, ptv)?;
    hi_sorted(&v)
}

fn hi_sorted(v: &[f64]) -> Result<f64> {
    let d50 = quantile_sorted(v, 0.5);
    if !(d50 > 0.0) {
        return Err(Error::Argument(format!("homogeneity index undefined for D50 = {d50}")));
    }
    Ok((quantile_sorted(v, 0.98) - quantile_sorted(v, 0.02)) / d50)
}

/// Paddick conformity index `TV_PIV^2 / (TV * PIV)` for the isodose `level`
/// (Gy); 0 when nothing reaches it.
pub fn conformity_index<T: Scalar>(dose: &VoxelGrid<T>, ptv: &Mask, level: f64) -> Result<f64> {
    if !(level > 0.0) {
        return Err(Error::Argument(format!("isodose level must be > 0, got {level}")));
    }
    dose.geometry.check_same(&ptv.geometry, "dose vs PTV").map_err(|e| Error::Argument(e.to_string()))?;
    let tv = ptv.count();
    if tv == 0 {
        return Err(Error::Structure("empty PTV".into()));
    }
    let level = T::of(level);
    let (mut piv, mut both) = (0usize, 0usize);
    for (d, &m) in dose.values.iter().zip(&ptv.values) {
        if *d >= level {
            piv += 1;
            both += m as usize;
        }
    }
    if piv == 0 {
        return Ok(0.0);
    }
    Ok((both as f64).powi(2) / (tv as f64 * piv as f64))
}

/// Dose metrics of one structure, in Gy except the unitless indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub d2: f64,
    pub d50: f64,
    pub d98: f64,
    pub dmean: f64,
    /// targets (PTV, CTV) only; absent when `D50 = 0`
    pub hi: Option<f64>,
    /// PTV only, at the [`CI_ISODOSE`] level
    pub ci: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub prescription_dose: f64,
    pub structures: BTreeMap<String, StructureMetrics>,
}

/// Fraction of the prescription whose isodose the reported CI uses.
pub const CI_ISODOSE: f64 = 0.95;

/// Metrics for every non-empty structure of `structures`.
pub fn evaluate_dose<T: Scalar>(dose: &VoxelGrid<T>, structures: &StructureSet) -> Result<MetricReport> {
    let rx = structures.prescription_dose;
    let mut out = BTreeMap::new();
    for (name, mask) in &structures.masks {
        if mask.count() == 0 {
            continue;
        }
        let v = masked_sorted(dose, mask)?;
        let metrics = StructureMetrics {
            d2: quantile_sorted(&v, 0.98),
            d50: quantile_sorted(&v, 0.5),
            d98: quantile_sorted(&v, 0.02),
            dmean: v.iter().sum::<f64>() / v.len() as f64,
            hi: if name == PTV || name == CTV { hi_sorted(&v).ok() } else { None },
            ci: if name == PTV { Some(conformity_index(dose, mask, CI_ISODOSE * rx)?) } else { None },
        };
        out.insert(name.clone(), metrics);
    }
    Ok(MetricReport { prescription_dose: rx, structures: out })
}
