//! Fluence maps to a deliverable single-arc MLC plan.
//!
//! Each BEV row is one leaf pair. Per control point the longest run of
//! significant fluence in each row becomes the opening and the MU is the mean
//! fluence inside the aperture; edges are then refined to sub-pixel
//! positions, widened by the dosimetric leaf gap, and finally made to respect
//! the per-control-point leaf travel limit.
//!
//! Leaf positions are in mm on the isocenter plane, measured along the BEV
//! `u` axis, so column `c` spans `[(c - w/2) s, (c + 1 - w/2) s]`.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dose::FluenceStack;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Leaf bank geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlcModel {
    pub name: String,
    /// mm at the isocenter
    pub leaf_width: f64,
}

impl Default for MlcModel {
    fn default() -> Self {
        Self { name: "M120".into(), leaf_width: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequencerConfig {
    /// fraction of the map maximum that counts as significant fluence
    pub threshold_frac: f64,
    pub subpixel: bool,
    /// mm, dosimetric leaf gap
    pub dlg: f64,
    /// mm per control point
    pub max_travel_per_cp: f64,
    pub mlc: MlcModel,
}

impl Default for SequencerConfig {
    fn default() -> Self {
        Self { threshold_frac: 0.5, subpixel: true, dlg: 1.5, max_travel_per_cp: 8.0, mlc: MlcModel::default() }
    }
}

impl SequencerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_frac > 0.0 && self.threshold_frac < 1.0) {
            return Err(Error::Config(format!("threshold_frac must lie in (0, 1), got {}", self.threshold_frac)));
        }
        if !(self.dlg >= 0.0) || !self.dlg.is_finite() {
            return Err(Error::Config(format!("dlg must be >= 0, got {}", self.dlg)));
        }
        if !(self.max_travel_per_cp > 0.0) {
            return Err(Error::Config(format!("max_travel_per_cp must be > 0, got {}", self.max_travel_per_cp)));
        }
        if !(self.mlc.leaf_width > 0.0) {
            return Err(Error::Config("leaf width must be > 0".into()));
        }
        Ok(())
    }
}

/// One control point of the plan. Row `r` of `left`/`right` is leaf pair `r`;
/// a closed pair has `left == right`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aperture {
    pub cp_index: usize,
    pub gantry_angle: f64,
    pub mu: f64,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl Aperture {
    pub fn is_open(&self, row: usize) -> bool {
        self.right[row] > self.left[row]
    }

    pub fn centers(&self) -> Vec<f64> {
        self.left.iter().zip(&self.right).map(|(l, r)| 0.5 * (l + r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AperturePlan {
    pub mlc: MlcModel,
    /// mm already applied to the leaf positions
    pub dlg: f64,
    pub max_travel_per_cp: f64,
    /// BEV columns per row
    pub width: usize,
    /// mm per BEV column
    pub spacing: f64,
    pub apertures: Vec<Aperture>,
}

impl AperturePlan {
    pub fn n_cp(&self) -> usize {
        self.apertures.len()
    }

    pub fn rows(&self) -> usize {
        self.apertures.first().map_or(0, |a| a.left.len())
    }

    pub fn total_mu(&self) -> f64 {
        self.apertures.iter().map(|a| a.mu).sum()
    }

    /// Largest leaf move between consecutive control points, in mm.
    pub fn max_travel(&self) -> f64 {
        let mut worst = 0.0f64;
        for w in self.apertures.windows(2) {
            for r in 0..w[0].left.len() {
                worst = worst.max((w[1].left[r] - w[0].left[r]).abs());
                worst = worst.max((w[1].right[r] - w[0].right[r]).abs());
            }
        }
        worst
    }

    pub fn validate(&self) -> Result<()> {
        if self.apertures.is_empty() {
            return Err(Error::Argument("plan has no control points".into()));
        }
        if !(self.spacing > 0.0) || self.width == 0 {
            return Err(Error::Argument("plan raster must be non-empty".into()));
        }
        let rows = self.rows();
        for (i, a) in self.apertures.iter().enumerate() {
            if a.left.len() != rows || a.right.len() != rows {
                return Err(Error::Shape(format!("control point {i} has a different number of leaf pairs")));
            }
            if !(a.mu >= 0.0) || !a.mu.is_finite() {
                return Err(Error::Argument(format!("control point {i} has invalid MU {}", a.mu)));
            }
            for r in 0..rows {
                if !(a.left[r] <= a.right[r]) || !a.left[r].is_finite() || !a.right[r].is_finite() {
                    return Err(Error::Argument(format!("control point {i} row {r}: left leaf past right leaf")));
                }
            }
        }
        Ok(())
    }

    fn to_px(&self, mm: f64) -> f64 {
        mm / self.spacing + self.width as f64 / 2.0
    }
}

/// Maximal runs `[start, end)` of pixels at or above `cut`, per row.
fn runs<T: Scalar>(row: &[T], cut: T) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (c, &v) in row.iter().enumerate() {
        match (v >= cut, start) {
            (true, None) => start = Some(c),
            (false, Some(s)) => {
                out.push((s, c));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, row.len()));
    }
    out
}

/// Longest runs of each row; empty when the map is zero.
fn candidate_runs<T: Scalar>(map: &[T], width: usize, threshold: f64) -> Vec<Vec<(usize, usize)>> {
    let max = map.iter().fold(T::zero(), |a, &b| if b > a { b } else { a });
    let rows = map.len() / width;
    if max <= T::zero() {
        return vec![Vec::new(); rows];
    }
    let cut = T::of(threshold) * max;
    map.chunks(width)
        .map(|row| {
            let all = runs(row, cut);
            let longest = all.iter().map(|(s, e)| e - s).max().unwrap_or(0);
            all.into_iter().filter(|(s, e)| e - s == longest).collect()
        })
        .collect()
}

/// Integer-edge aperture from precomputed candidate runs.
fn choose_aperture<T: Scalar>(
    map: &[T],
    width: usize,
    spacing: f64,
    candidates: &[Vec<(usize, usize)>],
    previous_centers: &[f64],
    cp_index: usize,
) -> Aperture {
    let rows = candidates.len();
    let half = width as f64 / 2.0;
    let mm = |edge: usize| (edge as f64 - half) * spacing;
    let mut left = vec![0.0; rows];
    let mut right = vec![0.0; rows];
    // incremental mean is exact when every in-aperture value is equal
    let mut mu = 0.0f64;
    let mut count = 0usize;
    for r in 0..rows {
        let prev = previous_centers[r];
        let best = candidates[r].iter().min_by(|a, b| {
            let ca = 0.5 * (mm(a.0) + mm(a.1));
            let cb = 0.5 * (mm(b.0) + mm(b.1));
            (ca - prev).abs().total_cmp(&(cb - prev).abs()).then(a.0.cmp(&b.0))
        });
        match best {
            Some(&(s, e)) => {
                left[r] = mm(s);
                right[r] = mm(e);
                for &v in &map[r * width + s..r * width + e] {
                    count += 1;
                    mu += (v.f64() - mu) / count as f64;
                }
            }
            None => {
                left[r] = prev;
                right[r] = prev;
            }
        }
    }
    Aperture { cp_index, gantry_angle: 0.0, mu, left, right }
}

/// Integer-edge aperture for one fluence map (`width` columns per row).
/// `previous` supplies tie-breaking and parking positions; without it the BEV
/// center is used.
pub fn sequence_cp<T: Scalar>(
    map: &[T],
    width: usize,
    spacing: f64,
    threshold_frac: f64,
    previous: Option<&Aperture>,
) -> Result<Aperture> {
    if width == 0 || !map.len().is_multiple_of(width) {
        return Err(Error::Shape(format!("map of {} values is not a whole number of {width}-wide rows", map.len())));
    }
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(Error::Argument(format!("threshold_frac must lie in (0, 1), got {threshold_frac}")));
    }
    if map.iter().any(|v| !(*v >= T::zero()) || !v.is_finite()) {
        return Err(Error::Argument("fluence map must be finite and non-negative".into()));
    }
    let rows = map.len() / width;
    let centers = match previous {
        Some(p) if p.left.len() == rows => p.centers(),
        Some(_) => return Err(Error::Shape("previous aperture has a different number of rows".into())),
        None => vec![0.0; rows],
    };
    let candidates = candidate_runs(map, width, threshold_frac);
    Ok(choose_aperture(map, width, spacing, &candidates, &centers, previous.map_or(0, |p| p.cp_index + 1)))
}

/// Sub-pixel edge placement. For each edge of an open row, compares opening
/// the first excluded pixel by `min(1, f_out / MU)` against closing the
/// boundary pixel down to `f_in / MU` coverage and keeps whichever reproduces
/// the two boundary pixels better.
pub fn refine_subpixel<T: Scalar>(aperture: &Aperture, map: &[T], width: usize, spacing: f64) -> Result<Aperture> {
    let rows = aperture.left.len();
    if map.len() != rows * width {
        return Err(Error::Shape("map does not match the aperture".into()));
    }
    let mut out = aperture.clone();
    let mu = aperture.mu;
    if !(mu > 0.0) {
        return Ok(out);
    }
    let half = width as f64 / 2.0;
    for r in 0..rows {
        if !aperture.is_open(r) {
            continue;
        }
        let row = &map[r * width..(r + 1) * width];
        let s = (aperture.left[r] / spacing + half).round() as usize;
        let e = (aperture.right[r] / spacing + half).round() as usize;
        let (dl, retract_l) = edge_shift(row.get(s.wrapping_sub(1)).map(|v| v.f64()), row[s].f64(), mu);
        let (dr, retract_r) = edge_shift(row.get(e).map(|v| v.f64()), row[e - 1].f64(), mu);
        let (dl, dr) = if e - s == 1 && retract_l && retract_r {
            // a single pixel cannot lose more than its own width
            let total = (1.0 - row[s].f64() / mu).clamp(0.0, 1.0);
            (-0.5 * total, -0.5 * total)
        } else {
            (dl, dr)
        };
        out.left[r] = aperture.left[r] - dl * spacing;
        out.right[r] = aperture.right[r] + dr * spacing;
    }
    Ok(out)
}

/// Outward shift in pixels (negative = inward) and whether it is a retraction.
fn edge_shift(outside: Option<f64>, inside: f64, mu: f64) -> (f64, bool) {
    let f_out = outside.unwrap_or(0.0);
    let open = if outside.is_some() { (f_out / mu).min(1.0) } else { 0.0 };
    let err_open = (open * mu - f_out).powi(2) + (mu - inside).powi(2);
    let close = (1.0 - inside / mu).clamp(0.0, 1.0);
    let err_close = f_out.powi(2) + ((1.0 - close) * mu - inside).powi(2);
    if open > 0.0 && err_open <= err_close {
        (open, false)
    } else if close > 0.0 && err_close < err_open {
        (-close, true)
    } else {
        (0.0, false)
    }
}

/// Widens every open row by `dlg / 2` on each side.
pub fn apply_dlg(plan: &AperturePlan, dlg: f64) -> Result<AperturePlan> {
    if !(dlg >= 0.0) || !dlg.is_finite() {
        return Err(Error::Argument(format!("dlg must be >= 0, got {dlg}")));
    }
    let mut out = plan.clone();
    out.dlg = plan.dlg + dlg;
    for a in &mut out.apertures {
        for r in 0..a.left.len() {
            if a.right[r] > a.left[r] {
                a.left[r] -= 0.5 * dlg;
                a.right[r] += 0.5 * dlg;
            }
        }
    }
    Ok(out)
}

/// Outcome of [`enforce_leaf_travel`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TravelReport {
    /// mm, summed over every leaf and control point
    pub total_displacement: f64,
    /// leaf positions that had to move
    pub adjusted: usize,
    /// mm, largest inter-CP move before enforcement
    pub max_travel_before: f64,
}

/// Makes every leaf move at most `max_travel` mm between consecutive control
/// points with the least total displacement per leaf, then restores
/// `left <= right` about the pair midpoint.
pub fn enforce_leaf_travel(plan: &AperturePlan, max_travel: f64) -> Result<(AperturePlan, TravelReport)> {
    if !(max_travel > 0.0) || max_travel.is_nan() {
        return Err(Error::Argument(format!("max_travel must be > 0, got {max_travel}")));
    }
    plan.validate()?;
    let mut out = plan.clone();
    out.max_travel_per_cp = max_travel;
    let mut report = TravelReport { max_travel_before: plan.max_travel(), ..TravelReport::default() };
    if report.max_travel_before <= max_travel {
        return Ok((out, report));
    }
    let n = plan.n_cp();
    let rows = plan.rows();
    let solved: Vec<(Vec<f64>, Vec<f64>)> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let l: Vec<f64> = plan.apertures.iter().map(|a| a.left[r]).collect();
            let rr: Vec<f64> = plan.apertures.iter().map(|a| a.right[r]).collect();
            let mut l2 = bounded_travel_l1(&l, max_travel);
            let mut r2 = bounded_travel_l1(&rr, max_travel);
            for c in 0..n {
                if l2[c] > r2[c] {
                    let mid = 0.5 * (l2[c] + r2[c]);
                    l2[c] = mid;
                    r2[c] = mid;
                }
            }
            (l2, r2)
        })
        .collect();
    for (r, (l, rr)) in solved.into_iter().enumerate() {
        for c in 0..n {
            let a = &mut out.apertures[c];
            for (pos, new) in [(&mut a.left[r], l[c]), (&mut a.right[r], rr[c])] {
                if *pos != new {
                    report.total_displacement += (*pos - new).abs();
                    report.adjusted += 1;
                    *pos = new;
                }
            }
        }
    }
    Ok((out, report))
}

/// `argmin sum |x_i - a_i|` subject to `|x_{i+1} - x_i| <= t`, by the slope
/// trick: the convex piecewise-linear cost-to-go is kept as two heaps of
/// breakpoints with lazy offsets, and the solution is recovered backwards by
/// clamping into each stage's minimizing interval.
pub fn bounded_travel_l1(a: &[f64], t: f64) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    // breakpoints are stored as ordered bit patterns of finite f64
    let key = |x: f64| OrderedF64(x);
    let mut lower: BinaryHeap<OrderedF64> = BinaryHeap::new();
    let mut upper: BinaryHeap<Reverse<OrderedF64>> = BinaryHeap::new();
    let (mut shift_lower, mut shift_upper) = (0.0f64, 0.0f64);
    let mut plateaus = Vec::with_capacity(a.len());
    for (i, &ai) in a.iter().enumerate() {
        if i > 0 {
            shift_lower -= t;
            shift_upper += t;
        }
        lower.push(key(ai - shift_lower));
        upper.push(Reverse(key(ai - shift_upper)));
        let lo = lower.peek().expect("non-empty").0 + shift_lower;
        let hi = upper.peek().expect("non-empty").0 .0 + shift_upper;
        if lo > hi {
            lower.pop();
            upper.pop();
            lower.push(key(hi - shift_lower));
            upper.push(Reverse(key(lo - shift_upper)));
        }
        let lo = lower.peek().expect("non-empty").0 + shift_lower;
        let hi = upper.peek().expect("non-empty").0 .0 + shift_upper;
        plateaus.push((lo, hi));
    }
    let mut x = vec![0.0; a.len()];
    let last = a.len() - 1;
    // lazy shifts can leave a degenerate plateau a rounding error inverted
    let into = |v: f64, lo: f64, hi: f64| v.max(lo.min(hi)).min(hi.max(lo));
    x[last] = into(a[last], plateaus[last].0, plateaus[last].1);
    for i in (0..last).rev() {
        let (lo, hi) = plateaus[i];
        x[i] = into(x[i + 1], lo, hi).clamp(x[i + 1] - t, x[i + 1] + t);
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrderedF64(f64);

impl Eq for OrderedF64 {}

impl PartialOrd for OrderedF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Per-CP fluence delivered by `plan`: MU times the covered fraction of each
/// pixel, after removing the plan's dosimetric leaf gap.
pub fn reconstruct_fluence<T: Scalar>(plan: &AperturePlan) -> Result<FluenceStack<T>> {
    plan.validate()?;
    let rows = plan.rows();
    let w = plan.width;
    let mut out = FluenceStack::zeros(plan.n_cp(), rows, w, plan.spacing);
    out.values.par_chunks_mut(rows * w).zip(plan.apertures.par_iter()).for_each(|(map, a)| {
        if !(a.mu > 0.0) {
            return;
        }
        for r in 0..rows {
            if !a.is_open(r) {
                continue;
            }
            let lo = plan.to_px(a.left[r] + 0.5 * plan.dlg);
            let hi = plan.to_px(a.right[r] - 0.5 * plan.dlg);
            if !(hi > lo) {
                continue;
            }
            let first = lo.floor().max(0.0) as usize;
            let last = (hi.ceil().min(w as f64)) as usize;
            for c in first..last {
                let cover = (hi.min((c + 1) as f64) - lo.max(c as f64)).clamp(0.0, 1.0);
                map[r * w + c] = T::of(a.mu * cover);
            }
        }
    });
    Ok(out)
}

/// Full sequencing of a fluence stack: per-CP apertures (parallel), sub-pixel
/// refinement, DLG, then leaf travel. `gantry_angles` labels the control
/// points.
pub fn sequence_plan<T: Scalar>(
    fluence: &FluenceStack<T>,
    gantry_angles: &[f64],
    config: &SequencerConfig,
) -> Result<(AperturePlan, TravelReport)> {
    config.validate()?;
    fluence.validate()?;
    if gantry_angles.len() != fluence.n_cp {
        return Err(Error::Shape(format!("{} gantry angles for {} control points", gantry_angles.len(), fluence.n_cp)));
    }
    if (config.mlc.leaf_width - fluence.spacing).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "leaf width {} mm does not match the {} mm BEV rows",
            config.mlc.leaf_width, fluence.spacing
        )));
    }
    let w = fluence.width;
    let candidates: Vec<Vec<Vec<(usize, usize)>>> =
        fluence.values.par_chunks(fluence.map_len()).map(|m| candidate_runs(m, w, config.threshold_frac)).collect();
    let mut apertures = Vec::with_capacity(fluence.n_cp);
    let mut centers = vec![0.0; fluence.height];
    for (cp, cand) in candidates.iter().enumerate() {
        let mut a = choose_aperture(fluence.slice(cp), w, fluence.spacing, cand, &centers, cp);
        a.gantry_angle = gantry_angles[cp];
        centers = a.centers();
        apertures.push(a);
    }
    if config.subpixel {
        apertures = apertures
            .par_iter()
            .enumerate()
            .map(|(cp, a)| refine_subpixel(a, fluence.slice(cp), w, fluence.spacing))
            .collect::<Result<Vec<_>>>()?;
    }
    let plan = AperturePlan {
        mlc: config.mlc.clone(),
        dlg: 0.0,
        max_travel_per_cp: config.max_travel_per_cp,
        width: w,
        spacing: fluence.spacing,
        apertures,
    };
    let plan = apply_dlg(&plan, config.dlg)?;
    enforce_leaf_travel(&plan, config.max_travel_per_cp)
}
