//! Dose-feedback fluence optimization.
//!
//! Projected gradient descent on `Phi(f) = J(A f) + R(f)` over `f >= 0`, where
//! `J` is the planning [`Objective`], `A` the [`DoseOperator`] and `R` the
//! deliverability regularizer. Steps are Barzilai-Borwein with Armijo
//! backtracking, so accepted iterates never increase `Phi`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dose::{DoseOperator, FluenceStack};
use crate::error::{Error, Result};
use crate::geometry::{central_ray_hits, ControlPointGeometry};
use crate::grid::{Mask, VoxelGrid};
use crate::objective::Objective;
use crate::phantom::{dilate_margin, StructureSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// first trial step; `None` uses the Cauchy step of the quadratic model
    pub initial_step: Option<f64>,
    pub shrink: f64,
    /// Armijo sufficient-decrease constant
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
    /// stop when the relative decrease of `Phi` falls below this
    pub tol: f64,
    pub two_level_weight: f64,
    pub smoothness_weight: f64,
    /// fraction of the per-map maximum defining the "open" pixels of the
    /// two-level term
    pub two_level_threshold: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 25,
            initial_step: None,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 40,
            tol: 1e-5,
            two_level_weight: 0.0,
            smoothness_weight: 0.0,
            two_level_threshold: 0.5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if let Some(s) = self.initial_step {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("initial_step must be > 0, got {s}")));
            }
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Config(format!("shrink must lie in (0, 1), got {}", self.shrink)));
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0) {
            return Err(Error::Config("sufficient_decrease must lie in (0, 1)".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("tol must be >= 0".into()));
        }
        if !(self.two_level_weight >= 0.0) || !(self.smoothness_weight >= 0.0) {
            return Err(Error::Config("regularizer weights must be >= 0".into()));
        }
        if !(self.two_level_threshold > 0.0 && self.two_level_threshold < 1.0) {
            return Err(Error::Config("two_level_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn regularizer(&self) -> Regularizer {
        Regularizer {
            smoothness_weight: self.smoothness_weight,
            two_level_weight: self.two_level_weight,
            threshold: self.two_level_threshold,
        }
    }
}

/// `smoothness_weight * TV(f) + two_level_weight * sum min(f, |f - m|)^2`,
/// where TV is the anisotropic total variation within each map and `m` is the
/// mean of the map's pixels at or above `threshold * max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularizer {
    pub smoothness_weight: f64,
    pub two_level_weight: f64,
    pub threshold: f64,
}

impl Regularizer {
    pub fn is_zero(&self) -> bool {
        self.smoothness_weight == 0.0 && self.two_level_weight == 0.0
    }

    pub fn value<T: Scalar>(&self, f: &FluenceStack<T>) -> T {
        if self.is_zero() {
            return T::zero();
        }
        let per_cp: Vec<T> = f.values.par_chunks(f.map_len()).map(|m| self.map_value(m, f.width)).collect();
        per_cp.into_iter().fold(T::zero(), |a, b| a + b)
    }

    /// Value and exact gradient (subgradient 0 at kinks).
    pub fn value_and_gradient<T: Scalar>(&self, f: &FluenceStack<T>) -> (T, FluenceStack<T>) {
        let mut grad = FluenceStack::zeros(f.n_cp, f.height, f.width, f.spacing);
        if self.is_zero() {
            return (T::zero(), grad);
        }
        let per_cp: Vec<T> = f
            .values
            .par_chunks(f.map_len())
            .zip(grad.values.par_chunks_mut(f.map_len()))
            .map(|(m, g)| self.map_gradient(m, f.width, g))
            .collect();
        (per_cp.into_iter().fold(T::zero(), |a, b| a + b), grad)
    }

    fn map_value<T: Scalar>(&self, m: &[T], width: usize) -> T {
        let mut tv = T::zero();
        if self.smoothness_weight > 0.0 {
            for (k, &x) in m.iter().enumerate() {
                if k % width + 1 < width {
                    tv += (x - m[k + 1]).abs();
                }
                if k + width < m.len() {
                    tv += (x - m[k + width]).abs();
                }
            }
        }
        let mut two = T::zero();
        if self.two_level_weight > 0.0 {
            if let Some((level, _, _)) = open_level(m, self.threshold) {
                for &x in m {
                    let d = (x - level).abs();
                    let t = if x < d { x } else { d };
                    two += t * t;
                }
            }
        }
        T::of(self.smoothness_weight) * tv + T::of(self.two_level_weight) * two
    }

    fn map_gradient<T: Scalar>(&self, m: &[T], width: usize, g: &mut [T]) -> T {
        let ws = T::of(self.smoothness_weight);
        let wt = T::of(self.two_level_weight);
        let mut tv = T::zero();
        if self.smoothness_weight > 0.0 {
            let mut pair = |a: usize, b: usize| {
                let d = m[a] - m[b];
                tv += d.abs();
                let s = sign(d) * ws;
                g[a] += s;
                g[b] -= s;
            };
            for k in 0..m.len() {
                if k % width + 1 < width {
                    pair(k, k + 1);
                }
                if k + width < m.len() {
                    pair(k, k + width);
                }
            }
        }
        let mut two = T::zero();
        if self.two_level_weight > 0.0 {
            if let Some((level, open, cut)) = open_level(m, self.threshold) {
                let two_w = T::of(2.0) * wt;
                // d/dm of sum (x - m)^2 over pixels on the upper branch
                let mut dlevel = T::zero();
                for (k, &x) in m.iter().enumerate() {
                    let dev = x - level;
                    let d = dev.abs();
                    if x < d {
                        two += x * x;
                        g[k] += two_w * x;
                    } else if d < x {
                        two += d * d;
                        g[k] += two_w * dev;
                        dlevel -= two_w * dev;
                    } else {
                        two += x * x;
                    }
                }
                let share = dlevel / T::of(open as f64);
                for (k, &x) in m.iter().enumerate() {
                    if x >= cut {
                        g[k] += share;
                    }
                }
            }
        }
        ws * tv + wt * two
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn max_of<T: Scalar>(m: &[T]) -> T {
    m.iter().fold(T::zero(), |a, &b| if b > a { b } else { a })
}

/// Mean, count and cutoff of the pixels at or above `threshold * max`; `None`
/// for an all-zero map.
fn open_level<T: Scalar>(m: &[T], threshold: f64) -> Option<(T, usize, T)> {
    let max = max_of(m);
    if max <= T::zero() {
        return None;
    }
    let cut = T::of(threshold) * max;
    let (mut sum, mut n) = (T::zero(), 0usize);
    for &x in m {
        if x >= cut {
            sum += x;
            n += 1;
        }
    }
    Some((sum / T::of(n as f64), n, cut))
}

/// Regularizer value and gradient for `config`'s weights.
pub fn deliverability_reg<T: Scalar>(f: &FluenceStack<T>, config: &OptimizerConfig) -> Result<(T, FluenceStack<T>)> {
    f.validate()?;
    Ok(config.regularizer().value_and_gradient(f))
}

/// Pixels whose central ray crosses the PTV grown by `margin` mm.
pub fn target_rays(ptv: &Mask, geoms: &[ControlPointGeometry], margin: f64) -> Result<Vec<bool>> {
    if ptv.count() == 0 {
        return Err(Error::Structure("PTV is empty".into()));
    }
    central_ray_hits(&dilate_margin(ptv, margin)?, geoms)
}

/// Conformal starting point of the optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal<T> {
    pub fluence: FluenceStack<T>,
    /// control points from which no ray sees the target (zero maps)
    pub blind_control_points: Vec<usize>,
    /// factor applied to the unit apertures
    pub scale: f64,
}

/// Unit fluence on every pixel whose ray crosses the PTV grown by `margin`,
/// scaled so the mean PTV dose equals `rx`.
pub fn propose_initial_fluence<T: Scalar>(
    op: &DoseOperator<T>,
    structures: &StructureSet,
    margin: f64,
    rx: f64,
) -> Result<Proposal<T>> {
    if !(rx > 0.0) {
        return Err(Error::Argument(format!("prescription must be > 0, got {rx}")));
    }
    let ptv = structures.ptv()?;
    op.grid().check_same(&ptv.geometry, "structures vs operator")?;
    let hits = target_rays(ptv, op.geoms(), margin)?;
    let mut f = op.zero_fluence();
    for (v, &h) in f.values.iter_mut().zip(&hits) {
        if h {
            *v = T::one();
        }
    }
    let map_len = f.map_len();
    let blind: Vec<usize> = (0..f.n_cp).filter(|&cp| !hits[cp * map_len..(cp + 1) * map_len].contains(&true)).collect();
    let dose = op.forward(&f)?;
    let mean = mean_over(&dose, ptv);
    if !(mean > 0.0) {
        return Err(Error::Structure("proposal delivers no dose to the PTV".into()));
    }
    let scale = rx / mean;
    Ok(Proposal { fluence: f.scaled(T::of(scale)), blind_control_points: blind, scale })
}

fn mean_over<T: Scalar>(dose: &VoxelGrid<T>, mask: &Mask) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (v, &m) in dose.values.iter().zip(&mask.values) {
        if m {
            s += v.f64();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Optimized fluence, its dose, and the descent history.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningResult<T> {
    pub fluence: FluenceStack<T>,
    pub dose: VoxelGrid<T>,
    /// `Phi` at the start and after every accepted step
    pub objective_trace: Vec<f64>,
    pub iterations_used: usize,
    /// forward dose evaluations, including line-search trials
    pub forward_evaluations: usize,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x.f64() * y.f64())
}

struct Point<T> {
    f: FluenceStack<T>,
    dose: VoxelGrid<T>,
    phi: f64,
}

/// Runs the feedback iterations from `fluence0`. Pixels outside the operator's
/// cached support keep their initial values. The objective's references must
/// already be frozen.
pub fn feedback_correct<T: Scalar>(
    op: &DoseOperator<T>,
    fluence0: &FluenceStack<T>,
    objective: &Objective<T>,
    config: &OptimizerConfig,
) -> Result<PlanningResult<T>> {
    config.validate()?;
    fluence0.validate()?;
    if !objective.is_frozen() {
        return Err(Error::State("objective references must be frozen before optimizing".into()));
    }
    if fluence0.values.iter().all(|&v| v == T::zero()) {
        return Err(Error::Argument("initial fluence is identically zero".into()));
    }
    let reg = config.regularizer();
    let free = op.support();
    if free.len() != fluence0.values.len() {
        return Err(Error::Shape("fluence does not match the operator".into()));
    }

    let forward_evaluations = std::cell::Cell::new(0usize);
    let evaluate = |f: FluenceStack<T>| -> Result<(Point<T>, VoxelGrid<T>)> {
        forward_evaluations.set(forward_evaluations.get() + 1);
        let dose = op.apply(&f.values);
        let (j, e) = objective.value_and_error(&dose)?;
        let phi = j.f64() + reg.value(&f).f64();
        if !phi.is_finite() {
            return Err(Error::NonFinite("objective became non-finite".into()));
        }
        Ok((Point { f, dose, phi }, e))
    };
    let gradient = |p: &Point<T>, e: &VoxelGrid<T>| -> Result<Vec<T>> {
        let mut g = op.adjoint_on_support(e)?.values;
        let (_, rg) = reg.value_and_gradient(&p.f);
        for ((gi, ri), &fr) in g.iter_mut().zip(rg.values).zip(&free) {
            *gi = if fr { *gi + ri } else { T::zero() };
        }
        Ok(g)
    };

    let (mut cur, e0) = evaluate(fluence0.clone())?;
    let mut g = gradient(&cur, &e0)?;
    let mut trace = vec![cur.phi];
    let mut step = match config.initial_step {
        Some(s) => s,
        None => {
            let gg = dot(&g, &g);
            let ag = op.apply(&g);
            forward_evaluations.set(forward_evaluations.get() + 1);
            let agag = dot(&ag.values, &ag.values);
            if agag > 0.0 {
                gg / agag
            } else {
                1.0
            }
        }
    };

    let mut iterations_used = 0;
    for _ in 0..config.max_iters {
        iterations_used += 1;
        let mut accepted = None;
        for _ in 0..=config.max_backtracks {
            let eta = T::of(step);
            let mut trial = cur.f.clone();
            let mut moved = false;
            for ((t, &gi), &fr) in trial.values.iter_mut().zip(&g).zip(&free) {
                if fr {
                    let next = (*t - eta * gi).relu();
                    moved |= next != *t;
                    *t = next;
                }
            }
            if !moved {
                break;
            }
            let decrease: f64 = trial
                .values
                .iter()
                .zip(&cur.f.values)
                .zip(&g)
                .fold(0.0, |acc, ((&a, &b), &gi)| acc + gi.f64() * (a - b).f64());
            let (cand, e) = evaluate(trial)?;
            if cand.phi <= cur.phi + config.sufficient_decrease * decrease {
                accepted = Some((cand, e));
                break;
            }
            step *= config.shrink;
        }
        let Some((next, e)) = accepted else {
            break;
        };
        let g_next = gradient(&next, &e)?;
        let s_vec: Vec<f64> = next.f.values.iter().zip(&cur.f.values).map(|(a, b)| a.f64() - b.f64()).collect();
        let ss: f64 = s_vec.iter().map(|x| x * x).sum();
        let sy: f64 = s_vec.iter().zip(g_next.iter().zip(&g)).map(|(s, (a, b))| s * (a.f64() - b.f64())).sum();
        step = if sy > 0.0 { ss / sy } else { step * 2.0 };
        let relative = (cur.phi - next.phi) / cur.phi.abs().max(f64::MIN_POSITIVE);
        trace.push(next.phi);
        cur = next;
        g = g_next;
        if relative < config.tol {
            break;
        }
    }

    Ok(PlanningResult {
        fluence: cur.f,
        dose: cur.dose,
        objective_trace: trace,
        iterations_used,
        forward_evaluations: forward_evaluations.get(),
    })
}
