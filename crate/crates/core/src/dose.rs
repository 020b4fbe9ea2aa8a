//! Linear forward dose operator and its exact adjoint.
//!
//! Every fluence pixel of every control point is a divergent beamlet: the
//! pyramid from the source through the pixel's square on the isocenter plane.
//! The beamlet is followed layer by layer along the grid axis most aligned
//! with its central ray. In each layer it carries
//!
//! ```text
//! output_factor * fluence * length * exp(-tau_mid) * (sad / r)^2
//! ```
//!
//! where `length` is the central ray's path through the layer, `r` the
//! source distance of the layer's mid-plane and `tau_mid` the radiological
//! depth from grid entry to that plane, with the attenuation of each layer
//! averaged over the beamlet's footprint. The layer's dose is shared among the
//! voxels the footprint (the bounding rectangle of the four corner rays on the
//! mid-plane) overlaps, in proportion to the overlap area. Abutting pixels
//! therefore tile the volume without the gaps or double hits a single line per
//! pixel would leave on a grid finer than the pixel pitch. The deposited dose
//! is then optionally convolved with a separable Gaussian of width
//! `kernel_sigma`. The weights are computed once and cached as a sparse
//! matrix, so forward and adjoint apply exactly the same numbers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{raster_size, BevFrame, BevStack, ControlPointGeometry};
use crate::grid::{GridGeometry, VoxelGrid};
use crate::scalar::Scalar;

/// Control points accumulated into one private dose buffer during the
/// forward scatter. Fixed so that the merge order never depends on the
/// number of worker threads.
const CP_CHUNK: usize = 12;

/// HU clip window before rescaling to `[0, 1]`.
pub const HU_CLIP: (f64, f64) = (-900.0, 900.0);

/// Per-control-point 2D fluence maps (arbitrary units proportional to MU),
/// stored `[cp][row][col]`. Values are non-negative and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FluenceStack<T> {
    pub n_cp: usize,
    pub height: usize,
    pub width: usize,
    /// mm per pixel at the isocenter plane
    pub spacing: f64,
    pub values: Vec<T>,
}

impl<T: Scalar> FluenceStack<T> {
    pub fn zeros(n_cp: usize, height: usize, width: usize, spacing: f64) -> Self {
        Self { n_cp, height, width, spacing, values: vec![T::zero(); n_cp * height * width] }
    }

    /// Zero stack shaped for an arc.
    pub fn for_arc(geoms: &[ControlPointGeometry]) -> Result<Self> {
        let g = geoms.first().ok_or_else(|| Error::Argument("empty arc".into()))?;
        let n = raster_size(g.bev_fov, g.bev_spacing)?;
        Ok(Self::zeros(geoms.len(), n, n, g.bev_spacing))
    }

    pub fn from_values(n_cp: usize, height: usize, width: usize, spacing: f64, values: Vec<T>) -> Result<Self> {
        if values.len() != n_cp * height * width {
            return Err(Error::Shape(format!(
                "fluence buffer has {} entries, expected {n_cp}x{height}x{width}",
                values.len()
            )));
        }
        let f = Self { n_cp, height, width, spacing, values };
        f.validate()?;
        Ok(f)
    }

    pub fn map_len(&self) -> usize {
        self.height * self.width
    }

    pub fn slice(&self, cp: usize) -> &[T] {
        let n = self.map_len();
        &self.values[cp * n..(cp + 1) * n]
    }

    pub fn slice_mut(&mut self, cp: usize) -> &mut [T] {
        let n = self.map_len();
        &mut self.values[cp * n..(cp + 1) * n]
    }

    /// Non-negative and finite.
    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("fluence element {i}")));
            }
            if *v < T::zero() {
                return Err(Error::Argument(format!("negative fluence {v} at element {i}")));
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n_cp == other.n_cp && self.height == other.height && self.width == other.width
    }

    pub fn scaled(&self, a: T) -> Self {
        Self {
            n_cp: self.n_cp,
            height: self.height,
            width: self.width,
            spacing: self.spacing,
            values: self.values.iter().map(|&v| v * a).collect(),
        }
    }

    pub fn total(&self) -> T {
        self.values.iter().fold(T::zero(), |a, &b| a + b)
    }

    pub fn into_bev(self) -> BevStack<T> {
        BevStack { n_cp: self.n_cp, height: self.height, width: self.width, spacing: self.spacing, values: self.values }
    }
}

/// Parameters of the analytic beam model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamModel {
    /// 1/mm, attenuation coefficient of water
    pub mu_water: f64,
    /// Gy per (fluence * mm)
    pub output_factor: f64,
    /// mm, width of the Gaussian applied to deposited dose; 0 disables it
    pub kernel_sigma: f64,
}

impl Default for BeamModel {
    fn default() -> Self {
        Self { mu_water: 0.005, output_factor: 0.1, kernel_sigma: 4.0 }
    }
}

impl BeamModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_water > 0.0) || !self.mu_water.is_finite() {
            return Err(Error::Config(format!("mu_water must be > 0, got {}", self.mu_water)));
        }
        if !(self.output_factor > 0.0) || !self.output_factor.is_finite() {
            return Err(Error::Config(format!("output_factor must be > 0, got {}", self.output_factor)));
        }
        if !(self.kernel_sigma >= 0.0) || !self.kernel_sigma.is_finite() {
            return Err(Error::Config(format!("kernel_sigma must be >= 0, got {}", self.kernel_sigma)));
        }
        Ok(())
    }

    /// Attenuation coefficient for a normalized CT value; water (0.5) maps to `mu_water`.
    #[inline]
    pub fn density_to_mu(&self, ct_norm: f64) -> f64 {
        (self.mu_water * (0.2 + 1.6 * ct_norm)).max(0.0)
    }
}

/// Clips HU to `[-900, 900]` and rescales linearly to `[0, 1]`.
pub fn ct_normalize<T: Scalar>(ct_hu: &VoxelGrid<T>) -> VoxelGrid<T> {
    let (lo, hi) = HU_CLIP;
    ct_hu.map(|&hu| T::of(hu.f64().clamp(lo, hi) / (hi - lo) + 0.5))
}

/// Sparse ray-trace operator `A` mapping a [`FluenceStack`] to dose.
///
/// Rays in the *support* (by default every ray) have their voxel weights
/// cached; any other ray is traced on demand with the same code, so results do
/// not depend on which rays are cached. Optimizers restrict themselves to the
/// support through [`Self::adjoint_on_support`].
#[derive(Debug, Clone)]
pub struct DoseOperator<T> {
    grid: GridGeometry,
    geoms: Vec<ControlPointGeometry>,
    model: BeamModel,
    mu: Vec<f64>,
    raster: usize,
    spacing: f64,
    /// ray -> cached slot, `u32::MAX` when not cached
    slot: Vec<u32>,
    slot_ptr: Vec<usize>,
    voxel: Vec<u32>,
    weight: Vec<T>,
    smoothing: Option<GaussianSmoother>,
}

const UNCACHED: u32 = u32::MAX;

impl<T: Scalar> DoseOperator<T> {
    /// Traces and caches every ray of every control point through `ct_norm`.
    pub fn new(ct_norm: &VoxelGrid<T>, geoms: &[ControlPointGeometry], model: &BeamModel) -> Result<Self> {
        Self::build(ct_norm, geoms, model, None)
    }

    /// Caches only the rays flagged in `support` (one flag per fluence pixel,
    /// `[cp][row][col]`).
    pub fn with_support(
        ct_norm: &VoxelGrid<T>,
        geoms: &[ControlPointGeometry],
        model: &BeamModel,
        support: &[bool],
    ) -> Result<Self> {
        Self::build(ct_norm, geoms, model, Some(support))
    }

    fn build(
        ct_norm: &VoxelGrid<T>,
        geoms: &[ControlPointGeometry],
        model: &BeamModel,
        support: Option<&[bool]>,
    ) -> Result<Self> {
        model.validate()?;
        ct_norm.check_finite("normalized CT")?;
        let first = geoms.first().ok_or_else(|| Error::Argument("no control points".into()))?;
        for g in geoms {
            g.validate()?;
            if g.bev_spacing != first.bev_spacing || g.bev_fov != first.bev_fov {
                return Err(Error::Config(format!("control point {} has a different BEV raster", g.index)));
            }
        }
        let raster = first.raster();
        let rays_per_cp = raster * raster;
        let n_rays = geoms.len() * rays_per_cp;
        if let Some(s) = support {
            if s.len() != n_rays {
                return Err(Error::Shape(format!("support has {} flags, arc has {n_rays} rays", s.len())));
            }
        }
        let grid = ct_norm.geometry;
        let mu: Vec<f64> = ct_norm.values.iter().map(|v| model.density_to_mu(v.f64())).collect();
        let cached = |ray: usize| support.is_none_or(|s| s[ray]);

        let per_cp: Vec<(Vec<usize>, Vec<u32>, Vec<T>)> = geoms
            .par_iter()
            .enumerate()
            .map(|(cp, g)| {
                let tracer = RayTracer::new(&grid, &mu, g, model);
                let (mut ends, mut vox, mut w) = (Vec::new(), Vec::new(), Vec::new());
                for k in 0..rays_per_cp {
                    if cached(cp * rays_per_cp + k) {
                        tracer.trace(k / raster, k % raster, |v, wt: T| {
                            vox.push(v as u32);
                            w.push(wt);
                        });
                        ends.push(vox.len());
                    }
                }
                (ends, vox, w)
            })
            .collect();

        let mut slot = vec![UNCACHED; n_rays];
        let mut next = 0u32;
        for (ray, s) in slot.iter_mut().enumerate() {
            if cached(ray) {
                *s = next;
                next += 1;
            }
        }
        let nnz: usize = per_cp.iter().map(|c| c.1.len()).sum();
        let mut slot_ptr = Vec::with_capacity(next as usize + 1);
        let mut voxel = Vec::with_capacity(nnz);
        let mut weight = Vec::with_capacity(nnz);
        slot_ptr.push(0);
        for (ends, vox, w) in per_cp {
            let base = voxel.len();
            slot_ptr.extend(ends.into_iter().map(|end| base + end));
            voxel.extend_from_slice(&vox);
            weight.extend_from_slice(&w);
        }

        let smoothing = (model.kernel_sigma > 0.0).then(|| GaussianSmoother::new(&grid, model.kernel_sigma));
        Ok(Self {
            grid,
            geoms: geoms.to_vec(),
            model: *model,
            mu,
            raster,
            spacing: first.bev_spacing,
            slot,
            slot_ptr,
            voxel,
            weight,
            smoothing,
        })
    }

    pub fn grid(&self) -> &GridGeometry {
        &self.grid
    }

    pub fn geoms(&self) -> &[ControlPointGeometry] {
        &self.geoms
    }

    pub fn n_cp(&self) -> usize {
        self.geoms.len()
    }

    pub fn raster(&self) -> usize {
        self.raster
    }

    /// Stored ray/voxel couplings.
    pub fn nnz(&self) -> usize {
        self.voxel.len()
    }

    /// Per-ray flag: weights cached.
    pub fn support(&self) -> Vec<bool> {
        self.slot.iter().map(|&s| s != UNCACHED).collect()
    }

    pub fn zero_fluence(&self) -> FluenceStack<T> {
        FluenceStack::zeros(self.n_cp(), self.raster, self.raster, self.spacing)
    }

    fn check_fluence_shape(&self, f: &FluenceStack<T>) -> Result<()> {
        if f.n_cp != self.n_cp() || f.height != self.raster || f.width != self.raster {
            return Err(Error::Shape(format!(
                "fluence {}x{}x{} does not match operator {}x{}x{}",
                f.n_cp,
                f.height,
                f.width,
                self.n_cp(),
                self.raster,
                self.raster
            )));
        }
        Ok(())
    }

    /// `D = A f`. Fluence must be non-negative.
    pub fn forward(&self, fluence: &FluenceStack<T>) -> Result<VoxelGrid<T>> {
        self.check_fluence_shape(fluence)?;
        fluence.validate()?;
        Ok(self.apply(&fluence.values))
    }

    /// `A f` without validation.
    pub(crate) fn apply(&self, f: &[T]) -> VoxelGrid<T> {
        let nvox = self.grid.len();
        let rays_per_cp = self.raster * self.raster;
        let n_cp = self.n_cp();
        let n_chunks = n_cp.div_ceil(CP_CHUNK);
        let partial: Vec<Vec<T>> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let mut buf = vec![T::zero(); nvox];
                for cp in c * CP_CHUNK..((c + 1) * CP_CHUNK).min(n_cp) {
                    let mut tracer = None;
                    for k in 0..rays_per_cp {
                        let ray = cp * rays_per_cp + k;
                        let fv = f[ray];
                        if fv == T::zero() {
                            continue;
                        }
                        match self.slot[ray] {
                            UNCACHED => {
                                let t = tracer.get_or_insert_with(|| {
                                    RayTracer::new(&self.grid, &self.mu, &self.geoms[cp], &self.model)
                                });
                                t.trace(k / self.raster, k % self.raster, |v, w: T| buf[v] += w * fv);
                            }
                            s => {
                                let (a, b) = (self.slot_ptr[s as usize], self.slot_ptr[s as usize + 1]);
                                for (&v, &w) in self.voxel[a..b].iter().zip(&self.weight[a..b]) {
                                    buf[v as usize] += w * fv;
                                }
                            }
                        }
                    }
                }
                buf
            })
            .collect();
        let mut iter = partial.into_iter();
        let mut dose = iter.next().unwrap_or_else(|| vec![T::zero(); nvox]);
        for buf in iter {
            for (d, b) in dose.iter_mut().zip(buf) {
                *d += b;
            }
        }
        if let Some(s) = &self.smoothing {
            s.apply(&self.grid, &mut dose);
        }
        VoxelGrid { geometry: self.grid, values: dose }
    }

    /// `A^T d`, the exact transpose of [`Self::forward`], for every ray.
    pub fn adjoint(&self, dose_like: &VoxelGrid<T>) -> Result<FluenceStack<T>> {
        self.grid.check_same(&dose_like.geometry, "adjoint input")?;
        dose_like.check_finite("adjoint input")?;
        let mut out = self.zero_fluence();
        out.values = self.apply_transpose(&dose_like.values, true);
        Ok(out)
    }

    /// `A^T d` on the cached rays; zero elsewhere.
    pub fn adjoint_on_support(&self, dose_like: &VoxelGrid<T>) -> Result<FluenceStack<T>> {
        self.grid.check_same(&dose_like.geometry, "adjoint input")?;
        dose_like.check_finite("adjoint input")?;
        let mut out = self.zero_fluence();
        out.values = self.apply_transpose(&dose_like.values, false);
        Ok(out)
    }

    pub(crate) fn apply_transpose(&self, d: &[T], all_rays: bool) -> Vec<T> {
        let smoothed;
        let d = match &self.smoothing {
            Some(s) => {
                let mut buf = d.to_vec();
                s.apply(&self.grid, &mut buf);
                smoothed = buf;
                &smoothed[..]
            }
            None => d,
        };
        let rays_per_cp = self.raster * self.raster;
        let mut out = vec![T::zero(); self.slot.len()];
        out.par_chunks_mut(rays_per_cp).enumerate().for_each(|(cp, chunk)| {
            let mut tracer = None;
            for (k, o) in chunk.iter_mut().enumerate() {
                let mut acc = T::zero();
                match self.slot[cp * rays_per_cp + k] {
                    UNCACHED if all_rays => {
                        let t = tracer
                            .get_or_insert_with(|| RayTracer::new(&self.grid, &self.mu, &self.geoms[cp], &self.model));
                        t.trace(k / self.raster, k % self.raster, |v, w: T| acc += w * d[v]);
                    }
                    UNCACHED => {}
                    s => {
                        let (a, b) = (self.slot_ptr[s as usize], self.slot_ptr[s as usize + 1]);
                        for (&v, &w) in self.voxel[a..b].iter().zip(&self.weight[a..b]) {
                            acc += w * d[v as usize];
                        }
                    }
                }
                *o = acc;
            }
        });
        out
    }
}

/// Computes the voxel weights of single pixels of one control point.
struct RayTracer<'a> {
    grid: &'a GridGeometry,
    mu: &'a [f64],
    geom: &'a ControlPointGeometry,
    frame: BevFrame,
    sad2: f64,
    output_factor: f64,
}

impl<'a> RayTracer<'a> {
    fn new(grid: &'a GridGeometry, mu: &'a [f64], geom: &'a ControlPointGeometry, model: &BeamModel) -> Self {
        Self {
            grid,
            mu,
            geom,
            frame: geom.frame(),
            sad2: geom.source_axis_distance * geom.source_axis_distance,
            output_factor: model.output_factor,
        }
    }

    /// Calls `emit` once per voxel reached by the pixel's footprint.
    fn trace<T: Scalar>(&self, row: usize, col: usize, mut emit: impl FnMut(usize, T)) {
        let (uc, vc) = (self.geom.pixel_coord(col as f64), self.geom.pixel_coord(row as f64));
        let h = 0.5 * self.geom.bev_spacing;
        let d = self.frame.ray_dir(uc, vc);
        let corners = [(uc - h, vc - h), (uc + h, vc - h), (uc - h, vc + h), (uc + h, vc + h)]
            .map(|(u, v)| self.frame.ray_dir(u, v));
        let a = (0..3).max_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs())).expect("three axes");
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        let src = self.frame.source;
        let (o, sp, dims) = (self.grid.origin, self.grid.spacing, self.grid.dims);
        let strides = [1, dims[0], dims[0] * dims[1]];
        let len = sp[a] / d[a].abs();

        let mut wb: Vec<(usize, f64)> = Vec::with_capacity(8);
        let mut wc: Vec<(usize, f64)> = Vec::with_capacity(8);
        let mut tau = 0.0f64;
        for step in 0..dims[a] {
            let n = if d[a] > 0.0 { step } else { dims[a] - 1 - step };
            let plane = o[a] + (n as f64 + 0.5) * sp[a];
            let t = (plane - src[a]) / d[a];
            if t <= 0.0 {
                continue;
            }
            let (mut b_lo, mut b_hi, mut c_lo, mut c_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for k in &corners {
                let tk = (plane - src[a]) / k[a];
                let (qb, qc) = (src[b] + tk * k[b], src[c] + tk * k[c]);
                b_lo = b_lo.min(qb);
                b_hi = b_hi.max(qb);
                c_lo = c_lo.min(qc);
                c_hi = c_hi.max(qc);
            }
            overlaps(b_lo, b_hi, o[b], sp[b], dims[b], &mut wb);
            overlaps(c_lo, c_hi, o[c], sp[c], dims[c], &mut wc);
            if wb.is_empty() || wc.is_empty() {
                continue;
            }
            let layer = n * strides[a];
            let mut mu_eff = 0.0;
            for &(k, fc) in &wc {
                for &(i, fb) in &wb {
                    mu_eff += fb * fc * self.mu[layer + i * strides[b] + k * strides[c]];
                }
            }
            let base = self.output_factor * len * (-(tau + 0.5 * mu_eff * len)).exp() * self.sad2 / (t * t);
            tau += mu_eff * len;
            for &(k, fc) in &wc {
                for &(i, fb) in &wb {
                    emit(layer + i * strides[b] + k * strides[c], T::of(base * fb * fc));
                }
            }
        }
    }
}

/// Fractions of `[lo, hi]` falling in each cell of the axis `origin + i * spacing`,
/// `i < n`. Parts outside the grid are dropped, not renormalized.
fn overlaps(lo: f64, hi: f64, origin: f64, spacing: f64, n: usize, out: &mut Vec<(usize, f64)>) {
    out.clear();
    let width = hi - lo;
    if !(width > 0.0) {
        return;
    }
    let first = ((lo - origin) / spacing).floor().max(0.0);
    let last = ((hi - origin) / spacing).floor().min(n as f64 - 1.0);
    if first > last {
        return;
    }
    for i in first as usize..=last as usize {
        let cell_lo = origin + i as f64 * spacing;
        let part = hi.min(cell_lo + spacing) - lo.max(cell_lo);
        if part > 0.0 {
            out.push((i, part / width));
        }
    }
}

/// Separable, truncated, normalized Gaussian with zero boundary handling.
/// Its matrix is symmetric, so it is its own adjoint.
#[derive(Debug, Clone)]
struct GaussianSmoother {
    kernels: [Vec<f64>; 3],
}

impl GaussianSmoother {
    fn new(grid: &GridGeometry, sigma_mm: f64) -> Self {
        let kernel = |spacing: f64| {
            let s = sigma_mm / spacing;
            let r = (3.0 * s).ceil() as isize;
            let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * s * s)).exp()).collect();
            let total: f64 = k.iter().sum();
            k.iter_mut().for_each(|v| *v /= total);
            k
        };
        Self { kernels: [kernel(grid.spacing[0]), kernel(grid.spacing[1]), kernel(grid.spacing[2])] }
    }

    fn apply<T: Scalar>(&self, grid: &GridGeometry, data: &mut [T]) {
        let [nx, ny, nz] = grid.dims;
        let strides = [1usize, nx, nx * ny];
        let lens = [nx, ny, nz];
        for axis in 0..3 {
            let k: Vec<T> = self.kernels[axis].iter().map(|&v| T::of(v)).collect();
            if k.len() == 1 {
                continue;
            }
            let src = data.to_vec();
            let r = (k.len() / 2) as isize;
            let n = lens[axis] as isize;
            let stride = strides[axis];
            data.par_chunks_mut(nx * ny).enumerate().for_each(|(kz, plane)| {
                for (off, out) in plane.iter_mut().enumerate() {
                    let idx = kz * nx * ny + off;
                    let pos = ((idx / stride) % lens[axis]) as isize;
                    let lo = (-r).max(-pos);
                    let hi = r.min(n - 1 - pos);
                    let mut acc = T::zero();
                    for d in lo..=hi {
                        let j = (idx as isize + d * stride as isize) as usize;
                        acc += k[(d + r) as usize] * src[j];
                    }
                    *out = acc;
                }
            });
        }
    }
}

/// One-shot `A f`; builds the operator for this call.
pub fn forward_dose<T: Scalar>(
    ct_norm: &VoxelGrid<T>,
    fluence: &FluenceStack<T>,
    geoms: &[ControlPointGeometry],
    model: &BeamModel,
) -> Result<VoxelGrid<T>> {
    DoseOperator::new(ct_norm, geoms, model)?.forward(fluence)
}

/// One-shot `A^T d`; callers must pass the same CT, geometry and model as the
/// paired forward call.
pub fn adjoint_dose<T: Scalar>(
    ct_norm: &VoxelGrid<T>,
    dose_like: &VoxelGrid<T>,
    geoms: &[ControlPointGeometry],
    model: &BeamModel,
) -> Result<FluenceStack<T>> {
    DoseOperator::new(ct_norm, geoms, model)?.adjoint(dose_like)
}
