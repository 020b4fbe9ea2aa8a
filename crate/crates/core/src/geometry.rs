//! Arc and control-point geometry, and the parameter-free beam's-eye-view
//! (BEV) projection.
//!
//! Conventions (see also [`crate::grid`]):
//! * the source of control point `cp` sits at
//!   `isocenter + sad * (sin g, -cos g, 0)` for gantry angle `g`, so gantry 0
//!   irradiates from anterior (`-y`) toward posterior;
//! * the BEV raster lies on the isocenter plane, with `u = (cos g, sin g, 0)`
//!   along columns (leaf travel) and `v = +z` along rows (leaf pairs);
//!   a non-zero collimator angle rotates `(u, v)` about the beam axis;
//! * pixel `(row, col)` is centered at `u = (col + 0.5) * spacing - fov / 2`,
//!   `v = (row + 0.5) * spacing - fov / 2`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{bounding_box_where, Mask, VoxelGrid};
use crate::ray::{normalize, traverse, VoxelBox};
use crate::scalar::Scalar;

/// Sub-rays per pixel along each BEV axis used by [`project_to_bev`].
///
/// A 5 mm raster sampled by one ray per pixel can step over a 4 mm voxel
/// entirely; 2x2 sub-rays guarantee every voxel at the isocenter plane is seen.
pub const BEV_SUPERSAMPLE: usize = 2;

/// Geometry of a single VMAT control point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlPointGeometry {
    pub index: usize,
    /// degrees in `[0, 360)`
    pub gantry_angle: f64,
    /// degrees
    pub collimator_angle: f64,
    /// mm
    pub source_axis_distance: f64,
    /// mm, grid coordinates
    pub isocenter: [f64; 3],
    /// mm
    pub bev_spacing: f64,
    /// mm, side of the square field of view
    pub bev_fov: f64,
}

/// Parameters of a uniformly spaced single arc.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArcConfig {
    pub n_cp: usize,
    pub start_angle: f64,
    pub sad: f64,
    pub bev_spacing: f64,
    pub bev_fov: f64,
    pub collimator_angle: f64,
}

impl Default for ArcConfig {
    fn default() -> Self {
        Self { n_cp: 180, start_angle: 0.0, sad: 1000.0, bev_spacing: 5.0, bev_fov: 200.0, collimator_angle: 0.0 }
    }
}

impl ArcConfig {
    pub fn build(&self, isocenter: [f64; 3]) -> Result<Vec<ControlPointGeometry>> {
        let mut geoms =
            build_arc_geometry(self.n_cp, self.start_angle, self.sad, self.bev_spacing, self.bev_fov, isocenter)?;
        for g in &mut geoms {
            g.collimator_angle = self.collimator_angle;
        }
        Ok(geoms)
    }
}

/// `n_cp` control points spaced `360 / n_cp` degrees apart, starting at `start_angle`.
pub fn build_arc_geometry(
    n_cp: usize,
    start_angle: f64,
    sad: f64,
    bev_spacing: f64,
    bev_fov: f64,
    isocenter: [f64; 3],
) -> Result<Vec<ControlPointGeometry>> {
    if n_cp < 2 {
        return Err(Error::Config(format!("an arc needs at least 2 control points, got {n_cp}")));
    }
    if !(sad > 0.0) {
        return Err(Error::Config(format!("source-axis distance must be > 0, got {sad}")));
    }
    raster_size(bev_fov, bev_spacing)?;
    if isocenter.iter().any(|v| !v.is_finite()) || !start_angle.is_finite() {
        return Err(Error::Config("isocenter and start angle must be finite".into()));
    }
    let step = 360.0 / n_cp as f64;
    Ok((0..n_cp)
        .map(|i| ControlPointGeometry {
            index: i,
            gantry_angle: (start_angle + i as f64 * step).rem_euclid(360.0),
            collimator_angle: 0.0,
            source_axis_distance: sad,
            isocenter,
            bev_spacing,
            bev_fov,
        })
        .collect())
}

/// Number of BEV pixels per side; errors unless `fov / spacing` is integral.
pub fn raster_size(fov: f64, spacing: f64) -> Result<usize> {
    if !(spacing > 0.0) || !(fov > 0.0) {
        return Err(Error::Config(format!("BEV fov {fov} and spacing {spacing} must be > 0")));
    }
    let n = fov / spacing;
    let r = n.round();
    if (n - r).abs() > 1e-9 * n.max(1.0) || r < 1.0 {
        return Err(Error::Config(format!("BEV fov {fov} mm is not a multiple of spacing {spacing} mm")));
    }
    Ok(r as usize)
}

impl ControlPointGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.source_axis_distance > 0.0) {
            return Err(Error::Config(format!("control point {}: source-axis distance must be > 0", self.index)));
        }
        raster_size(self.bev_fov, self.bev_spacing).map(|_| ())
    }

    /// Pixels per side of the square BEV raster.
    pub fn raster(&self) -> usize {
        raster_size(self.bev_fov, self.bev_spacing).expect("validated geometry")
    }

    pub fn source(&self) -> [f64; 3] {
        let g = self.gantry_angle.to_radians();
        let sad = self.source_axis_distance;
        [self.isocenter[0] + sad * g.sin(), self.isocenter[1] - sad * g.cos(), self.isocenter[2]]
    }

    /// Unit vector from the source toward the isocenter.
    pub fn beam_axis(&self) -> [f64; 3] {
        let g = self.gantry_angle.to_radians();
        [-g.sin(), g.cos(), 0.0]
    }

    /// In-plane BEV axes `(u, v)` after collimator rotation.
    pub fn bev_axes(&self) -> ([f64; 3], [f64; 3]) {
        let g = self.gantry_angle.to_radians();
        let u0 = [g.cos(), g.sin(), 0.0];
        let v0 = [0.0, 0.0, 1.0];
        if self.collimator_angle == 0.0 {
            return (u0, v0);
        }
        let c = self.collimator_angle.to_radians();
        let (sc, cc) = c.sin_cos();
        let u = [cc * u0[0] + sc * v0[0], cc * u0[1] + sc * v0[1], cc * u0[2] + sc * v0[2]];
        let v = [-sc * u0[0] + cc * v0[0], -sc * u0[1] + cc * v0[1], -sc * u0[2] + cc * v0[2]];
        (u, v)
    }

    /// BEV coordinate (mm) of the center of pixel column / row `i`.
    #[inline]
    pub fn pixel_coord(&self, i: f64) -> f64 {
        (i + 0.5) * self.bev_spacing - self.bev_fov / 2.0
    }

    /// Point on the isocenter plane with BEV coordinates `(u, v)`.
    pub fn plane_point(&self, u: f64, v: f64) -> [f64; 3] {
        let (ua, va) = self.bev_axes();
        let c = self.isocenter;
        [c[0] + u * ua[0] + v * va[0], c[1] + u * ua[1] + v * va[1], c[2] + u * ua[2] + v * va[2]]
    }

    /// Unit direction of the ray from the source through BEV point `(u, v)`.
    pub fn ray_dir(&self, u: f64, v: f64) -> [f64; 3] {
        self.frame().ray_dir(u, v)
    }

    /// Precomputed source position and axes for casting many rays.
    pub fn frame(&self) -> BevFrame {
        let (u, v) = self.bev_axes();
        BevFrame { source: self.source(), isocenter: self.isocenter, u, v }
    }

    /// BEV coordinates where the ray from the source through `point` meets
    /// the isocenter plane, or `None` if the point is not downstream of the source.
    pub fn project_point(&self, point: [f64; 3]) -> Option<(f64, f64)> {
        let s = self.source();
        let axis = self.beam_axis();
        let (ua, va) = self.bev_axes();
        let d = [point[0] - s[0], point[1] - s[1], point[2] - s[2]];
        let depth = d[0] * axis[0] + d[1] * axis[1] + d[2] * axis[2];
        if depth <= 0.0 {
            return None;
        }
        let mag = self.source_axis_distance / depth;
        let u = (d[0] * ua[0] + d[1] * ua[1] + d[2] * ua[2]) * mag;
        let v = (d[0] * va[0] + d[1] * va[1] + d[2] * va[2]) * mag;
        Some((u, v))
    }

    fn same_raster(&self, other: &Self) -> bool {
        self.bev_spacing == other.bev_spacing && self.bev_fov == other.bev_fov
    }
}

/// Source and isocenter-plane axes of one control point.
#[derive(Debug, Clone, Copy)]
pub struct BevFrame {
    pub source: [f64; 3],
    pub isocenter: [f64; 3],
    pub u: [f64; 3],
    pub v: [f64; 3],
}

impl BevFrame {
    #[inline]
    pub fn ray_dir(&self, u: f64, v: f64) -> [f64; 3] {
        let (c, s, a, b) = (self.isocenter, self.source, self.u, self.v);
        normalize([
            c[0] + u * a[0] + v * b[0] - s[0],
            c[1] + u * a[1] + v * b[1] - s[1],
            c[2] + u * a[2] + v * b[2] - s[2],
        ])
    }
}

/// Stack of BEV images, one per control point, each `height x width`,
/// stored `[cp][row][col]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BevStack<T> {
    pub n_cp: usize,
    pub height: usize,
    pub width: usize,
    /// mm per pixel
    pub spacing: f64,
    pub values: Vec<T>,
}

impl<T: Scalar> BevStack<T> {
    pub fn zeros(n_cp: usize, height: usize, width: usize, spacing: f64) -> Self {
        Self { n_cp, height, width, spacing, values: vec![T::zero(); n_cp * height * width] }
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

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("BEV stack element {i}"))),
            None => Ok(()),
        }
    }
}

/// Divergent-beam line-integral projection of `volume` onto the BEV raster of
/// `geom` (value * mm per pixel). Each pixel averages
/// [`BEV_SUPERSAMPLE`]^2 rays through evenly spaced points of its footprint on
/// the isocenter plane. Rays that miss the volume yield zero.
pub fn project_to_bev<T: Scalar>(volume: &VoxelGrid<T>, geom: &ControlPointGeometry) -> Result<Vec<T>> {
    geom.validate()?;
    volume.check_finite("volume")?;
    let clip = support_box(volume);
    Ok(match clip {
        Some(clip) => project_clipped(volume, geom, clip),
        None => vec![T::zero(); geom.raster() * geom.raster()],
    })
}

/// Projects `volume` for every control point; slice `i` equals
/// `project_to_bev(volume, &geoms[i])`.
pub fn project_stack<T: Scalar>(volume: &VoxelGrid<T>, geoms: &[ControlPointGeometry]) -> Result<BevStack<T>> {
    let first = geoms.first().ok_or_else(|| Error::Argument("no control points to project".into()))?;
    for g in geoms {
        g.validate()?;
        if !g.same_raster(first) {
            return Err(Error::Config(format!(
                "control point {} has a different BEV raster than control point {}",
                g.index, first.index
            )));
        }
    }
    volume.check_finite("volume")?;
    let n = first.raster();
    let mut stack = BevStack::zeros(geoms.len(), n, n, first.bev_spacing);
    if let Some(clip) = support_box(volume) {
        stack
            .values
            .par_chunks_mut(n * n)
            .zip(geoms.par_iter())
            .for_each(|(out, g)| out.copy_from_slice(&project_clipped(volume, g, clip)));
    }
    Ok(stack)
}

/// Flags, for every control point and pixel (`[cp][row][col]`), whether the
/// pixel's central ray crosses a voxel of `mask`.
pub fn central_ray_hits(mask: &Mask, geoms: &[ControlPointGeometry]) -> Result<Vec<bool>> {
    let first = geoms.first().ok_or_else(|| Error::Argument("no control points".into()))?;
    for g in geoms {
        g.validate()?;
        if !g.same_raster(first) {
            return Err(Error::Config(format!("control point {} has a different BEV raster", g.index)));
        }
    }
    let n = first.raster();
    let mut hits = vec![false; geoms.len() * n * n];
    let Some((lo, hi)) = mask.bounding_box() else {
        return Ok(hits);
    };
    let clip = VoxelBox { lo, hi };
    hits.par_chunks_mut(n * n).zip(geoms.par_iter()).for_each(|(out, g)| {
        let frame = g.frame();
        for (k, o) in out.iter_mut().enumerate() {
            let dir = frame.ray_dir(g.pixel_coord((k % n) as f64), g.pixel_coord((k / n) as f64));
            traverse(&mask.geometry, clip, frame.source, dir, |idx, _, _| *o |= mask.values[idx]);
        }
    });
    Ok(hits)
}

/// Smallest box containing every non-zero voxel.
fn support_box<T: Scalar>(volume: &VoxelGrid<T>) -> Option<VoxelBox> {
    bounding_box_where(&volume.geometry, |i| volume.values[i] != T::zero()).map(|(lo, hi)| VoxelBox { lo, hi })
}

fn project_clipped<T: Scalar>(volume: &VoxelGrid<T>, geom: &ControlPointGeometry, clip: VoxelBox) -> Vec<T> {
    let n = geom.raster();
    let sub = BEV_SUPERSAMPLE;
    let frame = geom.frame();
    let weight = 1.0 / (sub * sub) as f64;
    let mut out = vec![T::zero(); n * n];
    for row in 0..n {
        for col in 0..n {
            let mut acc = 0.0f64;
            for sv in 0..sub {
                for su in 0..sub {
                    let u = geom.pixel_coord(col as f64 + (su as f64 + 0.5) / sub as f64 - 0.5);
                    let v = geom.pixel_coord(row as f64 + (sv as f64 + 0.5) / sub as f64 - 0.5);
                    let dir = frame.ray_dir(u, v);
                    traverse(&volume.geometry, clip, frame.source, dir, |idx, t0, t1| {
                        acc += volume.values[idx].f64() * (t1 - t0);
                    });
                }
            }
            out[row * n + col] = T::of(acc * weight);
        }
    }
    out
}
