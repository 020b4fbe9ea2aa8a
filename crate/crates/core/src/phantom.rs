//! Synthetic prostate-like phantoms and data augmentation.
//!
//! The phantom is an ellipsoidal water-equivalent body containing ellipsoidal
//! prostate (CTV), bladder and rectum surrogates. The PTV is the CTV grown by
//! a Euclidean margin. Organ centers are given in mm relative to the isocenter,
//! which is the center of the grid box. On even grids that is a voxel corner,
//! so the BEV pixels adjacent to the central axis pass through the voxels
//! around the isocenter at every gantry angle.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, Mask, VoxelGrid};
use crate::scalar::Scalar;

pub const PTV: &str = "PTV";
pub const CTV: &str = "CTV";
pub const BLADDER: &str = "Bladder";
pub const RECTUM: &str = "Rectum";
pub const BODY: &str = "Body";

/// HU assigned outside the body.
pub const AIR_HU: f64 = -1000.0;

/// Named binary masks on a common grid plus the prescription.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureSet {
    pub masks: BTreeMap<String, Mask>,
    /// Gy
    pub prescription_dose: f64,
}

impl StructureSet {
    pub fn get(&self, name: &str) -> Result<&Mask> {
        self.masks.get(name).ok_or_else(|| Error::Structure(format!("structure '{name}' not present")))
    }

    pub fn ptv(&self) -> Result<&Mask> {
        self.get(PTV)
    }

    pub fn body(&self) -> Result<&Mask> {
        self.get(BODY)
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        self.masks.values().next().map(|m| m.geometry).ok_or_else(|| Error::Structure("empty structure set".into()))
    }

    /// Shared grid, `CTV <= PTV <= Body`, non-empty PTV.
    pub fn validate(&self) -> Result<()> {
        let g = self.geometry()?;
        for (name, m) in &self.masks {
            m.geometry.check_same(&g, name)?;
        }
        let ptv = self.ptv()?;
        if ptv.count() == 0 {
            return Err(Error::Structure("PTV is empty".into()));
        }
        if !ptv.is_subset_of(self.body()?) {
            return Err(Error::Structure("PTV extends outside Body".into()));
        }
        if let Some(ctv) = self.masks.get(CTV) {
            if !ctv.is_subset_of(ptv) {
                return Err(Error::Structure("CTV is not contained in PTV".into()));
            }
        }
        if !(self.prescription_dose > 0.0) {
            return Err(Error::Structure("prescription dose must be > 0".into()));
        }
        Ok(())
    }

    /// Organs at risk present in the set.
    pub fn oar_names(&self) -> Vec<String> {
        [BLADDER, RECTUM].iter().filter(|n| self.masks.contains_key(**n)).map(|n| n.to_string()).collect()
    }
}

/// Ellipsoid given by its center offset from the isocenter and semi-axes (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, iso: [f64; 3], p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - iso[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Parameters of the synthetic phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// mm
    pub spacing: [f64; 3],
    /// mm, body ellipsoid centered on the isocenter
    pub body_semi_axes: [f64; 3],
    pub prostate: Ellipsoid,
    pub bladder: Ellipsoid,
    pub rectum: Ellipsoid,
    /// mm, CTV to PTV
    pub ptv_margin: f64,
    /// relative densities (water = 1)
    pub body_density: f64,
    pub prostate_density: f64,
    pub bladder_density: f64,
    pub rectum_density: f64,
    /// HU amplitude of the uniform texture noise inside the body
    pub noise_hu: f64,
    /// Gy
    pub prescription_dose: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing: [4.0; 3],
            body_semi_axes: [120.0, 90.0, 120.0],
            prostate: Ellipsoid { center: [0.0; 3], radii: [20.0, 18.0, 22.0] },
            bladder: Ellipsoid { center: [0.0, -30.0, 30.0], radii: [30.0, 24.0, 24.0] },
            rectum: Ellipsoid { center: [0.0, 27.0, -4.0], radii: [14.0, 13.0, 42.0] },
            ptv_margin: 3.0,
            body_density: 1.0,
            prostate_density: 1.04,
            bladder_density: 1.01,
            rectum_density: 0.95,
            noise_hu: 10.0,
            prescription_dose: 40.0,
            seed: 7,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[f64]| v.iter().all(|&x| x > 0.0 && x.is_finite());
        if !positive(&self.body_semi_axes) {
            return Err(Error::Config("body semi-axes must be > 0".into()));
        }
        for (name, e) in [("prostate", &self.prostate), ("bladder", &self.bladder), ("rectum", &self.rectum)] {
            if !positive(&e.radii) {
                return Err(Error::Config(format!("{name} radii must be > 0")));
            }
        }
        if !(self.ptv_margin >= 0.0) {
            return Err(Error::Config("ptv_margin must be >= 0".into()));
        }
        if !(self.prescription_dose > 0.0) {
            return Err(Error::Config("prescription_dose must be > 0".into()));
        }
        let densities = [self.body_density, self.prostate_density, self.bladder_density, self.rectum_density];
        if densities.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::Config("densities must be finite and >= 0".into()));
        }
        GridGeometry::new(self.dims, self.spacing, [0.0; 3]).map(|_| ())
    }

    /// Grid centered on the coordinate origin.
    pub fn grid(&self) -> Result<GridGeometry> {
        let origin = [0, 1, 2].map(|a| -(self.dims[a] as f64) * self.spacing[a] / 2.0);
        GridGeometry::new(self.dims, self.spacing, origin)
    }
}

/// Generated CT (HU), structures, and the isocenter used to build the arc.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom<T> {
    pub ct: VoxelGrid<T>,
    pub structures: StructureSet,
    pub isocenter: [f64; 3],
}

fn density_to_hu(rho: f64) -> f64 {
    1000.0 * (rho - 1.0)
}

/// Deterministic phantom for `spec` (the seed only drives texture noise).
pub fn generate_phantom<T: Scalar>(spec: &PhantomSpec) -> Result<Phantom<T>> {
    spec.validate()?;
    let grid = spec.grid()?;
    let iso = grid.box_center();
    let body_e = Ellipsoid { center: [0.0; 3], radii: spec.body_semi_axes };

    let mut body = Mask::empty(grid);
    let mut prostate = Mask::empty(grid);
    let mut bladder = Mask::empty(grid);
    let mut rectum = Mask::empty(grid);
    for idx in 0..grid.len() {
        let p = grid.center_of(idx);
        body.values[idx] = body_e.contains(iso, p);
        prostate.values[idx] = spec.prostate.contains(iso, p);
        bladder.values[idx] = spec.bladder.contains(iso, p);
        rectum.values[idx] = spec.rectum.contains(iso, p);
    }
    for (name, m) in [("prostate", &prostate), ("bladder", &bladder), ("rectum", &rectum)] {
        if m.count() == 0 {
            return Err(Error::Config(format!("{name} does not cover any voxel")));
        }
        if !m.is_subset_of(&body) {
            return Err(Error::Config(format!("{name} extends outside the body")));
        }
    }
    let ptv = dilate_margin(&prostate, spec.ptv_margin)?;
    if !ptv.is_subset_of(&body) {
        return Err(Error::Config("PTV extends outside the body".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ct = VoxelGrid::filled(grid, T::of(AIR_HU));
    for idx in 0..grid.len() {
        // One draw per voxel keeps the noise field independent of organ layout.
        let noise = (rng.random::<f64>() * 2.0 - 1.0) * spec.noise_hu;
        if !body.values[idx] {
            continue;
        }
        let rho = if prostate.values[idx] {
            spec.prostate_density
        } else if bladder.values[idx] {
            spec.bladder_density
        } else if rectum.values[idx] {
            spec.rectum_density
        } else {
            spec.body_density
        };
        ct.values[idx] = T::of(density_to_hu(rho) + noise);
    }

    let mut masks = BTreeMap::new();
    masks.insert(PTV.to_string(), ptv);
    masks.insert(CTV.to_string(), prostate);
    masks.insert(BLADDER.to_string(), bladder);
    masks.insert(RECTUM.to_string(), rectum);
    masks.insert(BODY.to_string(), body);
    let structures = StructureSet { masks, prescription_dose: spec.prescription_dose };
    structures.validate()?;
    Ok(Phantom { ct, structures, isocenter: iso })
}

/// All voxels whose centers lie within Euclidean distance `margin` (mm) of a
/// voxel center of `mask`.
pub fn dilate_margin(mask: &Mask, margin: f64) -> Result<Mask> {
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(Error::Argument(format!("margin must be a finite value >= 0, got {margin}")));
    }
    if margin == 0.0 {
        return Ok(mask.clone());
    }
    let g = mask.geometry;
    let [nx, ny, nz] = g.dims;
    let reach = [0, 1, 2].map(|a| (margin / g.spacing[a]).floor() as isize);
    let limit = margin * margin * (1.0 + 1e-12);
    let mut offsets = Vec::new();
    for dk in -reach[2]..=reach[2] {
        for dj in -reach[1]..=reach[1] {
            for di in -reach[0]..=reach[0] {
                let d2 = (di as f64 * g.spacing[0]).powi(2)
                    + (dj as f64 * g.spacing[1]).powi(2)
                    + (dk as f64 * g.spacing[2]).powi(2);
                if d2 <= limit {
                    offsets.push([di, dj, dk]);
                }
            }
        }
    }

    // The voxel nearest to any outside point is always a boundary voxel, so
    // stamping the ball from boundary voxels alone is exact.
    let inside = |i: isize, j: isize, k: isize| {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < nx
            && (j as usize) < ny
            && (k as usize) < nz
            && mask.values[g.index(i as usize, j as usize, k as usize)]
    };
    let mut out = mask.clone();
    for idx in mask.indices() {
        let [i, j, k] = g.coords(idx).map(|c| c as isize);
        let boundary = !(inside(i - 1, j, k)
            && inside(i + 1, j, k)
            && inside(i, j - 1, k)
            && inside(i, j + 1, k)
            && inside(i, j, k - 1)
            && inside(i, j, k + 1));
        if !boundary {
            continue;
        }
        for o in &offsets {
            let (a, b, c) = (i + o[0], j + o[1], k + o[2]);
            if a >= 0 && b >= 0 && c >= 0 && (a as usize) < nx && (b as usize) < ny && (c as usize) < nz {
                out.values[g.index(a as usize, b as usize, c as usize)] = true;
            }
        }
    }
    Ok(out)
}

/// Augmentation transform ranges; each transform fires independently with
/// `per_transform_probability`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// fractional size change, e.g. `[-0.2, 0.2]`
    pub scale_range: [f64; 2],
    /// degrees about the superior-inferior axis through the isocenter
    pub rotation_range: [f64; 2],
    /// mm of extra PTV margin
    pub ptv_margin_range: [f64; 2],
    /// mm of rectum dilation
    pub rectum_margin_range: [f64; 2],
    pub per_transform_probability: f64,
    pub rounds: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            scale_range: [-0.20, 0.20],
            rotation_range: [-5.0, 5.0],
            ptv_margin_range: [3.0, 6.0],
            rectum_margin_range: [0.0, 5.0],
            per_transform_probability: 0.5,
            rounds: 10,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("scale_range", self.scale_range),
            ("rotation_range", self.rotation_range),
            ("ptv_margin_range", self.ptv_margin_range),
            ("rectum_margin_range", self.rectum_margin_range),
        ] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(Error::Config(format!("{name} must be an ordered finite pair, got {r:?}")));
            }
        }
        if self.scale_range[0] <= -1.0 {
            return Err(Error::Config("scale_range must stay above -1".into()));
        }
        if self.ptv_margin_range[0] < 0.0 || self.rectum_margin_range[0] < 0.0 {
            return Err(Error::Config("margin ranges must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.per_transform_probability) {
            return Err(Error::Config("per_transform_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Which transforms fired and with what value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AppliedTransforms {
    pub scale: Option<f64>,
    pub rotation_deg: Option<f64>,
    pub ptv_margin: Option<f64>,
    pub rectum_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented<T> {
    pub ct: VoxelGrid<T>,
    pub structures: StructureSet,
    pub applied: AppliedTransforms,
}

/// Random scale / rotation / margin augmentation, deterministic per seed.
/// CT is resampled trilinearly, masks by nearest neighbor, both with the same
/// transform about the isocenter voxel.
pub fn augment<T: Scalar>(
    ct: &VoxelGrid<T>,
    structures: &StructureSet,
    params: &AugmentParams,
    seed: u64,
) -> Result<Augmented<T>> {
    params.validate()?;
    structures.validate()?;
    ct.geometry.check_same(&structures.geometry()?, "CT vs structures")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |range: [f64; 2]| {
        let fire = rng.random::<f64>() < params.per_transform_probability;
        let u = rng.random::<f64>();
        fire.then_some(range[0] + u * (range[1] - range[0]))
    };
    let applied = AppliedTransforms {
        scale: draw(params.scale_range),
        rotation_deg: draw(params.rotation_range),
        ptv_margin: draw(params.ptv_margin_range),
        rectum_margin: draw(params.rectum_margin_range),
    };

    let (mut ct_out, mut masks) = (ct.clone(), structures.masks.clone());
    if applied.scale.is_some() || applied.rotation_deg.is_some() {
        let map =
            AffineResample::new(&ct.geometry, 1.0 + applied.scale.unwrap_or(0.0), applied.rotation_deg.unwrap_or(0.0));
        ct_out = map.resample_linear(ct, T::of(AIR_HU));
        masks = masks.into_iter().map(|(k, m)| (k, map.resample_nearest(&m))).collect();
    }
    let body = masks.get(BODY).cloned().ok_or_else(|| Error::Structure("Body missing".into()))?;
    if let Some(m) = applied.ptv_margin {
        let grown = dilate_margin(masks.get(PTV).expect("validated"), m)?.intersection(&body)?;
        masks.insert(PTV.to_string(), grown);
    }
    if let Some(m) = applied.rectum_margin {
        if let Some(rect) = masks.get(RECTUM) {
            let grown = dilate_margin(rect, m)?.intersection(&body)?;
            masks.insert(RECTUM.to_string(), grown);
        }
    }
    let out = StructureSet { masks, prescription_dose: structures.prescription_dose };
    if out.ptv()?.count() == 0 {
        return Err(Error::Augmentation(format!("PTV vanished under {applied:?}")));
    }
    out.validate().map_err(|e| Error::Augmentation(e.to_string()))?;
    Ok(Augmented { ct: ct_out, structures: out, applied })
}

/// `params.rounds` augmented variants with seeds `seed, seed + 1, ...`.
pub fn augment_rounds<T: Scalar>(
    ct: &VoxelGrid<T>,
    structures: &StructureSet,
    params: &AugmentParams,
    seed: u64,
) -> Vec<Result<Augmented<T>>> {
    (0..params.rounds as u64).map(|r| augment(ct, structures, params, seed.wrapping_add(r))).collect()
}

/// Inverse mapping of output voxel centers into the input grid for a uniform
/// scale followed by a rotation about `z`, both about the isocenter voxel.
struct AffineResample {
    geometry: GridGeometry,
    pivot: [f64; 3],
    inv_scale: f64,
    cos: f64,
    sin: f64,
}

impl AffineResample {
    fn new(geometry: &GridGeometry, scale: f64, rotation_deg: f64) -> Self {
        let (sin, cos) = rotation_deg.to_radians().sin_cos();
        Self { geometry: *geometry, pivot: geometry.box_center(), inv_scale: 1.0 / scale, cos, sin }
    }

    /// Source position, in continuous voxel-index units, of output voxel `idx`.
    fn source_index(&self, idx: usize) -> [f64; 3] {
        let p = self.geometry.center_of(idx);
        let d = [p[0] - self.pivot[0], p[1] - self.pivot[1], p[2] - self.pivot[2]];
        // inverse rotation, then inverse scale
        let r = [self.cos * d[0] + self.sin * d[1], -self.sin * d[0] + self.cos * d[1], d[2]];
        let q = [0, 1, 2].map(|a| self.pivot[a] + r[a] * self.inv_scale);
        [0, 1, 2].map(|a| (q[a] - self.geometry.origin[a]) / self.geometry.spacing[a] - 0.5)
    }

    fn resample_nearest(&self, m: &Mask) -> Mask {
        let g = &self.geometry;
        let mut out = Mask::empty(*g);
        for idx in 0..g.len() {
            let s = self.source_index(idx);
            let r = s.map(|c| c.round());
            if (0..3).all(|a| r[a] >= 0.0 && r[a] < g.dims[a] as f64) {
                out.values[idx] = m.values[g.index(r[0] as usize, r[1] as usize, r[2] as usize)];
            }
        }
        out
    }

    fn resample_linear<T: Scalar>(&self, v: &VoxelGrid<T>, fill: T) -> VoxelGrid<T> {
        let g = &self.geometry;
        let sample = |i: isize, j: isize, k: isize| {
            if i < 0 || j < 0 || k < 0 || i as usize >= g.dims[0] || j as usize >= g.dims[1] || k as usize >= g.dims[2]
            {
                fill.f64()
            } else {
                v.values[g.index(i as usize, j as usize, k as usize)].f64()
            }
        };
        let mut out = VoxelGrid::filled(*g, fill);
        for idx in 0..g.len() {
            let s = self.source_index(idx);
            let base = s.map(|c| c.floor());
            let frac = [s[0] - base[0], s[1] - base[1], s[2] - base[2]];
            let b = base.map(|c| c as isize);
            let mut acc = 0.0;
            for corner in 0..8 {
                let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                let w: f64 = (0..3).map(|a| if o[a] == 1 { frac[a] } else { 1.0 - frac[a] }).product();
                if w != 0.0 {
                    acc += w * sample(b[0] + o[0] as isize, b[1] + o[1] as isize, b[2] + o[2] as isize);
                }
            }
            out.values[idx] = T::of(acc);
        }
        out
    }
}
