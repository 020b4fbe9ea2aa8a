//! Voxel grids.
//!
//! Values are stored row-major with `x` fastest: the linear index of voxel
//! `(i, j, k)` is `(k * ny + j) * nx + i`, i.e. the logical shape is
//! `[nz, ny, nx]`. Voxel `(i, j, k)` occupies the box
//! `origin + [i, j, k] * spacing .. origin + [i + 1, j + 1, k + 1] * spacing`
//! (mm), so `origin` is the outer corner of the first voxel, not its center.
//!
//! Patient axes: `x` left-right, `y` anterior-posterior (posterior positive),
//! `z` inferior-superior (superior positive). The gantry rotates in the `x-y`
//! plane.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sampling lattice shared by CT, dose, masks and error maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    /// `[nx, ny, nz]`
    pub dims: [usize; 3],
    /// mm per voxel along each axis.
    pub spacing: [f64; 3],
    /// mm, corner of voxel `(0, 0, 0)`.
    pub origin: [f64; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Config(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("grid spacing must be > 0, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        if dims.iter().product::<usize>() > u32::MAX as usize {
            return Err(Error::Config("grid too large for 32-bit voxel indices".into()));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Cubic grid of `n^3` voxels centered on the coordinate origin.
    pub fn centered_cube(n: usize, spacing: f64) -> Result<Self> {
        let half = -(n as f64) * spacing / 2.0;
        Self::new([n; 3], [spacing; 3], [half; 3])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Position of the center of voxel `(i, j, k)` in mm.
    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + (i as f64 + 0.5) * self.spacing[0],
            self.origin[1] + (j as f64 + 0.5) * self.spacing[1],
            self.origin[2] + (k as f64 + 0.5) * self.spacing[2],
        ]
    }

    #[inline]
    pub fn center_of(&self, idx: usize) -> [f64; 3] {
        let [i, j, k] = self.coords(idx);
        self.center(i, j, k)
    }

    /// Center of voxel `(nx / 2, ny / 2, nz / 2)`.
    pub fn central_voxel_center(&self) -> [f64; 3] {
        self.center(self.dims[0] / 2, self.dims[1] / 2, self.dims[2] / 2)
    }

    /// Center of the grid box; a voxel corner when every dimension is even.
    /// Phantoms put the isocenter here.
    pub fn box_center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + 0.5 * self.dims[a] as f64 * self.spacing[a])
    }

    /// Far corner of the grid box.
    pub fn extent_max(&self) -> [f64; 3] {
        [
            self.origin[0] + self.dims[0] as f64 * self.spacing[0],
            self.origin[1] + self.dims[1] as f64 * self.spacing[1],
            self.origin[2] + self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// Voxel containing a point, if inside the grid.
    pub fn voxel_at(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.spacing[a]).floor();
            if f < 0.0 || f >= self.dims[a] as f64 {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn check_same(&self, other: &GridGeometry, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::Shape(format!(
                "{what}: grid {:?}/{:?} does not match {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )));
        }
        Ok(())
    }
}

/// A scalar field (CT, dose, error map) or mask on a [`GridGeometry`].
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid<V> {
    pub geometry: GridGeometry,
    pub values: Vec<V>,
}

/// Binary structure mask.
pub type Mask = VoxelGrid<bool>;

impl<V: Clone> VoxelGrid<V> {
    pub fn filled(geometry: GridGeometry, value: V) -> Self {
        Self { values: vec![value; geometry.len()], geometry }
    }

    pub fn from_values(geometry: GridGeometry, values: Vec<V>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "value buffer has {} entries, grid needs {}",
                values.len(),
                geometry.len()
            )));
        }
        Ok(Self { geometry, values })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> &V {
        &self.values[self.geometry.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: V) {
        let idx = self.geometry.index(i, j, k);
        self.values[idx] = v;
    }

    pub fn map<W>(&self, f: impl Fn(&V) -> W) -> VoxelGrid<W> {
        VoxelGrid { geometry: self.geometry, values: self.values.iter().map(f).collect() }
    }
}

impl<T: Scalar> VoxelGrid<T> {
    pub fn zeros(geometry: GridGeometry) -> Self {
        Self::filled(geometry, T::zero())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{what}: voxel {i}"))),
            None => Ok(()),
        }
    }

    /// `self * a + other * b`
    pub fn axpby(&self, a: T, other: &Self, b: T) -> Result<Self> {
        self.geometry.check_same(&other.geometry, "axpby")?;
        Ok(Self {
            geometry: self.geometry,
            values: self.values.iter().zip(&other.values).map(|(&x, &y)| a * x + b * y).collect(),
        })
    }

    pub fn scaled(&self, a: T) -> Self {
        self.map(|&v| v * a)
    }

    /// Sequential inner product.
    pub fn dot(&self, other: &Self) -> T {
        self.values.iter().zip(&other.values).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn max_value(&self) -> T {
        self.values.iter().fold(T::neg_infinity(), |m, &v| m.max(v))
    }
}

impl Mask {
    pub fn empty(geometry: GridGeometry) -> Self {
        Self::filled(geometry, false)
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }

    /// Linear indices of the set voxels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.values.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.geometry == other.geometry && self.values.iter().zip(&other.values).all(|(&a, &b)| !a || b)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.geometry.check_same(&other.geometry, "mask union")?;
        Ok(Mask {
            geometry: self.geometry,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| a || b).collect(),
        })
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask> {
        self.geometry.check_same(&other.geometry, "mask intersection")?;
        Ok(Mask {
            geometry: self.geometry,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| a && b).collect(),
        })
    }

    /// 0/1 numeric field.
    pub fn to_field<T: Scalar>(&self) -> VoxelGrid<T> {
        self.map(|&b| if b { T::one() } else { T::zero() })
    }

    /// Inclusive voxel index bounds `[lo, hi]` of set voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        bounding_box_where(&self.geometry, |i| self.values[i])
    }
}

/// Bounding box of voxels satisfying a predicate.
pub(crate) fn bounding_box_where(
    geometry: &GridGeometry,
    pred: impl Fn(usize) -> bool,
) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for idx in 0..geometry.len() {
        if pred(idx) {
            let c = geometry.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            any = true;
        }
    }
    any.then_some((lo, hi))
}
