//! Exact voxel traversal of a straight ray (Siddon / Amanatides-Woo).
//!
//! Every voxel the ray crosses is reported once, in order, together with the
//! ray parameters at which it enters and leaves. Segment lengths are exact up
//! to rounding, which is what makes the dose operator and its transpose
//! consistent.

use crate::grid::GridGeometry;

/// Inclusive voxel index range a traversal is clipped to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoxelBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl VoxelBox {
    pub fn full(geometry: &GridGeometry) -> Self {
        Self { lo: [0; 3], hi: [geometry.dims[0] - 1, geometry.dims[1] - 1, geometry.dims[2] - 1] }
    }
}

/// Walks the ray `origin + t * dir` (`dir` unit length, `t >= 0`) through the
/// voxels of `clip`, calling `visit(linear_index, t_enter, t_exit)` for each
/// crossed voxel with a segment of positive length.
pub fn traverse(
    geometry: &GridGeometry,
    clip: VoxelBox,
    origin: [f64; 3],
    dir: [f64; 3],
    mut visit: impl FnMut(usize, f64, f64),
) {
    let s = geometry.spacing;
    let o = geometry.origin;
    let mut t_enter = 0.0f64;
    let mut t_exit = f64::INFINITY;
    let mut inv = [0.0f64; 3];
    for a in 0..3 {
        let bmin = o[a] + clip.lo[a] as f64 * s[a];
        let bmax = o[a] + (clip.hi[a] + 1) as f64 * s[a];
        if dir[a] == 0.0 {
            if origin[a] < bmin || origin[a] >= bmax {
                return;
            }
            inv[a] = f64::INFINITY;
            continue;
        }
        inv[a] = 1.0 / dir[a];
        let t1 = (bmin - origin[a]) * inv[a];
        let t2 = (bmax - origin[a]) * inv[a];
        t_enter = t_enter.max(t1.min(t2));
        t_exit = t_exit.min(t1.max(t2));
    }
    if !(t_enter < t_exit) {
        return;
    }

    let mut idx = [0isize; 3];
    let mut step = [0isize; 3];
    let mut t_next = [f64::INFINITY; 3];
    for a in 0..3 {
        let x = (origin[a] + t_enter * dir[a] - o[a]) / s[a];
        let raw = if dir[a] < 0.0 { x.ceil() - 1.0 } else { x.floor() };
        let i = (raw as isize).clamp(clip.lo[a] as isize, clip.hi[a] as isize);
        idx[a] = i;
        if dir[a] > 0.0 {
            step[a] = 1;
            t_next[a] = (o[a] + (i + 1) as f64 * s[a] - origin[a]) * inv[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_next[a] = (o[a] + i as f64 * s[a] - origin[a]) * inv[a];
        }
    }

    let nx = geometry.dims[0];
    let ny = geometry.dims[1];
    let mut t = t_enter;
    loop {
        let a = if t_next[0] <= t_next[1] {
            if t_next[0] <= t_next[2] {
                0
            } else {
                2
            }
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        let t_end = t_next[a].min(t_exit);
        if t_end > t {
            let lin = (idx[2] as usize * ny + idx[1] as usize) * nx + idx[0] as usize;
            visit(lin, t, t_end);
            t = t_end;
        }
        if t_next[a] >= t_exit {
            break;
        }
        idx[a] += step[a];
        if idx[a] < clip.lo[a] as isize || idx[a] > clip.hi[a] as isize {
            break;
        }
        t_next[a] = if step[a] > 0 {
            (o[a] + (idx[a] + 1) as f64 * s[a] - origin[a]) * inv[a]
        } else {
            (o[a] + idx[a] as f64 * s[a] - origin[a]) * inv[a]
        };
    }
}

#[inline]
pub(crate) fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}
