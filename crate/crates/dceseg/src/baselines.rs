//! Reference kinetic detectors: signal enhancement ratio (SER) maps and the
//! Laplacian-filtered derivative-SER variant.
//!
//! SER = (SI(first post) - SI(pre)) / (SI(final) - SI(pre)) per voxel.
//! Voxels whose denominator magnitude falls below 1e-9 of the relevant
//! intensity scale carry an undefined marker and are excluded from sweeps
//! rather than clamped.

use crate::error::{Error, Result};
use crate::volume::DynamicVolume;

/// A per-voxel scalar map with an explicit defined/undefined marker.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMap {
    pub dims: (usize, usize, usize),
    pub values: Vec<f64>,
    pub defined: Vec<bool>,
}

impl VoxelMap {
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> Option<f64> {
        let i = self.index(x, y, z);
        self.defined[i].then(|| self.values[i])
    }
}

fn check_frames(vol: &DynamicVolume, t_first_post: usize, t_final: usize) -> Result<()> {
    if t_first_post == 0 || t_first_post >= t_final || t_final > vol.nt - 1 {
        return Err(Error::Argument(format!(
            "need 0 < t_first_post < t_final <= {}, got ({t_first_post}, {t_final})",
            vol.nt - 1
        )));
    }
    Ok(())
}

fn ratio_map(
    pre: &[f64],
    first: &[f64],
    last: &[f64],
    dims: (usize, usize, usize),
    scale: f64,
) -> VoxelMap {
    let eps = 1e-9 * scale;
    let n = pre.len();
    let mut values = vec![0.0; n];
    let mut defined = vec![false; n];
    for i in 0..n {
        let den = last[i] - pre[i];
        if den.abs() > eps {
            values[i] = (first[i] - pre[i]) / den;
            defined[i] = true;
        }
    }
    VoxelMap {
        dims,
        values,
        defined,
    }
}

/// Signal enhancement ratio per voxel from the pre-contrast frame (t = 0),
/// the first post-contrast frame and the final frame.
pub fn ser_map(vol: &DynamicVolume, t_first_post: usize, t_final: usize) -> Result<VoxelMap> {
    check_frames(vol, t_first_post, t_final)?;
    let scale = vol.max_abs();
    Ok(ratio_map(
        vol.frame(0),
        vol.frame(t_first_post),
        vol.frame(t_final),
        vol.dims,
        scale,
    ))
}

/// 6-neighbor discrete Laplacian of a flat frame with reflective boundaries.
fn laplacian(frame: &[f64], dims: (usize, usize, usize)) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let reflect = |i: i64, n: usize| -> usize {
        if i < 0 {
            0
        } else if i as usize >= n {
            n - 1
        } else {
            i as usize
        }
    };
    let mut out = vec![0.0; frame.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let c = frame[idx(x, y, z)];
                let mut acc = -6.0 * c;
                acc += frame[idx(reflect(x as i64 - 1, nx), y, z)];
                acc += frame[idx(reflect(x as i64 + 1, nx), y, z)];
                acc += frame[idx(x, reflect(y as i64 - 1, ny), z)];
                acc += frame[idx(x, reflect(y as i64 + 1, ny), z)];
                acc += frame[idx(x, y, reflect(z as i64 - 1, nz))];
                acc += frame[idx(x, y, reflect(z as i64 + 1, nz))];
                out[idx(x, y, z)] = acc;
            }
        }
    }
    out
}

/// SER computed on Laplacian-filtered frames.
pub fn derivative_ser_map(
    vol: &DynamicVolume,
    t_first_post: usize,
    t_final: usize,
) -> Result<VoxelMap> {
    check_frames(vol, t_first_post, t_final)?;
    let pre = laplacian(vol.frame(0), vol.dims);
    let first = laplacian(vol.frame(t_first_post), vol.dims);
    let last = laplacian(vol.frame(t_final), vol.dims);
    let scale = pre
        .iter()
        .chain(&first)
        .chain(&last)
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    Ok(ratio_map(&pre, &first, &last, vol.dims, scale))
}
