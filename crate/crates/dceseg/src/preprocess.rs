//! Gaussian smoothing and symmetry-based chest cropping.
//!
//! The crop finds the sagittal body-symmetry plane by maximizing the
//! reflection score of the pre-contrast frame, locates the chest wall as the
//! strongest coronal intensity gradient on that midplane slice, and keeps
//! only anterior voxels above an Otsu background threshold.

use crate::error::{Error, Result};
use crate::volume::{DynamicVolume, Mask3D};

/// Detected crop planes on the voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropPlanes {
    /// x index of the body symmetry plane.
    pub sagittal_mid: usize,
    /// y index of the chest wall (last kept plane).
    pub coronal_cut: usize,
}

/// Full width at half maximum of a Gaussian in units of sigma.
const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_4; // 2 sqrt(2 ln 2)

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= sum;
    }
    kernel
}

/// Half-sample symmetric reflection of index `i` into `[0, n)`.
/// Extension pattern: a b c d | d c b a.
#[inline]
fn reflect(mut i: i64, n: i64) -> usize {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Convolve every 1D line along one axis of a flattened 3D frame.
///
/// The axis has `n` samples spaced `stride` apart; `count` is the number of
/// lines (the product of the other two dims).
fn convolve_axis(src: &[f64], dst: &mut [f64], n: usize, stride: usize, count: usize, kernel: &[f64]) {
    let radius = (kernel.len() / 2) as i64;
    for line in 0..count {
        let base = (line / stride) * n * stride + (line % stride);
        for i in 0..n {
            let mut acc = 0.0;
            for (ki, &w) in kernel.iter().enumerate() {
                let j = reflect(i as i64 + ki as i64 - radius, n as i64);
                acc += w * src[base + j * stride];
            }
            dst[base + i * stride] = acc;
        }
    }
}

/// Separable 3D Gaussian smoothing of every time frame.
///
/// Sigma is `fwhm / (2 sqrt(2 ln 2))`; the kernel is truncated at +/- 4
/// sigma and renormalized to sum 1. Boundaries are handled by half-sample
/// reflection, which preserves frame sums for symmetric kernels.
pub fn gaussian_smooth(vol: &DynamicVolume, fwhm_voxels: f64) -> Result<DynamicVolume> {
    if !fwhm_voxels.is_finite() || fwhm_voxels <= 0.0 {
        return Err(Error::Argument(format!(
            "fwhm must be a positive finite number, got {fwhm_voxels}"
        )));
    }
    let sigma = fwhm_voxels / FWHM_PER_SIGMA;
    let kernel = gaussian_kernel(sigma);
    let (nx, ny, nz) = vol.dims;
    let mut out = DynamicVolume::zeros(vol.dims, vol.nt, vol.spacing, vol.dt);
    let mut tmp = vec![0.0_f64; nx * ny * nz];
    for t in 0..vol.nt {
        let frame = vol.frame(t);
        let dst = out.frame_mut(t);
        convolve_axis(frame, dst, nx, 1, ny * nz, &kernel);
        convolve_axis(dst, &mut tmp, ny, nx, nx * nz, &kernel);
        convolve_axis(&tmp, dst, nz, nx * ny, nx * ny, &kernel);
    }
    Ok(out)
}

/// Locate the sagittal symmetry plane and the coronal chest cut on the
/// pre-contrast frame (t = 0).
///
/// The sagittal plane maximizes the reflection score
/// `sum_u I(x-u, y, z) * I(x+u, y, z)`; the chest cut maximizes the mean
/// absolute forward difference along y on the midplane slice. Ties break
/// toward the smaller index.
pub fn find_midplanes(vol: &DynamicVolume) -> Result<CropPlanes> {
    let (nx, ny, nz) = vol.dims;
    if nx < 3 || ny < 3 {
        return Err(Error::Geometry(
            "find_midplanes needs at least 3 planes along x and y".into(),
        ));
    }
    let frame = vol.frame(0);
    let at = |x: usize, y: usize, z: usize| frame[x + nx * (y + ny * z)];

    let mut best_x = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for x in 1..nx - 1 {
        let reach = x.min(nx - 1 - x);
        let mut score = 0.0;
        for u in 1..=reach {
            for z in 0..nz {
                for y in 0..ny {
                    score += at(x - u, y, z) * at(x + u, y, z);
                }
            }
        }
        if score > best_score {
            best_score = score;
            best_x = x;
        }
    }

    let mut best_y = 0usize;
    let mut best_grad = f64::NEG_INFINITY;
    for y in 0..ny - 1 {
        let mut grad = 0.0;
        for z in 0..nz {
            grad += (at(best_x, y + 1, z) - at(best_x, y, z)).abs();
        }
        grad /= nz as f64;
        if grad > best_grad {
            best_grad = grad;
            best_y = y;
        }
    }

    Ok(CropPlanes {
        sagittal_mid: best_x,
        coronal_cut: best_y,
    })
}

/// Otsu threshold over a 256-bin histogram of the given values.
///
/// Returns the lower edge of the first class boundary that maximizes
/// between-class variance; constant inputs yield the minimum value so that
/// `v >= threshold` keeps everything.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return min;
    }
    const BINS: usize = 256;
    let scale = BINS as f64 / (max - min);
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = (((v - min) * scale) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let total_mean: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum::<f64>()
        / total;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best_var = -1.0;
    let mut best_bin = 0usize;
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64 / total;
        sum0 += i as f64 * c as f64 / total;
        if w0 <= 0.0 || w0 >= 1.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_mean - sum0) / (1.0 - w0);
        let var = w0 * (1.0 - w0) * (mu0 - mu1).powi(2);
        if var > best_var {
            best_var = var;
            best_bin = i;
        }
    }
    // Threshold at the upper edge of the best split bin.
    min + (best_bin as f64 + 1.0) / scale
}

/// Keep-mask excluding everything posterior to the chest cut plus
/// background voxels below an Otsu threshold on the t = 0 frame.
///
/// The threshold is estimated over the anterior region only (y up to the
/// cut), so the posterior block cannot skew the background/tissue split.
pub fn crop_chest(vol: &DynamicVolume, planes: &CropPlanes) -> Result<Mask3D> {
    let (nx, ny, nz) = vol.dims;
    if planes.sagittal_mid >= nx || planes.coronal_cut >= ny {
        return Err(Error::Argument("crop planes outside volume dims".into()));
    }
    let frame = vol.frame(0);
    let mut anterior = Vec::with_capacity(nx * (planes.coronal_cut + 1) * nz);
    for z in 0..nz {
        for y in 0..=planes.coronal_cut {
            for x in 0..nx {
                anterior.push(frame[x + nx * (y + ny * z)]);
            }
        }
    }
    let threshold = otsu_threshold(&anterior);
    let mut mask = Mask3D::zeros(vol.dims);
    for z in 0..nz {
        for y in 0..=planes.coronal_cut {
            for x in 0..nx {
                if frame[x + nx * (y + ny * z)] >= threshold {
                    mask.set(x, y, z, true);
                }
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::DynamicVolume;

    fn volume_from_fn(
        dims: (usize, usize, usize),
        nt: usize,
        f: impl Fn(usize, usize, usize, usize) -> f64,
    ) -> DynamicVolume {
        let mut vol = DynamicVolume::zeros(dims, nt, (1.0, 1.0, 1.0), 1.0);
        for t in 0..nt {
            for z in 0..dims.2 {
                for y in 0..dims.1 {
                    for x in 0..dims.0 {
                        vol.set(x, y, z, t, f(x, y, z, t));
                    }
                }
            }
        }
        vol
    }

    #[test]
    fn smooth_preserves_constant() {
        let vol = volume_from_fn((5, 4, 3), 2, |_, _, _, t| 3.0 + t as f64);
        let out = gaussian_smooth(&vol, 2.0).unwrap();
        for (a, b) in vol.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn smooth_preserves_frame_sum() {
        let vol = volume_from_fn((9, 7, 5), 2, |x, y, z, t| {
            ((x * 31 + y * 17 + z * 7 + t * 3) % 13) as f64 + 0.25
        });
        let out = gaussian_smooth(&vol, 2.0).unwrap();
        for t in 0..vol.nt {
            let a: f64 = vol.frame(t).iter().sum();
            let b: f64 = out.frame(t).iter().sum();
            assert!(((a - b) / a).abs() < 1e-6, "frame {t}: {a} vs {b}");
        }
    }

    /// Dense 3D convolution oracle with half-sample reflection.
    fn dense_smooth_oracle(vol: &DynamicVolume, fwhm: f64) -> Vec<f64> {
        let sigma = fwhm / FWHM_PER_SIGMA;
        let kernel = gaussian_kernel(sigma);
        let r = (kernel.len() / 2) as i64;
        let (nx, ny, nz) = vol.dims;
        let mut out = vec![0.0; nx * ny * nz];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut acc = 0.0;
                    for (ki, &wi) in kernel.iter().enumerate() {
                        for (kj, &wj) in kernel.iter().enumerate() {
                            for (kk, &wk) in kernel.iter().enumerate() {
                                let sx = reflect(x as i64 + ki as i64 - r, nx as i64);
                                let sy = reflect(y as i64 + kj as i64 - r, ny as i64);
                                let sz = reflect(z as i64 + kk as i64 - r, nz as i64);
                                acc += wi * wj * wk * vol.at(sx, sy, sz, 0);
                            }
                        }
                    }
                    out[x + nx * (y + ny * z)] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn smooth_impulse_matches_dense_oracle() {
        let mut vol = DynamicVolume::zeros((9, 9, 9), 1, (1.0, 1.0, 1.0), 1.0);
        vol.set(4, 4, 4, 0, 1.0);
        let fwhm = 2.0;
        let out = gaussian_smooth(&vol, fwhm).unwrap();
        let oracle = dense_smooth_oracle(&vol, fwhm);
        for (i, (a, b)) in out.frame(0).iter().zip(&oracle).enumerate() {
            assert!((a - b).abs() < 1e-12, "voxel {i}: {a} vs {b}");
        }
        // Center value is the product of the three 1D kernel peaks.
        let kernel = gaussian_kernel(fwhm / FWHM_PER_SIGMA);
        let peak = kernel[kernel.len() / 2];
        assert!((out.at(4, 4, 4, 0) - peak.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn smooth_is_linear() {
        let a = volume_from_fn((7, 6, 4), 1, |x, y, z, _| (x + 2 * y + 3 * z) as f64);
        let b = volume_from_fn((7, 6, 4), 1, |x, y, z, _| ((x * y) as f64).sin() + z as f64);
        let alpha = 1.7;
        let beta = -0.6;
        let combo = volume_from_fn((7, 6, 4), 1, |x, y, z, t| {
            alpha * a.at(x, y, z, t) + beta * b.at(x, y, z, t)
        });
        let sa = gaussian_smooth(&a, 2.0).unwrap();
        let sb = gaussian_smooth(&b, 2.0).unwrap();
        let sc = gaussian_smooth(&combo, 2.0).unwrap();
        for i in 0..sc.data().len() {
            let expect = alpha * sa.data()[i] + beta * sb.data()[i];
            assert!((sc.data()[i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn smooth_rejects_bad_fwhm() {
        let vol = volume_from_fn((3, 3, 3), 1, |_, _, _, _| 1.0);
        assert!(gaussian_smooth(&vol, f64::NAN).is_err());
        assert!(gaussian_smooth(&vol, 0.0).is_err());
        assert!(gaussian_smooth(&vol, -1.0).is_err());
    }

    #[test]
    fn midplane_of_mirror_symmetric_volume() {
        // Symmetric about x = 5 on an 11-wide grid.
        let vol = volume_from_fn((11, 6, 4), 1, |x, y, z, _| {
            let d = (x as f64 - 5.0).abs();
            (10.0 - d) * (1.0 + y as f64 * 0.1 + z as f64 * 0.05)
        });
        let planes = find_midplanes(&vol).unwrap();
        assert_eq!(planes.sagittal_mid, 5);
    }

    #[test]
    fn midplane_between_two_blobs() {
        // Identical blobs centered at x = 3 and x = 9: plane at (3+9)/2 = 6.
        let vol = volume_from_fn((13, 5, 3), 1, |x, y, z, _| {
            let blob = |c: f64| (-((x as f64 - c).powi(2)) / 2.0).exp();
            (blob(3.0) + blob(9.0)) * (1.0 + 0.1 * y as f64) * (1.0 + 0.05 * z as f64)
        });
        let planes = find_midplanes(&vol).unwrap();
        // Brute-force the symmetry score to confirm the argmax.
        let frame = vol.frame(0);
        let (nx, ny, nz) = vol.dims;
        let at = |x: usize, y: usize, z: usize| frame[x + nx * (y + ny * z)];
        let mut best = (0usize, f64::NEG_INFINITY);
        for x in 1..nx - 1 {
            let reach = x.min(nx - 1 - x);
            let mut s = 0.0;
            for u in 1..=reach {
                for z in 0..nz {
                    for y in 0..ny {
                        s += at(x - u, y, z) * at(x + u, y, z);
                    }
                }
            }
            if s > best.1 {
                best = (x, s);
            }
        }
        assert_eq!(planes.sagittal_mid, best.0);
        assert_eq!(planes.sagittal_mid, 6);
    }

    #[test]
    fn midplane_scale_invariance() {
        let vol = volume_from_fn((9, 8, 3), 1, |x, y, z, _| {
            1.0 + ((x * 7 + y * 3 + z) % 5) as f64
        });
        let scaled = volume_from_fn((9, 8, 3), 1, |x, y, z, t| 4.5 * vol.at(x, y, z, t));
        assert_eq!(
            find_midplanes(&vol).unwrap(),
            find_midplanes(&scaled).unwrap()
        );
    }

    #[test]
    fn coronal_cut_at_step_edge() {
        // Step along y at y0 = 4 on every slice; the forward difference on
        // the midplane peaks at y = 4.
        let vol = volume_from_fn((9, 9, 3), 1, |x, y, _, _| {
            let sym = 8.0 - (x as f64 - 4.0).abs();
            if y > 4 {
                20.0 + sym
            } else {
                1.0 + sym
            }
        });
        let planes = find_midplanes(&vol).unwrap();
        assert_eq!(planes.coronal_cut, 4);
    }

    #[test]
    fn midplane_needs_three_planes() {
        let vol = volume_from_fn((2, 5, 2), 1, |_, _, _, _| 1.0);
        assert!(matches!(find_midplanes(&vol), Err(Error::Geometry(_))));
    }

    #[test]
    fn crop_keeps_everything_when_cut_is_last_plane() {
        let vol = volume_from_fn((4, 5, 3), 1, |_, _, _, _| 100.0);
        let planes = CropPlanes {
            sagittal_mid: 2,
            coronal_cut: 4,
        };
        let mask = crop_chest(&vol, &planes).unwrap();
        assert_eq!(mask.count_ones(), 4 * 5 * 3);
    }

    #[test]
    fn crop_cut_zero_keeps_only_first_plane() {
        let vol = volume_from_fn((4, 5, 3), 1, |_, _, _, _| 100.0);
        let planes = CropPlanes {
            sagittal_mid: 2,
            coronal_cut: 0,
        };
        let mask = crop_chest(&vol, &planes).unwrap();
        assert_eq!(mask.count_ones(), 4 * 3);
        for (x, y, z) in mask.selected() {
            assert_eq!(y, 0);
            let _ = (x, z);
        }
    }

    #[test]
    fn crop_never_selects_beyond_cut() {
        let vol = volume_from_fn((6, 7, 4), 1, |x, y, z, _| {
            if (x + y + z) % 3 == 0 {
                5.0
            } else {
                120.0
            }
        });
        let planes = CropPlanes {
            sagittal_mid: 3,
            coronal_cut: 3,
        };
        let mask = crop_chest(&vol, &planes).unwrap();
        for (_, y, _) in mask.selected() {
            assert!(y <= 3);
        }
    }

    #[test]
    fn otsu_separates_two_modes() {
        let mut values = vec![1.0; 300];
        values.extend(vec![100.0; 200]);
        let thr = otsu_threshold(&values);
        assert!(thr > 1.0 && thr <= 100.0, "threshold {thr}");
    }

    #[test]
    fn otsu_constant_input_keeps_all() {
        let values = vec![7.5; 64];
        let thr = otsu_threshold(&values);
        assert!(values.iter().all(|&v| v >= thr));
    }
}
