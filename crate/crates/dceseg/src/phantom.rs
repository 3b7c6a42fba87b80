//! Deterministic synthetic 4D phantom generation with ground-truth masks.
//!
//! A phantom holds two mirror-placed breast ellipsoids (so the sagittal
//! symmetry plane is recoverable), a strongly enhancing posterior chest
//! block that the crop stage must remove, benign tissue with persistent
//! enhancement, a smooth benign confounder region with mild washout, and
//! scattered small lesion clusters carrying washout or plateau curves. All
//! tissue classes share the same pre-contrast baseline inside the breasts,
//! so the t = 0 frame is exactly mirror symmetric when noise is zero.
//!
//! All randomness (cluster placement, noise) is drawn from a ChaCha stream
//! seeded by the spec, so a fixed spec reproduces the volume bit for bit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{DynamicVolume, Mask3D};

/// Enhancement curve of one tissue class.
///
/// With `peak_time_s > 0` the curve rises linearly to its peak and then
/// decays linearly at `washout_slope` (fraction of peak per second);
/// otherwise it is a persistent exponential rise `1 - exp(-uptake_rate t)`.
/// The signal is `baseline + amplitude * shape(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueCurve {
    pub baseline: f64,
    pub amplitude: f64,
    pub uptake_rate: f64,
    pub peak_time_s: f64,
    pub washout_slope: f64,
}

impl TissueCurve {
    pub fn value(&self, t_s: f64) -> f64 {
        let shape = if self.peak_time_s > 0.0 {
            if t_s <= self.peak_time_s {
                t_s / self.peak_time_s
            } else {
                1.0 - self.washout_slope * (t_s - self.peak_time_s)
            }
        } else {
            1.0 - (-self.uptake_rate * t_s).exp()
        };
        self.baseline + self.amplitude * shape
    }

    fn validate(&self, name: &str) -> Result<()> {
        for (field, v) in [
            ("baseline", self.baseline),
            ("amplitude", self.amplitude),
            ("uptake_rate", self.uptake_rate),
            ("peak_time_s", self.peak_time_s),
            ("washout_slope", self.washout_slope),
        ] {
            if !v.is_finite() {
                return Err(Error::Spec(format!("{name}.{field} must be finite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueCurves {
    pub background: TissueCurve,
    pub benign: TissueCurve,
    /// Fast parenchymal enhancement blobs inside otherwise slow benign
    /// tissue; a benign mimic of plateau lesions.
    pub benign_fast: TissueCurve,
    pub confounder: TissueCurve,
    pub lesion_washout: TissueCurve,
    pub lesion_plateau: TissueCurve,
    pub chest: TissueCurve,
}

/// Scattered-cluster lesion geometry (non-mass morphology).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionGeometry {
    pub cluster_count: usize,
    /// Cluster radius range in voxels.
    pub radius_range: (f64, f64),
    /// Fraction of clusters carrying the plateau curve (rest are washout).
    pub plateau_fraction: f64,
    /// Per-cluster enhancement strength range (multiplies the lesion
    /// amplitude), drawn per cluster: scattered weak and strong foci.
    pub intensity_range: (f64, f64),
    /// Relative per-voxel strength jitter inside clusters, modeling the
    /// heterogeneous texture of non-mass lesions.
    pub intensity_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Spatial dims; the x extent must be odd so the symmetry plane lies on
    /// the voxel grid.
    pub dims: (usize, usize, usize),
    pub nt: usize,
    pub spacing_mm: (f64, f64, f64),
    pub dt_s: f64,
    pub seed: u64,
    pub noise_sigma: f64,
    pub curves: TissueCurves,
    pub lesion: LesionGeometry,
    /// Fraction of the y extent where the chest block begins.
    pub chest_start_frac: f64,
    /// Include the smooth mild-washout benign confounder region.
    pub confounder_enabled: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: (41, 36, 18),
            nt: 12,
            spacing_mm: (1.7, 1.7, 1.7),
            dt_s: 13.2,
            seed: 0,
            noise_sigma: 12.0,
            curves: TissueCurves {
                background: TissueCurve {
                    baseline: 8.0,
                    amplitude: 0.0,
                    uptake_rate: 0.0,
                    peak_time_s: 0.0,
                    washout_slope: 0.0,
                },
                benign: TissueCurve {
                    baseline: 100.0,
                    amplitude: 55.0,
                    uptake_rate: 0.010,
                    peak_time_s: 0.0,
                    washout_slope: 0.0,
                },
                benign_fast: TissueCurve {
                    baseline: 100.0,
                    amplitude: 58.0,
                    uptake_rate: 0.0,
                    peak_time_s: 62.0,
                    washout_slope: 0.0006,
                },
                confounder: TissueCurve {
                    baseline: 100.0,
                    amplitude: 60.0,
                    uptake_rate: 0.0,
                    peak_time_s: 24.0,
                    washout_slope: 0.0042,
                },
                lesion_washout: TissueCurve {
                    baseline: 100.0,
                    amplitude: 100.0,
                    uptake_rate: 0.0,
                    peak_time_s: 20.0,
                    washout_slope: 0.0058,
                },
                lesion_plateau: TissueCurve {
                    baseline: 100.0,
                    amplitude: 90.0,
                    uptake_rate: 0.0,
                    peak_time_s: 55.0,
                    washout_slope: 0.0002,
                },
                chest: TissueCurve {
                    baseline: 160.0,
                    amplitude: 130.0,
                    uptake_rate: 0.0,
                    peak_time_s: 20.0,
                    washout_slope: 0.002,
                },
            },
            lesion: LesionGeometry {
                cluster_count: 6,
                radius_range: (1.3, 2.0),
                plateau_fraction: 0.34,
                intensity_range: (0.5, 1.15),
                intensity_jitter: 0.15,
            },
            chest_start_frac: 0.72,
            confounder_enabled: true,
        }
    }
}

/// Tissue class per voxel, used internally and exposed for tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tissue {
    Background,
    Benign,
    BenignFast,
    Confounder,
    LesionWashout,
    LesionPlateau,
    Chest,
}

struct Ellipsoid {
    center: (f64, f64, f64),
    semi: (f64, f64, f64),
}

impl Ellipsoid {
    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let dx = (x - self.center.0) / self.semi.0;
        let dy = (y - self.center.1) / self.semi.1;
        let dz = (z - self.center.2) / self.semi.2;
        dx * dx + dy * dy + dz * dz <= 1.0
    }

    /// Whether a sphere of radius r around (x, y, z) fits inside.
    fn contains_sphere(&self, x: f64, y: f64, z: f64, r: f64) -> bool {
        let shrink = Ellipsoid {
            center: self.center,
            semi: (
                (self.semi.0 - r).max(0.1),
                (self.semi.1 - r).max(0.1),
                (self.semi.2 - r).max(0.1),
            ),
        };
        shrink.contains(x, y, z)
    }
}

/// Phantom layout derived from a spec: breast ellipsoids, chest start plane,
/// confounder sphere.
pub struct PhantomLayout {
    pub symmetry_plane: usize,
    pub chest_y0: usize,
    left: Ellipsoid,
    right: Ellipsoid,
    confounder_center: (f64, f64, f64),
    confounder_radius: f64,
    fast_blobs: Vec<((f64, f64, f64), f64)>,
}

impl PhantomLayout {
    fn from_spec(spec: &PhantomSpec) -> Result<Self> {
        let (nx, ny, nz) = spec.dims;
        if nx % 2 == 0 {
            return Err(Error::Spec("x extent must be odd".into()));
        }
        if nx < 17 || ny < 14 || nz < 6 {
            return Err(Error::Spec("dims too small for the phantom layout".into()));
        }
        if !(0.3..0.95).contains(&spec.chest_start_frac) {
            return Err(Error::Spec("chest_start_frac outside (0.3, 0.95)".into()));
        }
        let cx = ((nx - 1) / 2) as f64;
        let chest_y0 = ((ny as f64) * spec.chest_start_frac).floor() as usize;
        if chest_y0 + 2 >= ny {
            return Err(Error::Spec("chest block would be empty".into()));
        }
        let offset = (nx as f64) * 0.24;
        let ax = ((nx as f64) * 0.21).min(offset - 1.5);
        let cy = (chest_y0 as f64) * 0.45;
        let ay = ((chest_y0 as f64) * 0.40).min((chest_y0 as f64) - 3.0 - cy);
        let cz = ((nz - 1) as f64) / 2.0;
        let az = (nz as f64) * 0.38;
        if ax < 2.5 || ay < 2.5 || az < 1.5 {
            return Err(Error::Spec("breast ellipsoids degenerate at these dims".into()));
        }
        let left = Ellipsoid {
            center: (cx - offset, cy, cz),
            semi: (ax, ay, az),
        };
        let right = Ellipsoid {
            center: (cx + offset, cy, cz),
            semi: (ax, ay, az),
        };
        // Confounder sits in the right breast, upper-inner quadrant.
        let confounder_radius = ax.min(ay).min(az) * 0.75;
        let confounder_center = (
            right.center.0 - ax * 0.2,
            right.center.1 + ay * 0.25,
            cz,
        );
        // Fast-enhancing benign blobs at fixed breast-relative offsets,
        // mirrored across the symmetry plane.
        let blob_r = ax.min(ay).min(az) * 0.5;
        let offsets = [(0.42, 0.18, 0.3), (-0.34, -0.32, -0.22), (0.08, 0.5, -0.38)];
        let mut fast_blobs = Vec::new();
        for breast in [&left, &right] {
            let sign = if std::ptr::eq(breast, &left) { 1.0 } else { -1.0 };
            for &(ox, oy, oz) in &offsets {
                fast_blobs.push((
                    (
                        breast.center.0 + sign * ox * ax,
                        breast.center.1 + oy * ay,
                        breast.center.2 + oz * az,
                    ),
                    blob_r,
                ));
            }
        }
        Ok(Self {
            symmetry_plane: (nx - 1) / 2,
            chest_y0,
            left,
            right,
            confounder_center,
            confounder_radius,
            fast_blobs,
        })
    }

    pub fn in_breast(&self, x: usize, y: usize, z: usize) -> bool {
        let (xf, yf, zf) = (x as f64, y as f64, z as f64);
        self.left.contains(xf, yf, zf) || self.right.contains(xf, yf, zf)
    }

    /// Fraction of the voxel cube inside either breast, by 3x3x3
    /// supersampling. Models partial volume at the tissue boundary.
    pub fn breast_fraction(&self, x: usize, y: usize, z: usize) -> f64 {
        const OFFSETS: [f64; 3] = [-1.0 / 3.0, 0.0, 1.0 / 3.0];
        let mut inside = 0usize;
        for dx in OFFSETS {
            for dy in OFFSETS {
                for dz in OFFSETS {
                    let (xf, yf, zf) = (x as f64 + dx, y as f64 + dy, z as f64 + dz);
                    if self.left.contains(xf, yf, zf) || self.right.contains(xf, yf, zf) {
                        inside += 1;
                    }
                }
            }
        }
        inside as f64 / 27.0
    }
}

/// Derived layout for a spec, exposed so tests can query the ground truth
/// geometry.
pub fn layout(spec: &PhantomSpec) -> Result<PhantomLayout> {
    PhantomLayout::from_spec(spec)
}

fn validate(spec: &PhantomSpec) -> Result<()> {
    let (nx, ny, nz) = spec.dims;
    if nx == 0 || ny == 0 || nz == 0 || spec.nt < 4 {
        return Err(Error::Spec("dims must be positive and nt >= 4".into()));
    }
    if !(spec.dt_s.is_finite() && spec.dt_s > 0.0) {
        return Err(Error::Spec("dt_s must be positive".into()));
    }
    if !(spec.noise_sigma.is_finite() && spec.noise_sigma >= 0.0) {
        return Err(Error::Spec("noise_sigma must be nonnegative".into()));
    }
    let c = &spec.curves;
    for (name, curve) in [
        ("background", &c.background),
        ("benign", &c.benign),
        ("benign_fast", &c.benign_fast),
        ("confounder", &c.confounder),
        ("lesion_washout", &c.lesion_washout),
        ("lesion_plateau", &c.lesion_plateau),
        ("chest", &c.chest),
    ] {
        curve.validate(name)?;
    }
    let (rmin, rmax) = spec.lesion.radius_range;
    if !(rmin.is_finite() && rmax.is_finite()) || rmin < 1.0 || rmax < rmin {
        return Err(Error::Spec("lesion radius range must satisfy 1 <= min <= max".into()));
    }
    if spec.lesion.cluster_count == 0 {
        return Err(Error::Spec("need at least one lesion cluster".into()));
    }
    if !(0.0..=1.0).contains(&spec.lesion.plateau_fraction) {
        return Err(Error::Spec("plateau_fraction outside [0, 1]".into()));
    }
    if !(0.0..0.9).contains(&spec.lesion.intensity_jitter) {
        return Err(Error::Spec("intensity_jitter outside [0, 0.9)".into()));
    }
    Ok(())
}

/// Generate a phantom volume with its lesion truth mask and the true
/// breast-tissue partition (the region the crop stage should keep).
pub fn generate(spec: &PhantomSpec) -> Result<(DynamicVolume, Mask3D, Mask3D)> {
    validate(spec)?;
    let geo = PhantomLayout::from_spec(spec)?;
    let (nx, ny, nz) = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Lesion clusters inside the left breast, away from each other:
    // (center, radius, plateau family, strength).
    type Cluster = ((f64, f64, f64), f64, bool, f64);
    let mut clusters: Vec<Cluster> = Vec::new();
    let plateau_count =
        (spec.lesion.plateau_fraction * spec.lesion.cluster_count as f64).round() as usize;
    for ci in 0..spec.lesion.cluster_count {
        let r = rng.gen_range(spec.lesion.radius_range.0..=spec.lesion.radius_range.1);
        let strength =
            rng.gen_range(spec.lesion.intensity_range.0..=spec.lesion.intensity_range.1);
        let mut placed = false;
        for _ in 0..20000 {
            let x = geo.left.center.0 + rng.gen_range(-geo.left.semi.0..geo.left.semi.0);
            let y = geo.left.center.1 + rng.gen_range(-geo.left.semi.1..geo.left.semi.1);
            let z = geo.left.center.2 + rng.gen_range(-geo.left.semi.2..geo.left.semi.2);
            if !geo.left.contains_sphere(x, y, z, r + 2.0) {
                continue;
            }
            let clear = clusters.iter().all(|&((cx, cy, cz), cr, _, _)| {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2) + (z - cz).powi(2);
                d2.sqrt() >= cr + r + 0.5
            });
            if clear {
                clusters.push(((x, y, z), r, ci < plateau_count, strength));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Spec(format!(
                "could not place lesion cluster {ci}; geometry too crowded"
            )));
        }
    }

    // Tissue assignment per voxel.
    let mut tissue = vec![Tissue::Background; nx * ny * nz];
    let mut cluster_strength = vec![1.0_f64; nx * ny * nz];
    let mut truth = Mask3D::zeros(spec.dims);
    let mut kept = Mask3D::zeros(spec.dims);
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (xf, yf, zf) = (x as f64, y as f64, z as f64);
                let t = if y >= geo.chest_y0 {
                    Tissue::Chest
                } else if geo.in_breast(x, y, z) {
                    kept.set(x, y, z, true);
                    // Lesion curves extend half a voxel past the truth
                    // sphere so that, after smoothing, every annotated voxel
                    // stays lesion-dominated (annotations mark solid cores).
                    let in_cluster = clusters.iter().find_map(|&((cx, cy, cz), r, plateau, st)| {
                        let d2 = (xf - cx).powi(2) + (yf - cy).powi(2) + (zf - cz).powi(2);
                        if d2 <= (r + 0.5) * (r + 0.5) {
                            Some((d2 <= r * r, plateau, st))
                        } else {
                            None
                        }
                    });
                    if let Some((core, plateau, strength)) = in_cluster {
                        if core {
                            truth.set(x, y, z, true);
                        }
                        let jitter = spec.lesion.intensity_jitter * rng.gen_range(-1.0..1.0);
                        cluster_strength[idx(x, y, z)] = strength * (1.0 + jitter);
                        if plateau {
                            Tissue::LesionPlateau
                        } else {
                            Tissue::LesionWashout
                        }
                    } else if spec.confounder_enabled && {
                        let (cx, cy, cz) = geo.confounder_center;
                        (xf - cx).powi(2) + (yf - cy).powi(2) + (zf - cz).powi(2)
                            <= geo.confounder_radius.powi(2)
                    } {
                        Tissue::Confounder
                    } else if geo.fast_blobs.iter().any(|&((cx, cy, cz), r)| {
                        (xf - cx).powi(2) + (yf - cy).powi(2) + (zf - cz).powi(2) <= r * r
                    }) {
                        Tissue::BenignFast
                    } else {
                        Tissue::Benign
                    }
                } else {
                    Tissue::Background
                };
                tissue[idx(x, y, z)] = t;
            }
        }
    }

    let lesion_fraction = truth.count_ones() as f64 / (nx * ny * nz) as f64;
    if !(lesion_fraction > 0.0 && lesion_fraction < 0.2) {
        return Err(Error::Spec(format!(
            "lesion voxel fraction {lesion_fraction:.4} outside (0, 0.2)"
        )));
    }

    // Signal synthesis: smooth amplitude modulation over the breasts plus
    // seeded Gaussian noise.
    let noise = Normal::new(0.0, 1.0).map_err(|e| Error::Spec(e.to_string()))?;
    let mut vol = DynamicVolume::zeros(spec.dims, spec.nt, spec.spacing_mm, spec.dt_s);
    for t in 0..spec.nt {
        let t_s = t as f64 * spec.dt_s;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let class = tissue[idx(x, y, z)];
                    let curve = match class {
                        Tissue::Background => &spec.curves.background,
                        Tissue::Benign => &spec.curves.benign,
                        Tissue::BenignFast => &spec.curves.benign_fast,
                        Tissue::Confounder => &spec.curves.confounder,
                        Tissue::LesionWashout => &spec.curves.lesion_washout,
                        Tissue::LesionPlateau => &spec.curves.lesion_plateau,
                        Tissue::Chest => &spec.curves.chest,
                    };
                    // Benign enhancement varies smoothly in space; lesion
                    // enhancement varies per cluster. Gains scale the
                    // enhancement only, so t = 0 stays at the shared
                    // baseline and exactly mirror symmetric.
                    let gain = match class {
                        Tissue::Benign | Tissue::BenignFast | Tissue::Confounder => {
                            0.7 + 0.2 * (x as f64 / nx as f64)
                                + 0.2 * (y as f64 / ny as f64)
                                + 0.2 * (z as f64 / nz as f64)
                        }
                        Tissue::LesionWashout | Tissue::LesionPlateau => {
                            cluster_strength[idx(x, y, z)]
                        }
                        _ => 1.0,
                    };
                    let enhanced = curve.baseline + gain * (curve.value(t_s) - curve.baseline);
                    // Partial volume at the breast surface: benign and
                    // background blend by the in-breast voxel fraction, so
                    // the smoothed boundary crosses the background
                    // threshold at the true surface.
                    let enhanced = match class {
                        Tissue::Benign | Tissue::Background if y < geo.chest_y0 => {
                            let frac = geo.breast_fraction(x, y, z);
                            if frac > 0.0 && frac < 1.0 {
                                let benign = &spec.curves.benign;
                                let benign_gain = 0.7
                                    + 0.2 * (x as f64 / nx as f64)
                                    + 0.2 * (y as f64 / ny as f64)
                                    + 0.2 * (z as f64 / nz as f64);
                                let tissue = benign.baseline
                                    + benign_gain * (benign.value(t_s) - benign.baseline);
                                frac * tissue + (1.0 - frac) * spec.curves.background.value(t_s)
                            } else {
                                enhanced
                            }
                        }
                        _ => enhanced,
                    };
                    let sample = enhanced + spec.noise_sigma * noise.sample(&mut rng);
                    vol.set(x, y, z, t, sample);
                }
            }
        }
    }

    Ok((vol, truth, kept))
}
