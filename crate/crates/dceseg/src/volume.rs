//! 4D volume data model and bit-exact file I/O.
//!
//! Volumes travel as DVOL pairs: a JSON header (`name.json`) next to a raw
//! little-endian payload (`name.raw`). Payload index order is x fastest,
//! then y, then z, with time slowest. Voxel values are `f32le` for volumes
//! and `u8` for binary masks.
//!
//! The module also owns ROI polyline annotations (per-slice polygons in mm),
//! their rasterization into solid binary masks (Bresenham edges + scanline
//! parity fill), and block-vote mask decimation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 4D scalar field (x, y, z, t) with spacing metadata.
///
/// Values are held as `f64` in memory; the on-disk payload is `f32le`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicVolume {
    pub dims: (usize, usize, usize),
    pub nt: usize,
    /// mm per voxel along (x, y, z).
    pub spacing: (f64, f64, f64),
    /// Seconds per frame.
    pub dt: f64,
    data: Vec<f64>,
}

impl DynamicVolume {
    pub fn new(
        dims: (usize, usize, usize),
        nt: usize,
        spacing: (f64, f64, f64),
        dt: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        let (nx, ny, nz) = dims;
        if nx == 0 || ny == 0 || nz == 0 || nt == 0 {
            return Err(Error::Argument("volume dims and nt must be >= 1".into()));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::Argument("voxel spacing must be positive".into()));
        }
        let expected = nx * ny * nz * nt;
        if data.len() != expected {
            return Err(Error::Size {
                expected,
                actual: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("volume contains non-finite values".into()));
        }
        Ok(Self {
            dims,
            nt,
            spacing,
            dt,
            data,
        })
    }

    /// Zero-filled volume, used as a scatter/accumulation target.
    pub fn zeros(dims: (usize, usize, usize), nt: usize, spacing: (f64, f64, f64), dt: f64) -> Self {
        let len = dims.0 * dims.1 * dims.2 * nt;
        Self {
            dims,
            nt,
            spacing,
            dt,
            data: vec![0.0; len],
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, t: usize) -> usize {
        let (nx, ny, nz) = self.dims;
        debug_assert!(x < nx && y < ny && z < nz && t < self.nt);
        x + nx * (y + ny * (z + nz * t))
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize, t: usize) -> f64 {
        self.data[self.index(x, y, z, t)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, t: usize, v: f64) {
        let i = self.index(x, y, z, t);
        self.data[i] = v;
    }

    /// Full time curve of one voxel.
    pub fn curve(&self, x: usize, y: usize, z: usize) -> Vec<f64> {
        (0..self.nt).map(|t| self.at(x, y, z, t)).collect()
    }

    /// One time frame as a contiguous slice (x fastest, then y, then z).
    pub fn frame(&self, t: usize) -> &[f64] {
        let v = self.n_voxels();
        &self.data[t * v..(t + 1) * v]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let v = self.n_voxels();
        &mut self.data[t * v..(t + 1) * v]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Binary 3D label mask (1 = selected, 0 = background).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3D {
    pub dims: (usize, usize, usize),
    values: Vec<u8>,
}

impl Mask3D {
    pub fn new(dims: (usize, usize, usize), values: Vec<u8>) -> Result<Self> {
        let (nx, ny, nz) = dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Argument("mask dims must be >= 1".into()));
        }
        let expected = nx * ny * nz;
        if values.len() != expected {
            return Err(Error::Size {
                expected,
                actual: values.len(),
            });
        }
        if !values.iter().all(|&v| v <= 1) {
            return Err(Error::Data("mask values must be 0 or 1".into()));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self {
            dims,
            values: vec![0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn ones(dims: (usize, usize, usize)) -> Self {
        Self {
            dims,
            values: vec![1; dims.0 * dims.1 * dims.2],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let (nx, _, _) = self.dims;
        x + nx * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.values[self.index(x, y, z)] == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.index(x, y, z);
        self.values[i] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    /// Voxel coordinates of all 1-voxels in lexicographic order
    /// (x fastest, then y, then z).
    pub fn selected(&self) -> Vec<(usize, usize, usize)> {
        let (nx, ny, nz) = self.dims;
        let mut out = Vec::with_capacity(self.count_ones());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if self.get(x, y, z) {
                        out.push((x, y, z));
                    }
                }
            }
        }
        out
    }

    /// Voxelwise AND of two masks with equal dims.
    pub fn intersect(&self, other: &Mask3D) -> Result<Mask3D> {
        if self.dims != other.dims {
            return Err(Error::Argument("mask dims mismatch".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a & b)
            .collect();
        Ok(Mask3D {
            dims: self.dims,
            values,
        })
    }
}

/// Per-slice closed polygon annotations in continuous mm coordinates.
///
/// Slices are taken along `slice_axis`; the in-plane coordinates follow the
/// remaining two axes in (x, y, z) order.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiPolyline {
    pub slice_axis: Axis3,
    /// slice index -> ordered polygon vertices (mm).
    pub slices: BTreeMap<usize, Vec<(f64, f64)>>,
    pub closed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis3 {
    X,
    Y,
    Z,
}

impl RoiPolyline {
    pub fn new(
        slice_axis: Axis3,
        slices: BTreeMap<usize, Vec<(f64, f64)>>,
        closed: bool,
    ) -> Result<Self> {
        for (slice, verts) in &slices {
            if closed && verts.len() < 3 {
                return Err(Error::Geometry(format!(
                    "closed polygon on slice {slice} has fewer than 3 vertices"
                )));
            }
            if verts.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
                return Err(Error::Data(format!(
                    "non-finite vertex coordinate on slice {slice}"
                )));
            }
        }
        Ok(Self {
            slice_axis,
            slices,
            closed,
        })
    }
}

/// N x M matrix of M voxel time curves of length N, with the coordinate
/// index mapping columns back to the source grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMatrix {
    pub n_time: usize,
    pub n_voxels: usize,
    /// Column j holds the full time curve of `index[j]`.
    pub values: nalgebra::DMatrix<f64>,
    pub index: Vec<(usize, usize, usize)>,
}

// ---------------------------------------------------------------------------
// DVOL I/O
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DvolHeader {
    dims: [usize; 3],
    nt: usize,
    spacing_mm: [f64; 3],
    dt_s: f64,
    dtype: String,
}

/// Resolve a DVOL base path into its (header, payload) pair.
///
/// Accepts either the `.json` header path or the bare prefix.
fn dvol_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = if path.extension().is_some_and(|e| e == "json") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    (base.with_extension("json"), base.with_extension("raw"))
}

fn read_header(header_path: &Path) -> Result<DvolHeader> {
    let text = fs::read_to_string(header_path).map_err(|e| {
        Error::Format(format!(
            "cannot read DVOL header {}: {e}",
            header_path.display()
        ))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("corrupt DVOL header {}: {e}", header_path.display())))
}

/// Load a `f32le` DVOL pair into a [`DynamicVolume`].
pub fn load_volume(path: impl AsRef<Path>) -> Result<DynamicVolume> {
    let (header_path, raw_path) = dvol_paths(path.as_ref());
    let header = read_header(&header_path)?;
    if header.dtype != "f32le" {
        return Err(Error::Format(format!(
            "expected dtype f32le, found {:?}",
            header.dtype
        )));
    }
    let bytes = fs::read(&raw_path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("payload length not a multiple of 4".into()));
    }
    let expected = header.dims.iter().product::<usize>() * header.nt;
    let actual = bytes.len() / 4;
    if actual != expected {
        return Err(Error::Size { expected, actual });
    }
    let mut data = Vec::with_capacity(actual);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::Data("NaN or infinite value in payload".into()));
        }
        data.push(f64::from(v));
    }
    DynamicVolume::new(
        (header.dims[0], header.dims[1], header.dims[2]),
        header.nt,
        (
            header.spacing_mm[0],
            header.spacing_mm[1],
            header.spacing_mm[2],
        ),
        header.dt_s,
        data,
    )
}

/// Write a [`DynamicVolume`] as a `f32le` DVOL pair.
pub fn write_volume(path: impl AsRef<Path>, vol: &DynamicVolume) -> Result<()> {
    let (header_path, raw_path) = dvol_paths(path.as_ref());
    let header = DvolHeader {
        dims: [vol.dims.0, vol.dims.1, vol.dims.2],
        nt: vol.nt,
        spacing_mm: [vol.spacing.0, vol.spacing.1, vol.spacing.2],
        dt_s: vol.dt,
        dtype: "f32le".into(),
    };
    fs::write(&header_path, serde_json::to_string_pretty(&header)?)?;
    let mut bytes = Vec::with_capacity(vol.data.len() * 4);
    for &v in &vol.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&raw_path, bytes)?;
    Ok(())
}

/// Load a `u8` DVOL pair (header `nt` must be 1) into a [`Mask3D`].
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask3D> {
    let (header_path, raw_path) = dvol_paths(path.as_ref());
    let header = read_header(&header_path)?;
    if header.dtype != "u8" {
        return Err(Error::Format(format!(
            "expected dtype u8, found {:?}",
            header.dtype
        )));
    }
    if header.nt != 1 {
        return Err(Error::Format("mask header must declare nt = 1".into()));
    }
    let bytes = fs::read(&raw_path)?;
    let expected = header.dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Size {
            expected,
            actual: bytes.len(),
        });
    }
    Mask3D::new((header.dims[0], header.dims[1], header.dims[2]), bytes)
}

/// Write a [`Mask3D`] as a `u8` DVOL pair.
pub fn write_mask(path: impl AsRef<Path>, mask: &Mask3D) -> Result<()> {
    let (header_path, raw_path) = dvol_paths(path.as_ref());
    let header = DvolHeader {
        dims: [mask.dims.0, mask.dims.1, mask.dims.2],
        nt: 1,
        spacing_mm: [1.0, 1.0, 1.0],
        dt_s: 0.0,
        dtype: "u8".into(),
    };
    fs::write(&header_path, serde_json::to_string_pretty(&header)?)?;
    fs::write(&raw_path, mask.values.clone())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ROI CSV I/O
// ---------------------------------------------------------------------------

/// Parse a ROI CSV: lines `slice_index,x_mm,y_mm`, one polygon per slice.
///
/// Lines are grouped by slice index; vertex order within a slice is the file
/// order. Blank lines and `#` comments are ignored.
pub fn load_roi(path: impl AsRef<Path>) -> Result<RoiPolyline> {
    let text = fs::read_to_string(path.as_ref())?;
    let mut slices: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "ROI line {}: expected slice_index,x_mm,y_mm",
                lineno + 1
            )));
        }
        let slice: usize = fields[0]
            .parse()
            .map_err(|e| Error::Format(format!("ROI line {}: bad slice index ({e})", lineno + 1)))?;
        let x: f64 = fields[1]
            .parse()
            .map_err(|e| Error::Format(format!("ROI line {}: bad x_mm ({e})", lineno + 1)))?;
        let y: f64 = fields[2]
            .parse()
            .map_err(|e| Error::Format(format!("ROI line {}: bad y_mm ({e})", lineno + 1)))?;
        slices.entry(slice).or_default().push((x, y));
    }
    RoiPolyline::new(Axis3::Z, slices, true)
}

pub fn write_roi(path: impl AsRef<Path>, roi: &RoiPolyline) -> Result<()> {
    let mut out = String::new();
    for (slice, verts) in &roi.slices {
        for (x, y) in verts {
            out.push_str(&format!("{slice},{x},{y}\n"));
        }
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

/// Integer Bresenham trace from `a` to `b` inclusive, all octants.
pub fn bresenham_line(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = a;
    let (x1, y1) = b;
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut pts = Vec::with_capacity((dx.max(-dy) + 1) as usize);
    loop {
        pts.push((x, y));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    pts
}

/// Scanline parity fill of one polygon over voxel centers at integer
/// in-plane coordinates. Returns (u, v) pairs of interior voxels.
///
/// Edges crossing a scanline are counted with the half-open rule
/// (`v0 <= row < v1`), so shared vertices are not double counted.
fn scanline_fill(verts: &[(f64, f64)]) -> Vec<(i64, i64)> {
    let n = verts.len();
    if n < 3 {
        return Vec::new();
    }
    let vmin = verts.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let vmax = verts.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let mut filled = Vec::new();
    let row_lo = vmin.ceil() as i64;
    let row_hi = vmax.floor() as i64;
    for row in row_lo..=row_hi {
        let yc = row as f64;
        let mut xs: Vec<f64> = Vec::new();
        for i in 0..n {
            let (x0, y0) = verts[i];
            let (x1, y1) = verts[(i + 1) % n];
            let crosses = (y0 <= yc && yc < y1) || (y1 <= yc && yc < y0);
            if crosses {
                xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks_exact(2) {
            let (xa, xb) = (pair[0], pair[1]);
            for u in (xa.ceil() as i64)..=(xb.floor() as i64) {
                filled.push((u, row));
            }
        }
    }
    filled
}

/// Rasterize per-slice closed polygons into a solid 3D binary mask.
///
/// Polygon edges are traced with Bresenham between rounded vertex voxels,
/// then the interior is filled by scanline parity over voxel centers. The
/// voxel center of index `i` sits at `i * spacing` mm along each axis.
pub fn rasterize_roi(
    roi: &RoiPolyline,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
) -> Result<Mask3D> {
    if !roi.closed {
        return Err(Error::Geometry("ROI polylines must be closed".into()));
    }
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(Error::Argument("mask dims must be positive".into()));
    }
    if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
        return Err(Error::Argument("spacing must be positive".into()));
    }
    // In-plane axes and their extents/spacings for the chosen slice axis.
    let ((su, sv), (nu, nv), n_slices) = match roi.slice_axis {
        Axis3::Z => ((spacing.0, spacing.1), (dims.0, dims.1), dims.2),
        Axis3::Y => ((spacing.0, spacing.2), (dims.0, dims.2), dims.1),
        Axis3::X => ((spacing.1, spacing.2), (dims.1, dims.2), dims.0),
    };
    let mut mask = Mask3D::zeros(dims);
    let set = |u: i64, v: i64, slice: usize, mask: &mut Mask3D| {
        if u < 0 || v < 0 || u as usize >= nu || v as usize >= nv {
            return;
        }
        let (u, v) = (u as usize, v as usize);
        let (x, y, z) = match roi.slice_axis {
            Axis3::Z => (u, v, slice),
            Axis3::Y => (u, slice, v),
            Axis3::X => (slice, u, v),
        };
        mask.set(x, y, z, true);
    };
    for (&slice, verts_mm) in &roi.slices {
        if slice >= n_slices {
            continue;
        }
        let verts: Vec<(f64, f64)> = verts_mm.iter().map(|(a, b)| (a / su, b / sv)).collect();
        let distinct = {
            let mut d: Vec<(i64, i64)> = verts
                .iter()
                .map(|(a, b)| (a.round() as i64, b.round() as i64))
                .collect();
            d.sort_unstable();
            d.dedup();
            d.len()
        };
        if distinct < 3 {
            return Err(Error::Geometry(format!(
                "degenerate polygon on slice {slice}: fewer than 3 distinct vertices"
            )));
        }
        // Edge trace.
        let n = verts.len();
        for i in 0..n {
            let a = verts[i];
            let b = verts[(i + 1) % n];
            let ai = (a.0.round() as i64, a.1.round() as i64);
            let bi = (b.0.round() as i64, b.1.round() as i64);
            for (u, v) in bresenham_line(ai, bi) {
                set(u, v, slice, &mut mask);
            }
        }
        // Interior fill.
        for (u, v) in scanline_fill(&verts) {
            set(u, v, slice, &mut mask);
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Mask decimation
// ---------------------------------------------------------------------------

/// Block-vote decimation: output voxel is 1 iff at least half of its source
/// block is 1. Output voxel (i, j, k) covers source indices
/// `[floor(i*n/t), floor((i+1)*n/t))` along each axis.
pub fn downsample_mask(mask: &Mask3D, target_dims: (usize, usize, usize)) -> Result<Mask3D> {
    let (nx, ny, nz) = mask.dims;
    let (tx, ty, tz) = target_dims;
    if tx == 0 || ty == 0 || tz == 0 {
        return Err(Error::Argument("target dims must be >= 1".into()));
    }
    if tx > nx || ty > ny || tz > nz {
        return Err(Error::Argument(
            "target dims must not exceed source dims".into(),
        ));
    }
    let block = |i: usize, t: usize, n: usize| -> (usize, usize) {
        (i * n / t, (i + 1) * n / t)
    };
    let mut out = Mask3D::zeros(target_dims);
    for k in 0..tz {
        let (z0, z1) = block(k, tz, nz);
        for j in 0..ty {
            let (y0, y1) = block(j, ty, ny);
            for i in 0..tx {
                let (x0, x1) = block(i, tx, nx);
                let mut ones = 0usize;
                let mut total = 0usize;
                for z in z0..z1 {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            ones += usize::from(mask.get(x, y, z));
                            total += 1;
                        }
                    }
                }
                out.set(i, j, k, 2 * ones >= total);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Flatten / scatter
// ---------------------------------------------------------------------------

/// Extract the time curves of all kept voxels as an N x M matrix.
///
/// Column order is lexicographic over kept voxels (x fastest, then y, z).
pub fn flatten(vol: &DynamicVolume, keep: &Mask3D) -> Result<VoxelMatrix> {
    if keep.dims != vol.dims {
        return Err(Error::Argument(
            "keep mask dims must match volume spatial dims".into(),
        ));
    }
    let index = keep.selected();
    if index.is_empty() {
        return Err(Error::EmptySelection);
    }
    let n = vol.nt;
    let m = index.len();
    let mut values = nalgebra::DMatrix::<f64>::zeros(n, m);
    for (j, &(x, y, z)) in index.iter().enumerate() {
        for t in 0..n {
            values[(t, j)] = vol.at(x, y, z, t);
        }
    }
    Ok(VoxelMatrix {
        n_time: n,
        n_voxels: m,
        values,
        index,
    })
}

/// Inverse of [`flatten`]: write each column's curve back at its voxel.
pub fn scatter(matrix: &VoxelMatrix, target: &mut DynamicVolume) -> Result<()> {
    if target.nt != matrix.n_time {
        return Err(Error::Argument("scatter target nt mismatch".into()));
    }
    let (nx, ny, nz) = target.dims;
    for (j, &(x, y, z)) in matrix.index.iter().enumerate() {
        if x >= nx || y >= ny || z >= nz {
            return Err(Error::Argument(format!(
                "voxel index ({x},{y},{z}) outside target dims"
            )));
        }
        for t in 0..matrix.n_time {
            target.set(x, y, z, t, matrix.values[(t, j)]);
        }
    }
    Ok(())
}
