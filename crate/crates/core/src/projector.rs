//! Siddon ray-traced forward projection (digitally reconstructed radiographs).
//!
//! Everything here works in the line-integral domain: a projection value is
//! `∫ μ dl` with μ in mm⁻¹ and dl in mm. [`to_intensity`] converts to
//! Beer–Lambert intensities for display only.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, Ray};
use crate::nifti;
use crate::volume::{Grid, Volume3};

/// Linear attenuation coefficient of water used by default, mm⁻¹.
pub const DEFAULT_MU_WATER: f64 = 0.02;

/// Per-angle detector images, layout `[angle][v][u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    geom: ConeBeamGeometry,
    data: Vec<f32>,
}

impl ProjectionStack {
    pub fn new(geom: ConeBeamGeometry, data: Vec<f32>) -> Result<Self> {
        geom.validate()?;
        let expected = geom.n_angles() * geom.nv() * geom.nu();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "projection data length {} != {} angles × {} × {}",
                data.len(),
                geom.n_angles(),
                geom.nv(),
                geom.nu()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite projection value".into()));
        }
        Ok(ProjectionStack { geom, data })
    }

    pub fn zeros(geom: ConeBeamGeometry) -> Result<Self> {
        let n = geom.n_angles() * geom.nv() * geom.nu();
        Self::new(geom, vec![0.0; n])
    }

    pub fn geometry(&self) -> &ConeBeamGeometry {
        &self.geom
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, angle: usize, iv: usize, iu: usize) -> f32 {
        self.data[(angle * self.geom.nv() + iv) * self.geom.nu() + iu]
    }

    /// One detector image.
    pub fn view(&self, angle: usize) -> &[f32] {
        let n = self.geom.nu() * self.geom.nv();
        &self.data[angle * n..(angle + 1) * n]
    }

    /// Applies `f(angle, iv, iu, value)` to every pixel.
    pub(crate) fn map_pixels(&self, f: impl Fn(usize, usize, usize, f32) -> f32 + Sync) -> Self {
        let (nu, nv) = (self.geom.nu(), self.geom.nv());
        let mut out = vec![0.0f32; self.data.len()];
        out.par_chunks_mut(nu).zip(self.data.par_chunks(nu)).enumerate().for_each(|(row, (dst, src))| {
            let (a, iv) = (row / nv, row % nv);
            for (iu, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
                *d = f(a, iv, iu, s);
            }
        });
        ProjectionStack { geom: self.geom.clone(), data: out }
    }

    pub(crate) fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.geom.clone(), data)
    }

    /// The stack as a `(nu, nv, n_angles)` volume for NIfTI storage.
    pub fn to_volume(&self) -> Result<Volume3> {
        let grid = Grid::new(
            [self.geom.nu(), self.geom.nv(), self.geom.n_angles()],
            [self.geom.det_pitch[0], self.geom.det_pitch[1], 1.0],
            [0.0; 3],
        )?;
        Volume3::new(grid, self.data.clone())
    }

    /// Writes the stack as NIfTI plus a geometry sidecar next to it
    /// (see [`sidecar_path`]).
    pub fn write(&self, path: impl AsRef<Path>, gzip: bool) -> Result<()> {
        let path = path.as_ref();
        nifti::write_nifti(&self.to_volume()?, path, gzip)?;
        let side = sidecar_path(path);
        std::fs::write(&side, self.geom.to_config_string()).map_err(|e| Error::io(side, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let geom = ConeBeamGeometry::from_config_str(&text)?;
        let (vol, _) = nifti::read_nifti(path)?;
        if vol.dims() != [geom.nu(), geom.nv(), geom.n_angles()] {
            return Err(Error::Shape(format!(
                "projection image dims {:?} disagree with sidecar geometry ({}, {}, {})",
                vol.dims(),
                geom.nu(),
                geom.nv(),
                geom.n_angles()
            )));
        }
        Self::new(geom, vol.into_data())
    }
}

/// `proj.nii.gz` → `proj.geometry.txt`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("projections");
    let stem = name.strip_suffix(".gz").unwrap_or(name);
    let stem = stem.strip_suffix(".nii").unwrap_or(stem);
    path.with_file_name(format!("{stem}.geometry.txt"))
}

/// `μ = mu_water · (1 + HU / 1000)`, clamped below at 0.
pub fn hu_to_attenuation(ct: &Volume3, mu_water: f64) -> Result<Volume3> {
    if !(mu_water > 0.0 && mu_water.is_finite()) {
        return Err(Error::Parameter(format!("mu_water must be positive, got {mu_water}")));
    }
    Ok(ct.map(|hu| (mu_water * (1.0 + hu as f64 / 1000.0)).max(0.0) as f32))
}

/// Beer–Lambert intensities `i0 · exp(−p)`, same layout as the input.
pub fn to_intensity(stack: &ProjectionStack, i0: f64) -> Result<ProjectionStack> {
    if !(i0 > 0.0 && i0.is_finite()) {
        return Err(Error::Parameter(format!("i0 must be positive, got {i0}")));
    }
    Ok(stack.map_pixels(|_, _, _, p| (i0 * (-(p as f64)).exp()) as f32))
}

/// Inverse of [`to_intensity`]: `p = −ln(I / i0)`.
pub fn from_intensity(stack: &ProjectionStack, i0: f64) -> Result<ProjectionStack> {
    if !(i0 > 0.0 && i0.is_finite()) {
        return Err(Error::Parameter(format!("i0 must be positive, got {i0}")));
    }
    if stack.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Parameter("intensities must be positive".into()));
    }
    Ok(stack.map_pixels(|_, _, _, i| (-(i as f64 / i0).ln()) as f32))
}

/// Voxel boundary planes of an axis-aligned grid.
#[derive(Debug, Clone, Copy)]
struct Planes {
    lo: [f64; 3],
    hi: [f64; 3],
    spacing: [f64; 3],
    dims: [usize; 3],
}

impl Planes {
    fn new(grid: &Grid) -> Result<Self> {
        if !grid.is_axis_aligned() {
            return Err(Error::UnsupportedOrientation);
        }
        let mut p = Planes { lo: [0.0; 3], hi: [0.0; 3], spacing: [0.0; 3], dims: grid.dims };
        for a in 0..3 {
            p.spacing[a] = grid.spacing[a];
            p.lo[a] = grid.origin[a] - 0.5 * grid.spacing[a];
            p.hi[a] = p.lo[a] + grid.dims[a] as f64 * grid.spacing[a];
        }
        Ok(p)
    }

    /// Sum of `μ · length` over the voxels crossed by the full line through
    /// `ray`. Voxel `i` owns the half-open interval `[lo + i·s, lo + (i+1)·s)`
    /// along each axis.
    fn trace(&self, ray: &Ray, data: &[f32]) -> f64 {
        let mut sum = 0.0f64;
        self.walk(ray, |idx, len| sum += data[idx] as f64 * len);
        sum
    }

    /// Calls `visit(linear index, length)` for every crossed voxel in order.
    #[inline]
    fn walk(&self, ray: &Ray, mut visit: impl FnMut(usize, f64)) {
        let src = [ray.source.x, ray.source.y, ray.source.z];
        let dir = [ray.direction.x, ray.direction.y, ray.direction.z];

        // Entry/exit parameters of the grid's bounding box.
        let mut t_in = f64::NEG_INFINITY;
        let mut t_out = f64::INFINITY;
        for a in 0..3 {
            if dir[a] == 0.0 {
                if src[a] < self.lo[a] || src[a] >= self.hi[a] {
                    return;
                }
            } else {
                let t0 = (self.lo[a] - src[a]) / dir[a];
                let t1 = (self.hi[a] - src[a]) / dir[a];
                t_in = t_in.max(t0.min(t1));
                t_out = t_out.min(t0.max(t1));
            }
        }
        if !(t_out > t_in) {
            return;
        }

        // Per-axis next interior plane crossing; planes are revisited by
        // index so no error accumulates along the walk.
        let mut next_plane = [0i64; 3];
        let mut step = [0i64; 3];
        let mut next_t = [f64::INFINITY; 3];
        for a in 0..3 {
            if dir[a] == 0.0 {
                continue;
            }
            let entry = (src[a] + t_in * dir[a] - self.lo[a]) / self.spacing[a];
            let (k, s) = if dir[a] > 0.0 {
                (entry.floor() as i64 + 1, 1)
            } else {
                (entry.ceil() as i64 - 1, -1)
            };
            next_plane[a] = k;
            step[a] = s;
            next_t[a] = self.plane_t(a, k, src[a], dir[a]);
            // Guard against an entry plane that rounding left behind t_in.
            while next_t[a] <= t_in {
                next_plane[a] += s;
                next_t[a] = self.plane_t(a, next_plane[a], src[a], dir[a]);
            }
        }

        let [nx, ny, nz] = self.dims;
        let mut t = t_in;
        loop {
            let t_next = next_t[0].min(next_t[1]).min(next_t[2]).min(t_out);
            if t_next > t {
                let tm = 0.5 * (t + t_next);
                let i = self.cell(0, src[0] + tm * dir[0], nx);
                let j = self.cell(1, src[1] + tm * dir[1], ny);
                let k = self.cell(2, src[2] + tm * dir[2], nz);
                visit(i + nx * (j + ny * k), t_next - t);
                t = t_next;
            }
            if t >= t_out {
                break;
            }
            for a in 0..3 {
                if next_t[a] <= t {
                    next_plane[a] += step[a];
                    next_t[a] = self.plane_t(a, next_plane[a], src[a], dir[a]);
                }
            }
        }
    }

    #[inline]
    fn plane_t(&self, axis: usize, k: i64, src: f64, dir: f64) -> f64 {
        (self.lo[axis] + k as f64 * self.spacing[axis] - src) / dir
    }

    #[inline]
    fn cell(&self, axis: usize, x: f64, n: usize) -> usize {
        let c = ((x - self.lo[axis]) / self.spacing[axis]).floor();
        (c.max(0.0) as usize).min(n - 1)
    }
}

/// Exact radiological path `Σ μᵢ·ℓᵢ` of the line through `ray` across an
/// axis-aligned volume; 0 when the line misses the grid.
pub fn siddon_trace(ray: &Ray, vol: &Volume3) -> Result<f64> {
    let planes = Planes::new(vol.grid())?;
    Ok(planes.trace(ray, vol.data()))
}

/// Per-voxel `(linear index, intersection length)` pairs along the line, in
/// traversal order.
pub fn siddon_path(ray: &Ray, grid: &Grid) -> Result<Vec<(usize, f64)>> {
    let planes = Planes::new(grid)?;
    let mut path = Vec::with_capacity(grid.dims.iter().sum::<usize>() + 1);
    planes.walk(ray, |idx, len| path.push((idx, len)));
    Ok(path)
}

/// DRR stack: `data[a][v][u] = siddon_trace(ray through pixel (u, v) at view a)`.
/// Each pixel is computed independently, so the result does not depend on
/// the number of worker threads.
pub fn forward_project(vol: &Volume3, geom: &ConeBeamGeometry) -> Result<ProjectionStack> {
    geom.validate()?;
    let planes = Planes::new(vol.grid())?;
    let (nu, nv) = (geom.nu(), geom.nv());
    let frames = (0..geom.n_angles()).map(|a| geom.view(a)).collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0f32; geom.n_angles() * nv * nu];
    out.par_chunks_mut(nu).enumerate().for_each(|(row, dst)| {
        let (a, iv) = (row / nv, row % nv);
        let frame = &frames[a];
        for (iu, d) in dst.iter_mut().enumerate() {
            let (u, v) = geom.pixel_center(iu, iv);
            let (um, vm) = geom.detector_mm(u, v);
            *d = planes.trace(&frame.ray(um, vm), vol.data()) as f32;
        }
    });
    ProjectionStack::new(geom.clone(), out)
}
