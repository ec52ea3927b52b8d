//! World-space affine transforms, trilinear / nearest resampling and
//! seeded misalignment generators.
//!
//! Every resampler pulls: for each target voxel center `x` it samples the
//! source at `t⁻¹(x)` (plus an optional displacement `field(x)`).

use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume, Volume3, Voxel, BACKGROUND};

/// Fractional indices closer than this to an integer are snapped to it, so
/// lattice-aligned sampling reproduces source values exactly.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform { matrix: Matrix4::identity() }
    }

    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        let last = matrix.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::Transform(format!("last row must be (0,0,0,1), got {last}")));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Transform("non-finite matrix entry".into()));
        }
        Ok(AffineTransform { matrix })
    }

    /// `x ↦ linear·x + offset`.
    pub fn from_parts(linear: Matrix3<f64>, offset: Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&linear);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&offset);
        Self::from_matrix(m)
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        AffineTransform { matrix: Matrix4::new_translation(&t) }
    }

    /// `linear` applied about `center`: `x ↦ center + linear·(x − center)`.
    pub fn about_center(linear: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        Ok(Self::translation(center)
            .compose(&Self::from_parts(linear, Vector3::zeros())?)
            .compose(&Self::translation(-center)))
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn offset(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &AffineTransform) -> AffineTransform {
        AffineTransform { matrix: self.matrix * inner.matrix }
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let lin = self.linear();
        if lin.determinant().abs() <= 1e-12 {
            return Err(Error::Transform("singular transform".into()));
        }
        let inv = lin
            .try_inverse()
            .ok_or_else(|| Error::Transform("singular transform".into()))?;
        Self::from_parts(inv, -(inv * self.offset()))
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.linear() * p + self.offset()
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == Matrix4::identity()
    }

    /// 16 whitespace-separated decimals, row-major, one row per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| format!("{:?}", self.matrix[(r, c)])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let vals = text
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Transform(format!("bad transform text: {e}")))?;
        if vals.len() != 16 {
            return Err(Error::Transform(format!("expected 16 numbers, found {}", vals.len())));
        }
        Self::from_matrix(Matrix4::from_row_slice(&vals))
    }
}

/// Dense displacement obtained by trilinear interpolation of a control
/// lattice spanning the voxel-center extent of `domain`. Zero outside.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    domain: Grid,
    control_dims: [usize; 3],
    /// mm, x-fastest over the control lattice.
    displacements: Vec<Vector3<f64>>,
}

impl DisplacementField {
    pub fn new(domain: Grid, control_dims: [usize; 3], displacements: Vec<Vector3<f64>>) -> Result<Self> {
        domain.validate()?;
        if control_dims.iter().any(|&c| c < 2) {
            return Err(Error::Parameter(format!("control dims must be >= 2, got {control_dims:?}")));
        }
        let n: usize = control_dims.iter().product();
        if displacements.len() != n {
            return Err(Error::Shape(format!("{} displacements for {n} control points", displacements.len())));
        }
        if displacements.iter().any(|d| d.iter().any(|v| !v.is_finite())) {
            return Err(Error::Parameter("non-finite displacement".into()));
        }
        Ok(DisplacementField { domain, control_dims, displacements })
    }

    pub fn zeros(domain: Grid, control_dims: [usize; 3]) -> Result<Self> {
        let n = control_dims.iter().product();
        Self::new(domain, control_dims, vec![Vector3::zeros(); n])
    }

    pub fn domain(&self) -> &Grid {
        &self.domain
    }

    pub fn control_dims(&self) -> [usize; 3] {
        self.control_dims
    }

    pub fn displacements(&self) -> &[Vector3<f64>] {
        &self.displacements
    }

    pub fn control(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let [cx, cy, _] = self.control_dims;
        self.displacements[i + cx * (j + cy * k)]
    }

    /// World position of control point `(i, j, k)`.
    pub fn control_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let idx = [i, j, k];
        let q = Vector3::from_fn(|a, _| {
            let n = self.domain.dims[a];
            idx[a] as f64 * (n as f64 - 1.0) / (self.control_dims[a] as f64 - 1.0)
        });
        self.domain.voxel_to_world(q)
    }

    /// Largest absolute displacement component.
    pub fn max_component(&self) -> f64 {
        self.displacements.iter().map(|d| d.amax()).fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.displacements.iter().all(|d| *d == Vector3::zeros())
    }

    pub fn eval(&self, world: Vector3<f64>) -> Vector3<f64> {
        let q = self.domain.world_to_voxel(world);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.domain.dims[a];
            let cd = self.control_dims[a];
            let c = if n > 1 { q[a] / (n as f64 - 1.0) * (cd as f64 - 1.0) } else { q[a] };
            let c = snap(c);
            if !(0.0..=(cd - 1) as f64).contains(&c) {
                return Vector3::zeros();
            }
            let i0 = (c.floor() as usize).min(cd - 2);
            base[a] = i0;
            frac[a] = c - i0 as f64;
        }
        let mut out = Vector3::zeros();
        for corner in 0..8 {
            let (di, dj, dk) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let w = weight(frac[0], di) * weight(frac[1], dj) * weight(frac[2], dk);
            if w != 0.0 {
                out += self.control(base[0] + di, base[1] + dj, base[2] + dk) * w;
            }
        }
        out
    }

    /// Dense field sampled at every voxel center of `domain`, one component
    /// array per axis.
    pub fn dense(&self) -> [Vec<f32>; 3] {
        let g = &self.domain;
        let mut comps = [vec![0f32; g.len()], vec![0f32; g.len()], vec![0f32; g.len()]];
        for idx in 0..g.len() {
            let [i, j, k] = g.ijk(idx);
            let d = self.eval(g.voxel_to_world(Vector3::new(i as f64, j as f64, k as f64)));
            for a in 0..3 {
                comps[a][idx] = d[a] as f32;
            }
        }
        comps
    }

    /// Control lattice as text: a `control_dims` line, then one `dx dy dz`
    /// line per control point, x-fastest.
    pub fn control_text(&self) -> String {
        let [cx, cy, cz] = self.control_dims;
        let mut s = format!("control_dims {cx} {cy} {cz}\n");
        for d in &self.displacements {
            let _ = writeln!(s, "{:?} {:?} {:?}", d.x, d.y, d.z);
        }
        s
    }

    pub fn from_control_text(domain: Grid, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines.next().ok_or_else(|| Error::Config("empty control file".into()))?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "control_dims" {
            return Err(Error::Config(format!("bad control header: {head}")));
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            dims[a] = parts[a + 1]
                .parse()
                .map_err(|e| Error::Config(format!("bad control dim: {e}")))?;
        }
        let mut disp = Vec::new();
        for line in lines {
            let v = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("bad displacement: {e}")))?;
            if v.len() != 3 {
                return Err(Error::Config(format!("displacement line needs 3 numbers: {line}")));
            }
            disp.push(Vector3::new(v[0], v[1], v[2]));
        }
        Self::new(domain, dims, disp)
    }
}

#[inline]
fn weight(f: f64, upper: usize) -> f64 {
    if upper == 1 {
        f
    } else {
        1.0 - f
    }
}

#[inline]
fn snap(c: f64) -> f64 {
    let r = c.round();
    if (c - r).abs() < SNAP {
        r
    } else {
        c
    }
}

/// Trilinear sample at fractional source index `p`; `None` outside the
/// voxel-center hull.
fn sample_linear(src: &Volume3, p: Vector3<f64>) -> Option<f64> {
    let dims = src.dims();
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let c = snap(p[a]);
        let n = dims[a];
        if !(0.0..=(n - 1) as f64).contains(&c) {
            return None;
        }
        if n == 1 {
            continue;
        }
        let i0 = (c.floor() as usize).min(n - 2);
        base[a] = i0;
        frac[a] = c - i0 as f64;
    }
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let (di, dj, dk) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let w = weight(frac[0], di) * weight(frac[1], dj) * weight(frac[2], dk);
        if w != 0.0 {
            acc += w * src.get(base[0] + di, base[1] + dj, base[2] + dk) as f64;
        }
    }
    Some(acc)
}

fn sample_nearest(src: &LabelVolume, p: Vector3<f64>) -> Option<u8> {
    let dims = src.dims();
    let mut idx = [0usize; 3];
    for a in 0..3 {
        // Ties round up, matching the half-open voxel convention.
        let r = (snap(p[a]) + 0.5).floor();
        if !(0.0..dims[a] as f64).contains(&r) {
            return None;
        }
        idx[a] = r as usize;
    }
    Some(src.get(idx[0], idx[1], idx[2]))
}

/// Shared pull loop: target voxel → world → `t⁻¹` (+ field) → source index.
fn pull<T: Voxel + Default>(
    target: &Grid,
    src_grid: &Grid,
    t: &AffineTransform,
    field: Option<&DisplacementField>,
    sample: impl Fn(Vector3<f64>) -> T + Sync,
) -> Result<Vec<T>> {
    target.validate()?;
    let inv = t.inverse()?;
    let [nx, ny, nz] = target.dims;
    let mut out = vec![T::default(); target.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
        for j in 0..ny {
            for i in 0..nx {
                let x = target.voxel_to_world(Vector3::new(i as f64, j as f64, k as f64));
                let mut y = inv.apply(x);
                if let Some(f) = field {
                    y += f.eval(x);
                }
                slab[i + nx * j] = sample(src_grid.world_to_voxel(y));
            }
        }
    });
    debug_assert_eq!(out.len(), nx * ny * nz);
    Ok(out)
}

/// Trilinear resampling onto `target`, filling with the source minimum.
pub fn resample_linear(src: &Volume3, target: &Grid, t: &AffineTransform) -> Result<Volume3> {
    resample_linear_fill(src, target, t, src.min_value())
}

pub fn resample_linear_fill(src: &Volume3, target: &Grid, t: &AffineTransform, fill: f32) -> Result<Volume3> {
    warp_linear_onto(src, target, t, None, fill)
}

/// Nearest-neighbor resampling; outside samples are background.
pub fn resample_nearest(src: &LabelVolume, target: &Grid, t: &AffineTransform) -> Result<LabelVolume> {
    warp_nearest_onto(src, target, t, None)
}

/// CT (linear) and mask (nearest) onto `grid` with the identity transform.
pub fn align_to_grid(ct: &Volume3, mask: &LabelVolume, grid: &Grid) -> Result<(Volume3, LabelVolume)> {
    let id = AffineTransform::identity();
    Ok((resample_linear(ct, grid, &id)?, resample_nearest(mask, grid, &id)?))
}

/// Samples at `t⁻¹(x) + field(x)` on the source's own grid.
pub fn warp_linear(src: &Volume3, field: &DisplacementField, t: &AffineTransform) -> Result<Volume3> {
    warp_linear_onto(src, src.grid(), t, Some(field), src.min_value())
}

pub fn warp_nearest(src: &LabelVolume, field: &DisplacementField, t: &AffineTransform) -> Result<LabelVolume> {
    warp_nearest_onto(src, src.grid(), t, Some(field))
}

fn warp_linear_onto(
    src: &Volume3,
    target: &Grid,
    t: &AffineTransform,
    field: Option<&DisplacementField>,
    fill: f32,
) -> Result<Volume3> {
    let data = pull(target, src.grid(), t, field, |p| {
        sample_linear(src, p).map_or(fill, |v| v as f32)
    })?;
    Volume3::new(target.clone(), data)
}

fn warp_nearest_onto(
    src: &LabelVolume,
    target: &Grid,
    t: &AffineTransform,
    field: Option<&DisplacementField>,
) -> Result<LabelVolume> {
    let data = pull(target, src.grid(), t, field, |p| sample_nearest(src, p).unwrap_or(BACKGROUND))?;
    LabelVolume::new(target.clone(), data)
}

/// Uniform variates from ChaCha8 by the 53-bit division method.
pub struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Sampler { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform on [0, 1).
    pub fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [−half, half).
    pub fn symmetric(&mut self, half: f64) -> f64 {
        (2.0 * self.unit() - 1.0) * half
    }
}

/// Strengths at `alpha_a = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MisalignBounds {
    /// Fraction, e.g. 0.1 for ±10 %.
    pub max_scale: f64,
    pub max_rotation_deg: f64,
    pub max_translation_mm: f64,
    pub max_displacement_mm: f64,
    pub control_dims: [usize; 3],
}

impl Default for MisalignBounds {
    fn default() -> Self {
        MisalignBounds {
            max_scale: 0.1,
            max_rotation_deg: 10.0,
            max_translation_mm: 10.0,
            max_displacement_mm: 10.0,
            control_dims: [5, 5, 5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub scale: Vector3<f64>,
    /// Radians about x, y, z; applied x first.
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl AffineParams {
    /// Scale, then rotate (Rz·Ry·Rx), both about `center`, then translate.
    pub fn to_transform(&self, center: Vector3<f64>) -> Result<AffineTransform> {
        let rot = Rotation3::from_euler_angles(self.rotation.x, self.rotation.y, self.rotation.z);
        let lin = rot.matrix() * Matrix3::from_diagonal(&self.scale);
        Ok(AffineTransform::translation(self.translation).compose(&AffineTransform::about_center(lin, center)?))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha_a must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

pub fn random_affine_params(alpha: f64, bounds: &MisalignBounds, seed: u64) -> Result<AffineParams> {
    check_alpha(alpha)?;
    let mut s = Sampler::new(seed);
    let scale_h = alpha * bounds.max_scale;
    let rot_h = (alpha * bounds.max_rotation_deg).to_radians();
    let tr_h = alpha * bounds.max_translation_mm;
    let scale = Vector3::from_fn(|_, _| 1.0 + s.symmetric(scale_h));
    let rotation = Vector3::from_fn(|_, _| s.symmetric(rot_h));
    let translation = Vector3::from_fn(|_, _| s.symmetric(tr_h));
    Ok(AffineParams { scale, rotation, translation })
}

pub fn random_affine(alpha: f64, bounds: &MisalignBounds, center: Vector3<f64>, seed: u64) -> Result<AffineTransform> {
    random_affine_params(alpha, bounds, seed)?.to_transform(center)
}

/// Control displacements uniform in ±`alpha·max_disp` per component; the
/// outer shell of the lattice is zero so the field vanishes at the faces.
pub fn random_elastic(
    alpha: f64,
    max_disp: f64,
    control_dims: [usize; 3],
    domain: &Grid,
    seed: u64,
) -> Result<DisplacementField> {
    check_alpha(alpha)?;
    if !(max_disp >= 0.0 && max_disp.is_finite()) {
        return Err(Error::Parameter(format!("max_disp must be non-negative, got {max_disp}")));
    }
    if control_dims.iter().any(|&c| c < 2) {
        return Err(Error::Parameter(format!("control dims must be >= 2, got {control_dims:?}")));
    }
    let half = alpha * max_disp;
    let mut s = Sampler::new(seed);
    let [cx, cy, cz] = control_dims;
    let mut disp = Vec::with_capacity(cx * cy * cz);
    for k in 0..cz {
        for j in 0..cy {
            for i in 0..cx {
                let d = Vector3::from_fn(|_, _| s.symmetric(half));
                let boundary = i == 0 || j == 0 || k == 0 || i == cx - 1 || j == cy - 1 || k == cz - 1;
                disp.push(if boundary { Vector3::zeros() } else { d });
            }
        }
    }
    DisplacementField::new(domain.clone(), control_dims, disp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;
    use crate::volume::LIVER;

    fn grid(n: [usize; 3], s: f64) -> Grid {
        Grid::new(n, [s; 3], [0.0; 3]).unwrap()
    }

    fn ramp(g: &Grid) -> Volume3 {
        Volume3::from_fn(g.clone(), |i, j, k| (i as f32) * 0.5 - (j as f32) * 2.0 + (k * k) as f32 * 0.1).unwrap()
    }

    fn smooth(g: &Grid) -> Volume3 {
        let c = g.center();
        Volume3::from_fn(g.clone(), |i, j, k| {
            let p = g.voxel_to_world(Vector3::new(i as f64, j as f64, k as f64)) - c;
            (-(p.norm_squared()) / (2.0 * 6.0f64.powi(2))).exp() as f32
        })
        .unwrap()
    }

    fn ball(g: &Grid, r: f64) -> LabelVolume {
        let c = g.center();
        LabelVolume::from_fn(g.clone(), |i, j, k| {
            let p = g.voxel_to_world(Vector3::new(i as f64, j as f64, k as f64));
            if (p - c).norm() <= r { LIVER } else { BACKGROUND }
        })
        .unwrap()
    }

    #[test]
    fn inverse_and_compose() {
        let t = AffineParams {
            scale: Vector3::new(1.1, 0.9, 1.05),
            rotation: Vector3::new(0.1, -0.2, 0.3),
            translation: Vector3::new(3.0, -4.0, 5.0),
        }
        .to_transform(Vector3::new(10.0, 20.0, 30.0))
        .unwrap();
        let p = Vector3::new(1.0, 2.0, 3.0);
        let back = t.inverse().unwrap().apply(t.apply(p));
        assert!((back - p).norm() < 1e-12);
        let a = AffineTransform::translation(Vector3::x());
        let b = AffineTransform::from_parts(Matrix3::from_diagonal_element(2.0), Vector3::zeros()).unwrap();
        // b first, then a.
        assert_eq!(a.compose(&b).apply(p), Vector3::new(3.0, 4.0, 6.0));
    }

    #[test]
    fn singular_and_malformed() {
        let z = AffineTransform::from_parts(Matrix3::zeros(), Vector3::zeros()).unwrap();
        assert!(matches!(z.inverse(), Err(Error::Transform(_))));
        let g = grid([2; 3], 1.0);
        assert!(resample_linear(&Volume3::zeros(g.clone()).unwrap(), &g, &z).is_err());
        let mut m = Matrix4::identity();
        m[(3, 0)] = 1.0;
        assert!(AffineTransform::from_matrix(m).is_err());
    }

    #[test]
    fn text_round_trip() {
        let t = random_affine(0.7, &MisalignBounds::default(), Vector3::new(1.0, 2.0, 3.0), 9).unwrap();
        let text = t.to_text();
        assert_eq!(text.split_whitespace().count(), 16);
        assert_eq!(AffineTransform::from_text(&text).unwrap(), t);
        assert!(AffineTransform::from_text("1 2 3").is_err());
    }

    #[test]
    fn identity_is_exact() {
        let g = Grid::new([7, 5, 4], [0.7, 1.3, 2.1], [-3.0, 4.0, 11.0]).unwrap();
        let v = ramp(&g);
        let out = resample_linear(&v, &g, &AffineTransform::identity()).unwrap();
        assert_eq!(out, v);
        let m = LabelVolume::from_fn(g.clone(), |i, j, k| ((i + j + k) % 3) as u8).unwrap();
        assert_eq!(resample_nearest(&m, &g, &AffineTransform::identity()).unwrap(), m);
    }

    #[test]
    fn one_voxel_shift() {
        let g = Grid::new([6, 5, 4], [2.0, 1.5, 3.0], [0.0; 3]).unwrap();
        let v = ramp(&g);
        let t = AffineTransform::translation(Vector3::new(2.0, 0.0, 0.0));
        let out = resample_linear(&v, &g, &t).unwrap();
        for k in 0..4 {
            for j in 0..5 {
                for i in 1..6 {
                    assert!((out.get(i, j, k) - v.get(i - 1, j, k)).abs() <= 1e-6);
                }
                assert_eq!(out.get(0, j, k), v.min_value());
            }
        }
    }

    #[test]
    fn constant_downscale() {
        let src = Volume3::filled(grid([64; 3], 1.0), 3.25).unwrap();
        let target = Grid::new([32; 3], [2.0; 3], [0.5; 3]).unwrap();
        let out = resample_linear(&src, &target, &AffineTransform::identity()).unwrap();
        assert!(out.data().iter().all(|&x| (x - 3.25).abs() <= 1e-6));
    }

    #[test]
    fn point_reflection_of_single_label() {
        let g = grid([5, 7, 9], 1.0);
        let mut data = vec![0u8; g.len()];
        data[g.linear_index(1, 2, 6)] = 2;
        let m = LabelVolume::new(g.clone(), data).unwrap();
        // 180° about the z axis through the grid center.
        let rz = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        let t = AffineTransform::about_center(rz, g.center()).unwrap();
        let out = resample_nearest(&m, &g, &t).unwrap();
        // (i, j, k) ↦ (4 − i, 6 − j, k)
        assert_eq!(out.count(2), 1);
        assert_eq!(out.get(3, 4, 6), 2);
    }

    #[test]
    fn labels_preserved() {
        let g = grid([12; 3], 1.0);
        let m = LabelVolume::from_fn(g.clone(), |i, j, k| ((i * 7 + j * 3 + k) % 3) as u8).unwrap();
        for seed in 0..4 {
            let t = random_affine(1.0, &MisalignBounds::default(), g.center(), seed).unwrap();
            let out = resample_nearest(&m, &g, &t).unwrap();
            assert!(out.data().iter().all(|&l| l <= 2));
        }
    }

    #[test]
    fn composition_consistency() {
        let g = grid([40; 3], 1.0);
        let v = smooth(&g);
        let b = MisalignBounds::default();
        let t1 = random_affine(0.3, &b, g.center(), 1).unwrap();
        let t2 = random_affine(0.3, &b, g.center(), 2).unwrap();
        let twice = resample_linear(&resample_linear(&v, &g, &t1).unwrap(), &g, &t2).unwrap();
        let once = resample_linear(&v, &g, &t2.compose(&t1)).unwrap();
        let range = (v.max_value() - v.min_value()) as f64;
        let worst = twice
            .data()
            .iter()
            .zip(once.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        assert!(worst <= 2e-2 * range, "{worst}");
    }

    #[test]
    fn alpha_zero_is_identity() {
        let b = MisalignBounds::default();
        let t = random_affine(0.0, &b, Vector3::new(12.3, -4.0, 99.0), 77).unwrap();
        assert!(t.is_identity(), "{}", t.matrix());
        let g = grid([6; 3], 1.0);
        let f = random_elastic(0.0, 10.0, [5; 3], &g, 77).unwrap();
        assert!(f.is_zero());
        assert!(random_affine(1.5, &b, Vector3::zeros(), 0).is_err());
        assert!(random_elastic(-0.1, 10.0, [5; 3], &g, 0).is_err());
        assert!(random_elastic(0.5, 10.0, [1, 5, 5], &g, 0).is_err());
    }

    #[test]
    fn seeded_reproducibility() {
        let b = MisalignBounds::default();
        let g = grid([8; 3], 1.0);
        assert_eq!(
            random_affine(0.6, &b, g.center(), 5).unwrap(),
            random_affine(0.6, &b, g.center(), 5).unwrap()
        );
        assert_ne!(
            random_affine(0.6, &b, g.center(), 5).unwrap(),
            random_affine(0.6, &b, g.center(), 6).unwrap()
        );
        assert_eq!(
            random_elastic(0.6, 10.0, [4; 3], &g, 5).unwrap(),
            random_elastic(0.6, 10.0, [4; 3], &g, 5).unwrap()
        );
    }

    #[test]
    fn rotation_sampler_spread() {
        let b = MisalignBounds::default();
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for seed in 0..10_000 {
            let p = random_affine_params(1.0, &b, seed).unwrap();
            for r in p.rotation.iter().map(|r| r.to_degrees()) {
                assert!(r.abs() <= 10.0);
                lo = lo.min(r);
                hi = hi.max(r);
            }
        }
        assert!(hi - lo >= 18.0, "{lo}..{hi}");
    }

    #[test]
    fn unit_uniform_range() {
        let mut s = Sampler::new(0);
        let xs: Vec<f64> = (0..10_000).map(|_| s.unit()).collect();
        assert!(xs.iter().all(|x| (0.0..1.0).contains(x)));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn field_interpolates_and_is_bounded() {
        let g = Grid::new([17, 13, 9], [1.5, 2.0, 3.0], [5.0, -2.0, 1.0]).unwrap();
        let f = random_elastic(0.8, 10.0, [5, 4, 3], &g, 3).unwrap();
        assert!(!f.is_zero());
        for k in 0..3 {
            for j in 0..4 {
                for i in 0..5 {
                    let d = f.eval(f.control_position(i, j, k));
                    assert!((d - f.control(i, j, k)).norm() < 1e-9);
                }
            }
        }
        let bound = 0.8 * 10.0;
        assert!(f.max_component() <= bound);
        let dense = f.dense();
        assert!(dense.iter().flatten().all(|&v| (v as f64).abs() <= bound + 1e-5));
        // Faces of the domain carry zero displacement.
        assert_eq!(f.eval(g.voxel_to_world(Vector3::new(0.0, 6.0, 4.0))), Vector3::zeros());
        let back = DisplacementField::from_control_text(g.clone(), &f.control_text()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn warp_degenerates_to_resample() {
        let g = grid([14; 3], 1.0);
        let v = smooth(&g);
        let m = ball(&g, 4.0);
        let zero = DisplacementField::zeros(g.clone(), [3; 3]).unwrap();
        let id = AffineTransform::identity();
        assert_eq!(warp_linear(&v, &zero, &id).unwrap(), v);
        assert_eq!(warp_nearest(&m, &zero, &id).unwrap(), m);
        let t = random_affine(0.5, &MisalignBounds::default(), g.center(), 4).unwrap();
        assert_eq!(warp_linear(&v, &zero, &t).unwrap(), resample_linear(&v, &g, &t).unwrap());
        assert_eq!(warp_nearest(&m, &zero, &t).unwrap(), resample_nearest(&m, &g, &t).unwrap());
    }

    #[test]
    fn align_contract() {
        let src = Grid::new([20; 3], [1.0; 3], [-10.0; 3]).unwrap();
        let target = Grid::new([9, 8, 7], [0.688, 1.032, 0.688], [-3.0, -4.0, -2.0]).unwrap();
        let (ct, mask) = align_to_grid(&smooth(&src), &ball(&src, 5.0), &target).unwrap();
        assert_eq!(ct.grid(), &target);
        assert_eq!(mask.grid(), &target);
        let again = resample_nearest(&ball(&src, 5.0), &target, &AffineTransform::identity()).unwrap();
        assert_eq!(dice(&mask, &again, LIVER).unwrap(), 1.0);
    }

    #[test]
    fn dice_decreases_with_strength() {
        let g = grid([32; 3], 2.0);
        let m = ball(&g, 18.0);
        let b = MisalignBounds::default();
        let mean = |alpha: f64| {
            (0..8u64)
                .map(|seed| {
                    let t = random_affine(alpha, &b, g.center(), seed).unwrap();
                    let f = random_elastic(alpha, b.max_displacement_mm, b.control_dims, &g, seed + 1000).unwrap();
                    dice(&m, &warp_nearest(&m, &f, &t).unwrap(), LIVER).unwrap()
                })
                .sum::<f64>()
                / 8.0
        };
        let d: Vec<f64> = [0.125, 0.25, 0.5, 1.0].iter().map(|&a| mean(a)).collect();
        assert!(d.windows(2).all(|w| w[1] < w[0]), "{d:?}");
    }
}
