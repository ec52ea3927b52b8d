//! Volume geometry and the dense voxel containers shared by every stage.
//!
//! Voxel data is stored x-fastest: the linear index of `(i, j, k)` is
//! `i + nx * (j + ny * k)`. World coordinates are in millimetres and refer to
//! voxel centers.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Maximum per-element deviation of `Dᵀ·D` from identity for a direction matrix.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

/// Label values carried by [`LabelVolume`].
pub const BACKGROUND: u8 = 0;
pub const LIVER: u8 = 1;
pub const TUMOR: u8 = 2;

/// Placement of a voxel lattice in world space.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: Vector3<f64>,
    pub origin: Vector3<f64>,
    pub direction: Matrix3<f64>,
}

impl Grid {
    /// Axis-aligned grid.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        Self::with_direction(dims, spacing, origin, Matrix3::identity())
    }

    pub fn with_direction(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        direction: Matrix3<f64>,
    ) -> Result<Self> {
        let grid = Grid {
            dims,
            spacing: Vector3::from(spacing),
            origin: Vector3::from(origin),
            direction,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Axis-aligned grid of `round(extent / spacing)` voxels per axis whose
    /// geometric center sits at `center`.
    pub fn from_extent(extent_mm: [f64; 3], spacing: [f64; 3], center: [f64; 3]) -> Result<Self> {
        let mut dims = [0usize; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            if !(extent_mm[a] > 0.0 && spacing[a] > 0.0) {
                return Err(Error::Parameter(format!(
                    "extent and spacing must be positive (axis {a}: {} / {})",
                    extent_mm[a], spacing[a]
                )));
            }
            dims[a] = ((extent_mm[a] / spacing[a]).round() as usize).max(1);
            origin[a] = center[a] - (dims[a] as f64 - 1.0) * 0.5 * spacing[a];
        }
        Self::new(dims, spacing, origin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidVolume(format!("zero dimension in {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive, got {:?}",
                self.spacing.as_slice()
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidVolume("non-finite origin".into()));
        }
        let gram = self.direction.transpose() * self.direction;
        let dev = (gram - Matrix3::identity()).abs().max();
        if !(dev < ORTHONORMAL_TOLERANCE) {
            return Err(Error::InvalidVolume(format!(
                "direction matrix is not orthonormal (max deviation {dev:e})"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Inverse of [`Grid::linear_index`].
    #[inline]
    pub fn ijk(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// `origin + direction · (index ⊙ spacing)`.
    #[inline]
    pub fn voxel_to_world(&self, index: Vector3<f64>) -> Vector3<f64> {
        self.origin + self.direction * index.component_mul(&self.spacing)
    }

    /// Continuous voxel index of a world point.
    #[inline]
    pub fn world_to_voxel(&self, world: Vector3<f64>) -> Vector3<f64> {
        (self.direction.transpose() * (world - self.origin)).component_div(&self.spacing)
    }

    /// World position of the midpoint between the first and last voxel centers.
    pub fn center(&self) -> Vector3<f64> {
        let mid = Vector3::new(
            (self.dims[0] as f64 - 1.0) * 0.5,
            (self.dims[1] as f64 - 1.0) * 0.5,
            (self.dims[2] as f64 - 1.0) * 0.5,
        );
        self.voxel_to_world(mid)
    }

    pub fn is_axis_aligned(&self) -> bool {
        (self.direction - Matrix3::identity()).abs().max() < 1e-9
    }

    /// Same lattice up to `tol` mm on origin/spacing and `tol` on direction.
    pub fn matches(&self, other: &Grid, tol: f64) -> bool {
        self.dims == other.dims
            && (self.spacing - other.spacing).abs().max() <= tol
            && (self.origin - other.origin).abs().max() <= tol
            && (self.direction - other.direction).abs().max() <= tol
    }

    pub(crate) fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self.matches(other, 1e-6) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "grid mismatch: {:?}/{:?} vs {:?}/{:?}",
                self.dims,
                self.spacing.as_slice(),
                other.dims,
                other.spacing.as_slice()
            )))
        }
    }
}

/// Element type of a [`Volume`].
pub trait Voxel: Copy + Send + Sync + PartialEq + std::fmt::Debug + 'static {
    fn validate(data: &[Self]) -> Result<()>;
    fn to_f64(self) -> f64;
}

impl Voxel for f32 {
    fn validate(_data: &[Self]) -> Result<()> {
        Ok(())
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Voxel for u8 {
    fn validate(data: &[Self]) -> Result<()> {
        match data.iter().find(|&&v| v > TUMOR) {
            Some(v) => Err(Error::InvalidVolume(format!("label value {v} outside {{0, 1, 2}}"))),
            None => Ok(()),
        }
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Dense 3D grid of voxels with physical placement.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T: Voxel> {
    grid: Grid,
    data: Vec<T>,
}

/// Scalar volume (CT in HU, attenuation in mm⁻¹, reconstructions).
pub type Volume3 = Volume<f32>;

/// Segmentation volume: 0 background, 1 liver, 2 tumor.
pub type LabelVolume = Volume<u8>;

impl<T: Voxel> Volume<T> {
    pub fn new(grid: Grid, data: Vec<T>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        T::validate(&data)?;
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: T) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![value; n])
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        let [nx, ny, nz] = grid.dims;
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(grid, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.grid.linear_index(i, j, k)]
    }

    pub fn voxel_to_world(&self, index: Vector3<f64>) -> Vector3<f64> {
        self.grid.voxel_to_world(index)
    }

    /// Same data, different placement. Dims must agree.
    pub fn with_grid(self, grid: Grid) -> Result<Self> {
        if grid.dims != self.grid.dims {
            return Err(Error::Shape(format!(
                "cannot re-place {:?} data on a {:?} grid",
                self.grid.dims, grid.dims
            )));
        }
        Self::new(grid, self.data)
    }
}

impl Volume3 {
    pub fn zeros(grid: Grid) -> Result<Self> {
        Self::filled(grid, 0.0)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume3 {
        Volume {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

impl LabelVolume {
    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }
}

/// Unweighted mean world position of all voxels carrying `label`.
pub fn center_of_gravity(mask: &LabelVolume, label: u8) -> Result<Vector3<f64>> {
    let grid = mask.grid();
    let mut sum = Vector3::zeros();
    let mut count = 0usize;
    for (idx, &v) in mask.data().iter().enumerate() {
        if v == label {
            let [i, j, k] = grid.ijk(idx);
            sum += Vector3::new(i as f64, j as f64, k as f64);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask(label));
    }
    // Mean in index space, then one affine map: exact translation equivariance.
    Ok(grid.voxel_to_world(sum / count as f64))
}
