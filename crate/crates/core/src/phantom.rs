//! Analytic ellipsoid phantoms with closed-form line integrals.
//!
//! Densities are additive: a point's value is the sum of the densities of
//! every ellipsoid containing it.

use std::fmt::Write as _;

use nalgebra::{Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Ray;
use crate::volume::{Grid, LabelVolume, Volume3, BACKGROUND, LIVER, TUMOR};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipsoidSpec {
    /// mm.
    pub center: Vector3<f64>,
    /// mm, all positive.
    pub semi_axes: Vector3<f64>,
    /// Counterclockwise rotation about +z, radians.
    pub z_rotation: f64,
    /// Additive attenuation (mm⁻¹ for physical phantoms).
    pub density: f64,
}

impl EllipsoidSpec {
    pub fn new(center: [f64; 3], semi_axes: [f64; 3], z_rotation: f64, density: f64) -> Result<Self> {
        if semi_axes.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Parameter(format!("semi-axes must be positive, got {semi_axes:?}")));
        }
        Ok(EllipsoidSpec {
            center: Vector3::from(center),
            semi_axes: Vector3::from(semi_axes),
            z_rotation,
            density,
        })
    }

    pub fn sphere(center: [f64; 3], radius: f64, density: f64) -> Result<Self> {
        Self::new(center, [radius; 3], 0.0, density)
    }

    /// Maps a world point into the ellipsoid's unit-sphere frame.
    #[inline]
    fn to_unit(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.inverse_rotation() * (p - self.center)
    }

    #[inline]
    fn inverse_rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), -self.z_rotation)
    }

    pub fn contains(&self, p: Vector3<f64>) -> bool {
        self.to_unit(p).component_div(&self.semi_axes).norm_squared() <= 1.0
    }

    /// Chord length of the line `origin + t·direction` (any nonzero
    /// `direction`, not necessarily unit) through this ellipsoid.
    pub fn chord(&self, origin: Vector3<f64>, direction: Vector3<f64>) -> f64 {
        let rot = self.inverse_rotation();
        let q = (rot * (origin - self.center)).component_div(&self.semi_axes);
        let d = (rot * direction).component_div(&self.semi_axes);
        let a = d.norm_squared();
        if a == 0.0 {
            return 0.0;
        }
        let b = 2.0 * q.dot(&d);
        let c = q.norm_squared() - 1.0;
        let disc = b * b - 4.0 * a * c;
        if disc <= 0.0 {
            return 0.0;
        }
        // t₂ − t₁ = √disc / a, scaled back to world length.
        disc.sqrt() / a * direction.norm()
    }

    /// Mirror image under x → −x.
    pub fn mirrored_x(&self) -> Self {
        EllipsoidSpec {
            center: Vector3::new(-self.center.x, self.center.y, self.center.z),
            semi_axes: self.semi_axes,
            z_rotation: -self.z_rotation,
            density: self.density,
        }
    }

    pub fn is_x_symmetric(&self) -> bool {
        self.center.x == 0.0 && self.z_rotation.sin() * self.z_rotation.cos() == 0.0
    }
}

/// Voxel value = Σ densities of ellipsoids containing the voxel center.
pub fn rasterize(specs: &[EllipsoidSpec], grid: &Grid) -> Result<Volume3> {
    grid.validate()?;
    Volume3::from_fn(grid.clone(), |i, j, k| {
        let p = grid.voxel_to_world(Vector3::new(i as f64, j as f64, k as f64));
        specs.iter().filter(|e| e.contains(p)).map(|e| e.density).sum::<f64>() as f32
    })
}

/// Value of the phantom at a world point.
pub fn value_at(specs: &[EllipsoidSpec], p: Vector3<f64>) -> f64 {
    specs.iter().filter(|e| e.contains(p)).map(|e| e.density).sum()
}

/// Σ density · chord over all ellipsoids for the full line through `ray`.
pub fn analytic_line_integral(specs: &[EllipsoidSpec], ray: &Ray) -> f64 {
    line_integral(specs, ray.source, ray.direction)
}

/// As [`analytic_line_integral`] for an arbitrary parameterization
/// `origin + t·direction` of the line.
pub fn line_integral(specs: &[EllipsoidSpec], origin: Vector3<f64>, direction: Vector3<f64>) -> f64 {
    specs.iter().map(|e| e.density * e.chord(origin, direction)).sum()
}

/// Label mask from a phantom: voxels inside ellipsoid `liver` get 1, voxels
/// inside ellipsoid `tumor` (if any) get 2, everything else 0.
pub fn label_mask(specs: &[EllipsoidSpec], grid: &Grid, liver: usize, tumor: Option<usize>) -> Result<LabelVolume> {
    let get = |i: usize| {
        specs
            .get(i)
            .ok_or(Error::Index { index: i, len: specs.len() })
    };
    let liver = get(liver)?;
    let tumor = tumor.map(get).transpose()?;
    LabelVolume::from_fn(grid.clone(), |i, j, k| {
        let p = grid.voxel_to_world(Vector3::new(i as f64, j as f64, k as f64));
        if tumor.is_some_and(|t| t.contains(p)) {
            TUMOR
        } else if liver.contains(p) {
            LIVER
        } else {
            BACKGROUND
        }
    })
}

/// Normalized 10-ellipsoid 3D Shepp-Logan table (modified contrast), rows
/// `[x0, y0, z0, a, b, c, rotation_deg, density]` on the unit cube.
pub const SHEPP_LOGAN_3D: [[f64; 8]; 10] = [
    [0.0, 0.0, 0.0, 0.69, 0.92, 0.81, 0.0, 1.0],
    [0.0, -0.0184, 0.0, 0.6624, 0.874, 0.78, 0.0, -0.8],
    [0.22, 0.0, 0.0, 0.11, 0.31, 0.22, -18.0, -0.2],
    [-0.22, 0.0, 0.0, 0.16, 0.41, 0.28, 18.0, -0.2],
    [0.0, 0.35, -0.15, 0.21, 0.25, 0.41, 0.0, 0.1],
    [0.0, 0.1, 0.25, 0.046, 0.046, 0.05, 0.0, 0.1],
    [0.0, -0.1, 0.25, 0.046, 0.046, 0.05, 0.0, 0.1],
    [-0.08, -0.605, 0.0, 0.046, 0.023, 0.05, 0.0, 0.1],
    [0.0, -0.606, 0.0, 0.023, 0.023, 0.02, 0.0, 0.1],
    [0.06, -0.605, 0.0, 0.023, 0.046, 0.02, 0.0, 0.1],
];

/// The Shepp-Logan table scaled so the unit cube maps to `radius_mm`, with
/// densities multiplied by `density_scale`.
pub fn shepp_logan_3d(radius_mm: f64, density_scale: f64) -> Vec<EllipsoidSpec> {
    SHEPP_LOGAN_3D
        .iter()
        .map(|r| EllipsoidSpec {
            center: Vector3::new(r[0], r[1], r[2]) * radius_mm,
            semi_axes: Vector3::new(r[3], r[4], r[5]) * radius_mm,
            z_rotation: r[6].to_radians(),
            density: r[7] * density_scale,
        })
        .collect()
}

/// Writes specs as `cx cy cz ax ay az rot_deg density` lines.
pub fn specs_to_text(specs: &[EllipsoidSpec]) -> String {
    let mut s = String::from("# cx cy cz ax ay az rot_deg density\n");
    for e in specs {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            e.center.x,
            e.center.y,
            e.center.z,
            e.semi_axes.x,
            e.semi_axes.y,
            e.semi_axes.z,
            e.z_rotation.to_degrees(),
            e.density
        );
    }
    s
}

/// Parses the line format written by [`specs_to_text`]; `#` starts a comment.
pub fn specs_from_text(text: &str) -> Result<Vec<EllipsoidSpec>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("phantom line {}: {e}", n + 1)))?;
        if vals.len() != 8 {
            return Err(Error::Config(format!("phantom line {}: expected 8 numbers, found {}", n + 1, vals.len())));
        }
        out.push(EllipsoidSpec::new(
            [vals[0], vals[1], vals[2]],
            [vals[3], vals[4], vals[5]],
            vals[6].to_radians(),
            vals[7],
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn centered_grid(n: usize, spacing: f64) -> Grid {
        let o = -(n as f64 - 1.0) * 0.5 * spacing;
        Grid::new([n; 3], [spacing; 3], [o; 3]).unwrap()
    }

    #[test]
    fn empty_list_is_zero() {
        let v = rasterize(&[], &centered_grid(4, 1.0)).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn covering_sphere_is_constant() {
        let s = [EllipsoidSpec::sphere([0.0; 3], 100.0, 0.02).unwrap()];
        let v = rasterize(&s, &centered_grid(8, 2.0)).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.02));
    }

    #[test]
    fn containment_matches_quadratic_form() {
        let e = EllipsoidSpec::new([1.0, -2.0, 0.5], [3.0, 1.5, 2.0], 0.7, 1.0).unwrap();
        let mut state = 0x1234_5678_9abc_def0u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 8.0 - 4.0
        };
        let mut inside = 0;
        for _ in 0..100 {
            let p = Vector3::new(next() + 1.0, next() - 2.0, next() + 0.5);
            // Direct evaluation: rotate by −θ about z, divide by axes.
            let (s, c) = (-0.7f64).sin_cos();
            let d = p - Vector3::new(1.0, -2.0, 0.5);
            let x = c * d.x - s * d.y;
            let y = s * d.x + c * d.y;
            let q = (x / 3.0).powi(2) + (y / 1.5).powi(2) + (d.z / 2.0).powi(2);
            assert_eq!(e.contains(p), q <= 1.0);
            inside += (q <= 1.0) as usize;
        }
        assert!(inside > 5 && inside < 95);
    }

    #[test]
    fn diameter_chord() {
        let s = [EllipsoidSpec::sphere([3.0, 4.0, 5.0], 7.0, 0.5).unwrap()];
        let ray = Ray::new(Vector3::new(-100.0, 4.0, 5.0), Vector3::x()).unwrap();
        assert!((analytic_line_integral(&s, &ray) - 7.0).abs() < 1e-12);
        let miss = Ray::new(Vector3::new(-100.0, 40.0, 5.0), Vector3::x()).unwrap();
        assert_eq!(analytic_line_integral(&s, &miss), 0.0);
    }

    #[test]
    fn rotated_ellipsoid_chord() {
        // Rotated by 90°: the 5 mm axis now lies along y.
        let e = EllipsoidSpec::new([0.0; 3], [5.0, 2.0, 1.0], std::f64::consts::FRAC_PI_2, 1.0).unwrap();
        let along_y = Ray::new(Vector3::new(0.0, -50.0, 0.0), Vector3::y()).unwrap();
        assert!((analytic_line_integral(&[e], &along_y) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn center_value_from_containment() {
        let specs = shepp_logan_3d(100.0, 1.0);
        let expected: f64 = SHEPP_LOGAN_3D
            .iter()
            .filter(|r| {
                let q = (r[0] / r[3]).powi(2) + (r[1] / r[4]).powi(2) + (r[2] / r[5]).powi(2);
                q <= 1.0
            })
            .map(|r| r[7])
            .sum();
        assert!((expected - 0.2).abs() < 1e-12);
        assert!((value_at(&specs, Vector3::zeros()) - expected).abs() < 1e-12);
        let grid = centered_grid(33, 6.5);
        let v = rasterize(&specs, &grid).unwrap();
        assert!((v.get(16, 16, 16) as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn mirror_symmetry_per_ellipsoid() {
        let specs = shepp_logan_3d(60.0, 1.0);
        let asymmetric: Vec<usize> = (0..specs.len()).filter(|&i| !specs[i].is_x_symmetric()).collect();
        // The two ventricles differ in size and the two small bottom
        // ellipsoids are offset, so those four break x-symmetry.
        assert_eq!(asymmetric, vec![2, 3, 7, 9]);

        let grid = centered_grid(40, 3.0);
        let flip = |v: &Volume3| {
            Volume3::from_fn(grid.clone(), |i, j, k| v.get(39 - i, j, k)).unwrap()
        };
        let symmetric: Vec<EllipsoidSpec> =
            specs.iter().filter(|e| e.is_x_symmetric()).copied().collect();
        let s = rasterize(&symmetric, &grid).unwrap();
        assert_eq!(flip(&s), s);
        for &i in &asymmetric {
            let r = rasterize(&specs[i..=i], &grid).unwrap();
            let m = rasterize(&[specs[i].mirrored_x()], &grid).unwrap();
            assert_eq!(flip(&r), m);
        }
    }

    #[test]
    fn rasterized_values_in_range() {
        let v = rasterize(&shepp_logan_3d(60.0, 1.0), &centered_grid(48, 2.6)).unwrap();
        assert!(v.min_value() >= -1e-6, "{}", v.min_value());
        assert!(v.max_value() <= 1.02);
        assert!(v.max_value() > 0.9);
    }

    #[test]
    fn text_round_trip() {
        let specs = shepp_logan_3d(80.0, 0.02);
        let back = specs_from_text(&specs_to_text(&specs)).unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in specs.iter().zip(&back) {
            assert_eq!(a.center, b.center);
            assert_eq!(a.semi_axes, b.semi_axes);
            assert!((a.z_rotation - b.z_rotation).abs() < 1e-15);
            assert_eq!(a.density, b.density);
        }
        assert!(specs_from_text("1 2 3").is_err());
        assert!(specs_from_text("0 0 0 1 1 0 0 1").is_err());
    }

    #[test]
    fn mask_labels() {
        let specs = [
            EllipsoidSpec::sphere([0.0; 3], 6.0, 1.0).unwrap(),
            EllipsoidSpec::sphere([2.0, 0.0, 0.0], 2.0, 0.5).unwrap(),
        ];
        let grid = centered_grid(9, 2.0);
        let m = label_mask(&specs, &grid, 0, Some(1)).unwrap();
        assert_eq!(m.get(4, 4, 4), TUMOR);
        assert_eq!(m.get(4, 6, 4), LIVER);
        assert_eq!(m.get(0, 0, 0), BACKGROUND);
        assert!(label_mask(&specs, &grid, 5, None).is_err());
    }

    proptest! {
        #[test]
        fn line_integral_is_additive_and_reparameterization_invariant(
            ox in -80.0f64..80.0, oy in -80.0f64..80.0, oz in -80.0f64..80.0,
            dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in -1.0f64..1.0,
            shift in -50.0f64..50.0, scale in 0.01f64..20.0,
        ) {
            let d = Vector3::new(dx, dy, dz);
            prop_assume!(d.norm() > 1e-3);
            let specs = shepp_logan_3d(70.0, 1.0);
            let o = Vector3::new(ox, oy, oz);
            let full = line_integral(&specs, o, d);
            let parts: f64 = specs.iter().map(|e| line_integral(std::slice::from_ref(e), o, d)).sum();
            prop_assert!((full - parts).abs() < 1e-9);
            let reparam = line_integral(&specs, o + d * shift, d * scale);
            prop_assert!((full - reparam).abs() < 1e-9, "{} vs {}", full, reparam);
            let reversed = line_integral(&specs, o, -d);
            prop_assert!((full - reversed).abs() < 1e-9);
        }
    }
}
