//! Circular cone-beam acquisition geometry with a flat-panel detector.
//!
//! Conventions: the rotation axis is parallel to world z and passes through
//! `isocenter`. At gantry angle β the source sits at
//! `isocenter + sad·(cos β, sin β, 0)`, so β = 0 puts it on +x and β grows
//! counterclockwise seen from +z. The detector plane is perpendicular to the
//! source-to-axis line at distance `sdd` from the source; its u axis is the
//! in-plane tangent `(−sin β, cos β, 0)` and its v axis is world +z.
//! Detector coordinates `(u, v)` are in pixels measured from the detector
//! center; the physical offset from the principal ray is
//! `u·pitch_u + offset_u` (likewise for v).

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const DEFAULT_SAD_MM: f64 = 785.0;
pub const DEFAULT_SDD_MM: f64 = 1300.0;
pub const DEFAULT_DET_PIXELS: [usize; 2] = [512, 512];
pub const DEFAULT_DET_PITCH_MM: [f64; 2] = [0.85, 0.85];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub source: Vector3<f64>,
    /// Unit length.
    pub direction: Vector3<f64>,
}

impl Ray {
    /// Normalizes `direction`; fails on a zero vector.
    pub fn new(source: Vector3<f64>, direction: Vector3<f64>) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Geometry("ray direction must be a nonzero finite vector".into()));
        }
        Ok(Ray { source, direction: direction / n })
    }

    pub fn through(from: Vector3<f64>, to: Vector3<f64>) -> Result<Self> {
        Self::new(from, to - from)
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.source + self.direction * t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeBeamGeometry {
    pub sad: f64,
    pub sdd: f64,
    /// `[nu, nv]`.
    pub det_pixels: [usize; 2],
    /// `[pitch_u, pitch_v]` in mm.
    pub det_pitch: [f64; 2],
    /// Detector center offset from the principal ray, mm.
    pub det_offset: [f64; 2],
    /// Gantry angles in radians, strictly increasing within [0, 2π).
    pub angles: Vec<f64>,
    pub isocenter: Vector3<f64>,
}

/// `n_p` equidistant views over a full turn: `angles[k] = 2πk / n_p`.
pub fn make_circular_trajectory(
    n_p: usize,
    sad: f64,
    sdd: f64,
    det_pixels: [usize; 2],
    det_pitch: [f64; 2],
) -> Result<ConeBeamGeometry> {
    if n_p == 0 {
        return Err(Error::Geometry("number of projections must be at least 1".into()));
    }
    let angles = (0..n_p).map(|k| TAU * k as f64 / n_p as f64).collect();
    let geom = ConeBeamGeometry {
        sad,
        sdd,
        det_pixels,
        det_pitch,
        det_offset: [0.0, 0.0],
        angles,
        isocenter: Vector3::zeros(),
    };
    geom.validate()?;
    Ok(geom)
}

impl ConeBeamGeometry {
    pub fn with_isocenter(mut self, isocenter: Vector3<f64>) -> Self {
        self.isocenter = isocenter;
        self
    }

    pub fn with_offset(mut self, offset: [f64; 2]) -> Self {
        self.det_offset = offset;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sad > 0.0 && self.sad < self.sdd && self.sdd.is_finite()) {
            return Err(Error::Geometry(format!(
                "need 0 < sad < sdd, got sad = {}, sdd = {}",
                self.sad, self.sdd
            )));
        }
        if self.det_pixels.iter().any(|&n| n == 0) {
            return Err(Error::Geometry("detector needs at least one pixel per axis".into()));
        }
        if self.det_pitch.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::Geometry("detector pitch must be positive".into()));
        }
        if self.det_offset.iter().chain(self.isocenter.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Geometry("non-finite detector offset or isocenter".into()));
        }
        if self.angles.is_empty() {
            return Err(Error::Geometry("trajectory has no angles".into()));
        }
        if self.angles.iter().any(|&a| !(0.0..TAU).contains(&a)) {
            return Err(Error::Geometry("angles must lie in [0, 2π)".into()));
        }
        if self.angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Geometry("angles must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn nu(&self) -> usize {
        self.det_pixels[0]
    }

    pub fn nv(&self) -> usize {
        self.det_pixels[1]
    }

    /// `sdd / sad`.
    pub fn magnification(&self) -> f64 {
        self.sdd / self.sad
    }

    fn angle(&self, angle_index: usize) -> Result<f64> {
        self.angles
            .get(angle_index)
            .copied()
            .ok_or(Error::Index { index: angle_index, len: self.angles.len() })
    }

    /// Orthonormal frame of one view.
    pub fn view(&self, angle_index: usize) -> Result<ViewFrame> {
        let beta = self.angle(angle_index)?;
        let (s, c) = beta.sin_cos();
        let toward_source = Vector3::new(c, s, 0.0);
        Ok(ViewFrame {
            source: self.isocenter + toward_source * self.sad,
            toward_source,
            u_axis: Vector3::new(-s, c, 0.0),
            v_axis: Vector3::z(),
            sad: self.sad,
            sdd: self.sdd,
        })
    }

    /// Fractional pixel coordinate of pixel index `(iu, iv)`'s center,
    /// measured from the detector center.
    #[inline]
    pub fn pixel_center(&self, iu: usize, iv: usize) -> (f64, f64) {
        (
            iu as f64 - (self.det_pixels[0] as f64 - 1.0) * 0.5,
            iv as f64 - (self.det_pixels[1] as f64 - 1.0) * 0.5,
        )
    }

    /// Physical offset (mm) from the principal-ray intersection of detector
    /// coordinate `(u, v)`.
    #[inline]
    pub fn detector_mm(&self, u: f64, v: f64) -> (f64, f64) {
        (u * self.det_pitch[0] + self.det_offset[0], v * self.det_pitch[1] + self.det_offset[1])
    }

    pub fn pixel_position(&self, angle_index: usize, u: f64, v: f64) -> Result<Vector3<f64>> {
        let frame = self.view(angle_index)?;
        let (um, vm) = self.detector_mm(u, v);
        Ok(frame.detector_point(um, vm))
    }

    /// Ray from the source through detector coordinate `(u, v)`.
    pub fn ray_for_pixel(&self, angle_index: usize, u: f64, v: f64) -> Result<Ray> {
        let frame = self.view(angle_index)?;
        let (um, vm) = self.detector_mm(u, v);
        Ok(frame.ray(um, vm))
    }

    /// Serializes to the plain-text key-value format.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let n = self.angles.len();
        let _ = writeln!(s, "sad_mm = {}", self.sad);
        let _ = writeln!(s, "sdd_mm = {}", self.sdd);
        let _ = writeln!(s, "det_nu = {}", self.det_pixels[0]);
        let _ = writeln!(s, "det_nv = {}", self.det_pixels[1]);
        let _ = writeln!(s, "pitch_u_mm = {}", self.det_pitch[0]);
        let _ = writeln!(s, "pitch_v_mm = {}", self.det_pitch[1]);
        let _ = writeln!(s, "n_projections = {n}");
        let _ = writeln!(s, "offset_u_mm = {}", self.det_offset[0]);
        let _ = writeln!(s, "offset_v_mm = {}", self.det_offset[1]);
        let _ = writeln!(s, "iso_x_mm = {}", self.isocenter[0]);
        let _ = writeln!(s, "iso_y_mm = {}", self.isocenter[1]);
        let _ = writeln!(s, "iso_z_mm = {}", self.isocenter[2]);
        s
    }

    /// Parses the key-value format. `sad_mm`, `sdd_mm`, `det_nu`, `det_nv`,
    /// `pitch_u_mm`, `pitch_v_mm` and `n_projections` are required; offsets
    /// and isocenter default to 0. The trajectory is regenerated as a full
    /// equidistant turn.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let geom = Self::from_key_values(&kv, None)?;
        let known = [
            "sad_mm", "sdd_mm", "det_nu", "det_nv", "pitch_u_mm", "pitch_v_mm", "n_projections",
            "offset_u_mm", "offset_v_mm", "iso_x_mm", "iso_y_mm", "iso_z_mm",
        ];
        if let Some(k) = kv.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown geometry key `{k}`")));
        }
        Ok(geom)
    }

    /// Builds a geometry from already parsed keys, falling back to `base`
    /// (or the required-key error) for anything missing.
    pub fn from_key_values(kv: &BTreeMap<String, String>, base: Option<&ConeBeamGeometry>) -> Result<Self> {
        fn get<T: std::str::FromStr>(
            kv: &BTreeMap<String, String>,
            key: &str,
            fallback: Option<T>,
        ) -> Result<T> {
            match kv.get(key) {
                Some(raw) => raw
                    .parse()
                    .map_err(|_| Error::Config(format!("cannot parse `{key}` value `{raw}`"))),
                None => fallback.ok_or_else(|| Error::Config(format!("missing geometry key `{key}`"))),
            }
        }
        let n_p: usize = get(kv, "n_projections", base.map(|b| b.n_angles()))?;
        let geom = make_circular_trajectory(
            n_p,
            get(kv, "sad_mm", base.map(|b| b.sad))?,
            get(kv, "sdd_mm", base.map(|b| b.sdd))?,
            [
                get(kv, "det_nu", base.map(|b| b.det_pixels[0]))?,
                get(kv, "det_nv", base.map(|b| b.det_pixels[1]))?,
            ],
            [
                get(kv, "pitch_u_mm", base.map(|b| b.det_pitch[0]))?,
                get(kv, "pitch_v_mm", base.map(|b| b.det_pitch[1]))?,
            ],
        )?
        .with_offset([
            get(kv, "offset_u_mm", Some(base.map_or(0.0, |b| b.det_offset[0])))?,
            get(kv, "offset_v_mm", Some(base.map_or(0.0, |b| b.det_offset[1])))?,
        ])
        .with_isocenter(Vector3::new(
            get(kv, "iso_x_mm", Some(base.map_or(0.0, |b| b.isocenter[0])))?,
            get(kv, "iso_y_mm", Some(base.map_or(0.0, |b| b.isocenter[1])))?,
            get(kv, "iso_z_mm", Some(base.map_or(0.0, |b| b.isocenter[2])))?,
        ));
        geom.validate()?;
        Ok(geom)
    }
}

impl Default for ConeBeamGeometry {
    fn default() -> Self {
        make_circular_trajectory(490, DEFAULT_SAD_MM, DEFAULT_SDD_MM, DEFAULT_DET_PIXELS, DEFAULT_DET_PITCH_MM)
            .expect("default geometry is valid")
    }
}

/// Source position and detector axes for a single gantry angle.
#[derive(Debug, Clone, Copy)]
pub struct ViewFrame {
    pub source: Vector3<f64>,
    /// Unit vector from the isocenter toward the source.
    pub toward_source: Vector3<f64>,
    pub u_axis: Vector3<f64>,
    pub v_axis: Vector3<f64>,
    pub sad: f64,
    pub sdd: f64,
}

impl ViewFrame {
    /// World position of a detector point given in mm from the principal ray.
    #[inline]
    pub fn detector_point(&self, u_mm: f64, v_mm: f64) -> Vector3<f64> {
        self.source - self.toward_source * self.sdd + self.u_axis * u_mm + self.v_axis * v_mm
    }

    #[inline]
    pub fn ray(&self, u_mm: f64, v_mm: f64) -> Ray {
        // Principal component is sdd > 0, so the direction is never zero.
        let d = -self.toward_source * self.sdd + self.u_axis * u_mm + self.v_axis * v_mm;
        Ray { source: self.source, direction: d / d.norm() }
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if map.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(map)
}
