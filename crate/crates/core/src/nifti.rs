//! NIfTI-1 single-file (`.nii` / `.nii.gz`) reading and writing.
//!
//! Reading accepts either byte order and transparently inflates gzip streams
//! (detected by magic bytes, not by extension). Writing always produces a
//! little-endian file with a 348-byte header, a zeroed 4-byte extension flag
//! and `vox_offset = 352`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::{Compression, GzBuilder};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume, Volume, Volume3, Voxel};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

const NIFTI_INTENT_VECTOR: i16 = 1007;
const NIFTI_XFORM_SCANNER_ANAT: i16 = 1;
/// `xyzt_units`: millimetres.
const NIFTI_UNITS_MM: u8 = 2;

/// On-disk voxel types this crate understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl DataType {
    pub fn code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::I32 => 8,
            DataType::F32 => 16,
            DataType::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => DataType::U8,
            4 => DataType::I16,
            8 => DataType::I32,
            16 => DataType::F32,
            64 => DataType::F64,
            other => {
                return Err(Error::UnsupportedFormat(format!("NIfTI datatype code {other}")))
            }
        })
    }

    pub fn size(self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 => 2,
            DataType::I32 | DataType::F32 => 4,
            DataType::F64 => 8,
        }
    }
}

/// Which header fields produced the voxel-to-world mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrientationSource {
    Sform,
    Qform,
    Pixdim,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub datatype: DataType,
    pub orientation: OrientationSource,
    pub gzipped: bool,
    pub big_endian: bool,
    /// `(slope, intercept)` when a nonzero `scl_slope` was applied.
    pub scaling: Option<(f32, f32)>,
}

/// Element types that have a native NIfTI encoding.
pub trait NiftiVoxel: Voxel {
    const DATATYPE: DataType;
    fn write_le(self, out: &mut Vec<u8>);
}

impl NiftiVoxel for f32 {
    const DATATYPE: DataType = DataType::F32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl NiftiVoxel for u8 {
    const DATATYPE: DataType = DataType::U8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
}

/// Reads a scalar 3D image, converting to `f32` after applying
/// `scl_slope`/`scl_inter`.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<(Volume3, LoadReport)> {
    let raw = RawImage::load(path.as_ref())?;
    let values = raw.scaled_values()?;
    let data = values.into_iter().map(|v| v as f32).collect();
    let vol = Volume::new(raw.grid.clone(), data)?;
    Ok((vol, raw.report))
}

/// Reads a segmentation. Any datatype is accepted as long as every (scaled)
/// value is one of 0, 1, 2.
pub fn read_nifti_labels(path: impl AsRef<Path>) -> Result<(LabelVolume, LoadReport)> {
    let raw = RawImage::load(path.as_ref())?;
    let values = raw.scaled_values()?;
    let mut data = Vec::with_capacity(values.len());
    for v in values {
        if v == 0.0 || v == 1.0 || v == 2.0 {
            data.push(v as u8);
        } else {
            return Err(Error::InvalidVolume(format!(
                "{}: label value {v} outside {{0, 1, 2}}",
                path.as_ref().display()
            )));
        }
    }
    let vol = Volume::new(raw.grid.clone(), data)?;
    Ok((vol, raw.report))
}

/// Writes a volume in its native encoding (`f32` → FLOAT32, labels → UINT8).
pub fn write_nifti<T: NiftiVoxel>(vol: &Volume<T>, path: impl AsRef<Path>, gzip: bool) -> Result<()> {
    let mut payload = Vec::with_capacity(vol.data().len() * T::DATATYPE.size());
    for &v in vol.data() {
        v.write_le(&mut payload);
    }
    let header = HeaderFields::for_grid(vol.grid(), T::DATATYPE);
    write_file(path.as_ref(), &header, &payload, gzip)
}

/// Writes a scalar volume with an explicit on-disk datatype. Integer
/// datatypes require every value to be integral and in range.
pub fn write_nifti_as(
    vol: &Volume3,
    path: impl AsRef<Path>,
    gzip: bool,
    datatype: DataType,
) -> Result<()> {
    let n = vol.data().len();
    let mut payload = Vec::with_capacity(n * datatype.size());
    let check = |v: f32, lo: f64, hi: f64| -> Result<f64> {
        let x = v as f64;
        if x.fract() != 0.0 || x < lo || x > hi {
            Err(Error::Parameter(format!("value {v} not representable as {datatype:?}")))
        } else {
            Ok(x)
        }
    };
    for &v in vol.data() {
        match datatype {
            DataType::U8 => payload.push(check(v, 0.0, u8::MAX as f64)? as u8),
            DataType::I16 => payload
                .extend_from_slice(&(check(v, i16::MIN as f64, i16::MAX as f64)? as i16).to_le_bytes()),
            DataType::I32 => payload
                .extend_from_slice(&(check(v, i32::MIN as f64, i32::MAX as f64)? as i32).to_le_bytes()),
            DataType::F32 => payload.extend_from_slice(&v.to_le_bytes()),
            DataType::F64 => payload.extend_from_slice(&(v as f64).to_le_bytes()),
        }
    }
    let header = HeaderFields::for_grid(vol.grid(), datatype);
    write_file(path.as_ref(), &header, &payload, gzip)
}

/// Writes a 3-component vector image (`dim = [5, nx, ny, nz, 1, 3]`,
/// intent VECTOR). `components[c][voxel]` holds component `c`.
pub fn write_vector_field(
    grid: &Grid,
    components: [&[f32]; 3],
    path: impl AsRef<Path>,
    gzip: bool,
) -> Result<()> {
    let n = grid.len();
    if components.iter().any(|c| c.len() != n) {
        return Err(Error::Shape("vector component length does not match grid".into()));
    }
    let mut header = HeaderFields::for_grid(grid, DataType::F32);
    header.dim = [5, grid.dims[0] as i16, grid.dims[1] as i16, grid.dims[2] as i16, 1, 3, 1, 1];
    header.intent_code = NIFTI_INTENT_VECTOR;
    let mut payload = Vec::with_capacity(3 * n * 4);
    for c in components {
        for &v in c {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(path.as_ref(), &header, &payload, gzip)
}

fn write_file(path: &Path, header: &HeaderFields, payload: &[u8], gzip: bool) -> Result<()> {
    let mut bytes = Vec::with_capacity(VOX_OFFSET + payload.len());
    header.encode(&mut bytes);
    bytes.extend_from_slice(&[0u8; VOX_OFFSET - HEADER_SIZE]);
    bytes.extend_from_slice(payload);

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    if gzip {
        // mtime 0 keeps the stream byte-identical across runs.
        let mut enc = GzBuilder::new().mtime(0).write(out, Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        out = enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// The subset of header fields this crate reads or writes.
#[derive(Debug, Clone, PartialEq)]
struct HeaderFields {
    dim: [i16; 8],
    intent_code: i16,
    datatype: i16,
    bitpix: i16,
    pixdim: [f32; 8],
    vox_offset: f32,
    scl_slope: f32,
    scl_inter: f32,
    xyzt_units: u8,
    qform_code: i16,
    sform_code: i16,
    quatern: [f32; 3],
    qoffset: [f32; 3],
    srow: [[f32; 4]; 3],
}

impl HeaderFields {
    fn for_grid(grid: &Grid, datatype: DataType) -> Self {
        let mut srow = [[0.0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for c in 0..3 {
                row[c] = (grid.direction[(r, c)] * grid.spacing[c]) as f32;
            }
            row[3] = grid.origin[r] as f32;
        }

        // qform carries the same mapping as the sform; a reflected direction
        // matrix is expressed through qfac = -1.
        let mut rot = grid.direction;
        let qfac = if rot.determinant() < 0.0 {
            rot.set_column(2, &(-rot.column(2)));
            -1.0f32
        } else {
            1.0
        };
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix(&rot));
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };

        HeaderFields {
            dim: [3, grid.dims[0] as i16, grid.dims[1] as i16, grid.dims[2] as i16, 1, 1, 1, 1],
            intent_code: 0,
            datatype: datatype.code(),
            bitpix: (datatype.size() * 8) as i16,
            pixdim: [
                qfac,
                grid.spacing[0] as f32,
                grid.spacing[1] as f32,
                grid.spacing[2] as f32,
                0.0,
                0.0,
                0.0,
                0.0,
            ],
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 0.0,
            scl_inter: 0.0,
            xyzt_units: NIFTI_UNITS_MM,
            qform_code: NIFTI_XFORM_SCANNER_ANAT,
            sform_code: NIFTI_XFORM_SCANNER_ANAT,
            quatern: [q.i as f32, q.j as f32, q.k as f32],
            qoffset: [grid.origin[0] as f32, grid.origin[1] as f32, grid.origin[2] as f32],
            srow,
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.resize(start + HEADER_SIZE, 0);
        let h = &mut out[start..];
        let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
        let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

        h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
        h[38] = b'r';
        for (i, &d) in self.dim.iter().enumerate() {
            put_i16(h, 40 + 2 * i, d);
        }
        put_i16(h, 68, self.intent_code);
        put_i16(h, 70, self.datatype);
        put_i16(h, 72, self.bitpix);
        for (i, &p) in self.pixdim.iter().enumerate() {
            put_f32(h, 76 + 4 * i, p);
        }
        put_f32(h, 108, self.vox_offset);
        put_f32(h, 112, self.scl_slope);
        put_f32(h, 116, self.scl_inter);
        h[123] = self.xyzt_units;
        let descrip = b"cbctsim";
        h[148..148 + descrip.len()].copy_from_slice(descrip);
        put_i16(h, 252, self.qform_code);
        put_i16(h, 254, self.sform_code);
        for i in 0..3 {
            put_f32(h, 256 + 4 * i, self.quatern[i]);
            put_f32(h, 268 + 4 * i, self.qoffset[i]);
        }
        for (r, row) in self.srow.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                put_f32(h, 280 + 16 * r + 4 * c, v);
            }
        }
        h[344..348].copy_from_slice(MAGIC);
    }

    fn decode(h: &[u8]) -> Result<(Self, bool)> {
        if h.len() < HEADER_SIZE {
            return Err(Error::format("sizeof_hdr", format!("file holds only {} bytes", h.len())));
        }
        let size_le = i32::from_le_bytes(h[0..4].try_into().unwrap());
        let size_be = i32::from_be_bytes(h[0..4].try_into().unwrap());
        let big_endian = match (size_le, size_be) {
            (348, _) => false,
            (_, 348) => true,
            _ => return Err(Error::format("sizeof_hdr", format!("expected 348, found {size_le}"))),
        };
        if &h[344..348] != MAGIC {
            if &h[344..348] == b"ni1\0" {
                return Err(Error::UnsupportedFormat("two-file NIfTI (.hdr/.img) pair".into()));
            }
            return Err(Error::format("magic", format!("expected \"n+1\\0\", found {:?}", &h[344..348])));
        }
        let i16_at = |off: usize| {
            let b = [h[off], h[off + 1]];
            if big_endian { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
        };
        let f32_at = |off: usize| {
            let b: [u8; 4] = h[off..off + 4].try_into().unwrap();
            if big_endian { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
        };
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = i16_at(40 + 2 * i);
        }
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = f32_at(76 + 4 * i);
        }
        let mut srow = [[0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(280 + 16 * r + 4 * c);
            }
        }
        Ok((
            HeaderFields {
                dim,
                intent_code: i16_at(68),
                datatype: i16_at(70),
                bitpix: i16_at(72),
                pixdim,
                vox_offset: f32_at(108),
                scl_slope: f32_at(112),
                scl_inter: f32_at(116),
                xyzt_units: h[123],
                qform_code: i16_at(252),
                sform_code: i16_at(254),
                quatern: [f32_at(256), f32_at(260), f32_at(264)],
                qoffset: [f32_at(268), f32_at(272), f32_at(276)],
                srow,
            },
            big_endian,
        ))
    }

    fn spatial_dims(&self) -> Result<[usize; 3]> {
        let ndim = self.dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(Error::format("dim", format!("dim[0] = {ndim} outside 1..=7")));
        }
        let ndim = ndim as usize;
        // Trailing singleton dimensions (e.g. a 4D file with one time point) are tolerated.
        let effective = (1..=ndim).rev().find(|&i| self.dim[i] != 1).unwrap_or(0).max(3.min(ndim));
        if ndim < 3 || effective != 3 {
            return Err(Error::Shape(format!(
                "expected a 3D image, header declares dim = {:?}",
                &self.dim[..=ndim]
            )));
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let d = self.dim[a + 1];
            if d < 1 {
                return Err(Error::format("dim", format!("dim[{}] = {d}", a + 1)));
            }
            dims[a] = d as usize;
        }
        Ok(dims)
    }

    fn grid(&self, dims: [usize; 3]) -> Result<(Grid, OrientationSource)> {
        let pixdim = |a: usize| -> Result<f64> {
            let p = self.pixdim[a + 1].abs() as f64;
            if p > 0.0 && p.is_finite() {
                Ok(p)
            } else {
                Err(Error::format("pixdim", format!("pixdim[{}] = {}", a + 1, self.pixdim[a + 1])))
            }
        };
        if self.sform_code > 0 {
            let mut cols = Matrix3::zeros();
            let mut spacing = [0.0; 3];
            for c in 0..3 {
                let col = Vector3::new(
                    self.srow[0][c] as f64,
                    self.srow[1][c] as f64,
                    self.srow[2][c] as f64,
                );
                let norm = col.norm();
                if !(norm > 0.0 && norm.is_finite()) {
                    return Err(Error::format("srow_x", format!("degenerate sform column {c}")));
                }
                spacing[c] = norm;
                cols.set_column(c, &(col / norm));
            }
            let direction = orthonormalize(cols, "srow_x")?;
            let origin = [self.srow[0][3] as f64, self.srow[1][3] as f64, self.srow[2][3] as f64];
            let grid = Grid::with_direction(dims, spacing, origin, direction)?;
            return Ok((grid, OrientationSource::Sform));
        }
        let spacing = [pixdim(0)?, pixdim(1)?, pixdim(2)?];
        if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(|v| v as f64);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(a, b, c, d));
            let mut rot = *q.to_rotation_matrix().matrix();
            if self.pixdim[0] < 0.0 {
                rot.set_column(2, &(-rot.column(2)));
            }
            let origin = self.qoffset.map(|v| v as f64);
            let grid = Grid::with_direction(dims, spacing, origin, rot)?;
            return Ok((grid, OrientationSource::Qform));
        }
        Ok((Grid::new(dims, spacing, [0.0; 3])?, OrientationSource::Pixdim))
    }
}

/// Polar projection onto the nearest orthonormal matrix; rejects inputs that
/// are far from orthonormal (sheared sforms).
fn orthonormalize(m: Matrix3<f64>, field: &'static str) -> Result<Matrix3<f64>> {
    let dev = (m.transpose() * m - Matrix3::identity()).abs().max();
    if dev > 1e-3 {
        return Err(Error::format(field, format!("sform is sheared (orthonormality deviation {dev:e})")));
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    Ok(u * vt)
}

struct RawImage {
    grid: Grid,
    datatype: DataType,
    big_endian: bool,
    slope: f32,
    inter: f32,
    bytes: Vec<u8>,
    report: LoadReport,
}

impl RawImage {
    fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let gzipped = bytes.starts_with(&GZIP_MAGIC);
        if gzipped {
            let mut inflated = Vec::new();
            MultiGzDecoder::new(bytes.as_slice())
                .read_to_end(&mut inflated)
                .map_err(|e| Error::io(path, e))?;
            bytes = inflated;
        }

        let (header, big_endian) = HeaderFields::decode(&bytes)?;
        let datatype = DataType::from_code(header.datatype)?;
        let dims = header.spatial_dims()?;
        let (grid, orientation) = header.grid(dims)?;

        let offset = header.vox_offset;
        if !(offset.is_finite() && offset >= HEADER_SIZE as f32) || offset.fract() != 0.0 {
            return Err(Error::format("vox_offset", format!("{offset}")));
        }
        let offset = offset as usize;
        let needed = grid.len() * datatype.size();
        if bytes.len() < offset + needed {
            return Err(Error::format(
                "vox_offset",
                format!("voxel data truncated: need {needed} bytes after offset {offset}, have {}", bytes.len().saturating_sub(offset)),
            ));
        }
        bytes.truncate(offset + needed);
        bytes.drain(..offset);

        let (slope, inter) = (header.scl_slope, header.scl_inter);
        let scaling = (slope != 0.0 && slope.is_finite()).then_some((slope, inter));
        Ok(RawImage {
            grid,
            datatype,
            big_endian,
            slope,
            inter,
            bytes,
            report: LoadReport { datatype, orientation, gzipped, big_endian, scaling },
        })
    }

    fn scaled_values(&self) -> Result<Vec<f64>> {
        let size = self.datatype.size();
        let be = self.big_endian;
        let mut out = Vec::with_capacity(self.bytes.len() / size);
        for chunk in self.bytes.chunks_exact(size) {
            let v = match self.datatype {
                DataType::U8 => chunk[0] as f64,
                DataType::I16 => {
                    let b = [chunk[0], chunk[1]];
                    (if be { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }) as f64
                }
                DataType::I32 => {
                    let b: [u8; 4] = chunk.try_into().unwrap();
                    (if be { i32::from_be_bytes(b) } else { i32::from_le_bytes(b) }) as f64
                }
                DataType::F32 => {
                    let b: [u8; 4] = chunk.try_into().unwrap();
                    (if be { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }) as f64
                }
                DataType::F64 => {
                    let b: [u8; 8] = chunk.try_into().unwrap();
                    if be { f64::from_be_bytes(b) } else { f64::from_le_bytes(b) }
                }
            };
            out.push(v);
        }
        if self.report.scaling.is_some() {
            let (s, i) = (self.slope as f64, self.inter as f64);
            out.iter_mut().for_each(|v| *v = *v * s + i);
        }
        Ok(out)
    }
}
