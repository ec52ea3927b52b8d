//! End-to-end generation: center, project, reconstruct at each quality
//! level, align CT and mask to the reconstruction grid, write a manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fdk::{fdk_reconstruct, ReconstructionReport};
use crate::geometry::{make_circular_trajectory, parse_key_values, ConeBeamGeometry};
use crate::nifti::{read_nifti, read_nifti_labels, write_nifti, write_vector_field};
use crate::projector::{forward_project, hu_to_attenuation, ProjectionStack, DEFAULT_MU_WATER};
use crate::resample::{
    align_to_grid, random_affine_params, random_elastic, resample_linear, resample_nearest, warp_linear,
    warp_nearest, AffineTransform, DisplacementField, MisalignBounds,
};
use crate::volume::{center_of_gravity, Grid, LabelVolume, Volume3, LIVER};

pub const DEFAULT_QUALITY_LEVELS: [usize; 5] = [490, 256, 128, 64, 32];
pub const DEFAULT_RECON_EXTENT_MM: [f64; 3] = [252.0, 246.0, 250.0];
pub const DEFAULT_RECON_VOXEL_MM: [f64; 3] = [0.688, 1.032, 0.688];
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    LiverCog,
    VolumeCenter,
}

impl FromStr for Centering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "liver_cog" => Ok(Centering::LiverCog),
            "volume_center" => Ok(Centering::VolumeCenter),
            other => Err(Error::Config(format!("unknown centering `{other}` (liver_cog | volume_center)"))),
        }
    }
}

impl fmt::Display for Centering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Centering::LiverCog => "liver_cog",
            Centering::VolumeCenter => "volume_center",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub quality_levels: Vec<usize>,
    pub recon_extent_mm: [f64; 3],
    pub recon_voxel_mm: [f64; 3],
    /// Detector and distances; its angle count and isocenter are replaced
    /// per level.
    pub geometry: ConeBeamGeometry,
    pub mu_water: f64,
    pub centering: Centering,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            quality_levels: DEFAULT_QUALITY_LEVELS.to_vec(),
            recon_extent_mm: DEFAULT_RECON_EXTENT_MM,
            recon_voxel_mm: DEFAULT_RECON_VOXEL_MM,
            geometry: ConeBeamGeometry::default(),
            mu_water: DEFAULT_MU_WATER,
            centering: Centering::LiverCog,
            seed: 0,
        }
    }
}

const PIPELINE_KEYS: [&str; 6] = ["quality_levels", "recon_extent_mm", "recon_voxel_mm", "mu_water", "centering", "seed"];
const GEOMETRY_KEYS: [&str; 9] = [
    "sad_mm", "sdd_mm", "det_nu", "det_nv", "pitch_u_mm", "pitch_v_mm", "offset_u_mm", "offset_v_mm", "n_projections",
];

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse `{key}` entry `{}`", t.trim())))
        })
        .collect()
}

fn parse_triple(key: &str, raw: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = parse_list(key, raw)?;
    v.try_into()
        .map_err(|v: Vec<f64>| Error::Config(format!("`{key}` needs 3 values, got {}", v.len())))
}

fn parse_scalar<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{key}` value `{raw}`")))
}

impl PipelineConfig {
    /// Applies `key = value` settings on top of `self`. Unknown keys are
    /// configuration errors.
    pub fn with_key_values(&self, kv: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = kv
            .keys()
            .find(|k| !PIPELINE_KEYS.contains(&k.as_str()) && !GEOMETRY_KEYS.contains(&k.as_str()))
        {
            return Err(Error::Config(format!("unknown configuration key `{k}`")));
        }
        let mut cfg = self.clone();
        let geom_kv: BTreeMap<String, String> = kv
            .iter()
            .filter(|(k, _)| GEOMETRY_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        cfg.geometry = ConeBeamGeometry::from_key_values(&geom_kv, Some(&self.geometry))?;
        for (k, v) in kv {
            match k.as_str() {
                "quality_levels" => cfg.quality_levels = parse_list(k, v)?,
                "recon_extent_mm" => cfg.recon_extent_mm = parse_triple(k, v)?,
                "recon_voxel_mm" => cfg.recon_voxel_mm = parse_triple(k, v)?,
                "mu_water" => cfg.mu_water = parse_scalar(k, v)?,
                "centering" => cfg.centering = v.trim().parse()?,
                "seed" => cfg.seed = parse_scalar(k, v)?,
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file's text over the defaults.
    pub fn from_config_str(text: &str) -> Result<Self> {
        Self::default().with_key_values(&parse_key_values(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.quality_levels.is_empty() || self.quality_levels.contains(&0) {
            return Err(Error::Config("quality levels must be non-empty and >= 1".into()));
        }
        let mut sorted = self.quality_levels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.quality_levels.len() {
            return Err(Error::Config(format!("quality levels must be distinct: {:?}", self.quality_levels)));
        }
        if self
            .recon_extent_mm
            .iter()
            .chain(&self.recon_voxel_mm)
            .any(|&v| !(v > 0.0 && v.is_finite()))
        {
            return Err(Error::Config("reconstruction extents and voxel sizes must be positive".into()));
        }
        if !(self.mu_water > 0.0 && self.mu_water.is_finite()) {
            return Err(Error::Config(format!("mu_water must be positive, got {}", self.mu_water)));
        }
        self.geometry.validate()
    }

    /// The trajectory for one quality level, rotating about `center`.
    pub fn geometry_for(&self, n_projections: usize, center: Vector3<f64>) -> Result<ConeBeamGeometry> {
        let g = &self.geometry;
        Ok(make_circular_trajectory(n_projections, g.sad, g.sdd, g.det_pixels, g.det_pitch)?
            .with_offset(g.det_offset)
            .with_isocenter(center))
    }

    pub fn recon_grid(&self, center: Vector3<f64>) -> Result<Grid> {
        Grid::from_extent(self.recon_extent_mm, self.recon_voxel_mm, center.into())
    }

    fn echo(&self) -> ConfigEcho {
        let g = &self.geometry;
        ConfigEcho {
            quality_levels: self.quality_levels.clone(),
            recon_extent_mm: self.recon_extent_mm,
            recon_voxel_mm: self.recon_voxel_mm,
            sad_mm: g.sad,
            sdd_mm: g.sdd,
            det_pixels: g.det_pixels,
            det_pitch_mm: g.det_pitch,
            det_offset_mm: g.det_offset,
            mu_water: self.mu_water,
            centering: self.centering,
            seed: self.seed,
        }
    }
}

/// Rotation/reconstruction center in world mm.
pub fn compute_center(ct: &Volume3, mask: Option<&LabelVolume>, mode: Centering) -> Result<Vector3<f64>> {
    match mode {
        Centering::VolumeCenter => Ok(ct.grid().center()),
        Centering::LiverCog => {
            let mask = mask.ok_or_else(|| Error::Config("liver_cog centering requires a mask".into()))?;
            center_of_gravity(mask, LIVER)
        }
    }
}

/// Axis-aligned grid with `grid`'s spacing covering the bounding box of its
/// voxel centers.
pub fn axis_aligned_cover(grid: &Grid) -> Result<Grid> {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for c in 0..8 {
        let idx = Vector3::from_fn(|a, _| if c >> a & 1 == 1 { (grid.dims[a] - 1) as f64 } else { 0.0 });
        let w = grid.voxel_to_world(idx);
        lo = lo.inf(&w);
        hi = hi.sup(&w);
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = ((hi[a] - lo[a]) / grid.spacing[a] - 1e-6).ceil().max(0.0) as usize + 1;
    }
    Grid::new(dims, grid.spacing.into(), lo.into())
}

/// Puts CT and mask on a common identity-direction grid, resampling when
/// the CT grid is oblique or flipped. A mask on a different grid is
/// resampled onto the CT grid first.
pub fn prepare_inputs(ct: Volume3, mask: Option<LabelVolume>) -> Result<(Volume3, Option<LabelVolume>)> {
    let id = AffineTransform::identity();
    let mask = match mask {
        Some(m) if !m.grid().matches(ct.grid(), 1e-6) => Some(resample_nearest(&m, ct.grid(), &id)?),
        m => m,
    };
    if ct.grid().is_axis_aligned() {
        return Ok((ct, mask));
    }
    let target = axis_aligned_cover(ct.grid())?;
    let ct2 = resample_linear(&ct, &target, &id)?;
    let mask2 = mask.map(|m| resample_nearest(&m, &target, &id)).transpose()?;
    Ok((ct2, mask2))
}

/// HU → μ, then forward projection for one level.
pub fn project_stage(ct_hu: &Volume3, config: &PipelineConfig, n_projections: usize, center: Vector3<f64>) -> Result<ProjectionStack> {
    let mu = hu_to_attenuation(ct_hu, config.mu_water)?;
    forward_project(&mu, &config.geometry_for(n_projections, center)?)
}

/// FDK onto the configured grid centered at the stack's isocenter.
pub fn reconstruct_stage(stack: &ProjectionStack, config: &PipelineConfig) -> Result<(Volume3, ReconstructionReport)> {
    let grid = config.recon_grid(stack.geometry().isocenter)?;
    let vol = fdk_reconstruct(stack, &grid)?;
    Ok((vol, ReconstructionReport::new(stack.geometry(), &grid)))
}

pub fn cbct_file_name(n_projections: usize) -> String {
    format!("cbct_{n_projections}.nii.gz")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub quality_levels: Vec<usize>,
    pub recon_extent_mm: [f64; 3],
    pub recon_voxel_mm: [f64; 3],
    pub sad_mm: f64,
    pub sdd_mm: f64,
    pub det_pixels: [usize; 2],
    pub det_pitch_mm: [f64; 2],
    pub det_offset_mm: [f64; 2],
    pub mu_water: f64,
    pub centering: Centering,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub kind: String,
    pub sha256: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_projections: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub rounding: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub software: String,
    pub version: String,
    pub ct: InputRecord,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask: Option<InputRecord>,
    pub config: ConfigEcho,
    pub center_mm: [f64; 3],
    pub attenuation: String,
    pub cbct_units: String,
    pub recon_grid: GridRecord,
    pub reconstruction: Vec<BTreeMap<String, String>>,
    pub outputs: Vec<OutputRecord>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad manifest {}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn input_record(path: &Path) -> Result<InputRecord> {
    Ok(InputRecord { file: file_name(path), sha256: sha256_file(path)? })
}

fn output_record(dir: &Path, file: &str, kind: &str, n: Option<usize>) -> Result<OutputRecord> {
    Ok(OutputRecord {
        file: file.to_string(),
        kind: kind.to_string(),
        sha256: sha256_file(&dir.join(file))?,
        n_projections: n,
    })
}

fn report_map(r: &ReconstructionReport) -> BTreeMap<String, String> {
    r.to_key_values()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs every stage for one CT (and optional mask) into `out_dir`.
pub fn run_pipeline(ct_path: &Path, mask_path: Option<&Path>, config: &PipelineConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let (ct, _) = read_nifti(ct_path)?;
    let mask = mask_path.map(|p| read_nifti_labels(p).map(|(m, _)| m)).transpose()?;
    let (ct, mask) = prepare_inputs(ct, mask)?;
    let center = compute_center(&ct, mask.as_ref(), config.centering)?;
    let grid = config.recon_grid(center)?;
    ensure_dir(out_dir)?;

    let mut outputs = Vec::new();
    let mut reports = Vec::new();
    for &n in &config.quality_levels {
        let stack = project_stage(&ct, config, n, center)?;
        let (vol, report) = reconstruct_stage(&stack, config)?;
        let name = cbct_file_name(n);
        write_nifti(&vol, out_dir.join(&name), true)?;
        outputs.push(output_record(out_dir, &name, "cbct", Some(n))?);
        reports.push(report_map(&report));
    }

    let id = AffineTransform::identity();
    let ct_aligned = match &mask {
        Some(m) => {
            let (c, m) = align_to_grid(&ct, m, &grid)?;
            write_nifti(&m, out_dir.join("mask_aligned.nii.gz"), true)?;
            c
        }
        None => resample_linear(&ct, &grid, &id)?,
    };
    write_nifti(&ct_aligned, out_dir.join("ct_aligned.nii.gz"), true)?;
    outputs.push(output_record(out_dir, "ct_aligned.nii.gz", "ct_aligned", None)?);
    if mask.is_some() {
        outputs.push(output_record(out_dir, "mask_aligned.nii.gz", "mask_aligned", None)?);
    }

    let manifest = Manifest {
        software: "cbctsim".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        ct: input_record(ct_path)?,
        mask: mask_path.map(input_record).transpose()?,
        config: config.echo(),
        center_mm: center.into(),
        attenuation: format!("mu = {} * (1 + HU / 1000), clamped at 0", config.mu_water),
        cbct_units: "1/mm".into(),
        recon_grid: GridRecord {
            dims: grid.dims,
            spacing_mm: grid.spacing.into(),
            origin_mm: grid.origin.into(),
            rounding: "round(extent / voxel)".into(),
        },
        reconstruction: reports,
        outputs,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))? + "\n";
    let path = out_dir.join(MANIFEST_NAME);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchJob {
    pub ct: PathBuf,
    pub mask: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl BatchJob {
    /// Output directory named after the CT file without its NIfTI suffix.
    pub fn under(root: &Path, ct: PathBuf, mask: Option<PathBuf>) -> Self {
        let name = file_name(&ct);
        let stem = name.strip_suffix(".gz").unwrap_or(&name);
        let stem = stem.strip_suffix(".nii").unwrap_or(stem).to_string();
        BatchJob { out_dir: root.join(stem), ct, mask }
    }
}

/// Parses a batch list: one `ct_path [mask_path]` per line, `#` comments.
/// Relative paths resolve against `base`.
pub fn parse_batch_list(text: &str, base: &Path, out_root: &Path) -> Result<Vec<BatchJob>> {
    let mut jobs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() > 2 {
            return Err(Error::Config(format!("batch line {}: expected `ct [mask]`", n + 1)));
        }
        let ct = base.join(parts[0]);
        let mask = parts.get(1).map(|m| base.join(m));
        jobs.push(BatchJob::under(out_root, ct, mask));
    }
    if jobs.is_empty() {
        return Err(Error::Config("batch list is empty".into()));
    }
    let mut dirs: Vec<&PathBuf> = jobs.iter().map(|j| &j.out_dir).collect();
    dirs.sort();
    if dirs.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("two batch inputs map to the same output directory".into()));
    }
    Ok(jobs)
}

#[derive(Debug)]
pub struct BatchOutcome {
    pub job: BatchJob,
    pub result: Result<Manifest>,
}

/// Runs every job; a failing job never stops the others. With `parallel`
/// jobs run concurrently, each in its own directory.
pub fn run_batch(jobs: &[BatchJob], config: &PipelineConfig, parallel: bool) -> Vec<BatchOutcome> {
    let run = |job: &BatchJob| BatchOutcome {
        job: job.clone(),
        result: run_pipeline(&job.ct, job.mask.as_deref(), config, &job.out_dir),
    };
    if parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MisalignMode {
    Affine,
    Elastic,
}

impl FromStr for MisalignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(MisalignMode::Affine),
            "elastic" => Ok(MisalignMode::Elastic),
            other => Err(Error::Config(format!("unknown misalignment mode `{other}` (affine | elastic)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MisalignOutput {
    pub transform: AffineTransform,
    pub field: Option<DisplacementField>,
    pub files: Vec<String>,
}

/// In-memory misalignment about the CT grid center. Elastic mode draws the
/// field from `seed + 1`.
pub fn misalign(
    ct: &Volume3,
    mask: &LabelVolume,
    alpha: f64,
    mode: MisalignMode,
    seed: u64,
    bounds: &MisalignBounds,
) -> Result<(Volume3, LabelVolume, AffineTransform, Option<DisplacementField>)> {
    ct.grid().ensure_same(mask.grid())?;
    let t = random_affine_params(alpha, bounds, seed)?.to_transform(ct.grid().center())?;
    let field = match mode {
        MisalignMode::Affine => None,
        MisalignMode::Elastic => Some(random_elastic(
            alpha,
            bounds.max_displacement_mm,
            bounds.control_dims,
            ct.grid(),
            seed.wrapping_add(1),
        )?),
    };
    let (c, m) = match &field {
        Some(f) => (warp_linear(ct, f, &t)?, warp_nearest(mask, f, &t)?),
        None => (resample_linear(ct, ct.grid(), &t)?, resample_nearest(mask, mask.grid(), &t)?),
    };
    Ok((c, m, t, field))
}

/// Reads, misaligns and writes `ct_misaligned.nii.gz`,
/// `mask_misaligned.nii.gz`, `transform.txt` and, in elastic mode,
/// `field.nii.gz` with its `field.control.txt` lattice.
pub fn run_misalign(
    ct_path: &Path,
    mask_path: &Path,
    alpha: f64,
    mode: MisalignMode,
    seed: u64,
    bounds: &MisalignBounds,
    out_dir: &Path,
) -> Result<MisalignOutput> {
    let (ct, _) = read_nifti(ct_path)?;
    let (mask, _) = read_nifti_labels(mask_path)?;
    let (c, m, t, field) = misalign(&ct, &mask, alpha, mode, seed, bounds)?;
    ensure_dir(out_dir)?;
    let mut files = vec!["ct_misaligned.nii.gz".to_string(), "mask_misaligned.nii.gz".into(), "transform.txt".into()];
    write_nifti(&c, out_dir.join(&files[0]), true)?;
    write_nifti(&m, out_dir.join(&files[1]), true)?;
    let tp = out_dir.join(&files[2]);
    fs::write(&tp, t.to_text()).map_err(|e| Error::io(&tp, e))?;
    if let Some(f) = &field {
        let [x, y, z] = f.dense();
        write_vector_field(f.domain(), [&x, &y, &z], out_dir.join("field.nii.gz"), true)?;
        let cp = out_dir.join("field.control.txt");
        fs::write(&cp, f.control_text()).map_err(|e| Error::io(&cp, e))?;
        files.push("field.nii.gz".into());
        files.push("field.control.txt".into());
    }
    Ok(MisalignOutput { transform: t, field, files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    #[test]
    fn volume_center_of_unit_grid() {
        let g = Grid::new([10; 3], [1.0; 3], [0.0; 3]).unwrap();
        let ct = Volume3::zeros(g).unwrap();
        assert_eq!(compute_center(&ct, None, Centering::VolumeCenter).unwrap(), Vector3::repeat(4.5));
    }

    #[test]
    fn liver_cog_delegates() {
        let g = Grid::new([6, 5, 4], [1.5, 2.0, 0.5], [3.0, -1.0, 7.0]).unwrap();
        let mask = LabelVolume::from_fn(g.clone(), |i, j, k| u8::from(i > 2 && j < 3 && k == 1)).unwrap();
        let ct = Volume3::zeros(g).unwrap();
        assert_eq!(
            compute_center(&ct, Some(&mask), Centering::LiverCog).unwrap(),
            center_of_gravity(&mask, LIVER).unwrap()
        );
        let empty = LabelVolume::filled(ct.grid().clone(), 0).unwrap();
        assert!(compute_center(&ct, Some(&empty), Centering::LiverCog).is_err());
        assert!(matches!(compute_center(&ct, None, Centering::LiverCog), Err(Error::Config(_))));
    }

    #[test]
    fn config_layering() {
        let cfg = PipelineConfig::from_config_str(
            "quality_levels = 64, 32\nrecon_voxel_mm = 1,2,3\nsad_mm = 500\ncentering = volume_center\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.quality_levels, vec![64, 32]);
        assert_eq!(cfg.recon_voxel_mm, [1.0, 2.0, 3.0]);
        assert_eq!(cfg.recon_extent_mm, DEFAULT_RECON_EXTENT_MM);
        assert_eq!(cfg.geometry.sad, 500.0);
        assert_eq!(cfg.geometry.sdd, ConeBeamGeometry::default().sdd);
        assert_eq!(cfg.centering, Centering::VolumeCenter);
        let mut flags = BTreeMap::new();
        flags.insert("sad_mm".to_string(), "600".to_string());
        let over = cfg.with_key_values(&flags).unwrap();
        assert_eq!(over.geometry.sad, 600.0);
        assert_eq!(over.quality_levels, vec![64, 32]);

        for bad in ["bogus = 1", "quality_levels = 32,32", "quality_levels = 0", "recon_voxel_mm = 1,2", "centering = x", "mu_water = -1"] {
            assert!(matches!(PipelineConfig::from_config_str(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn default_recon_grid_dims() {
        let g = PipelineConfig::default().recon_grid(Vector3::new(1.0, 2.0, 3.0)).unwrap();
        assert_eq!(g.dims, [366, 238, 363]);
        assert!((g.center() - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-9);
    }

    #[test]
    fn flipped_grid_is_reindexed_exactly() {
        let dir = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        let g = Grid::with_direction([4, 3, 2], [1.0, 2.0, 3.0], [10.0, 10.0, 0.0], dir).unwrap();
        let ct = Volume3::from_fn(g.clone(), |i, j, k| (i + 10 * j + 100 * k) as f32).unwrap();
        let mask = LabelVolume::from_fn(g, |i, _, _| u8::from(i == 0)).unwrap();
        let (c, m) = prepare_inputs(ct.clone(), Some(mask)).unwrap();
        let m = m.unwrap();
        assert!(c.grid().is_axis_aligned());
        assert_eq!(c.dims(), [4, 3, 2]);
        assert_eq!(c.grid().origin, Vector3::new(7.0, 6.0, 0.0));
        for k in 0..2 {
            for j in 0..3 {
                for i in 0..4 {
                    assert_eq!(c.get(i, j, k), ct.get(3 - i, 2 - j, k));
                    assert_eq!(m.get(i, j, k), u8::from(i == 3));
                }
            }
        }
    }

    #[test]
    fn batch_list_parsing() {
        let jobs = parse_batch_list("# c\na.nii.gz a_mask.nii.gz\nsub/b.nii\n", Path::new("/in"), Path::new("/out")).unwrap();
        assert_eq!(jobs.len(), 2);
        assert_eq!(jobs[0].out_dir, PathBuf::from("/out/a"));
        assert_eq!(jobs[0].mask.as_deref(), Some(Path::new("/in/a_mask.nii.gz")));
        assert_eq!(jobs[1].out_dir, PathBuf::from("/out/b"));
        assert!(parse_batch_list("a.nii\nx/a.nii.gz\n", Path::new("."), Path::new("o")).is_err());
        assert!(parse_batch_list("#only\n", Path::new("."), Path::new("o")).is_err());
    }

    #[test]
    fn misalign_zero_strength_is_identity() {
        let g = Grid::new([9, 8, 7], [1.0; 3], [0.0; 3]).unwrap();
        let ct = Volume3::from_fn(g.clone(), |i, j, k| (i * j + k) as f32).unwrap();
        let mask = LabelVolume::from_fn(g, |i, j, _| ((i + j) % 3) as u8).unwrap();
        for mode in [MisalignMode::Affine, MisalignMode::Elastic] {
            let (c, m, t, f) = misalign(&ct, &mask, 0.0, mode, 3, &MisalignBounds::default()).unwrap();
            assert_eq!(c, ct);
            assert_eq!(m, mask);
            assert!(t.is_identity());
            assert_eq!(f.is_some(), mode == MisalignMode::Elastic);
        }
    }
}
