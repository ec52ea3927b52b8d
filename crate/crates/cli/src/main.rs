use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cbctsim::fdk::ReconstructionReport;
use cbctsim::geometry::parse_key_values;
use cbctsim::metrics::{dice, metric_line, psnr, rmse};
use cbctsim::phantom::{label_mask, rasterize, shepp_logan_3d, specs_from_text, EllipsoidSpec};
use cbctsim::pipeline::{
    compute_center, parse_batch_list, prepare_inputs, project_stage, reconstruct_stage, run_batch, run_misalign,
    run_pipeline, BatchJob, MisalignMode, PipelineConfig,
};
use cbctsim::resample::{align_to_grid, MisalignBounds};
use cbctsim::volume::{Grid, LIVER, TUMOR};
use cbctsim::{read_nifti, read_nifti_labels, write_nifti, Error, ProjectionStack};
use clap::{Args, Parser, Subcommand};

/// Synthetic cone-beam CT generation from CT volumes and label masks.
#[derive(Parser)]
#[command(name = "cbctsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize an ellipsoid phantom (Shepp-Logan by default).
    Phantom(PhantomArgs),
    /// Forward-project a CT at one quality level.
    Project(ProjectArgs),
    /// FDK-reconstruct a projection stack.
    Reconstruct(ReconstructArgs),
    /// Run every stage for one CT or a batch list.
    Pipeline(PipelineArgs),
    /// Resample CT and mask onto a reference volume's grid.
    Align(AlignArgs),
    /// Apply a random affine or affine+elastic misalignment.
    Misalign(MisalignArgs),
    /// Print RMSE / PSNR / Dice as name=value lines.
    Metrics(MetricsArgs),
}

/// Settings shared by every stage. A `--config` file overrides the
/// defaults and flags override the file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sad_mm: Option<f64>,
    #[arg(long)]
    sdd_mm: Option<f64>,
    #[arg(long)]
    det_nu: Option<usize>,
    #[arg(long)]
    det_nv: Option<usize>,
    #[arg(long)]
    pitch_u_mm: Option<f64>,
    #[arg(long)]
    pitch_v_mm: Option<f64>,
    #[arg(long)]
    offset_u_mm: Option<f64>,
    #[arg(long)]
    offset_v_mm: Option<f64>,
    #[arg(long)]
    n_projections: Option<usize>,
    /// Comma-separated projection counts, e.g. 490,256,128,64,32.
    #[arg(long)]
    quality_levels: Option<String>,
    /// Comma-separated x,y,z.
    #[arg(long)]
    recon_extent_mm: Option<String>,
    /// Comma-separated x,y,z.
    #[arg(long)]
    recon_voxel_mm: Option<String>,
    #[arg(long)]
    mu_water: Option<f64>,
    /// liver_cog | volume_center
    #[arg(long)]
    centering: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig, Error> {
        let mut kv = match &self.config {
            Some(p) => parse_key_values(&fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", p.display()))
            })?)?,
            None => BTreeMap::new(),
        };
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.insert(k.to_string(), v);
            }
        };
        let s = |v: Option<f64>| v.map(|x| x.to_string());
        let u = |v: Option<usize>| v.map(|x| x.to_string());
        set("sad_mm", s(self.sad_mm));
        set("sdd_mm", s(self.sdd_mm));
        set("det_nu", u(self.det_nu));
        set("det_nv", u(self.det_nv));
        set("pitch_u_mm", s(self.pitch_u_mm));
        set("pitch_v_mm", s(self.pitch_v_mm));
        set("offset_u_mm", s(self.offset_u_mm));
        set("offset_v_mm", s(self.offset_v_mm));
        set("n_projections", u(self.n_projections));
        set("quality_levels", self.quality_levels.clone());
        set("recon_extent_mm", self.recon_extent_mm.clone());
        set("recon_voxel_mm", self.recon_voxel_mm.clone());
        set("mu_water", s(self.mu_water));
        set("centering", self.centering.clone());
        set("seed", self.seed.map(|x| x.to_string()));
        PipelineConfig::default().with_key_values(&kv)
    }
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    /// Also write a label mask here.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Voxels per axis.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 2.0)]
    voxel_mm: f64,
    /// Shepp-Logan scale (half-width of the unit cube), mm.
    #[arg(long, default_value_t = 100.0)]
    radius_mm: f64,
    /// Ellipsoid file (`cx cy cz ax ay az rot_deg density` lines) instead of Shepp-Logan.
    #[arg(long)]
    specs: Option<PathBuf>,
    /// Write HU (density 1 = water) instead of attenuation.
    #[arg(long)]
    hu: bool,
    #[arg(long, default_value_t = 0.02)]
    mu_water: f64,
    /// Ellipsoid labelled as liver in the mask.
    #[arg(long, default_value_t = 1)]
    liver_index: usize,
    /// Ellipsoid labelled as tumor in the mask.
    #[arg(long)]
    tumor_index: Option<usize>,
}

#[derive(Args)]
struct ProjectArgs {
    /// CT in HU.
    #[arg(long)]
    ct: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Projection stack; a `.geometry.txt` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    projections: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, conflicts_with = "batch", required_unless_present = "batch")]
    ct: Option<PathBuf>,
    #[arg(long, conflicts_with = "batch")]
    mask: Option<PathBuf>,
    /// File with one `ct [mask]` per line; outputs go to OUT/<ct name>/.
    #[arg(long)]
    batch: Option<PathBuf>,
    /// Process batch volumes concurrently.
    #[arg(long, requires = "batch")]
    parallel: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    ct: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Volume whose grid the outputs take.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out_ct: PathBuf,
    #[arg(long)]
    out_mask: PathBuf,
}

#[derive(Args)]
struct MisalignArgs {
    #[arg(long)]
    ct: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Strength in [0, 1].
    #[arg(long)]
    alpha: f64,
    /// affine | elastic
    #[arg(long, default_value = "affine")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Scale fraction at alpha = 1.
    #[arg(long, default_value_t = 0.1)]
    max_scale: f64,
    #[arg(long, default_value_t = 10.0)]
    max_rotation_deg: f64,
    #[arg(long, default_value_t = 10.0)]
    max_translation_mm: f64,
    #[arg(long, default_value_t = 10.0)]
    max_displacement_mm: f64,
    /// Control lattice points per axis.
    #[arg(long, default_value_t = 5)]
    control_points: usize,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long, requires = "test")]
    reference: Option<PathBuf>,
    #[arg(long, requires = "reference")]
    test: Option<PathBuf>,
    /// PSNR peak; defaults to the reference's max − min.
    #[arg(long)]
    data_range: Option<f64>,
    #[arg(long, requires = "test_mask")]
    reference_mask: Option<PathBuf>,
    #[arg(long, requires = "reference_mask")]
    test_mask: Option<PathBuf>,
}

/// Process failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parameter(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Phantom(a) => phantom(a),
        Command::Project(a) => project(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Align(a) => align(a),
        Command::Misalign(a) => misalign(a),
        Command::Metrics(a) => metrics(a),
    }
}

fn phantom(a: PhantomArgs) -> Result<(), Failure> {
    if a.size == 0 || !(a.voxel_mm > 0.0) {
        return Err(Error::Config("size and voxel_mm must be positive".into()).into());
    }
    let specs: Vec<EllipsoidSpec> = match &a.specs {
        Some(p) => specs_from_text(
            &fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        )?,
        None => shepp_logan_3d(a.radius_mm, 1.0),
    };
    let o = -(a.size as f64 - 1.0) * 0.5 * a.voxel_mm;
    let grid = Grid::new([a.size; 3], [a.voxel_mm; 3], [o; 3])?;
    let density = rasterize(&specs, &grid)?;
    let vol = if a.hu {
        density.map(|d| 1000.0 * (d - 1.0))
    } else {
        let mu = a.mu_water as f32;
        density.map(|d| d * mu)
    };
    write_nifti(&vol, &a.out, is_gz(&a.out))?;
    if let Some(m) = &a.mask_out {
        let mask = label_mask(&specs, &grid, a.liver_index, a.tumor_index)?;
        write_nifti(&mask, m, is_gz(m))?;
    }
    Ok(())
}

fn project(a: ProjectArgs) -> Result<(), Failure> {
    let cfg = a.config.resolve()?;
    let (ct, _) = read_nifti(&a.ct)?;
    let mask = a.mask.as_ref().map(|p| read_nifti_labels(p).map(|(m, _)| m)).transpose()?;
    let (ct, mask) = prepare_inputs(ct, mask)?;
    let center = compute_center(&ct, mask.as_ref(), cfg.centering)?;
    let stack = project_stage(&ct, &cfg, cfg.geometry.n_angles(), center)?;
    stack.write(&a.out, is_gz(&a.out))?;
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> Result<(), Failure> {
    let cfg = a.config.resolve()?;
    let stack = ProjectionStack::read(&a.projections)?;
    let (vol, report): (_, ReconstructionReport) = reconstruct_stage(&stack, &cfg)?;
    write_nifti(&vol, &a.out, is_gz(&a.out))?;
    let rp = with_suffix(&a.out, ".report.txt");
    fs::write(&rp, report.to_key_values()).map_err(|e| Failure { code: 1, message: format!("{}: {e}", rp.display()) })?;
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<(), Failure> {
    let cfg = a.config.resolve()?;
    if let Some(ct) = a.ct {
        run_pipeline(&ct, a.mask.as_deref(), &cfg, &a.out)?;
        return Ok(());
    }
    let list = a.batch.expect("clap enforces --ct or --batch");
    let text = fs::read_to_string(&list)
        .map_err(|e| Error::Config(format!("cannot read batch list {}: {e}", list.display())))?;
    let base = list.parent().unwrap_or(Path::new("."));
    let jobs: Vec<BatchJob> = parse_batch_list(&text, base, &a.out)?;
    let outcomes = run_batch(&jobs, &cfg, a.parallel);
    let mut failed = 0;
    for o in &outcomes {
        match &o.result {
            Ok(_) => println!("ok {}", o.job.ct.display()),
            Err(e) => {
                failed += 1;
                println!("failed {}: {e}", o.job.ct.display());
            }
        }
    }
    if failed > 0 {
        return Err(Failure { code: 1, message: format!("{failed} of {} volumes failed", outcomes.len()) });
    }
    Ok(())
}

fn align(a: AlignArgs) -> Result<(), Failure> {
    let (ct, _) = read_nifti(&a.ct)?;
    let (mask, _) = read_nifti_labels(&a.mask)?;
    let (reference, _) = read_nifti(&a.reference)?;
    let (c, m) = align_to_grid(&ct, &mask, reference.grid())?;
    write_nifti(&c, &a.out_ct, is_gz(&a.out_ct))?;
    write_nifti(&m, &a.out_mask, is_gz(&a.out_mask))?;
    Ok(())
}

fn misalign(a: MisalignArgs) -> Result<(), Failure> {
    let mode: MisalignMode = a.mode.parse()?;
    let bounds = MisalignBounds {
        max_scale: a.max_scale,
        max_rotation_deg: a.max_rotation_deg,
        max_translation_mm: a.max_translation_mm,
        max_displacement_mm: a.max_displacement_mm,
        control_dims: [a.control_points; 3],
    };
    run_misalign(&a.ct, &a.mask, a.alpha, mode, a.seed, &bounds, &a.out)?;
    Ok(())
}

fn metrics(a: MetricsArgs) -> Result<(), Failure> {
    if a.reference.is_none() && a.reference_mask.is_none() {
        return Err(Error::Config("give --reference/--test and/or --reference-mask/--test-mask".into()).into());
    }
    if let (Some(r), Some(t)) = (&a.reference, &a.test) {
        let (r, _) = read_nifti(r)?;
        let (t, _) = read_nifti(t)?;
        let range = a.data_range.unwrap_or((r.max_value() - r.min_value()) as f64);
        println!("{}", metric_line("rmse", rmse(&r, &t)?));
        println!("{}", metric_line("psnr", psnr(&r, &t, range)?));
    }
    if let (Some(r), Some(t)) = (&a.reference_mask, &a.test_mask) {
        let (r, _) = read_nifti_labels(r)?;
        let (t, _) = read_nifti_labels(t)?;
        println!("{}", metric_line("dice_liver", dice(&r, &t, LIVER)?));
        println!("{}", metric_line("dice_tumor", dice(&r, &t, TUMOR)?));
    }
    Ok(())
}

fn is_gz(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "gz")
}

/// `x/cbct.nii.gz` → `x/cbct<suffix>`.
fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let stem = name.strip_suffix(".gz").unwrap_or(name);
    let stem = stem.strip_suffix(".nii").unwrap_or(stem);
    p.with_file_name(format!("{stem}{suffix}"))
}
