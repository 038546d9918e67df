//! `stripesort` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 pipeline failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{estimate_rigid_transform, transform_residual, CorrespondenceSet, RigidTransform, Vec3};
use crate::perception::{
    bbox_midpoint, filter_by_score, grasp_point_with_pixel, load_detections, save_detections, ClassRotation,
    GraspTarget, Mask, PackageClass, SelectionPolicy,
};
use crate::raster::{read_pgm, write_pgm16, write_pgm8};
use crate::reconstruction::{cloud_from_ply, depth_pgm_samples, export_ply, parse_ply_vertices, reconstruct, PointCloud};
use crate::simulator::{
    default_calibration, oracle_detections, render_stack, run_sorting_loop, NoiseConfig, Rig, Scene, ScoreModel,
    SortConfig,
};
use crate::stripe_codec::{decode_stack, generate_patterns, CodecConfig, CorrespondenceMap};

const CONFIG_ECHO: &str = "config.json";
const RESIDUAL_WARNING_MM: f64 = 1.0;

#[derive(Debug, Parser)]
#[command(name = "stripesort", version, about = "Structured-light scanning and grasp planning for package sorting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the projector pattern sequence as PGM images plus a manifest.
    Patterns(PatternsArgs),
    /// Render a simulated scan of a scene, with oracle detections.
    ScanSim(ScanSimArgs),
    /// Decode a scan into per-pixel projector columns.
    Decode(DecodeArgs),
    /// Triangulate a correspondence map into an indexed point cloud.
    Reconstruct(ReconstructArgs),
    /// Estimate the camera-to-robot transform from point pairs.
    Calibrate(CalibrateArgs),
    /// Compute robot-frame grasp targets for detections over a cloud.
    Plan(PlanArgs),
    /// Run the closed scan-detect-grasp loop on a simulated scene.
    Sort(SortArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct CodecArgs {
    /// Number of Gray-code bits.
    #[arg(long, default_value_t = 7)]
    gray_bits: u32,
    /// Number of line-shift patterns.
    #[arg(long, default_value_t = 4)]
    shifts: u32,
    /// Projector columns.
    #[arg(long, default_value_t = 512)]
    columns: u32,
    /// Minimum direct/inverse contrast for a decodable bit.
    #[arg(long, default_value_t = 0.1)]
    contrast_threshold: f64,
}

impl CodecArgs {
    fn config(&self) -> Result<CodecConfig, CliError> {
        CodecConfig::new(self.gray_bits, self.shifts, self.columns, self.contrast_threshold)
            .map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct RigArgs {
    /// Camera/projector JSON; the built-in desk rig when omitted.
    #[arg(long, value_name = "FILE")]
    rig: Option<PathBuf>,
}

impl RigArgs {
    fn load(&self) -> Result<Rig, CliError> {
        match &self.rig {
            None => Ok(Rig::desk()),
            Some(p) => parse_json(&read_text(p, CliError::Usage)?, p, CliError::Usage),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct CalibArgs {
    /// Camera-to-robot transform JSON; the built-in simulated cell when omitted.
    #[arg(long, value_name = "FILE")]
    calib: Option<PathBuf>,
}

impl CalibArgs {
    fn load(&self) -> Result<RigidTransform, CliError> {
        match &self.calib {
            None => Ok(default_calibration()),
            Some(p) => parse_json(&read_text(p, CliError::Usage)?, p, CliError::Usage),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct SimArgs {
    /// Scene JSON; the built-in 13-package reference scene when omitted.
    #[arg(long, value_name = "FILE")]
    scene: Option<PathBuf>,
    /// Standard deviation of additive image noise.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Per-class dropout override, e.g. `powder=0.3`. Repeatable.
    #[arg(long = "dropout", value_name = "CLASS=RATE", value_parser = parse_dropout)]
    dropout: Vec<(String, f64)>,
    /// Oracle detector scores.
    #[arg(long, value_enum, default_value_t = ScoreArg::Constant)]
    scores: ScoreArg,
    /// Random seed.
    #[arg(long, env = "STRIPESORT_SEED", default_value_t = 0)]
    seed: u64,
}

impl SimArgs {
    fn scene(&self) -> Result<Scene, CliError> {
        match &self.scene {
            None => Ok(Scene::reference()),
            Some(p) => Scene::from_json(&read_text(p, CliError::Data)?)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
        }
    }

    fn noise(&self) -> Result<NoiseConfig, CliError> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(CliError::Usage(format!("noise sigma {} must be finite and non-negative", self.noise_sigma)));
        }
        Ok(NoiseConfig {
            gaussian_sigma: self.noise_sigma,
            seed: self.seed,
            class_dropout: self.dropout.iter().map(|(c, r)| (PackageClass::from(c.as_str()), *r)).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ScoreArg {
    /// Every detection scores 0.95.
    Constant,
    /// Scores uniform in [0.7, 1.0].
    Jitter,
}

impl ScoreArg {
    fn model(self) -> ScoreModel {
        match self {
            ScoreArg::Constant => ScoreModel::default(),
            ScoreArg::Jitter => ScoreModel::jitter(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum PolicyArg {
    /// Highest package first.
    Topmost,
    /// Vegetable, sauce, powder in turn.
    ClassRotation,
}

fn parse_dropout(s: &str) -> Result<(String, f64), String> {
    let (class, rate) = s.split_once('=').ok_or_else(|| format!("expected CLASS=RATE, got `{s}`"))?;
    let rate: f64 = rate.parse().map_err(|e| format!("bad rate `{rate}`: {e}"))?;
    if class.is_empty() || !(0.0..=1.0).contains(&rate) {
        return Err(format!("expected a class name and a rate in [0, 1], got `{s}`"));
    }
    Ok((class.to_string(), rate))
}

#[derive(Debug, Args, Serialize)]
struct PatternsArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    codec: CodecArgs,
    /// Rows of each pattern image.
    #[arg(long, default_value_t = 384)]
    rows: u32,
}

#[derive(Debug, Args, Serialize)]
struct ScanSimArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    codec: CodecArgs,
    #[command(flatten)]
    rig: RigArgs,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Debug, Args, Serialize)]
struct DecodeArgs {
    /// Scan directory written by `scan-sim` (or any directory with a matching manifest).
    #[arg(long)]
    scan: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    codec: CodecArgs,
    /// Also write a 16-bit PGM visualizing the decoded columns.
    #[arg(long, default_value_t = false)]
    debug_pgm: bool,
}

#[derive(Debug, Args, Serialize)]
struct ReconstructArgs {
    /// Correspondence JSON written by `decode`.
    #[arg(long)]
    correspondence: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    rig: RigArgs,
    /// Depth mapped to the brightest depth-image level, mm.
    #[arg(long, default_value_t = 700.0)]
    z_near: f64,
    /// Depth mapped to the darkest valid depth-image level, mm.
    #[arg(long, default_value_t = 900.0)]
    z_far: f64,
}

#[derive(Debug, Args, Serialize)]
struct CalibrateArgs {
    /// JSON `{"pairs": [{"camera": [x,y,z], "robot": [x,y,z]}, ...]}`.
    #[arg(long)]
    pairs: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PlanArgs {
    /// Detections JSON.
    #[arg(long)]
    detections: PathBuf,
    /// Cloud PLY; its sidecar JSON must sit next to it with a `.json` extension.
    #[arg(long)]
    cloud: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    calib: CalibArgs,
    /// Minimum detection score (inclusive).
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
    /// Half-size of the grasp search window, px.
    #[arg(long, default_value_t = 5)]
    radius: u32,
}

#[derive(Debug, Args, Serialize)]
struct SortArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    codec: CodecArgs,
    #[command(flatten)]
    rig: RigArgs,
    #[command(flatten)]
    calib: CalibArgs,
    #[command(flatten)]
    sim: SimArgs,
    /// Which detection to grasp each cycle.
    #[arg(long, value_enum, default_value_t = PolicyArg::Topmost)]
    policy: PolicyArg,
    /// Minimum detection score (inclusive).
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
    /// Half-size of the grasp search window, px.
    #[arg(long, default_value_t = 5)]
    radius: u32,
    /// Upper bound on grasp cycles.
    #[arg(long, default_value_t = 100)]
    max_cycles: usize,
    /// Accepted depth error of a grasp, mm.
    #[arg(long, default_value_t = 5.0)]
    grasp_tolerance: f64,
    /// Depth mapped to the brightest per-cycle depth-image level, mm.
    #[arg(long, default_value_t = 700.0)]
    z_near: f64,
    /// Depth mapped to the darkest valid per-cycle depth-image level, mm.
    #[arg(long, default_value_t = 900.0)]
    z_far: f64,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Pipeline(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Pipeline(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Pipeline(m) => m,
        }
    }
}

/// Parses `args` (including the program name) and runs the subcommand; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Patterns(a) => cmd_patterns(a),
        Command::ScanSim(a) => cmd_scan_sim(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Sort(a) => cmd_sort(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn read_text(path: &Path, kind: fn(String) -> CliError) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| kind(format!("{}: {e}", path.display())))
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, path: &Path, kind: fn(String) -> CliError) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| kind(format!("{}: {e}", path.display())))
}

fn out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Pipeline(format!("{}: {e}", dir.display())))
}

fn write_bytes(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Pipeline(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("output types serialize");
    text.push('\n');
    write_bytes(path, text)
}

fn pipeline<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Pipeline(e.to_string())
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Serialize)]
struct Echo<'a, A: Serialize, E: Serialize> {
    command: &'a str,
    args: &'a A,
    resolved: E,
}

fn echo<A: Serialize, E: Serialize>(dir: &Path, command: &str, args: &A, resolved: E) -> Result<(), CliError> {
    write_json(&dir.join(CONFIG_ECHO), &Echo { command, args, resolved })
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    index: usize,
    slot: String,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    codec: CodecConfig,
    width: u32,
    height: u32,
    files: Vec<ManifestEntry>,
}

fn cmd_patterns(a: &PatternsArgs) -> Result<i32, CliError> {
    let codec = a.codec.config()?;
    if a.rows == 0 {
        return Err(CliError::Usage("rows must be positive".into()));
    }
    out_dir(&a.out)?;
    let stack = generate_patterns(&codec);
    let mut files = Vec::new();
    for (i, slot) in stack.slots().iter().enumerate() {
        let name = stack.file_name(i);
        write_pgm8(&a.out.join(&name), codec.projector_columns(), a.rows, &stack.image_u8(i, a.rows)).map_err(pipeline)?;
        files.push(ManifestEntry { index: i, slot: slot.to_string(), file: name });
    }
    let manifest = Manifest { codec, width: codec.projector_columns(), height: a.rows, files };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    echo(&a.out, "patterns", a, codec)?;
    println!("wrote {} patterns to {}", stack.len(), a.out.display());
    Ok(0)
}

#[derive(Serialize)]
struct SimResolved<'a> {
    codec: CodecConfig,
    rig: &'a Rig,
    noise: &'a NoiseConfig,
    score_model: ScoreModel,
}

fn cmd_scan_sim(a: &ScanSimArgs) -> Result<i32, CliError> {
    let codec = a.codec.config()?;
    let rig = a.rig.load()?;
    let noise = a.sim.noise()?;
    let scene = a.sim.scene()?;
    out_dir(&a.out)?;

    let stack = generate_patterns(&codec);
    let images = render_stack(&scene, &rig.camera, &rig.projector, &stack, &noise);
    let (w, h) = (rig.camera.width(), rig.camera.height());
    let mut files = Vec::new();
    for (i, (im, slot)) in images.iter().zip(stack.slots()).enumerate() {
        let name = format!("scan_{i:02}.pgm");
        write_pgm8(&a.out.join(&name), w, h, &im.to_u8()).map_err(pipeline)?;
        files.push(ManifestEntry { index: i, slot: slot.to_string(), file: name });
    }
    write_json(&a.out.join("manifest.json"), &Manifest { codec, width: w, height: h, files })?;

    let mut rng = ChaCha8Rng::seed_from_u64(a.sim.seed);
    let detections = oracle_detections(&scene, &rig.camera, &a.sim.scores.model(), &mut rng);
    save_detections(&detections, &a.out.join("detections.json")).map_err(pipeline)?;
    write_bytes(&a.out.join("scene.json"), scene.to_json() + "\n")?;
    echo(&a.out, "scan-sim", a, SimResolved { codec, rig: &rig, noise: &noise, score_model: a.sim.scores.model() })?;
    println!("rendered {} images and {} detections to {}", images.len(), detections.len(), a.out.display());
    Ok(0)
}

fn cmd_decode(a: &DecodeArgs) -> Result<i32, CliError> {
    let codec = a.codec.config()?;
    let manifest_path = a.scan.join("manifest.json");
    let manifest: Manifest = parse_json(&read_text(&manifest_path, CliError::Data)?, &manifest_path, CliError::Data)?;
    let mut images = Vec::with_capacity(manifest.files.len());
    for entry in &manifest.files {
        let path = a.scan.join(&entry.file);
        let pgm = read_pgm(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        images.push(pgm.to_gray());
    }
    let map = decode_stack(&images, &codec).map_err(data)?;
    out_dir(&a.out)?;
    write_bytes(&a.out.join("correspondence.json"), serde_json::to_string(&map).expect("map serializes") + "\n")?;
    if a.debug_pgm {
        write_pgm16(&a.out.join("correspondence_debug.pgm"), map.width, map.height, &map.debug_pgm16())
            .map_err(pipeline)?;
    }
    echo(&a.out, "decode", a, codec)?;
    println!("decoded {} of {} pixels", map.valid_count(), map.valid.len());
    Ok(0)
}

/// Sidecar that restores pixel indexing to a PLY cloud.
#[derive(Serialize, Deserialize)]
struct CloudSidecar {
    width: u32,
    height: u32,
    /// Run lengths of the valid mask, starting with invalid pixels.
    valid_rle: String,
}

fn check_depth_range(near: f64, far: f64) -> Result<(), CliError> {
    if near.is_finite() && far.is_finite() && near < far {
        Ok(())
    } else {
        Err(CliError::Usage(format!("depth range near {near} must be below far {far}")))
    }
}

fn write_cloud(dir: &Path, cloud: &PointCloud) -> Result<(), CliError> {
    export_ply(cloud, &dir.join("cloud.ply")).map_err(pipeline)?;
    let mask = Mask { width: cloud.width(), height: cloud.height(), bits: cloud.valid.clone() };
    let sidecar = CloudSidecar { width: cloud.width(), height: cloud.height(), valid_rle: mask.to_rle() };
    write_json(&dir.join("cloud.json"), &sidecar)
}

fn load_cloud(ply: &Path) -> Result<PointCloud, CliError> {
    let side_path = ply.with_extension("json");
    let side: CloudSidecar = parse_json(&read_text(&side_path, CliError::Data)?, &side_path, CliError::Data)?;
    let mask = Mask::from_rle(side.width, side.height, &side.valid_rle).map_err(data)?;
    let vertices = parse_ply_vertices(&read_text(ply, CliError::Data)?).map_err(data)?;
    cloud_from_ply(side.width, side.height, &mask.bits, &vertices).map_err(data)
}

fn cmd_reconstruct(a: &ReconstructArgs) -> Result<i32, CliError> {
    check_depth_range(a.z_near, a.z_far)?;
    let rig = a.rig.load()?;
    let map: CorrespondenceMap = parse_json(&read_text(&a.correspondence, CliError::Data)?, &a.correspondence, CliError::Data)?;
    if map.projector_columns != rig.projector.columns() {
        return Err(CliError::Data(format!(
            "correspondence uses {} projector columns, rig has {}",
            map.projector_columns,
            rig.projector.columns()
        )));
    }
    let cloud = reconstruct(&map, &rig.camera, &rig.projector).map_err(data)?;
    out_dir(&a.out)?;
    write_cloud(&a.out, &cloud)?;
    let depth = depth_pgm_samples(&cloud, a.z_near, a.z_far).map_err(pipeline)?;
    write_pgm16(&a.out.join("depth.pgm"), cloud.width(), cloud.height(), &depth).map_err(pipeline)?;
    echo(&a.out, "reconstruct", a, rig)?;
    println!("reconstructed {} points", cloud.valid_count());
    Ok(0)
}

#[derive(Deserialize)]
struct PairsFile {
    pairs: Vec<PairEntry>,
}

#[derive(Deserialize)]
struct PairEntry {
    camera: [f64; 3],
    robot: [f64; 3],
}

#[derive(Serialize)]
struct CalibrationOutput {
    #[serde(flatten)]
    transform: RigidTransform,
    rms_residual_mm: f64,
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<i32, CliError> {
    let file: PairsFile = parse_json(&read_text(&a.pairs, CliError::Data)?, &a.pairs, CliError::Data)?;
    let pairs = file.pairs.iter().map(|p| (Vec3::from(p.camera), Vec3::from(p.robot))).collect();
    let set = CorrespondenceSet::new(pairs).map_err(data)?;
    let h = estimate_rigid_transform(&set).map_err(data)?;
    let rms = transform_residual(&set, &h);
    out_dir(&a.out)?;
    write_json(&a.out.join("calibration.json"), &CalibrationOutput { transform: h, rms_residual_mm: rms })?;
    echo(&a.out, "calibrate", a, set.len())?;
    if rms > RESIDUAL_WARNING_MM {
        eprintln!("warning: RMS residual {rms:.3} mm exceeds {RESIDUAL_WARNING_MM} mm");
    }
    println!("calibrated from {} pairs, RMS residual {rms:.6} mm", set.len());
    Ok(0)
}

#[derive(Serialize)]
struct Skipped {
    detection: usize,
    reason: String,
}

#[derive(Serialize)]
struct PlanOutput {
    targets: Vec<crate::perception::GraspRecord>,
    skipped: Vec<Skipped>,
}

fn check_threshold(t: f64) -> Result<(), CliError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("threshold {t} outside [0, 1]")))
    }
}

fn cmd_plan(a: &PlanArgs) -> Result<i32, CliError> {
    check_threshold(a.threshold)?;
    let h = a.calib.load()?;
    let detections = load_detections(&a.detections).map_err(data)?;
    let cloud = load_cloud(&a.cloud)?;
    if (detections.image_width, detections.image_height) != (cloud.width(), cloud.height()) {
        return Err(CliError::Data(format!(
            "detections are {}x{} but the cloud is {}x{}",
            detections.image_width,
            detections.image_height,
            cloud.width(),
            cloud.height()
        )));
    }
    let kept = filter_by_score(&detections, a.threshold);
    let mut out = PlanOutput { targets: Vec::new(), skipped: Vec::new() };
    for (i, d) in kept.detections.iter().enumerate() {
        match grasp_point_with_pixel(d, &cloud, a.radius) {
            Ok((p, px)) => {
                let target = GraspTarget::new(d.clone(), p, px, &h);
                out.targets.push(target.to_record(&h).map_err(pipeline)?);
            }
            Err(e) => out.skipped.push(Skipped { detection: i, reason: format!("{e} (midpoint {:?})", bbox_midpoint(d)) }),
        }
    }
    out_dir(&a.out)?;
    write_json(&a.out.join("grasps.json"), &out)?;
    echo(&a.out, "plan", a, h)?;
    println!("{} targets from {} detections ({} above threshold)", out.targets.len(), detections.len(), kept.len());
    Ok(0)
}

#[derive(Serialize)]
struct SortResolved<'a> {
    codec: CodecConfig,
    rig: &'a Rig,
    calibration: &'a RigidTransform,
    noise: &'a NoiseConfig,
    score_model: ScoreModel,
    packages: usize,
}

fn cmd_sort(a: &SortArgs) -> Result<i32, CliError> {
    check_threshold(a.threshold)?;
    check_depth_range(a.z_near, a.z_far)?;
    if !(a.grasp_tolerance >= 0.0) {
        return Err(CliError::Usage("grasp tolerance must be non-negative".into()));
    }
    let codec = a.codec.config()?;
    let rig = a.rig.load()?;
    let calibration = a.calib.load()?;
    let noise = a.sim.noise()?;
    let scene = a.sim.scene()?;
    if codec.projector_columns() != rig.projector.columns() {
        return Err(CliError::Usage(format!(
            "codec uses {} columns, rig projector has {}",
            codec.projector_columns(),
            rig.projector.columns()
        )));
    }
    let cfg = SortConfig {
        codec,
        noise: noise.clone(),
        score_model: a.sim.scores.model(),
        threshold: a.threshold,
        radius: a.radius,
        calibration,
        grasp_tolerance: a.grasp_tolerance,
        seed: a.sim.seed,
    };
    let policy = match a.policy {
        PolicyArg::Topmost => SelectionPolicy::Topmost,
        PolicyArg::ClassRotation => SelectionPolicy::ClassRotation(ClassRotation::default()),
    };
    out_dir(&a.out)?;
    echo(
        &a.out,
        "sort",
        a,
        SortResolved {
            codec,
            rig: &rig,
            calibration: &calibration,
            noise: &noise,
            score_model: cfg.score_model,
            packages: scene.len(),
        },
    )?;

    let mut write_error = None;
    let run = run_sorting_loop(scene, &rig, &cfg, policy, a.max_cycles, |art| {
        if write_error.is_some() {
            return;
        }
        let res = depth_pgm_samples(art.cloud, a.z_near, a.z_far).map_err(pipeline).and_then(|d| {
            let path = a.out.join(format!("cycle_{:02}_depth.pgm", art.cycle));
            write_pgm16(&path, art.cloud.width(), art.cloud.height(), &d).map_err(pipeline)
        });
        write_error = res.err();
    });
    if let Some(e) = write_error {
        return Err(e);
    }

    write_bytes(&a.out.join("sort_log.jsonl"), run.log.to_jsonl())?;
    let summary = run.log.summary();
    write_json(&a.out.join("summary.json"), &summary)?;
    let rate = summary.success_rate.map_or("n/a".to_string(), |r| format!("{r:.2}"));
    println!(
        "cycles: {}  successes: {}  failures: {}  success rate: {rate}  remaining: {}",
        summary.cycles, summary.successes, summary.failures, summary.remaining
    );
    Ok(if run.scene.is_empty() { 0 } else { 3 })
}
