use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nalgebra::{Matrix3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;
use tempfile::TempDir;

use stripesort::geometry::{to_homogeneous, RigidTransform, Vec3};

fn stripesort(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stripesort"))
        .args(args)
        .env_remove("STRIPESORT_SEED")
        .output()
        .expect("binary runs")
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn calibration() -> RigidTransform {
    RigidTransform::new(Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)), Vec3::new(450.0, 0.0, 860.0)).unwrap()
}

fn write_pairs(file: &str, points: &[Vec3], sigma: f64) {
    let h = calibration();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).unwrap();
    let pairs: Vec<Value> = points
        .iter()
        .map(|c| {
            let r = h.apply(c) + Vec3::from_fn(|_, _| if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 });
            serde_json::json!({"camera": [c.x, c.y, c.z], "robot": [r.x, r.y, r.z]})
        })
        .collect();
    fs::write(file, serde_json::json!({ "pairs": pairs }).to_string()).unwrap();
}

fn grid() -> Vec<Vec3> {
    (0..4)
        .flat_map(|j| (0..6).map(move |i| Vec3::new(i as f64 * 30.0 - 75.0, j as f64 * 30.0 - 45.0, 800.0 + i as f64 * 5.0)))
        .collect()
}

#[test]
fn patterns_default_writes_eighteen_images_in_decode_order() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "p");
    assert!(stripesort(&["patterns", "--out", &out]).status.success());
    let pgms = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "pgm").count();
    assert_eq!(pgms, 18);
    let manifest = read_json(Path::new(&out).join("manifest.json"));
    let files = manifest["files"].as_array().unwrap();
    assert_eq!(files.len(), 18);
    assert_eq!(files[0]["slot"], "gray0");
    assert_eq!(files[7]["slot"], "igray0");
    assert_eq!(files[17]["slot"], "shift3");
    assert!(Path::new(&out).join("config.json").exists());
}

#[test]
fn patterns_small_code_writes_six_images() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "p");
    assert!(stripesort(&["patterns", "--gray-bits", "2", "--shifts", "2", "--out", &out]).status.success());
    assert_eq!(read_json(Path::new(&out).join("manifest.json"))["files"].as_array().unwrap().len(), 6);
}

#[test]
fn invalid_codec_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = stripesort(&["patterns", "--shifts", "3", "--out", &path(&dir, "p")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_documents_defaults() {
    let out = stripesort(&["sort", "--help"]);
    let help = String::from_utf8(out.stdout).unwrap();
    for flag in ["--threshold", "--radius", "--policy", "--seed", "--max-cycles", "--gray-bits", "--calib", "--rig"] {
        assert!(help.contains(flag), "{flag} missing");
    }
    assert!(help.contains("[default: 0.8]") && help.contains("[default: 5]") && help.contains("STRIPESORT_SEED"));
}

#[test]
fn calibrate_exact_pairs() {
    let dir = TempDir::new().unwrap();
    let (pairs, out) = (path(&dir, "pairs.json"), path(&dir, "c"));
    write_pairs(&pairs, &grid(), 0.0);
    let run = stripesort(&["calibrate", "--pairs", &pairs, "--out", &out]);
    assert!(run.status.success());
    let cal = read_json(Path::new(&out).join("calibration.json"));
    assert!(cal["rms_residual_mm"].as_f64().unwrap() < 1e-9);
    let h: RigidTransform = serde_json::from_value(cal).unwrap();
    assert!((h.rotation() - calibration().rotation()).abs().max() < 1e-9);
    assert!(String::from_utf8_lossy(&run.stderr).is_empty());
}

#[test]
fn calibrate_noisy_pairs_within_bound() {
    let dir = TempDir::new().unwrap();
    let (pairs, out) = (path(&dir, "pairs.json"), path(&dir, "c"));
    write_pairs(&pairs, &grid(), 0.1);
    assert!(stripesort(&["calibrate", "--pairs", &pairs, "--out", &out]).status.success());
    let rms = read_json(Path::new(&out).join("calibration.json"))["rms_residual_mm"].as_f64().unwrap();
    assert!(rms > 0.0 && rms <= 0.25, "{rms}");
}

#[test]
fn calibrate_warns_on_large_residual() {
    let dir = TempDir::new().unwrap();
    let (pairs, out) = (path(&dir, "pairs.json"), path(&dir, "c"));
    write_pairs(&pairs, &grid(), 5.0);
    let run = stripesort(&["calibrate", "--pairs", &pairs, "--out", &out]);
    assert!(run.status.success());
    assert!(String::from_utf8_lossy(&run.stderr).contains("warning"));
}

#[test]
fn calibrate_two_points_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let (pairs, out) = (path(&dir, "pairs.json"), path(&dir, "c"));
    write_pairs(&pairs, &grid()[..2], 0.0);
    assert_eq!(stripesort(&["calibrate", "--pairs", &pairs, "--out", &out]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let out = stripesort(&["decode", "--scan", &path(&dir, "nope"), "--out", &path(&dir, "d")]);
    assert_eq!(out.status.code(), Some(2));
}

/// scan-sim → decode → reconstruct, returning the scan and cloud directories.
fn pipeline(dir: &TempDir, extra: &[&str]) -> (String, String) {
    let (scan, corr, cloud) = (path(dir, "scan"), path(dir, "corr"), path(dir, "cloud"));
    let mut args = vec!["scan-sim", "--out", &scan];
    args.extend_from_slice(extra);
    assert!(stripesort(&args).status.success());
    assert!(stripesort(&["decode", "--scan", &scan, "--out", &corr]).status.success());
    let corr_file = format!("{corr}/correspondence.json");
    assert!(stripesort(&["reconstruct", "--correspondence", &corr_file, "--out", &cloud]).status.success());
    (scan, cloud)
}

#[test]
fn plan_targets_are_calibrated_camera_points() {
    let dir = TempDir::new().unwrap();
    let (scan, cloud) = pipeline(&dir, &[]);
    let plan = path(&dir, "plan");
    let dets = format!("{scan}/detections.json");
    let ply = format!("{cloud}/cloud.ply");
    assert!(stripesort(&["plan", "--detections", &dets, "--cloud", &ply, "--out", &plan]).status.success());
    let out = read_json(Path::new(&plan).join("grasps.json"));
    let targets = out["targets"].as_array().unwrap();
    assert_eq!(targets.len(), 13);
    let m = to_homogeneous(&calibration());
    for t in targets {
        let c: Vec<f64> = serde_json::from_value(t["camera"].clone()).unwrap();
        let r: Vec<f64> = serde_json::from_value(t["robot"].clone()).unwrap();
        let expect = m * Vector4::new(c[0], c[1], c[2], 1.0);
        for k in 0..3 {
            assert!((expect[k] - r[k]).abs() < 1e-9);
        }
        assert!(c[2] < 850.0, "grasp on a package top, not the table");
    }
}

#[test]
fn plan_below_threshold_is_empty() {
    let dir = TempDir::new().unwrap();
    let (scan, cloud) = pipeline(&dir, &[]);
    let plan = path(&dir, "plan");
    let dets = format!("{scan}/detections.json");
    let ply = format!("{cloud}/cloud.ply");
    let run = stripesort(&["plan", "--detections", &dets, "--cloud", &ply, "--threshold", "0.99", "--out", &plan]);
    assert!(run.status.success());
    let out = read_json(Path::new(&plan).join("grasps.json"));
    assert!(out["targets"].as_array().unwrap().is_empty());
}

#[test]
fn plan_rejects_mismatched_dimensions() {
    let dir = TempDir::new().unwrap();
    let (_, cloud) = pipeline(&dir, &[]);
    let dets = path(&dir, "dets.json");
    fs::write(&dets, r#"{"image": {"width": 100, "height": 100}, "detections": []}"#).unwrap();
    let ply = format!("{cloud}/cloud.ply");
    let run = stripesort(&["plan", "--detections", &dets, "--cloud", &ply, "--out", &path(&dir, "plan")]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("but the cloud is 320x240"));
}

#[test]
fn reconstruct_writes_cloud_sidecar_and_depth() {
    let dir = TempDir::new().unwrap();
    let (_, cloud) = pipeline(&dir, &[]);
    let side = read_json(Path::new(&cloud).join("cloud.json"));
    assert_eq!((side["width"].as_u64(), side["height"].as_u64()), (Some(320), Some(240)));
    let depth = fs::read(Path::new(&cloud).join("depth.pgm")).unwrap();
    assert!(depth.starts_with(b"P5\n320 240\n65535\n"));
    let ply = fs::read_to_string(Path::new(&cloud).join("cloud.ply")).unwrap();
    assert!(ply.starts_with("ply\nformat ascii 1.0\nelement vertex "));
}

#[test]
fn sort_reference_scene_grasps_everything() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "s");
    let run = stripesort(&["sort", "--out", &out]);
    assert_eq!(run.status.code(), Some(0));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.contains("cycles: 13") && stdout.contains("success rate: 1.00"), "{stdout}");
    let log = fs::read_to_string(Path::new(&out).join("sort_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 14);
    assert!(Path::new(&out).join("cycle_00_depth.pgm").exists());
    assert!(Path::new(&out).join("cycle_13_depth.pgm").exists());
    assert_eq!(read_json(Path::new(&out).join("summary.json"))["successes"], 13);
}

#[test]
fn sort_empty_scene_reports_na() {
    let dir = TempDir::new().unwrap();
    let scene = path(&dir, "empty.json");
    fs::write(&scene, r#"{"table_z": 860, "packages": []}"#).unwrap();
    let run = stripesort(&["sort", "--scene", &scene, "--out", &path(&dir, "s")]);
    assert_eq!(run.status.code(), Some(0));
    assert!(String::from_utf8(run.stdout).unwrap().contains("success rate: n/a"));
}

#[test]
fn sort_cut_short_is_a_pipeline_failure() {
    let dir = TempDir::new().unwrap();
    let run = stripesort(&["sort", "--max-cycles", "3", "--out", &path(&dir, "s")]);
    assert_eq!(run.status.code(), Some(3));
}

#[test]
fn sort_invalid_scene_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let scene = path(&dir, "bad.json");
    fs::write(&scene, r#"{"table_z": 860, "packages": [{"class": "sauce", "rect": [0, 0, 0, 10], "height": 5}]}"#).unwrap();
    assert_eq!(stripesort(&["sort", "--scene", &scene, "--out", &path(&dir, "s")]).status.code(), Some(2));
}

#[test]
fn seed_env_var_matches_flag() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (path(&dir, "a"), path(&dir, "b"), path(&dir, "c"));
    let common = ["scan-sim", "--noise-sigma", "0.05", "--scores", "jitter", "--out"];
    let flag = Command::new(env!("CARGO_BIN_EXE_stripesort"))
        .args(common)
        .arg(&a)
        .args(["--seed", "42"])
        .env_remove("STRIPESORT_SEED")
        .status()
        .unwrap();
    let env = Command::new(env!("CARGO_BIN_EXE_stripesort")).args(common).arg(&b).env("STRIPESORT_SEED", "42").output().unwrap().status;
    let other = Command::new(env!("CARGO_BIN_EXE_stripesort")).args(common).arg(&c).env("STRIPESORT_SEED", "43").output().unwrap().status;
    assert!(flag.success() && env.success() && other.success());
    let read = |d: &str, f: &str| fs::read(Path::new(d).join(f)).unwrap();
    assert_eq!(read(&a, "scan_00.pgm"), read(&b, "scan_00.pgm"));
    assert_eq!(read(&a, "detections.json"), read(&b, "detections.json"));
    assert_ne!(read(&a, "scan_00.pgm"), read(&c, "scan_00.pgm"));
}

#[test]
fn shipped_reference_scene_matches_builtin() {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/data/reference_scene.json")).unwrap();
    assert_eq!(stripesort::simulator::Scene::from_json(&text).unwrap(), stripesort::simulator::Scene::reference());
}
