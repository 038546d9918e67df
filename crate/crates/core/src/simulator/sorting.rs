use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::oracle::{oracle_detections, ScoreModel};
use super::render::{render_stack, NoiseConfig};
use super::scene::Scene;
use super::{default_calibration, Rig};
use crate::geometry::{RigidTransform, Vec3};
use crate::perception::{
    filter_by_score, select_next, DetectionSet, GraspRecord, PackageClass, SelectionPolicy,
    DEFAULT_SCORE_THRESHOLD, DEFAULT_WINDOW_RADIUS,
};
use crate::reconstruction::{reconstruct, PointCloud};
use crate::stripe_codec::{decode_stack, generate_patterns, CodecConfig};

/// Depth tolerance of the simulated suction gripper, mm.
pub const DEFAULT_GRASP_TOLERANCE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub enum GraspOutcome {
    Success { package_id: usize, class: PackageClass },
    Failure,
}

/// Executes a robot-frame grasp command against the scene.
///
/// Succeeds when the command, mapped back with `robot_to_camera`, lies over
/// the exposed top face of a package and within `tolerance` of its depth.
/// The grasped package is removed.
pub fn execute_grasp(
    scene: &mut Scene,
    p_robot: &Vec3,
    robot_to_camera: &RigidTransform,
    tolerance: f64,
) -> GraspOutcome {
    let p = robot_to_camera.apply(p_robot);
    let Some(pkg) = scene.topmost_at(p.x, p.y) else {
        return GraspOutcome::Failure;
    };
    if (p.z - pkg.top_z).abs() > tolerance {
        return GraspOutcome::Failure;
    }
    let (package_id, class) = (pkg.id, pkg.spec.class_label.clone());
    scene.remove(package_id);
    GraspOutcome::Success { package_id, class }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SortConfig {
    pub codec: CodecConfig,
    /// `seed` is ignored here; each scan draws its own from the run generator.
    pub noise: NoiseConfig,
    pub score_model: ScoreModel,
    pub threshold: f64,
    pub radius: u32,
    pub calibration: RigidTransform,
    pub grasp_tolerance: f64,
    pub seed: u64,
}

impl Default for SortConfig {
    fn default() -> Self {
        Self {
            codec: CodecConfig::default(),
            noise: NoiseConfig::noiseless(),
            score_model: ScoreModel::default(),
            threshold: DEFAULT_SCORE_THRESHOLD,
            radius: DEFAULT_WINDOW_RADIUS,
            calibration: default_calibration(),
            grasp_tolerance: DEFAULT_GRASP_TOLERANCE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    /// Detections survived filtering but none had a usable grasp point.
    NoTarget,
    /// Nothing left to detect; the run ends here.
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub detections: usize,
    pub target: Option<GraspRecord>,
    pub outcome: Outcome,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SortLog {
    pub records: Vec<CycleRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SortSummary {
    /// Scan-and-grasp cycles, excluding the final empty scan.
    pub cycles: usize,
    pub successes: usize,
    pub failures: usize,
    pub no_target: usize,
    pub success_rate: Option<f64>,
    pub remaining: usize,
}

impl SortLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> SortSummary {
        let count = |o: Outcome| self.records.iter().filter(|r| r.outcome == o).count();
        let (successes, failures) = (count(Outcome::Success), count(Outcome::Failure));
        let attempts = successes + failures;
        SortSummary {
            cycles: self.records.iter().filter(|r| r.outcome != Outcome::Terminated).count(),
            successes,
            failures,
            no_target: count(Outcome::NoTarget),
            success_rate: (attempts > 0).then(|| successes as f64 / attempts as f64),
            remaining: self.records.last().map_or(0, |r| r.remaining),
        }
    }

    pub fn grasped_classes(&self) -> Vec<PackageClass> {
        self.records
            .iter()
            .filter(|r| r.outcome == Outcome::Success)
            .filter_map(|r| r.target.as_ref().map(|t| t.class.clone()))
            .collect()
    }
}

/// Per-cycle intermediate products, handed to the observer.
pub struct CycleArtifacts<'a> {
    pub cycle: usize,
    pub cloud: &'a PointCloud,
    pub detections: &'a DetectionSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SortRun {
    pub log: SortLog,
    pub scene: Scene,
}

/// Scan, detect, select and grasp until nothing is detected or `max_cycles`
/// grasp cycles have run.
pub fn run_sorting_loop(
    mut scene: Scene,
    rig: &Rig,
    cfg: &SortConfig,
    mut policy: SelectionPolicy,
    max_cycles: usize,
    mut observer: impl FnMut(CycleArtifacts<'_>),
) -> SortRun {
    let patterns = generate_patterns(&cfg.codec);
    let robot_to_camera = cfg.calibration.inverse();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = SortLog::default();
    let mut grasp_cycles = 0;

    for cycle in 0.. {
        if grasp_cycles >= max_cycles {
            break;
        }
        let noise = NoiseConfig { seed: rng.next_u64(), ..cfg.noise.clone() };
        let images = render_stack(&scene, &rig.camera, &rig.projector, &patterns, &noise);
        let corr = decode_stack(&images, &cfg.codec).expect("rendered stack matches codec");
        let cloud = reconstruct(&corr, &rig.camera, &rig.projector).expect("rendered at camera size");
        let detected = oracle_detections(&scene, &rig.camera, &cfg.score_model, &mut rng);
        let filtered = filter_by_score(&detected, cfg.threshold);
        observer(CycleArtifacts { cycle, cloud: &cloud, detections: &filtered });

        if filtered.is_empty() {
            log.records.push(CycleRecord {
                cycle,
                detections: 0,
                target: None,
                outcome: Outcome::Terminated,
                remaining: scene.len(),
            });
            break;
        }

        grasp_cycles += 1;
        let target = select_next(&filtered, &cloud, &cfg.calibration, &policy, cfg.radius);
        let (record, outcome) = match &target {
            None => (None, Outcome::NoTarget),
            Some(t) => {
                let record = t.to_record(&cfg.calibration).expect("target built with this calibration");
                match execute_grasp(&mut scene, &t.point_robot, &robot_to_camera, cfg.grasp_tolerance) {
                    GraspOutcome::Success { .. } => {
                        if let SelectionPolicy::ClassRotation(rot) = &mut policy {
                            rot.advance_past(&t.detection.class_label);
                        }
                        (Some(record), Outcome::Success)
                    }
                    GraspOutcome::Failure => (Some(record), Outcome::Failure),
                }
            }
        };
        log.records.push(CycleRecord {
            cycle,
            detections: filtered.len(),
            target: record,
            outcome,
            remaining: scene.len(),
        });
    }
    SortRun { log, scene }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{PackageSpec, Rect};

    fn one_package() -> Scene {
        Scene::new(
            860.0,
            Rect::new(-400.0, -300.0, 400.0, 300.0),
            vec![PackageSpec::new(PackageClass::Sauce, Rect::new(-30.0, -20.0, 30.0, 20.0), 40.0)],
        )
        .unwrap()
    }

    #[test]
    fn grasp_at_top_center_succeeds() {
        let h = default_calibration();
        let mut scene = one_package();
        let cmd = h.apply(&Vec3::new(0.0, 0.0, 820.0));
        let out = execute_grasp(&mut scene, &cmd, &h.inverse(), 5.0);
        assert_eq!(out, GraspOutcome::Success { package_id: 0, class: PackageClass::Sauce });
        assert!(scene.is_empty());
    }

    #[test]
    fn grasp_at_table_depth_fails() {
        let h = default_calibration();
        let mut scene = one_package();
        let cmd = h.apply(&Vec3::new(0.0, 0.0, 860.0));
        assert_eq!(execute_grasp(&mut scene, &cmd, &h.inverse(), 5.0), GraspOutcome::Failure);
        assert_eq!(scene.len(), 1);
        let beside = h.apply(&Vec3::new(100.0, 0.0, 820.0));
        assert_eq!(execute_grasp(&mut scene, &beside, &h.inverse(), 5.0), GraspOutcome::Failure);
    }

    #[test]
    fn grasp_just_above_top_succeeds() {
        let h = RigidTransform::identity();
        let mut scene = one_package();
        let out = execute_grasp(&mut scene, &Vec3::new(5.0, 5.0, 817.0), &h, 5.0);
        assert!(matches!(out, GraspOutcome::Success { .. }));
    }

    #[test]
    fn empty_scene_single_terminal_cycle() {
        let run = run_sorting_loop(Scene::empty(860.0), &Rig::desk(), &SortConfig::default(), SelectionPolicy::Topmost, 5, |_| {});
        assert_eq!(run.log.records.len(), 1);
        let r = &run.log.records[0];
        assert_eq!((r.outcome, r.target.is_none(), r.remaining), (Outcome::Terminated, true, 0));
        let s = run.log.summary();
        assert_eq!((s.cycles, s.success_rate), (0, None));
    }

    #[test]
    fn single_package_is_picked() {
        let run = run_sorting_loop(one_package(), &Rig::desk(), &SortConfig::default(), SelectionPolicy::Topmost, 5, |_| {});
        let s = run.log.summary();
        assert_eq!((s.cycles, s.successes, s.remaining), (1, 1, 0));
        let rec = run.log.records[0].target.as_ref().unwrap();
        assert!((rec.camera[2] - 820.0).abs() < 1.0);
        assert_eq!(run.log.records.last().unwrap().outcome, Outcome::Terminated);
    }

    #[test]
    fn max_cycles_bounds_the_run() {
        let run = run_sorting_loop(Scene::reference(), &Rig::desk(), &SortConfig::default(), SelectionPolicy::Topmost, 2, |_| {});
        assert_eq!(run.log.records.len(), 2);
        assert_eq!(run.scene.len(), 11);
    }
}
