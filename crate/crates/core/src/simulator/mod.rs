//! Synthetic camera, projector, packages and robot for closed-loop runs.
//!
//! The scene lives in the camera frame: the camera sits at the origin looking
//! down `+z` and the table is the plane `z = table_z`.

mod oracle;
mod render;
mod scene;
mod sorting;

use std::io;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, ProjectorModel, RigidTransform, Vec3};

pub use oracle::{oracle_detections, ScoreModel};
pub use render::{render_stack, NoiseConfig, AMBIENT, DROPOUT_DARK, DROPOUT_SATURATED, TABLE_ALBEDO};
pub use scene::{Hit, Package, PackageSpec, Rect, Reflectivity, Scene, SurfaceId, DEFAULT_TABLE_Z};
pub use sorting::{
    execute_grasp, run_sorting_loop, CycleArtifacts, CycleRecord, GraspOutcome, Outcome, SortConfig, SortLog,
    SortRun, SortSummary, DEFAULT_GRASP_TOLERANCE,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Camera and projector of the scanning head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub camera: CameraModel,
    pub projector: ProjectorModel,
}

impl Default for Rig {
    fn default() -> Self {
        Self::desk()
    }
}

impl Rig {
    /// 320×240 camera (f = 400 px) 860 mm above the table; 512-column
    /// projector 1000 mm to the side and 560 mm above the table, aimed at the
    /// table point under the camera.
    pub fn desk() -> Self {
        let camera = CameraModel::new(400.0, 400.0, 160.0, 120.0, 320, 240, RigidTransform::identity())
            .expect("desk camera is valid");
        let center = Vec3::new(1000.0, 0.0, 300.0);
        let yaw = -(center.x).atan2(DEFAULT_TABLE_Z - center.z);
        let pose = RigidTransform::from_axis_angle(Vec3::y(), yaw, center);
        let projector = ProjectorModel::new(1100.0, 256.0, 512, pose).expect("desk projector is valid");
        Self { camera, projector }
    }
}

/// Camera-to-robot transform of the simulated cell: robot base 450 mm along
/// camera `x` from the optical axis, on the table, `z` up.
pub fn default_calibration() -> RigidTransform {
    RigidTransform::new(
        Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)),
        Vec3::new(450.0, 0.0, DEFAULT_TABLE_Z),
    )
    .expect("axis flip is a rotation")
}
