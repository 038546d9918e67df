use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Scene, SurfaceId};
use crate::geometry::{pixel_ray, CameraModel, Pixel, PixelCoord};
use crate::perception::{Detection, DetectionSet, Mask};

/// How the oracle detector assigns confidence scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreModel {
    Constant { score: f64 },
    /// Uniform in `[low, high]`, drawn from the run generator.
    Jitter { low: f64, high: f64 },
}

impl Default for ScoreModel {
    fn default() -> Self {
        ScoreModel::Constant { score: 0.95 }
    }
}

impl ScoreModel {
    pub fn jitter() -> Self {
        ScoreModel::Jitter { low: 0.7, high: 1.0 }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            ScoreModel::Constant { score } => score,
            ScoreModel::Jitter { low, high } => rng.random_range(low..=high),
        }
    }
}

/// Ground-truth detections: one per package whose top face is visible to the camera.
///
/// The box spans the visible top-face pixels (inclusive corners) and the mask
/// marks exactly those pixels. Packages covering a single row or column are skipped.
pub fn oracle_detections<R: Rng>(
    scene: &Scene,
    cam: &CameraModel,
    score_model: &ScoreModel,
    rng: &mut R,
) -> DetectionSet {
    let (w, h) = (cam.width(), cam.height());
    let mut labels: Vec<Option<usize>> = vec![None; w as usize * h as usize];
    for v in 0..h {
        for u in 0..w {
            let hit = scene.ray_cast(&pixel_ray(cam, Pixel::new(u as f64, v as f64)));
            if let Some(SurfaceId::Top(id)) = hit.map(|h| h.surface) {
                labels[(v * w + u) as usize] = Some(id);
            }
        }
    }

    let mut detections = Vec::new();
    for pkg in scene.packages() {
        let mut lo = (u32::MAX, u32::MAX);
        let mut hi = (0u32, 0u32);
        for (i, _) in labels.iter().enumerate().filter(|(_, l)| **l == Some(pkg.id)) {
            let (u, v) = (i as u32 % w, i as u32 / w);
            lo = (lo.0.min(u), lo.1.min(v));
            hi = (hi.0.max(u), hi.1.max(v));
        }
        if lo.0 >= hi.0 || lo.1 >= hi.1 {
            continue;
        }
        let (mw, mh) = (hi.0 - lo.0 + 1, hi.1 - lo.1 + 1);
        let mut bits = Vec::with_capacity((mw * mh) as usize);
        for v in lo.1..=hi.1 {
            for u in lo.0..=hi.0 {
                bits.push(labels[(v * w + u) as usize] == Some(pkg.id));
            }
        }
        let score = score_model.draw(rng).clamp(0.0, 1.0);
        let det = Detection::new(
            pkg.spec.class_label.clone(),
            score,
            PixelCoord::new(lo.0, lo.1),
            PixelCoord::new(hi.0, hi.1),
            Some(Mask { width: mw, height: mh, bits }),
        )
        .expect("oracle boxes are well formed");
        detections.push(det);
    }
    DetectionSet::new(w, h, detections).expect("oracle boxes lie inside the image")
}
