use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{Scene, SurfaceId};
use crate::geometry::{pixel_ray, CameraModel, Pixel, ProjectorModel, Ray};
use crate::perception::PackageClass;
use crate::raster::GrayImage;
use crate::stripe_codec::PatternStack;

/// Intensity of a surface the projector does not reach.
pub const AMBIENT: f64 = 0.05;
pub const TABLE_ALBEDO: f64 = 0.7;
/// Replacement levels for specular / transparent failures.
pub const DROPOUT_SATURATED: f64 = 1.0;
pub const DROPOUT_DARK: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseConfig {
    #[serde(default)]
    pub gaussian_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Per-class dropout rates that replace the per-package value.
    #[serde(default)]
    pub class_dropout: BTreeMap<PackageClass, f64>,
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self::default()
    }

    fn dropout_for(&self, scene: &Scene, id: usize) -> f64 {
        scene
            .package(id)
            .map(|p| *self.class_dropout.get(&p.spec.class_label).unwrap_or(&p.spec.dropout_rate))
            .unwrap_or(0.0)
    }
}

/// Renders one camera image per pattern slot.
///
/// Each pixel's randomness comes from its own ChaCha stream keyed by
/// `noise.seed` and the pixel index, so output does not depend on scheduling.
pub fn render_stack(
    scene: &Scene,
    cam: &CameraModel,
    proj: &ProjectorModel,
    patterns: &PatternStack,
    noise: &NoiseConfig,
) -> Vec<GrayImage> {
    let (w, h) = (cam.width(), cam.height());
    let n_slots = patterns.len();
    let normal = (noise.gaussian_sigma > 0.0).then(|| Normal::new(0.0, noise.gaussian_sigma).expect("sigma is finite"));
    let columns = proj.columns() as f64;

    let pixels: Vec<Vec<f32>> = (0..w as usize * h as usize)
        .into_par_iter()
        .map(|i| {
            let px = Pixel::new((i % w as usize) as f64, (i / w as usize) as f64);
            let mut samples = vec![0.0f64; n_slots];
            let Some(hit) = scene.ray_cast(&pixel_ray(cam, px)) else {
                return vec![0.0; n_slots];
            };
            let (albedo, dropout) = match hit.surface {
                SurfaceId::Table => (TABLE_ALBEDO, 0.0),
                s => {
                    let id = s.package().expect("package surface");
                    let pkg = scene.package(id).expect("hit package exists");
                    (pkg.spec.reflectivity().albedo(), noise.dropout_for(scene, id))
                }
            };

            let lit_column = proj.column_of(&hit.point).ok().filter(|c| *c >= 0.0 && *c < columns).filter(|_| {
                let to_hit = hit.point - proj.center();
                let dist = to_hit.norm();
                Ray::new(proj.center(), to_hit)
                    .and_then(|r| scene.ray_cast(&r))
                    .is_some_and(|h| h.t >= dist - 1e-3)
            });
            for (s, profile) in samples.iter_mut().zip(patterns.profiles()) {
                let lit = lit_column.map_or(0.0, |c| profile[c.floor() as usize] as f64);
                *s = AMBIENT + albedo * lit;
            }

            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            rng.set_stream(i as u64);
            let dropped = dropout > 0.0 && rng.random::<f64>() < dropout;
            if let Some(normal) = &normal {
                for s in samples.iter_mut() {
                    *s += normal.sample(&mut rng);
                }
            }
            if dropped {
                let level = if rng.random_bool(0.5) { DROPOUT_SATURATED } else { DROPOUT_DARK };
                samples.fill(level);
            }
            samples.iter().map(|s| s.clamp(0.0, 1.0) as f32).collect()
        })
        .collect();

    let mut images: Vec<GrayImage> = (0..n_slots).map(|_| GrayImage::new(w, h)).collect();
    for (i, px) in pixels.iter().enumerate() {
        for (im, &v) in images.iter_mut().zip(px) {
            im.data[i] = v;
        }
    }
    images
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{PackageSpec, Rect, Rig};
    use crate::stripe_codec::{decode_stack, generate_patterns, CodecConfig};

    fn small_rig() -> Rig {
        let mut rig = Rig::desk();
        rig.camera = CameraModel::new(100.0, 100.0, 40.0, 30.0, 80, 60, *rig.camera.pose()).unwrap();
        rig
    }

    fn boxed(dropout: f64) -> Scene {
        let mut spec = PackageSpec::new(PackageClass::Powder, Rect::new(-60.0, -60.0, 60.0, 60.0), 40.0);
        spec.dropout_rate = dropout;
        Scene::new(860.0, Rect::new(-400.0, -300.0, 400.0, 300.0), vec![spec]).unwrap()
    }

    #[test]
    fn identical_seeds_identical_stacks() {
        let rig = small_rig();
        let pats = generate_patterns(&CodecConfig::default());
        let noise = NoiseConfig { gaussian_sigma: 0.05, seed: 42, class_dropout: BTreeMap::new() };
        let a = render_stack(&boxed(0.3), &rig.camera, &rig.projector, &pats, &noise);
        let b = render_stack(&boxed(0.3), &rig.camera, &rig.projector, &pats, &noise);
        assert_eq!(a, b);
        let other = NoiseConfig { seed: 43, ..noise };
        assert_ne!(a, render_stack(&boxed(0.3), &rig.camera, &rig.projector, &pats, &other));
    }

    #[test]
    fn near_certain_dropout_blanks_the_package() {
        let rig = small_rig();
        let cfg = CodecConfig::default();
        let pats = generate_patterns(&cfg);
        let scene = boxed(0.0);
        let mut noise = NoiseConfig::noiseless();
        // class override may reach 1.0 even though package specs must stay below it
        noise.class_dropout.insert(PackageClass::Powder, 1.0);
        let map = decode_stack(&render_stack(&scene, &rig.camera, &rig.projector, &pats, &noise), &cfg).unwrap();
        let mut package_pixels = 0;
        for i in 0..map.valid.len() {
            let px = Pixel::new((i % 80) as f64, (i / 80) as f64);
            let hit = scene.ray_cast(&pixel_ray(&rig.camera, px)).unwrap();
            if hit.surface.package().is_some() {
                package_pixels += 1;
                assert!(!map.valid[i]);
            }
        }
        assert!(package_pixels > 100);
        assert!(map.valid_count() > 0, "table stays decodable");
    }

    #[test]
    fn values_stay_in_unit_range() {
        let rig = small_rig();
        let pats = generate_patterns(&CodecConfig::default());
        let noise = NoiseConfig { gaussian_sigma: 0.5, seed: 1, class_dropout: BTreeMap::new() };
        let images = render_stack(&boxed(0.5), &rig.camera, &rig.projector, &pats, &noise);
        assert_eq!(images.len(), 18);
        assert!(images.iter().flat_map(|im| &im.data).all(|&v| (0.0..=1.0).contains(&v)));
    }
}
