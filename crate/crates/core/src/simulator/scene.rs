use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geometry::{Ray, Vec3};
use crate::perception::PackageClass;

pub const DEFAULT_TABLE_Z: f64 = 860.0;

/// Axis-aligned rectangle on the table plane, `[x0, y0, x1, y1]` in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for Rect {
    fn from(a: [f64; 4]) -> Self {
        Rect { x0: a[0], y0: a[1], x1: a[2], y1: a[3] }
    }
}

impl From<Rect> for [f64; 4] {
    fn from(r: Rect) -> Self {
        [r.x0, r.y0, r.x1, r.y1]
    }
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x0 < self.x1 && self.y0 < self.y1)
            || ![self.x0, self.y0, self.x1, self.y1].iter().all(|c| c.is_finite())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }

    /// Positive-area overlap.
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reflectivity {
    Matte,
    Reflective,
    Transparent,
}

impl Reflectivity {
    pub fn for_class(class: &PackageClass) -> Self {
        match class {
            PackageClass::Powder => Reflectivity::Reflective,
            PackageClass::Vegetable => Reflectivity::Transparent,
            _ => Reflectivity::Matte,
        }
    }

    /// Diffuse response to projector light.
    pub fn albedo(self) -> f64 {
        match self {
            Reflectivity::Matte => 0.8,
            Reflectivity::Reflective => 0.9,
            Reflectivity::Transparent => 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageSpec {
    #[serde(rename = "class")]
    pub class_label: PackageClass,
    #[serde(rename = "rect")]
    pub footprint: Rect,
    pub height: f64,
    #[serde(rename = "dropout", default)]
    pub dropout_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflectivity: Option<Reflectivity>,
}

impl PackageSpec {
    pub fn new(class_label: PackageClass, footprint: Rect, height: f64) -> Self {
        Self { class_label, footprint, height, dropout_rate: 0.0, reflectivity: None }
    }

    pub fn reflectivity(&self) -> Reflectivity {
        self.reflectivity.unwrap_or_else(|| Reflectivity::for_class(&self.class_label))
    }
}

/// A placed package. Depths are camera-frame `z`, so `top_z < base_z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Package {
    pub id: usize,
    pub spec: PackageSpec,
    pub base_z: f64,
    pub top_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SurfaceId {
    Table,
    Top(usize),
    Side(usize),
    Bottom(usize),
}

impl SurfaceId {
    pub fn package(self) -> Option<usize> {
        match self {
            SurfaceId::Table => None,
            SurfaceId::Top(i) | SurfaceId::Side(i) | SurfaceId::Bottom(i) => Some(i),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub point: Vec3,
    pub t: f64,
    pub surface: SurfaceId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub table_z: f64,
    pub bounds: Rect,
    packages: Vec<Package>,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    table_z: f64,
    #[serde(default = "default_bounds")]
    bounds: Rect,
    packages: Vec<PackageSpec>,
}

fn default_bounds() -> Rect {
    Rect::new(-400.0, -300.0, 400.0, 300.0)
}

impl Scene {
    /// Places packages in list order; each rests on the highest earlier package
    /// whose footprint it overlaps, or on the table.
    pub fn new(table_z: f64, bounds: Rect, specs: Vec<PackageSpec>) -> Result<Self, SimError> {
        let bad = |m: String| Err(SimError::InvalidScene(m));
        if !(table_z.is_finite() && table_z > 0.0) {
            return bad(format!("table_z must be positive, got {table_z}"));
        }
        if bounds.is_degenerate() {
            return bad("degenerate table bounds".into());
        }
        let mut packages: Vec<Package> = Vec::with_capacity(specs.len());
        for (id, spec) in specs.into_iter().enumerate() {
            if spec.footprint.is_degenerate() {
                return bad(format!("package {id} has a degenerate footprint"));
            }
            if !(spec.height.is_finite() && spec.height > 0.0) {
                return bad(format!("package {id} height must be positive"));
            }
            if !(0.0..1.0).contains(&spec.dropout_rate) {
                return bad(format!("package {id} dropout {} outside [0, 1)", spec.dropout_rate));
            }
            if !bounds.contains_rect(&spec.footprint) {
                return bad(format!("package {id} lies outside the table bounds"));
            }
            let base_z = packages
                .iter()
                .filter(|p| p.spec.footprint.overlaps(&spec.footprint))
                .map(|p| p.top_z)
                .fold(table_z, f64::min);
            let top_z = base_z - spec.height;
            if top_z <= 0.0 {
                return bad(format!("package {id} reaches the camera"));
            }
            packages.push(Package { id, spec, base_z, top_z });
        }
        Ok(Self { table_z, bounds, packages })
    }

    pub fn empty(table_z: f64) -> Self {
        Self { table_z, bounds: default_bounds(), packages: Vec::new() }
    }

    pub fn packages(&self) -> &[Package] {
        &self.packages
    }

    pub fn package(&self, id: usize) -> Option<&Package> {
        self.packages.iter().find(|p| p.id == id)
    }

    pub fn len(&self) -> usize {
        self.packages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packages.is_empty()
    }

    /// Removes a package; the others stay where they are.
    pub fn remove(&mut self, id: usize) -> Option<Package> {
        let pos = self.packages.iter().position(|p| p.id == id)?;
        Some(self.packages.remove(pos))
    }

    /// Package whose top face is exposed at table position `(x, y)`.
    pub fn topmost_at(&self, x: f64, y: f64) -> Option<&Package> {
        self.packages
            .iter()
            .filter(|p| p.spec.footprint.contains(x, y))
            .min_by(|a, b| a.top_z.total_cmp(&b.top_z))
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let f: SceneFile = serde_json::from_str(text).map_err(|e| SimError::InvalidScene(e.to_string()))?;
        Scene::new(f.table_z, f.bounds, f.packages)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let f = SceneFile {
            table_z: self.table_z,
            bounds: self.bounds,
            packages: self.packages.iter().map(|p| p.spec.clone()).collect(),
        };
        serde_json::to_string_pretty(&f).expect("scene serializes")
    }

    /// Four sauce, four powder and five vegetable packages, partly stacked.
    pub fn reference() -> Self {
        use PackageClass::{Powder, Sauce, Vegetable};
        let veg = |x0, y0| PackageSpec::new(Vegetable, Rect::new(x0, y0, x0 + 90.0, y0 + 65.0), 16.0);
        let powder = |x0, y0| PackageSpec::new(Powder, Rect::new(x0, y0, x0 + 70.0, y0 + 50.0), 12.0);
        let sauce = |x0, y0| PackageSpec::new(Sauce, Rect::new(x0, y0, x0 + 60.0, y0 + 45.0), 10.0);
        let specs = vec![
            veg(-270.0, -190.0),
            veg(-110.0, -195.0),
            veg(40.0, -185.0),
            veg(160.0, -40.0),
            veg(-260.0, 60.0),
            powder(-210.0, -160.0),
            powder(70.0, -150.0),
            powder(-60.0, -20.0),
            powder(60.0, 90.0),
            sauce(-40.0, -170.0),
            sauce(180.0, 0.0),
            sauce(-130.0, 120.0),
            sauce(-230.0, 90.0),
        ];
        Scene::new(DEFAULT_TABLE_Z, default_bounds(), specs).expect("reference scene is valid")
    }

    /// Seeded layout: packages dropped into shuffled grid cells, some landing
    /// partly on an earlier package.
    pub fn random_stack(counts: &[(PackageClass, usize)], seed: u64) -> Result<Self, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut classes: Vec<PackageClass> =
            counts.iter().flat_map(|(c, n)| std::iter::repeat_n(c.clone(), *n)).collect();
        classes.shuffle(&mut rng);
        let (cols, rows) = (5usize, 4usize);
        if classes.len() > cols * rows * 2 {
            return Err(SimError::InvalidScene("too many packages for the random layout".into()));
        }
        let mut cells: Vec<usize> = (0..cols * rows).collect();
        cells.shuffle(&mut rng);
        let (cw, ch) = (110.0, 100.0);
        let (ox, oy) = (-(cols as f64) * cw / 2.0, -(rows as f64) * ch / 2.0);
        let mut specs: Vec<PackageSpec> = Vec::with_capacity(classes.len());
        for (i, class) in classes.into_iter().enumerate() {
            let (w, h, height) = match class {
                PackageClass::Sauce => (60.0, 45.0, 10.0),
                PackageClass::Powder => (70.0, 50.0, 12.0),
                _ => (90.0, 65.0, 16.0),
            };
            let (x0, y0) = if i < cells.len() && !(i > 0 && rng.random_bool(0.25)) {
                let cell = cells[i];
                let (cx, cy) = ((cell % cols) as f64, (cell / cols) as f64);
                (
                    ox + cx * cw + rng.random_range(0.0..(cw - w).max(1.0)),
                    oy + cy * ch + rng.random_range(0.0..(ch - h).max(1.0)),
                )
            } else {
                // overlap an earlier package by at most half its footprint
                let under = &specs[rng.random_range(0..specs.len())].footprint;
                let dx = rng.random_range(-0.5..0.5) * (under.x1 - under.x0);
                let dy = rng.random_range(-0.5..0.5) * (under.y1 - under.y0);
                (under.x0 + dx, under.y0 + dy)
            };
            let x0 = x0.clamp(-350.0, 350.0 - w);
            let y0 = y0.clamp(-250.0, 250.0 - h);
            specs.push(PackageSpec::new(class, Rect::new(x0, y0, x0 + w, y0 + h), height));
        }
        Scene::new(DEFAULT_TABLE_Z, default_bounds(), specs)
    }

    /// Nearest surface hit by `ray`, or `None` if it leaves the table bounds.
    pub fn ray_cast(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let d = ray.direction();
        if d.z.abs() > 1e-15 {
            let t = (self.table_z - ray.origin.z) / d.z;
            if t > 0.0 {
                let p = ray.at(t);
                if self.bounds.contains(p.x, p.y) {
                    best = Some(Hit { point: Vec3::new(p.x, p.y, self.table_z), t, surface: SurfaceId::Table });
                }
            }
        }
        for pkg in &self.packages {
            if let Some((t, axis)) = slab_entry(ray, pkg) {
                if best.is_none_or(|b| t < b.t) {
                    let surface = match axis {
                        2 if d.z > 0.0 => SurfaceId::Top(pkg.id),
                        2 => SurfaceId::Bottom(pkg.id),
                        _ => SurfaceId::Side(pkg.id),
                    };
                    let mut point = ray.at(t);
                    // pin the hit onto the face it entered through
                    match surface {
                        SurfaceId::Top(_) => point.z = pkg.top_z,
                        SurfaceId::Bottom(_) => point.z = pkg.base_z,
                        _ => {}
                    }
                    best = Some(Hit { point, t, surface });
                }
            }
        }
        best
    }
}

/// Entry distance and axis of the ray into a package box (slab test).
fn slab_entry(ray: &Ray, pkg: &Package) -> Option<(f64, usize)> {
    let r = &pkg.spec.footprint;
    let lo = [r.x0, r.y0, pkg.top_z];
    let hi = [r.x1, r.y1, pkg.base_z];
    let d = ray.direction();
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        let (o, dir) = (ray.origin[a], d[a]);
        if dir.abs() < 1e-15 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((lo[a] - o) / dir, (hi[a] - o) / dir);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            axis = a;
        }
        t_far = t_far.min(t1);
    }
    (t_near <= t_far && t_near > 0.0).then_some((t_near, axis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn down(x: f64, y: f64) -> Ray {
        Ray::new(Vec3::new(x, y, 0.0), Vec3::z()).unwrap()
    }

    fn one_box(height: f64) -> Scene {
        Scene::new(
            860.0,
            default_bounds(),
            vec![PackageSpec::new(PackageClass::Sauce, Rect::new(-20.0, -20.0, 20.0, 20.0), height)],
        )
        .unwrap()
    }

    #[test]
    fn straight_down_hits() {
        let empty = Scene::empty(860.0);
        let h = empty.ray_cast(&down(0.0, 0.0)).unwrap();
        assert_eq!(h.surface, SurfaceId::Table);
        assert_eq!(h.point.z, 860.0);
        let scene = one_box(40.0);
        let h = scene.ray_cast(&down(0.0, 0.0)).unwrap();
        assert_eq!(h.surface, SurfaceId::Top(0));
        assert_eq!(h.point.z, 820.0);
        assert!(empty.ray_cast(&down(1000.0, 0.0)).is_none());
        assert!(empty.ray_cast(&Ray::new(Vec3::zeros(), -Vec3::z()).unwrap()).is_none());
    }

    #[test]
    fn stacking_rule() {
        let scene = Scene::new(
            860.0,
            default_bounds(),
            vec![
                PackageSpec::new(PackageClass::Vegetable, Rect::new(0.0, 0.0, 100.0, 100.0), 20.0),
                PackageSpec::new(PackageClass::Sauce, Rect::new(50.0, 50.0, 150.0, 150.0), 10.0),
                PackageSpec::new(PackageClass::Powder, Rect::new(200.0, 0.0, 250.0, 50.0), 10.0),
            ],
        )
        .unwrap();
        let p = scene.packages();
        assert_eq!((p[0].base_z, p[0].top_z), (860.0, 840.0));
        assert_eq!((p[1].base_z, p[1].top_z), (840.0, 830.0));
        assert_eq!((p[2].base_z, p[2].top_z), (860.0, 850.0));
        assert_eq!(scene.topmost_at(75.0, 75.0).unwrap().id, 1);
        assert_eq!(scene.topmost_at(10.0, 10.0).unwrap().id, 0);
        assert!(scene.topmost_at(300.0, 0.0).is_none());
    }

    #[test]
    fn scene_validation() {
        let spec = |rect: Rect, h: f64| PackageSpec::new(PackageClass::Sauce, rect, h);
        assert!(Scene::new(860.0, default_bounds(), vec![spec(Rect::new(0.0, 0.0, 0.0, 10.0), 5.0)]).is_err());
        assert!(Scene::new(860.0, default_bounds(), vec![spec(Rect::new(0.0, 0.0, 10.0, 10.0), 0.0)]).is_err());
        assert!(Scene::new(860.0, default_bounds(), vec![spec(Rect::new(390.0, 0.0, 410.0, 10.0), 5.0)]).is_err());
        let mut s = spec(Rect::new(0.0, 0.0, 10.0, 10.0), 5.0);
        s.dropout_rate = 1.0;
        assert!(Scene::new(860.0, default_bounds(), vec![s]).is_err());
        assert!(Scene::new(-1.0, default_bounds(), vec![]).is_err());
    }

    #[test]
    fn json_round_trip_and_schema() {
        let text = r#"{"table_z": 860, "packages": [{"class": "vegetable", "rect": [0, 0, 90, 65], "height": 40, "dropout": 0.1}]}"#;
        let scene = Scene::from_json(text).unwrap();
        assert_eq!(scene.packages()[0].top_z, 820.0);
        assert_eq!(scene.packages()[0].spec.dropout_rate, 0.1);
        assert_eq!(Scene::from_json(&scene.to_json()).unwrap(), scene);
        assert!(Scene::from_json(r#"{"table_z": 860}"#).is_err());
    }

    #[test]
    fn reference_scene_composition() {
        let s = Scene::reference();
        let count = |c: PackageClass| s.packages().iter().filter(|p| p.spec.class_label == c).count();
        assert_eq!(count(PackageClass::Sauce), 4);
        assert_eq!(count(PackageClass::Powder), 4);
        assert_eq!(count(PackageClass::Vegetable), 5);
        assert!(s.packages().iter().any(|p| p.base_z < 860.0), "some packages are stacked");
    }

    #[test]
    fn random_stack_is_seeded() {
        let counts = [(PackageClass::Sauce, 4), (PackageClass::Powder, 4), (PackageClass::Vegetable, 5)];
        let a = Scene::random_stack(&counts, 9).unwrap();
        assert_eq!(a, Scene::random_stack(&counts, 9).unwrap());
        assert_eq!(a.len(), 13);
        assert_ne!(a, Scene::random_stack(&counts, 10).unwrap());
    }

    /// Brute force: intersect every face rectangle of every box and the table.
    fn brute_force(scene: &Scene, ray: &Ray) -> Option<(f64, SurfaceId)> {
        let mut best: Option<(f64, SurfaceId)> = None;
        let mut consider = |t: f64, s: SurfaceId| {
            if t > 0.0 && best.is_none_or(|(b, _)| t < b) {
                best = Some((t, s));
            }
        };
        let d = ray.direction();
        let o = ray.origin;
        let t = (scene.table_z - o.z) / d.z;
        let p = o + d * t;
        if scene.bounds.contains(p.x, p.y) {
            consider(t, SurfaceId::Table);
        }
        for pkg in scene.packages() {
            let r = pkg.spec.footprint;
            for (z, s) in [(pkg.top_z, SurfaceId::Top(pkg.id)), (pkg.base_z, SurfaceId::Bottom(pkg.id))] {
                let t = (z - o.z) / d.z;
                let p = o + d * t;
                if r.contains(p.x, p.y) {
                    consider(t, s);
                }
            }
            for x in [r.x0, r.x1] {
                let t = (x - o.x) / d.x;
                let p = o + d * t;
                if p.y >= r.y0 && p.y <= r.y1 && p.z >= pkg.top_z && p.z <= pkg.base_z {
                    consider(t, SurfaceId::Side(pkg.id));
                }
            }
            for y in [r.y0, r.y1] {
                let t = (y - o.y) / d.y;
                let p = o + d * t;
                if p.x >= r.x0 && p.x <= r.x1 && p.z >= pkg.top_z && p.z <= pkg.base_z {
                    consider(t, SurfaceId::Side(pkg.id));
                }
            }
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ray_cast_matches_brute_force(seed in any::<u64>()) {
            let scene = Scene::reference();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..200 {
                let origin = Vec3::new(rng.random_range(-600.0..1200.0), rng.random_range(-300.0..300.0), rng.random_range(0.0..700.0));
                let target = Vec3::new(rng.random_range(-380.0..380.0), rng.random_range(-280.0..280.0), rng.random_range(820.0..861.0));
                let ray = Ray::new(origin, target - origin).unwrap();
                let fast = scene.ray_cast(&ray);
                let slow = brute_force(&scene, &ray);
                match (fast, slow) {
                    (None, None) => {}
                    (Some(h), Some((t, s))) => {
                        prop_assert!((h.t - t).abs() < 1e-6, "t {} vs {}", h.t, t);
                        // surfaces can only disagree on an exact edge
                        if h.surface != s {
                            prop_assert!(h.surface.package() == s.package() || (h.t - t).abs() < 1e-9);
                        }
                    }
                    (a, b) => prop_assert!(false, "fast {:?} vs brute {:?}", a, b),
                }
            }
        }
    }
}
