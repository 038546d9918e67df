//! Detection records, confidence filtering and grasp-point selection.
//!
//! Detections come from an external instance-segmentation model (or the
//! simulator's oracle) through a JSON file. A grasp point is the topmost
//! (smallest camera `z`) valid cloud point in a small window around the
//! bounding-box midpoint, mapped into the robot base frame.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{apply_transform, PixelCoord, RigidTransform, Vec3};
use crate::reconstruction::{flat_index, lookup_3d, PointCloud};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.8;
pub const DEFAULT_WINDOW_RADIUS: u32 = 5;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("no valid cloud points in the grasp window around ({u}, {v})")]
    NoValidPoints { u: u32, v: u32 },
    #[error("pixel ({u}, {v}) outside the {width}x{height} cloud")]
    OutOfBounds { u: u32, v: u32, width: u32, height: u32 },
    #[error("grasp target frames disagree by {0} mm")]
    FrameMismatch(f64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PackageClass {
    Sauce,
    Powder,
    Vegetable,
    Other(String),
}

impl PackageClass {
    pub fn as_str(&self) -> &str {
        match self {
            PackageClass::Sauce => "sauce",
            PackageClass::Powder => "powder",
            PackageClass::Vegetable => "vegetable",
            PackageClass::Other(s) => s,
        }
    }
}

impl From<&str> for PackageClass {
    fn from(s: &str) -> Self {
        match s {
            "sauce" => PackageClass::Sauce,
            "powder" => PackageClass::Powder,
            "vegetable" => PackageClass::Vegetable,
            other => PackageClass::Other(other.to_string()),
        }
    }
}

impl fmt::Display for PackageClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for PackageClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for PackageClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.is_empty() {
            return Err(serde::de::Error::custom("empty class label"));
        }
        Ok(PackageClass::from(s.as_str()))
    }
}

/// Binary instance mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn get(&self, u: u32, v: u32) -> bool {
        self.bits[v as usize * self.width as usize + u as usize]
    }

    /// Alternating zero/one run lengths, starting with zeros, space separated.
    pub fn to_rle(&self) -> String {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u64;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
    }

    pub fn from_rle(width: u32, height: u32, rle: &str) -> Result<Self, PerceptionError> {
        let n = width as usize * height as usize;
        let mut bits = Vec::with_capacity(n);
        let mut value = false;
        for tok in rle.split_whitespace() {
            let run: usize = tok
                .parse()
                .map_err(|_| PerceptionError::Parse(format!("bad mask run {tok:?}")))?;
            if bits.len() + run > n {
                return Err(PerceptionError::Parse("mask runs exceed mask size".into()));
            }
            bits.extend(std::iter::repeat_n(value, run));
            value = !value;
        }
        if bits.len() != n {
            return Err(PerceptionError::Parse(format!(
                "mask runs cover {} of {n} pixels",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }
}

/// One instance prediction. Box corners are inclusive pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_label: PackageClass,
    pub score: f64,
    pub top_left: PixelCoord,
    pub bottom_right: PixelCoord,
    /// Covers the box, `(br.u − tl.u + 1) × (br.v − tl.v + 1)` pixels.
    pub mask: Option<Mask>,
}

impl Detection {
    pub fn new(
        class_label: PackageClass,
        score: f64,
        top_left: PixelCoord,
        bottom_right: PixelCoord,
        mask: Option<Mask>,
    ) -> Result<Self, PerceptionError> {
        let d = Self { class_label, score, top_left, bottom_right, mask };
        d.validate()?;
        Ok(d)
    }

    pub fn box_width(&self) -> u32 {
        self.bottom_right.u - self.top_left.u + 1
    }

    pub fn box_height(&self) -> u32 {
        self.bottom_right.v - self.top_left.v + 1
    }

    fn validate(&self) -> Result<(), PerceptionError> {
        let bad = |m: String| Err(PerceptionError::InvariantViolation(m));
        if !(0.0..=1.0).contains(&self.score) {
            return bad(format!("score {} outside [0, 1]", self.score));
        }
        if self.top_left.u >= self.bottom_right.u || self.top_left.v >= self.bottom_right.v {
            return bad(format!(
                "inverted or empty box {:?} -> {:?}",
                self.top_left, self.bottom_right
            ));
        }
        if let Some(m) = &self.mask {
            if m.width != self.box_width() || m.height != self.box_height() || m.bits.len() != (m.width * m.height) as usize {
                return bad("mask dimensions do not match the box".into());
            }
        }
        Ok(())
    }

    /// Whether pixel `p` is inside the box and, when a mask is present, the mask.
    pub fn covers(&self, p: PixelCoord) -> bool {
        let inside = p.u >= self.top_left.u
            && p.u <= self.bottom_right.u
            && p.v >= self.top_left.v
            && p.v <= self.bottom_right.v;
        match (&self.mask, inside) {
            (_, false) => false,
            (None, true) => true,
            (Some(m), true) => m.get(p.u - self.top_left.u, p.v - self.top_left.v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub image_width: u32,
    pub image_height: u32,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(image_width: u32, image_height: u32, detections: Vec<Detection>) -> Result<Self, PerceptionError> {
        for d in &detections {
            d.validate()?;
            if d.bottom_right.u >= image_width || d.bottom_right.v >= image_height {
                return Err(PerceptionError::InvariantViolation(format!(
                    "box corner {:?} outside {image_width}x{image_height} image",
                    d.bottom_right
                )));
            }
        }
        Ok(Self { image_width, image_height, detections })
    }

    pub fn empty(image_width: u32, image_height: u32) -> Self {
        Self { image_width, image_height, detections: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct ImageDims {
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    class: PackageClass,
    score: f64,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_rle: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct DetectionFile {
    image: ImageDims,
    detections: Vec<DetectionRecord>,
}

fn corner(u: f64, v: f64) -> Result<PixelCoord, PerceptionError> {
    let conv = |x: f64| {
        let r = x.round();
        if !(r >= 0.0 && r <= u32::MAX as f64) {
            return Err(PerceptionError::InvariantViolation(format!("box coordinate {x} out of range")));
        }
        Ok(r as u32)
    };
    Ok(PixelCoord::new(conv(u)?, conv(v)?))
}

/// Parses detection JSON; fractional box coordinates are rounded to the nearest pixel.
pub fn parse_detections(text: &str) -> Result<DetectionSet, PerceptionError> {
    let file: DetectionFile =
        serde_json::from_str(text).map_err(|e| PerceptionError::Parse(e.to_string()))?;
    let mut detections = Vec::with_capacity(file.detections.len());
    for rec in file.detections {
        let [u0, v0, u1, v1] = rec.bbox;
        let (top_left, bottom_right) = (corner(u0, v0)?, corner(u1, v1)?);
        let mask = match &rec.mask_rle {
            Some(rle) if top_left.u < bottom_right.u && top_left.v < bottom_right.v => Some(Mask::from_rle(
                bottom_right.u - top_left.u + 1,
                bottom_right.v - top_left.v + 1,
                rle,
            )?),
            _ => None,
        };
        detections.push(Detection { class_label: rec.class, score: rec.score, top_left, bottom_right, mask });
    }
    DetectionSet::new(file.image.width, file.image.height, detections)
}

pub fn load_detections(path: &Path) -> Result<DetectionSet, PerceptionError> {
    parse_detections(&fs::read_to_string(path)?)
}

pub fn detections_to_json(set: &DetectionSet) -> String {
    let file = DetectionFile {
        image: ImageDims { width: set.image_width, height: set.image_height },
        detections: set
            .detections
            .iter()
            .map(|d| DetectionRecord {
                class: d.class_label.clone(),
                score: d.score,
                bbox: [
                    d.top_left.u as f64,
                    d.top_left.v as f64,
                    d.bottom_right.u as f64,
                    d.bottom_right.v as f64,
                ],
                mask_rle: d.mask.as_ref().map(Mask::to_rle),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("detections serialize")
}

pub fn save_detections(set: &DetectionSet, path: &Path) -> Result<(), PerceptionError> {
    fs::write(path, detections_to_json(set))?;
    Ok(())
}

/// Keeps detections with `score >= threshold`, preserving order.
pub fn filter_by_score(set: &DetectionSet, threshold: f64) -> DetectionSet {
    DetectionSet {
        image_width: set.image_width,
        image_height: set.image_height,
        detections: set.detections.iter().filter(|d| d.score >= threshold).cloned().collect(),
    }
}

/// Box center, rounded half-up to an integer pixel.
pub fn bbox_midpoint(d: &Detection) -> PixelCoord {
    let mid = |a: u32, b: u32| ((a as u64 + b as u64 + 1) / 2) as u32;
    PixelCoord::new(mid(d.top_left.u, d.bottom_right.u), mid(d.top_left.v, d.bottom_right.v))
}

/// Smallest-`z` valid point in the `(2r+1)²` window at the box midpoint.
///
/// The window is clipped to the image and, when the detection carries a mask,
/// to the mask. Equal depths resolve to the smaller flat index.
pub fn grasp_point_with_pixel(
    d: &Detection,
    cloud: &PointCloud,
    radius: u32,
) -> Result<(Vec3, PixelCoord), PerceptionError> {
    let mid = bbox_midpoint(d);
    let (w, h) = (cloud.width(), cloud.height());
    if mid.u >= w || mid.v >= h {
        return Err(PerceptionError::OutOfBounds { u: mid.u, v: mid.v, width: w, height: h });
    }
    let u_range = mid.u.saturating_sub(radius)..=(mid.u.saturating_add(radius)).min(w - 1);
    let v_range = mid.v.saturating_sub(radius)..=(mid.v.saturating_add(radius)).min(h - 1);
    let mut best: Option<(Vec3, PixelCoord)> = None;
    // rows then columns visits flat indices in increasing order, so strict `<` keeps the first on ties
    for v in v_range {
        for u in u_range.clone() {
            let p = PixelCoord::new(u, v);
            if d.mask.is_some() && !d.covers(p) {
                continue;
            }
            if let Some(point) = lookup_3d(cloud, p).expect("window is clipped to the cloud") {
                if best.is_none_or(|(b, _)| point.z < b.z) {
                    best = Some((point, p));
                }
            }
        }
    }
    best.ok_or(PerceptionError::NoValidPoints { u: mid.u, v: mid.v })
}

pub fn grasp_point(d: &Detection, cloud: &PointCloud, radius: u32) -> Result<Vec3, PerceptionError> {
    grasp_point_with_pixel(d, cloud, radius).map(|(p, _)| p)
}

/// Maps a camera-frame point into the robot base frame.
pub fn to_robot_frame(p_camera: &Vec3, h: &RigidTransform) -> Vec3 {
    apply_transform(h, p_camera)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraspTarget {
    pub detection: Detection,
    pub point_camera: Vec3,
    pub point_robot: Vec3,
    pub source_pixel: PixelCoord,
}

/// Serialized grasp target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspRecord {
    pub class: PackageClass,
    pub pixel: [u32; 2],
    pub camera: [f64; 3],
    pub robot: [f64; 3],
}

impl GraspTarget {
    pub fn new(detection: Detection, point_camera: Vec3, source_pixel: PixelCoord, h: &RigidTransform) -> Self {
        let point_robot = to_robot_frame(&point_camera, h);
        Self { detection, point_camera, point_robot, source_pixel }
    }

    /// Log record; fails if the stored robot point is not `h` applied to the camera point.
    pub fn to_record(&self, h: &RigidTransform) -> Result<GraspRecord, PerceptionError> {
        let err = (to_robot_frame(&self.point_camera, h) - self.point_robot).norm();
        if !(err <= 1e-9 * (1.0 + self.point_robot.norm())) {
            return Err(PerceptionError::FrameMismatch(err));
        }
        Ok(GraspRecord {
            class: self.detection.class_label.clone(),
            pixel: [self.source_pixel.u, self.source_pixel.v],
            camera: self.point_camera.into(),
            robot: self.point_robot.into(),
        })
    }
}

/// Cycles through classes in a fixed order, one pick per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRotation {
    order: Vec<PackageClass>,
    cursor: usize,
}

impl Default for ClassRotation {
    fn default() -> Self {
        Self::new(vec![PackageClass::Vegetable, PackageClass::Sauce, PackageClass::Powder])
    }
}

impl ClassRotation {
    pub fn new(order: Vec<PackageClass>) -> Self {
        assert!(!order.is_empty(), "class rotation needs at least one class");
        Self { order, cursor: 0 }
    }

    pub fn current(&self) -> &PackageClass {
        &self.order[self.cursor]
    }

    /// Moves the cursor to the class following `picked` (or one step if it is not in the order).
    pub fn advance_past(&mut self, picked: &PackageClass) {
        self.cursor = match self.order.iter().position(|c| c == picked) {
            Some(i) => (i + 1) % self.order.len(),
            None => (self.cursor + 1) % self.order.len(),
        };
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum SelectionPolicy {
    #[default]
    Topmost,
    ClassRotation(ClassRotation),
}

/// Picks the next object to grasp from an already filtered set.
pub fn select_next(
    set: &DetectionSet,
    cloud: &PointCloud,
    h: &RigidTransform,
    policy: &SelectionPolicy,
    radius: u32,
) -> Option<GraspTarget> {
    let candidates: Vec<(&Detection, Vec3, PixelCoord)> = set
        .detections
        .iter()
        .filter_map(|d| grasp_point_with_pixel(d, cloud, radius).ok().map(|(p, px)| (d, p, px)))
        .collect();

    let chosen = match policy {
        SelectionPolicy::ClassRotation(rot) => candidates
            .iter()
            .find(|(d, _, _)| &d.class_label == rot.current())
            .or_else(|| topmost(&candidates, cloud)),
        SelectionPolicy::Topmost => topmost(&candidates, cloud),
    };
    chosen.map(|(d, p, px)| GraspTarget::new((*d).clone(), *p, *px, h))
}

type Candidate<'a> = (&'a Detection, Vec3, PixelCoord);

fn topmost<'a, 'b>(candidates: &'b [Candidate<'a>], cloud: &PointCloud) -> Option<&'b Candidate<'a>> {
    let key = |px: &PixelCoord| flat_index(*px, cloud.width(), cloud.height()).unwrap_or(usize::MAX);
    candidates.iter().min_by(|a, b| a.1.z.total_cmp(&b.1.z).then_with(|| key(&a.2).cmp(&key(&b.2))))
}
