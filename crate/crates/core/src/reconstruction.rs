//! Correspondence maps to camera-frame point clouds, plus depth-map and PLY export.
//!
//! Clouds are stored as parallel `x`, `y`, `z` arrays addressed by the
//! row-major pixel index `v * width + u`.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{
    column_plane, pixel_ray, triangulate_ray_plane, CameraModel, Pixel, PixelCoord,
    ProjectorModel, Vec3,
};
use crate::raster::{read_pgm, write_pgm16, PgmError};
use crate::stripe_codec::CorrespondenceMap;

#[derive(Debug, Error)]
pub enum ReconstructionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    OutOfBounds { u: u32, v: u32, width: u32, height: u32 },
    #[error("invalid depth range: near {near} must be below far {far}")]
    InvalidRange { near: f64, far: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error("malformed PLY: {0}")]
    Ply(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    width: u32,
    height: u32,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PointCloud {
    pub fn empty(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            x: vec![f64::NAN; n],
            y: vec![f64::NAN; n],
            z: vec![f64::NAN; n],
            valid: vec![false; n],
        }
    }

    /// Builds a cloud from per-pixel optional points; points with `z <= 0` are dropped.
    pub fn from_points(width: u32, height: u32, points: &[Option<Vec3>]) -> Self {
        assert_eq!(points.len(), width as usize * height as usize);
        let mut cloud = Self::empty(width, height);
        for (i, p) in points.iter().enumerate() {
            if let Some(p) = p {
                cloud.set(i, *p);
            }
        }
        cloud
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Stores `p` at `index`. Points that are non-finite or not in front of the camera are rejected.
    pub fn set(&mut self, index: usize, p: Vec3) -> bool {
        if !(p.z > 0.0 && p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            self.clear(index);
            return false;
        }
        self.x[index] = p.x;
        self.y[index] = p.y;
        self.z[index] = p.z;
        self.valid[index] = true;
        true
    }

    pub fn clear(&mut self, index: usize) {
        self.x[index] = f64::NAN;
        self.y[index] = f64::NAN;
        self.z[index] = f64::NAN;
        self.valid[index] = false;
    }

    pub fn get(&self, index: usize) -> Option<Vec3> {
        self.valid[index].then(|| Vec3::new(self.x[index], self.y[index], self.z[index]))
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn depth_map(&self) -> DepthMap {
        DepthMap { width: self.width, height: self.height, depth: self.z.clone(), valid: self.valid.clone() }
    }
}

/// Camera-frame depth (`z`) per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Row-major pixel index `v * width + u`.
pub fn flat_index(p: PixelCoord, width: u32, height: u32) -> Result<usize, ReconstructionError> {
    if p.u >= width || p.v >= height {
        return Err(ReconstructionError::OutOfBounds { u: p.u, v: p.v, width, height });
    }
    Ok(p.v as usize * width as usize + p.u as usize)
}

pub fn lookup_3d(cloud: &PointCloud, p: PixelCoord) -> Result<Option<Vec3>, ReconstructionError> {
    let index = flat_index(p, cloud.width, cloud.height)?;
    Ok(cloud.get(index))
}

/// Triangulates every valid correspondence; results are in the camera frame.
pub fn reconstruct(
    corr: &CorrespondenceMap,
    cam: &CameraModel,
    proj: &ProjectorModel,
) -> Result<PointCloud, ReconstructionError> {
    if corr.width != cam.width() || corr.height != cam.height() {
        return Err(ReconstructionError::DimensionMismatch(format!(
            "correspondence map {}x{} vs camera {}x{}",
            corr.width,
            corr.height,
            cam.width(),
            cam.height()
        )));
    }
    let to_camera = cam.pose().inverse();
    let width = corr.width as usize;
    let points: Vec<Option<Vec3>> = (0..corr.column.len())
        .into_par_iter()
        .map(|i| {
            let column = corr.get(i)?;
            let px = Pixel::new((i % width) as f64, (i / width) as f64);
            let plane = column_plane(proj, column).ok()?;
            let world = triangulate_ray_plane(&pixel_ray(cam, px), &plane).ok()?;
            Some(to_camera.apply(&world))
        })
        .collect();
    Ok(PointCloud::from_points(corr.width, corr.height, &points))
}

fn check_range(z_near: f64, z_far: f64) -> Result<(), ReconstructionError> {
    if !(z_near < z_far) || !z_near.is_finite() || !z_far.is_finite() {
        return Err(ReconstructionError::InvalidRange { near: z_near, far: z_far });
    }
    Ok(())
}

/// Quantizes depths: `z_near → 65535`, `z_far → 1`, invalid `→ 0`. Out-of-range depths clamp.
pub fn depth_pgm_samples(cloud: &PointCloud, z_near: f64, z_far: f64) -> Result<Vec<u16>, ReconstructionError> {
    check_range(z_near, z_far)?;
    let span = z_far - z_near;
    Ok(cloud
        .z
        .iter()
        .zip(&cloud.valid)
        .map(|(&z, &ok)| {
            if !ok {
                return 0;
            }
            let level = 1.0 + (z_far - z) / span * 65534.0;
            level.round().clamp(1.0, 65535.0) as u16
        })
        .collect())
}

pub fn export_depth_pgm(cloud: &PointCloud, path: &Path, z_near: f64, z_far: f64) -> Result<(), ReconstructionError> {
    let samples = depth_pgm_samples(cloud, z_near, z_far)?;
    write_pgm16(path, cloud.width, cloud.height, &samples)?;
    Ok(())
}

/// Inverse of [`export_depth_pgm`], up to quantization.
pub fn load_depth_pgm(path: &Path, z_near: f64, z_far: f64) -> Result<DepthMap, ReconstructionError> {
    check_range(z_near, z_far)?;
    let pgm = read_pgm(path)?;
    if pgm.maxval != 65535 {
        return Err(ReconstructionError::DimensionMismatch(format!(
            "expected 16-bit depth PGM, maxval {}",
            pgm.maxval
        )));
    }
    let span = z_far - z_near;
    let valid: Vec<bool> = pgm.samples.iter().map(|&s| s != 0).collect();
    let depth = pgm
        .samples
        .iter()
        .map(|&s| if s == 0 { f64::NAN } else { z_far - (s as f64 - 1.0) / 65534.0 * span })
        .collect();
    Ok(DepthMap { width: pgm.width, height: pgm.height, depth, valid })
}

/// ASCII PLY listing valid points in row-major order.
pub fn ply_string(cloud: &PointCloud) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.valid_count()
    );
    for i in (0..cloud.len()).filter(|&i| cloud.valid[i]) {
        let _ = writeln!(out, "{} {} {}", cloud.x[i], cloud.y[i], cloud.z[i]);
    }
    out
}

pub fn export_ply(cloud: &PointCloud, path: &Path) -> Result<(), ReconstructionError> {
    fs::write(path, ply_string(cloud))?;
    Ok(())
}

/// Parses the vertices of an ASCII PLY with leading `x y z` properties.
pub fn parse_ply_vertices(text: &str) -> Result<Vec<Vec3>, ReconstructionError> {
    let bad = |m: &str| ReconstructionError::Ply(m.to_string());
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing 'ply' magic"));
    }
    let mut count = None;
    loop {
        let line = lines.next().ok_or_else(|| bad("missing end_header"))?.trim();
        if line == "end_header" {
            break;
        }
        if line.starts_with("format") && line != "format ascii 1.0" {
            return Err(bad("only ASCII PLY is supported"));
        }
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|_| bad("bad vertex count"))?);
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let mut points = Vec::with_capacity(count);
    for line in lines.filter(|l| !l.trim().is_empty()).take(count) {
        let v: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f64>().map_err(|_| bad("bad coordinate")))
            .collect::<Result<_, _>>()?;
        if v.len() != 3 {
            return Err(bad("vertex line has fewer than 3 values"));
        }
        points.push(Vec3::new(v[0], v[1], v[2]));
    }
    if points.len() != count {
        return Err(bad("fewer vertex lines than declared"));
    }
    Ok(points)
}

/// Rebuilds an indexed cloud from PLY vertices and the valid mask they were written from.
pub fn cloud_from_ply(
    width: u32,
    height: u32,
    valid: &[bool],
    vertices: &[Vec3],
) -> Result<PointCloud, ReconstructionError> {
    if valid.len() != width as usize * height as usize {
        return Err(ReconstructionError::DimensionMismatch("valid mask length".into()));
    }
    let expected = valid.iter().filter(|&&v| v).count();
    if expected != vertices.len() {
        return Err(ReconstructionError::DimensionMismatch(format!(
            "mask has {expected} valid pixels but PLY has {} vertices",
            vertices.len()
        )));
    }
    let mut cloud = PointCloud::empty(width, height);
    let indices = valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i);
    for (i, p) in indices.zip(vertices) {
        cloud.set(i, *p);
    }
    Ok(cloud)
}
