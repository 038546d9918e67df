//! Pinhole camera and column projector models, ray/plane triangulation,
//! rigid transforms and least-squares rigid registration.
//!
//! Units are millimeters and radians throughout. The camera frame has `z`
//! along the optical axis pointing into the scene, so a smaller `z` is
//! closer to the camera.

use nalgebra::{Matrix3, Matrix3xX, Matrix4, Rotation3, Unit, Vector3, Vector4, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Orthonormality / determinant tolerance for rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;
/// Below this `|d·n|` a ray is treated as parallel to a plane.
pub const PARALLEL_TOLERANCE: f64 = 1e-9;
/// Smallest-to-largest singular value ratio under which correspondences are degenerate.
pub const DEGENERACY_RATIO: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("projector column {column} outside [0, {columns})")]
    ColumnOutOfRange { column: f64, columns: u32 },
    #[error("ray is parallel to plane")]
    ParallelRayPlane,
    #[error("intersection lies behind the ray origin (t = {0})")]
    NegativeRange(f64),
    #[error("degenerate correspondences: {0}")]
    DegenerateCorrespondences(String),
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// Continuous image coordinate; `u` is the column, `v` the row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Integer pixel address inside an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: u32,
    pub v: u32,
}

impl PixelCoord {
    pub fn new(u: u32, v: u32) -> Self {
        Self { u, v }
    }

    pub fn to_pixel(self) -> Pixel {
        Pixel::new(self.u as f64, self.v as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    direction: Unit<Vec3>,
}

impl Ray {
    /// Normalizes `direction`; returns `None` for a zero or non-finite direction.
    pub fn new(origin: Vec3, direction: Vec3) -> Option<Self> {
        let direction = Unit::try_new(direction, f64::EPSILON)?;
        direction.iter().all(|c| c.is_finite()).then_some(Self { origin, direction })
    }

    pub fn direction(&self) -> Vec3 {
        self.direction.into_inner()
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction.as_ref() * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub point: Vec3,
    normal: Unit<Vec3>,
}

impl Plane {
    pub fn new(point: Vec3, normal: Vec3) -> Option<Self> {
        let normal = Unit::try_new(normal, f64::EPSILON)?;
        Some(Self { point, normal })
    }

    pub fn normal(&self) -> Vec3 {
        self.normal.into_inner()
    }

    /// Signed distance of `p` from the plane along the normal.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        (p - self.point).dot(self.normal.as_ref())
    }
}

/// Rotation `r` followed by translation `t`: `p' = r·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    r: Matrix3<f64>,
    t: Vec3,
}

impl RigidTransform {
    /// Validates that `r` is a proper rotation within [`ROTATION_TOLERANCE`].
    pub fn new(r: Matrix3<f64>, t: Vec3) -> Result<Self, GeometryError> {
        if !r.iter().chain(t.iter()).all(|c| c.is_finite()) {
            return Err(GeometryError::InvalidRotation("non-finite entry".into()));
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidRotation(format!(
                "|RᵀR − I| = {ortho:e}"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidRotation(format!("det R = {det}")));
        }
        Ok(Self { r, t })
    }

    pub fn identity() -> Self {
        Self { r: Matrix3::identity(), t: Vec3::zeros() }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { r: Matrix3::identity(), t }
    }

    pub fn from_rotation(rotation: Rotation3<f64>, t: Vec3) -> Self {
        Self { r: rotation.into_inner(), t }
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Vec3, angle: f64, t: Vec3) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self::from_rotation(rot, t)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vec3 {
        &self.t
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.r * p + self.t
    }

    pub fn apply_vector(&self, d: &Vec3) -> Vec3 {
        self.r * d
    }

    pub fn inverse(&self) -> Self {
        let rt = self.r.transpose();
        Self { r: rt, t: -(rt * self.t) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self { r: self.r * other.r, t: self.r * other.t + self.t }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        h
    }
}

/// `r·p + t`.
pub fn apply_transform(h: &RigidTransform, p: &Vec3) -> Vec3 {
    h.apply(p)
}

/// The 4×4 `[[R, T], [0, 1]]` form of `h`.
pub fn to_homogeneous(h: &RigidTransform) -> Matrix4<f64> {
    h.to_homogeneous()
}

/// Multiplies `m` by `(p, 1)` and drops the homogeneous coordinate.
pub fn homogeneous_apply(m: &Matrix4<f64>, p: &Vec3) -> Vec3 {
    let q = m * Vector4::new(p.x, p.y, p.z, 1.0);
    Vec3::new(q.x, q.y, q.z)
}

#[derive(Serialize, Deserialize)]
struct RigidTransformRepr {
    r: [[f64; 3]; 3],
    t: [f64; 3],
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, c) in row.iter_mut().enumerate() {
                *c = self.r[(i, j)];
            }
        }
        RigidTransformRepr { r, t: [self.t.x, self.t.y, self.t.z] }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = RigidTransformRepr::deserialize(d)?;
        let r = Matrix3::from_fn(|i, j| repr.r[i][j]);
        RigidTransform::new(r, Vec3::from(repr.t)).map_err(serde::de::Error::custom)
    }
}

fn check_intrinsics(f: f64, c: f64, extent: u32, axis: &str) -> Result<(), GeometryError> {
    if !(f.is_finite() && f > 0.0) {
        return Err(GeometryError::InvalidModel(format!("focal length {axis} must be > 0")));
    }
    if !(c >= 0.0 && c < extent as f64) {
        return Err(GeometryError::InvalidModel(format!(
            "principal point {axis} = {c} outside [0, {extent})"
        )));
    }
    Ok(())
}

/// Distortion-free pinhole camera. `pose` maps camera-frame points to the world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraModelRepr", into = "CameraModelRepr")]
pub struct CameraModel {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    pose: RigidTransform,
}

#[derive(Serialize, Deserialize)]
struct CameraModelRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    #[serde(default = "RigidTransform::identity")]
    pose: RigidTransform,
}

impl TryFrom<CameraModelRepr> for CameraModel {
    type Error = GeometryError;
    fn try_from(r: CameraModelRepr) -> Result<Self, Self::Error> {
        CameraModel::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height, r.pose)
    }
}

impl From<CameraModel> for CameraModelRepr {
    fn from(c: CameraModel) -> Self {
        Self { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, width: c.width, height: c.height, pose: c.pose }
    }
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        pose: RigidTransform,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidModel("image dimensions must be positive".into()));
        }
        check_intrinsics(fx, cx, width, "x")?;
        check_intrinsics(fy, cy, height, "y")?;
        Ok(Self { fx, fy, cx, cy, width, height, pose })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn pose(&self) -> &RigidTransform {
        &self.pose
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Projects a camera-frame point onto the image plane.
pub fn project(cam: &CameraModel, p_cam: &Vec3) -> Result<Pixel, GeometryError> {
    if !(p_cam.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(p_cam.z));
    }
    Ok(Pixel::new(
        cam.fx * (p_cam.x / p_cam.z) + cam.cx,
        cam.fy * (p_cam.y / p_cam.z) + cam.cy,
    ))
}

/// World-frame viewing ray through `px`, starting at the camera center.
pub fn pixel_ray(cam: &CameraModel, px: Pixel) -> Ray {
    let d = Vec3::new((px.u - cam.cx) / cam.fx, (px.v - cam.cy) / cam.fy, 1.0);
    Ray::new(*cam.pose.translation(), cam.pose.apply_vector(&d))
        .expect("camera ray direction has unit z component")
}

/// A projector that only encodes its column axis, so each column is a sheet of light.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProjectorModelRepr", into = "ProjectorModelRepr")]
pub struct ProjectorModel {
    fx: f64,
    cx: f64,
    columns: u32,
    pose: RigidTransform,
}

#[derive(Serialize, Deserialize)]
struct ProjectorModelRepr {
    fx: f64,
    cx: f64,
    columns: u32,
    pose: RigidTransform,
}

impl TryFrom<ProjectorModelRepr> for ProjectorModel {
    type Error = GeometryError;
    fn try_from(r: ProjectorModelRepr) -> Result<Self, Self::Error> {
        ProjectorModel::new(r.fx, r.cx, r.columns, r.pose)
    }
}

impl From<ProjectorModel> for ProjectorModelRepr {
    fn from(p: ProjectorModel) -> Self {
        Self { fx: p.fx, cx: p.cx, columns: p.columns, pose: p.pose }
    }
}

impl ProjectorModel {
    pub fn new(fx: f64, cx: f64, columns: u32, pose: RigidTransform) -> Result<Self, GeometryError> {
        if columns == 0 {
            return Err(GeometryError::InvalidModel("projector needs at least one column".into()));
        }
        check_intrinsics(fx, cx, columns, "x")?;
        Ok(Self { fx, cx, columns, pose })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn columns(&self) -> u32 {
        self.columns
    }
    pub fn pose(&self) -> &RigidTransform {
        &self.pose
    }

    pub fn center(&self) -> Vec3 {
        *self.pose.translation()
    }

    /// Continuous projector column illuminating world point `p`.
    pub fn column_of(&self, p_world: &Vec3) -> Result<f64, GeometryError> {
        let q = self.pose.inverse().apply(p_world);
        if !(q.z > 0.0) {
            return Err(GeometryError::NonPositiveDepth(q.z));
        }
        Ok(self.fx * q.x / q.z + self.cx)
    }
}

/// World-frame light sheet of projector column `column`.
pub fn column_plane(proj: &ProjectorModel, column: f64) -> Result<Plane, GeometryError> {
    if !(column >= 0.0 && column < proj.columns as f64) {
        return Err(GeometryError::ColumnOutOfRange { column, columns: proj.columns });
    }
    let n = Vec3::new(1.0, 0.0, -(column - proj.cx) / proj.fx);
    Ok(Plane::new(proj.center(), proj.pose.apply_vector(&n)).expect("column normal is non-zero"))
}

pub fn triangulate_ray_plane(ray: &Ray, plane: &Plane) -> Result<Vec3, GeometryError> {
    let n = plane.normal();
    let denom = ray.direction().dot(&n);
    if denom.abs() <= PARALLEL_TOLERANCE {
        return Err(GeometryError::ParallelRayPlane);
    }
    let t = (plane.point - ray.origin).dot(&n) / denom;
    if !(t > 0.0) {
        return Err(GeometryError::NegativeRange(t));
    }
    Ok(ray.at(t))
}

/// Paired measurements of the same physical points in camera and robot frames.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pairs: Vec<(Vec3, Vec3)>,
}

impl CorrespondenceSet {
    /// Requires at least three pairs whose camera points are not collinear.
    pub fn new(pairs: Vec<(Vec3, Vec3)>) -> Result<Self, GeometryError> {
        if pairs.len() < 3 {
            return Err(GeometryError::DegenerateCorrespondences(format!(
                "need at least 3 pairs, got {}",
                pairs.len()
            )));
        }
        if pairs.iter().any(|(c, r)| !c.iter().chain(r.iter()).all(|v| v.is_finite())) {
            return Err(GeometryError::DegenerateCorrespondences("non-finite coordinate".into()));
        }
        let centered = centered_columns(pairs.iter().map(|(c, _)| *c));
        let sv = centered.singular_values();
        let (smax, smid) = (sv.max(), sorted_desc(&[sv[0], sv[1], sv[2]])[1]);
        if smax == 0.0 || smid <= DEGENERACY_RATIO * smax {
            return Err(GeometryError::DegenerateCorrespondences(
                "camera points are coincident or collinear".into(),
            ));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(Vec3, Vec3)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn sorted_desc(v: &[f64; 3]) -> [f64; 3] {
    let mut s = *v;
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn centroid(points: impl Iterator<Item = Vec3>) -> Vec3 {
    let (sum, n) = points.fold((Vec3::zeros(), 0usize), |(s, n), p| (s + p, n + 1));
    sum / n as f64
}

fn centered_columns(points: impl Iterator<Item = Vec3> + Clone) -> Matrix3xX<f64> {
    let c = centroid(points.clone());
    let cols: Vec<Vec3> = points.map(|p| p - c).collect();
    Matrix3xX::from_columns(&cols)
}

/// Least-squares rigid fit (Kabsch) mapping camera points onto robot points.
pub fn estimate_rigid_transform(pairs: &CorrespondenceSet) -> Result<RigidTransform, GeometryError> {
    let cam_c = centroid(pairs.pairs.iter().map(|(c, _)| *c));
    let rob_c = centroid(pairs.pairs.iter().map(|(_, r)| *r));

    let mut cov = Matrix3::zeros();
    for (c, r) in &pairs.pairs {
        cov += (r - rob_c) * (c - cam_c).transpose();
    }

    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => {
            return Err(GeometryError::DegenerateCorrespondences("SVD did not converge".into()))
        }
    };
    // reflection correction
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t;
    let t = rob_c - r * cam_c;
    RigidTransform::new(r, t)
}

/// RMS of `|R·c + T − r|` over all pairs.
pub fn transform_residual(pairs: &CorrespondenceSet, h: &RigidTransform) -> f64 {
    let sum: f64 = pairs.pairs.iter().map(|(c, r)| (h.apply(c) - r).norm_squared()).sum();
    (sum / pairs.pairs.len() as f64).sqrt()
}
