//! Plane and rigid-pose algebra, pinhole projection, Kabsch alignment and the
//! SE(3) exponential/logarithm.
//!
//! Conventions used throughout the crate:
//! - A plane is `n·x + d = 0` with a unit normal `n`.
//! - A [`Pose`] maps camera-frame points to map-frame points: `x_m = R x_c + t`.
//! - Cameras look along `+z`, image `x` to the right and `y` down. Pixel
//!   coordinates refer to pixel centres, so pixel `(c, r)` sits at `(c, r)`.
//! - A [`Twist`] is ordered `[ω; v]` (rotation first, radians then meters).

use nalgebra::{Matrix3, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Twist = Vector6<f64>;

/// Largest rotation angle accepted by [`se3_log`].
pub const LOG_ANGLE_LIMIT: f64 = std::f64::consts::PI - 1e-6;

const PARALLEL_ANGLE_EPS: f64 = 1e-6;
const SMALL_ANGLE: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {0} rad is too close to pi for a stable logarithm")]
    LogNearSingularity(f64),
    #[error("source normals are all parallel; rotation is not determined")]
    DegenerateNormals,
    #[error("point lies behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("viewing ray is parallel to the plane")]
    RayParallel,
    #[error("plane intersects the viewing ray behind the camera (depth {0})")]
    NegativeDepth(f64),
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Plane `n·x + d = 0` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    /// Builds a plane from a possibly unnormalized normal; the offset is
    /// rescaled with it so the zero set is unchanged.
    pub fn new(normal: Vec3, offset: f64) -> Self {
        let norm = normal.norm();
        Self {
            normal: normal / norm,
            offset: offset / norm,
        }
    }

    pub fn from_point_normal(point: &Vec3, normal: &Vec3) -> Self {
        let n = normal.normalize();
        Self {
            normal: n,
            offset: -n.dot(point),
        }
    }

    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        self.normal.dot(x) + self.offset
    }

    pub fn flipped(&self) -> Self {
        Self {
            normal: -self.normal,
            offset: -self.offset,
        }
    }

    /// Orthogonal projection of `x` onto the plane.
    pub fn project_point(&self, x: &Vec3) -> Vec3 {
        x - self.normal * self.signed_distance(x)
    }

    /// Orthonormal in-plane axes `(e1, e2)` with `e1 × e2 = n`.
    pub fn basis(&self) -> (Vec3, Vec3) {
        let n = self.normal;
        let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let e1 = (helper - n * n.dot(&helper)).normalize();
        let e2 = n.cross(&e1);
        (e1, e2)
    }
}

impl From<[f64; 4]> for Plane {
    fn from(v: [f64; 4]) -> Self {
        Plane::new(Vec3::new(v[0], v[1], v[2]), v[3])
    }
}

impl From<Plane> for [f64; 4] {
    fn from(p: Plane) -> Self {
        [p.normal.x, p.normal.y, p.normal.z, p.offset]
    }
}

/// Rigid transform mapping camera-frame points to map-frame points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 12]", into = "[f64; 12]")]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Mat3::identity(), Vec3::zeros())
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// Dual action on planes: `n' = R n`, `d' = d − t·n'`.
    pub fn transform_plane(&self, plane: &Plane) -> Plane {
        let normal = self.rotation * plane.normal;
        let normal = normal / normal.norm();
        Plane {
            normal,
            offset: plane.offset - self.translation.dot(&normal),
        }
    }

    /// Checks orthonormality and a positive determinant to `tol`.
    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Mat3::identity()).abs().max() < tol
            && (r.determinant() - 1.0).abs() < tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Pose {
        Pose::new(
            Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            Vec3::new(v[3], v[7], v[11]),
        )
    }
}

impl From<[f64; 12]> for Pose {
    fn from(v: [f64; 12]) -> Self {
        Pose::from_row_major(&v)
    }
}

impl From<Pose> for [f64; 12] {
    fn from(p: Pose) -> Self {
        p.to_row_major()
    }
}

/// Transforms a plane by a pose. Free-function form of [`Pose::transform_plane`].
pub fn transform_plane(pose: &Pose, plane: &Plane) -> Plane {
    pose.transform_plane(plane)
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues formula.
pub fn so3_exp(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    let (a, b) = if theta < SMALL_ANGLE {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + w * a + w * w * b
}

/// atan2 form; keeps full precision at small angles, where acos does not.
fn rotation_angle_rad(r: &Mat3) -> f64 {
    let asym = vee(&(r - r.transpose()));
    (0.5 * asym.norm()).atan2((r.trace() - 1.0) * 0.5)
}

/// Inverse of [`so3_exp`] for angles below [`LOG_ANGLE_LIMIT`].
pub fn so3_log(r: &Mat3) -> Result<Vec3, GeometryError> {
    let asym = vee(&(r - r.transpose()));
    let theta = rotation_angle_rad(r);
    if theta >= LOG_ANGLE_LIMIT {
        return Err(GeometryError::LogNearSingularity(theta));
    }
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        return Ok(asym * (0.5 + t2 / 12.0 + 7.0 * t2 * t2 / 720.0));
    }
    if theta < 2.0 {
        return Ok(asym * (theta / (2.0 * theta.sin())));
    }
    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part instead and take the sign from the antisymmetric part.
    let sym = (r + r.transpose()) * 0.5 - Mat3::identity() * theta.cos();
    let scale = 1.0 - theta.cos();
    let diag = Vec3::new(sym[(0, 0)], sym[(1, 1)], sym[(2, 2)]) / scale;
    let k = diag.imax();
    let mut axis = Vec3::zeros();
    axis[k] = diag[k].max(0.0).sqrt();
    for j in 0..3 {
        if j != k {
            axis[j] = sym[(k, j)] / (scale * axis[k]);
        }
    }
    if axis.dot(&asym) < 0.0 {
        axis = -axis;
    }
    let axis = axis.normalize();
    // Refine the angle with atan2 for accuracy away from the acos flat spot.
    let sin_theta = 0.5 * asym.dot(&axis);
    let cos_theta = (r.trace() - 1.0) * 0.5;
    Ok(axis * sin_theta.atan2(cos_theta))
}

/// `(1 − cos θ)/θ²` and `(θ − sin θ)/θ³` coefficients of the left Jacobian.
fn v_coefficients(theta2: f64) -> (f64, f64) {
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    }
}

/// SE(3) exponential of a `[ω; v]` twist.
pub fn se3_exp(xi: &Twist) -> Pose {
    let omega = Vec3::new(xi[0], xi[1], xi[2]);
    let v = Vec3::new(xi[3], xi[4], xi[5]);
    let w = skew(&omega);
    let (b, c) = v_coefficients(omega.norm_squared());
    let v_mat = Mat3::identity() + w * b + w * w * c;
    Pose::new(so3_exp(&omega), v_mat * v)
}

/// SE(3) logarithm; fails for rotation angles at or beyond `π − 1e-6`.
pub fn se3_log(pose: &Pose) -> Result<Twist, GeometryError> {
    let omega = so3_log(&pose.rotation)?;
    let theta2 = omega.norm_squared();
    let w = skew(&omega);
    let coeff = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    let v_inv = Mat3::identity() - w * 0.5 + w * w * coeff;
    let v = v_inv * pose.translation;
    Ok(Twist::new(omega.x, omega.y, omega.z, v.x, v.y, v.z))
}

fn all_parallel<'a>(normals: impl Iterator<Item = &'a Vec3>) -> bool {
    let mut first: Option<&Vec3> = None;
    let sin_eps = PARALLEL_ANGLE_EPS.sin();
    for n in normals {
        match first {
            None => first = Some(n),
            Some(f) => {
                if f.cross(n).norm() > sin_eps * f.norm() * n.norm() {
                    return false;
                }
            }
        }
    }
    true
}

/// Weighted Kabsch: the rotation `R` minimizing `Σ wᵢ‖mᵢ − R qᵢ‖²` over
/// `(qᵢ, mᵢ)` pairs.
pub fn kabsch(pairs: &[(Vec3, Vec3)], weights: &[f64]) -> Result<Mat3, GeometryError> {
    if weights.len() != pairs.len() {
        return Err(GeometryError::LengthMismatch {
            expected: pairs.len(),
            got: weights.len(),
        });
    }
    let active = pairs
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(p, _)| &p.0);
    if pairs.len() < 2 || all_parallel(active) {
        return Err(GeometryError::DegenerateNormals);
    }
    let mut cov = Mat3::zeros();
    for ((src, dst), &w) in pairs.iter().zip(weights) {
        cov += src * dst.transpose() * w;
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let correction = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, sign));
    Ok(v * correction * u.transpose())
}

/// Pinhole intrinsics with the image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Centred principal point with a horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Self::new(
            f,
            f,
            0.5 * (width as f64 - 1.0),
            0.5 * (height as f64 - 1.0),
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cy > 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// Ray through pixel `u` scaled to unit depth.
    pub fn ray(&self, u: &Vec2) -> Vec3 {
        Vec3::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy, 1.0)
    }

    pub fn project(&self, x: &Vec3) -> Result<(Vec2, f64), GeometryError> {
        if x.z <= 0.0 {
            return Err(GeometryError::BehindCamera(x.z));
        }
        Ok((
            Vec2::new(self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy),
            x.z,
        ))
    }

    pub fn unproject(&self, u: &Vec2, depth: f64) -> Vec3 {
        self.ray(u) * depth
    }

    pub fn contains(&self, u: &Vec2) -> bool {
        u.x >= 0.0 && u.y >= 0.0 && u.x <= (self.width - 1) as f64 && u.y <= (self.height - 1) as f64
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Depth along the ray through `u` at which it meets `plane` (camera frame):
/// `z = −d / (n · K⁻¹ũ)`.
pub fn plane_depth_at_pixel(k: &Intrinsics, plane: &Plane, u: &Vec2) -> Result<f64, GeometryError> {
    let denom = plane.normal.dot(&k.ray(u));
    if denom.abs() <= 1e-9 {
        return Err(GeometryError::RayParallel);
    }
    let z = -plane.offset / denom;
    if z <= 0.0 {
        return Err(GeometryError::NegativeDepth(z));
    }
    Ok(z)
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_angle(ra: &Mat3, rb: &Mat3) -> f64 {
    rotation_angle_rad(&(ra.transpose() * rb)).to_degrees()
}

pub fn translation_distance(ta: &Vec3, tb: &Vec3) -> f64 {
    (ta - tb).norm()
}

/// Angle between two directions in degrees, arccos clamped.
pub fn angle_between_deg(a: &Vec3, b: &Vec3) -> f64 {
    (a.dot(b) / (a.norm() * b.norm()))
        .clamp(-1.0, 1.0)
        .acos()
        .to_degrees()
}
