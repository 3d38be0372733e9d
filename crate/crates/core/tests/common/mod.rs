//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use nalgebra::{Matrix4, Vector4};
use planar_reloc::extraction::MapPrimitive;
use planar_reloc::geometry::{Intrinsics, Mat3, Plane, Pose, Twist, Vec2, Vec3};

/// Transforms three points of `plane` and refits the plane through them.
pub fn refit_plane(pose: &Pose, plane: &Plane) -> Plane {
    let n = plane.normal;
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = n.cross(&helper).normalize();
    let v = n.cross(&u);
    let p0 = -n * plane.offset;
    let pts = [p0, p0 + u, p0 + v].map(|p| pose.rotation * p + pose.translation);
    let mut normal = (pts[1] - pts[0]).cross(&(pts[2] - pts[0])).normalize();
    if normal.dot(&(pose.rotation * n)) < 0.0 {
        normal = -normal;
    }
    Plane {
        normal,
        offset: -normal.dot(&pts[0]),
    }
}

/// Davenport's q-method: the rotation maximizing `Σ w mᵀ R q` from the top
/// eigenvector of the 4×4 quaternion profile matrix.
pub fn davenport(pairs: &[(Vec3, Vec3)], weights: &[f64]) -> Mat3 {
    let mut b = Mat3::zeros();
    for ((q, m), w) in pairs.iter().zip(weights) {
        b += m * q.transpose() * *w;
    }
    let s = b + b.transpose();
    let z = Vec3::new(b[(1, 2)] - b[(2, 1)], b[(2, 0)] - b[(0, 2)], b[(0, 1)] - b[(1, 0)]);
    let sigma = b.trace();
    let mut k = Matrix4::zeros();
    k.fixed_view_mut::<3, 3>(0, 0).copy_from(&(s - Mat3::identity() * sigma));
    k.fixed_view_mut::<3, 1>(0, 3).copy_from(&z);
    k.fixed_view_mut::<1, 3>(3, 0).copy_from(&z.transpose());
    k[(3, 3)] = sigma;
    let eig = k.symmetric_eigen();
    let i = eig.eigenvalues.imax();
    let q: Vector4<f64> = eig.eigenvectors.column(i).into();
    // q = (x, y, z, w); the attitude matrix maps q-side vectors onto m-side ones.
    let (x, y, zq, w) = (q[0], q[1], q[2], q[3]);
    let attitude = Mat3::new(
        w * w + x * x - y * y - zq * zq,
        2.0 * (x * y + w * zq),
        2.0 * (x * zq - w * y),
        2.0 * (x * y - w * zq),
        w * w - x * x + y * y - zq * zq,
        2.0 * (y * zq + w * x),
        2.0 * (x * zq + w * y),
        2.0 * (y * zq - w * x),
        w * w - x * x - y * y + zq * zq,
    );
    attitude
}

/// Matrix exponential of the 4×4 twist generator by scaling and squaring
/// of a truncated Taylor series.
pub fn expm_twist(xi: &Twist) -> Pose {
    let mut a = Matrix4::zeros();
    a[(0, 1)] = -xi[2];
    a[(0, 2)] = xi[1];
    a[(1, 0)] = xi[2];
    a[(1, 2)] = -xi[0];
    a[(2, 0)] = -xi[1];
    a[(2, 1)] = xi[0];
    a[(0, 3)] = xi[3];
    a[(1, 3)] = xi[4];
    a[(2, 3)] = xi[5];
    let norm = a.abs().max().max(1e-300);
    let squarings = (norm.log2().ceil() + 4.0).max(0.0) as i32;
    let scaled = a / 2f64.powi(squarings);
    let mut term = Matrix4::identity();
    let mut sum = Matrix4::identity();
    for k in 1..30 {
        term = term * scaled / k as f64;
        sum += term;
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    Pose::new(
        sum.fixed_view::<3, 3>(0, 0).into(),
        Vec3::new(sum[(0, 3)], sum[(1, 3)], sum[(2, 3)]),
    )
}

/// Point-in-convex-polygon by sign of every edge cross product.
fn inside_polygon(plane: &Plane, boundary: &[Vec3], x: &Vec3, tol: f64) -> bool {
    let n = boundary.len();
    let mut sign = 0.0;
    for i in 0..n {
        let a = boundary[i];
        let b = boundary[(i + 1) % n];
        let c = (b - a).cross(&(x - a)).dot(&plane.normal) / (b - a).norm();
        if c.abs() <= tol {
            continue;
        }
        if sign == 0.0 {
            sign = c.signum();
        } else if c.signum() != sign {
            return false;
        }
    }
    true
}

/// Depth of the closest primitive along the ray through pixel `u`.
pub fn ray_cast(map: &[MapPrimitive], pose: &Pose, k: &Intrinsics, u: &Vec2) -> Option<(f64, usize)> {
    let ray_cam = Vec3::new((u.x - k.cx) / k.fx, (u.y - k.cy) / k.fy, 1.0);
    let dir = pose.rotation * ray_cam;
    let origin = pose.translation;
    let mut best: Option<(f64, usize)> = None;
    for (j, p) in map.iter().enumerate() {
        let denom = p.plane.normal.dot(&dir);
        if denom.abs() < 1e-12 {
            continue;
        }
        let s = -(p.plane.normal.dot(&origin) + p.plane.offset) / denom;
        if s <= 0.0 {
            continue;
        }
        let hit = origin + dir * s;
        if inside_polygon(&p.plane, &p.boundary, &hit, 0.0) && best.is_none_or(|(z, _)| s < z) {
            best = Some((s, j));
        }
    }
    best
}

/// Distance of `u` in pixels to the projection of any primitive edge,
/// used to skip pixels whose coverage is decided by rounding.
pub fn near_projected_edge(map: &[MapPrimitive], pose: &Pose, k: &Intrinsics, u: &Vec2, px: f64) -> bool {
    let inv = pose.inverse();
    let project = |x: &Vec3| {
        let c = inv.transform_point(x);
        (c.z > 1e-6).then(|| Vec2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
    };
    for p in map {
        let n = p.boundary.len();
        for i in 0..n {
            let a = p.boundary[i];
            let b = p.boundary[(i + 1) % n];
            // Dense sampling of the edge copes with partially visible edges.
            let mut prev: Option<Vec2> = None;
            for s in 0..=200 {
                let x = a + (b - a) * (s as f64 / 200.0);
                let cur = project(&x);
                if let (Some(p0), Some(p1)) = (prev, cur) {
                    if segment_distance(u, &p0, &p1) < px {
                        return true;
                    }
                }
                prev = cur;
            }
        }
    }
    false
}

fn segment_distance(u: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    let ab = b - a;
    let t = if ab.norm_squared() > 0.0 {
        ((u - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (u - (a + ab * t)).norm()
}

pub fn rotation_error_rad(a: &Mat3, b: &Mat3) -> f64 {
    let r = a.transpose() * b;
    let s = 0.5
        * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    s.atan2(0.5 * (r.trace() - 1.0))
}
