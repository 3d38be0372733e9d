//! Z-buffered rasterization of planar map primitives.
//!
//! Each boundary polygon is fan-triangulated, moved into the camera frame,
//! clipped against the near plane and scan-converted with edge functions.
//! Depth at a covered pixel is the analytic ray/plane intersection, so planar
//! geometry is rendered exactly.

use crate::extraction::MapPrimitive;
use crate::geometry::{plane_depth_at_pixel, Intrinsics, Pose, Vec2, Vec3};
use crate::raster::{DepthMap, Mask};

/// Near clipping distance in meters.
pub const NEAR_PLANE: f64 = 1e-6;

/// Depth tolerance used when deciding whether a primitive is the visible
/// surface at a pixel.
pub const VISIBILITY_TOLERANCE: f64 = 0.01;

/// Clips a camera-frame polygon to `z ≥ NEAR_PLANE` (Sutherland–Hodgman).
fn clip_near(poly: &[Vec3]) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let a_in = a.z >= NEAR_PLANE;
        let b_in = b.z >= NEAR_PLANE;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR_PLANE - a.z) / (b.z - a.z);
            let mut p = a + (b - a) * t;
            p.z = NEAR_PLANE;
            out.push(p);
        }
    }
    out
}

/// Calls `visit(pixel_index, depth)` for every pixel centre covered by the
/// primitive as seen from `pose`. Pixels on shared triangle edges may be
/// visited more than once.
pub fn rasterize_primitive(
    prim: &MapPrimitive,
    pose: &Pose,
    k: &Intrinsics,
    mut visit: impl FnMut(usize, f64),
) {
    let to_camera = pose.inverse();
    let plane = to_camera.transform_plane(&prim.plane);
    // Edge-on or through the camera centre: nothing visible.
    if plane.offset.abs() < 1e-12 {
        return;
    }
    let (w, h) = (k.width as i64, k.height as i64);
    for tri in prim.triangles() {
        let cam: Vec<Vec3> = tri.iter().map(|v| to_camera.transform_point(v)).collect();
        let clipped = clip_near(&cam);
        if clipped.len() < 3 {
            continue;
        }
        let projected: Vec<Vec2> = clipped
            .iter()
            .map(|p| Vec2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
            .collect();
        for i in 1..projected.len() - 1 {
            let (a, b, c) = (projected[0], projected[i], projected[i + 1]);
            let area = (b - a).perp(&(c - a));
            if area.abs() < 1e-12 || !area.is_finite() {
                continue;
            }
            let sign = area.signum();
            let min_x = a.x.min(b.x).min(c.x).ceil().max(0.0);
            let max_x = a.x.max(b.x).max(c.x).floor().min((w - 1) as f64);
            let min_y = a.y.min(b.y).min(c.y).ceil().max(0.0);
            let max_y = a.y.max(b.y).max(c.y).floor().min((h - 1) as f64);
            if min_x > max_x || min_y > max_y {
                continue;
            }
            for row in min_y as i64..=max_y as i64 {
                for col in min_x as i64..=max_x as i64 {
                    let p = Vec2::new(col as f64, row as f64);
                    let e0 = (b - a).perp(&(p - a)) * sign;
                    let e1 = (c - b).perp(&(p - b)) * sign;
                    let e2 = (a - c).perp(&(p - c)) * sign;
                    if e0 < 0.0 || e1 < 0.0 || e2 < 0.0 {
                        continue;
                    }
                    if let Ok(z) = plane_depth_at_pixel(k, &plane, &p) {
                        visit((row * w + col) as usize, z);
                    }
                }
            }
        }
    }
}

/// Depth image plus, per pixel, the position in `map` of the front-most
/// primitive.
#[derive(Debug, Clone)]
pub struct Rendering {
    pub depth: DepthMap,
    pub ids: Vec<Option<usize>>,
}

pub fn render_with_ids(map: &[MapPrimitive], pose: &Pose, k: &Intrinsics) -> Rendering {
    let mut zbuf = vec![f64::INFINITY; k.pixel_count()];
    let mut ids = vec![None; k.pixel_count()];
    for (slot, prim) in map.iter().enumerate() {
        rasterize_primitive(prim, pose, k, |idx, z| {
            if z < zbuf[idx] {
                zbuf[idx] = z;
                ids[idx] = Some(slot);
            }
        });
    }
    let mut depth = DepthMap::new(k.width, k.height, DepthMap::DEFAULT_INVALID);
    for (i, z) in zbuf.iter().enumerate() {
        if z.is_finite() {
            depth.data[i] = *z as f32;
        }
    }
    Rendering { depth, ids }
}

/// Renders the map's depth as seen from `pose`; uncovered pixels hold the
/// invalid sentinel.
pub fn render_depth(map: &[MapPrimitive], pose: &Pose, k: &Intrinsics) -> DepthMap {
    render_with_ids(map, pose, k).depth
}

/// Pixels where `prim` is the visible surface: covered by its projection and
/// within [`VISIBILITY_TOLERANCE`] of the z-buffer. Empty when the primitive
/// is behind the camera or fully occluded.
pub fn project_primitive_mask(
    prim: &MapPrimitive,
    pose: &Pose,
    k: &Intrinsics,
    zbuffer: &DepthMap,
) -> Mask {
    let mut mask = Mask::new(k.width, k.height);
    rasterize_primitive(prim, pose, k, |idx, z| {
        if let Some(front) = zbuffer.at_index(idx) {
            if (z - front).abs() <= VISIBILITY_TOLERANCE {
                mask.bits[idx] = true;
            }
        }
    });
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Plane;

    fn square(center: Vec3, half: f64, normal: Vec3) -> MapPrimitive {
        let plane = Plane::from_point_normal(&center, &normal);
        let (e1, e2) = plane.basis();
        let b = vec![
            center + (e1 + e2) * half,
            center + (-e1 + e2) * half,
            center + (-e1 - e2) * half,
            center + (e1 - e2) * half,
        ];
        MapPrimitive::new(0, plane, b)
    }

    #[test]
    fn fronto_parallel_square_fills_view() {
        let k = Intrinsics::from_fov(64, 48, 60.0);
        let wall = square(Vec3::new(0.0, 0.0, 2.0), 10.0, Vec3::new(0.0, 0.0, -1.0));
        let d = render_depth(&[wall], &Pose::identity(), &k);
        assert_eq!(d.valid_count(), 64 * 48);
        for v in &d.data {
            assert!((*v as f64 - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zbuffer_keeps_nearest() {
        let k = Intrinsics::from_fov(64, 48, 60.0);
        let far = square(Vec3::new(0.0, 0.0, 2.0), 10.0, Vec3::new(0.0, 0.0, -1.0));
        let near = square(Vec3::new(0.0, 0.0, 1.0), 0.2, Vec3::new(0.0, 0.0, -1.0));
        let r = render_with_ids(&[far.clone(), near.clone()], &Pose::identity(), &k);
        let centre = r.depth.index(32, 24);
        assert!((r.depth.data[centre] - 1.0).abs() < 1e-6);
        assert_eq!(r.ids[centre], Some(1));
        assert!((r.depth.data[0] - 2.0).abs() < 1e-6);
        // Same result regardless of draw order.
        let r2 = render_with_ids(&[near, far], &Pose::identity(), &k);
        assert_eq!(r.depth, r2.depth);
    }

    #[test]
    fn behind_camera_is_empty() {
        let k = Intrinsics::from_fov(64, 48, 60.0);
        let prim = square(Vec3::new(0.0, 0.0, -2.0), 1.0, Vec3::new(0.0, 0.0, 1.0));
        let d = render_depth(&[prim.clone()], &Pose::identity(), &k);
        assert_eq!(d.valid_count(), 0);
        let m = project_primitive_mask(&prim, &Pose::identity(), &k, &d);
        assert!(m.is_empty());
    }

    #[test]
    fn straddling_near_plane_is_clipped() {
        // Floor passing under the camera, extending behind it.
        let k = Intrinsics::from_fov(64, 48, 60.0);
        let floor = square(Vec3::new(0.0, 1.0, 0.0), 5.0, Vec3::new(0.0, -1.0, 0.0));
        let d = render_depth(&[floor.clone()], &Pose::identity(), &k);
        // Only the lower half of the image sees the floor.
        assert!(d.at(32, 47).is_some());
        assert!(d.at(32, 0).is_none());
        for r in 0..48 {
            for c in 0..64 {
                if let Some(z) = d.at(c, r) {
                    let x = k.unproject(&Vec2::new(c as f64, r as f64), z);
                    assert!(floor.plane.signed_distance(&x).abs() < 1e-5);
                }
            }
        }
    }
}
