//! Planar primitive recovery by sequential RANSAC, on organized depth (query
//! side) and on unorganized point sets (map side).

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Intrinsics, Mat3, Plane, Vec2, Vec3};
use crate::raster::{DepthMap, Mask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtractionError {
    #[error("no plane reached the minimum inlier count")]
    NoPlaneFound,
    #[error("invalid RANSAC configuration: {0}")]
    InvalidConfig(String),
    #[error("depth map is {0}x{1} but intrinsics describe {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

/// Plane recovered from a depth image together with its pixel support.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPrimitive {
    pub index: usize,
    /// Camera frame, oriented towards the camera.
    pub plane: Plane,
    pub mask: Mask,
    /// Number of set mask pixels.
    pub area: usize,
}

impl QueryPrimitive {
    pub fn new(index: usize, plane: Plane, mask: Mask) -> Self {
        let area = mask.count();
        Self {
            index,
            plane,
            mask,
            area,
        }
    }
}

/// Bounded planar patch of the map.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPrimitive {
    pub index: usize,
    pub plane: Plane,
    /// Convex polygon on the plane, counter-clockwise around the normal.
    pub boundary: Vec<Vec3>,
    pub sample_points: Vec<Vec3>,
    /// Square meters.
    pub area: f64,
}

impl MapPrimitive {
    /// Snaps the boundary onto the plane and computes its area.
    pub fn new(index: usize, plane: Plane, boundary: Vec<Vec3>) -> Self {
        let boundary: Vec<Vec3> = boundary.iter().map(|v| plane.project_point(v)).collect();
        let area = polygon_area(&plane, &boundary);
        Self {
            index,
            plane,
            boundary,
            sample_points: Vec::new(),
            area,
        }
    }

    /// Area-weighted centroid of the boundary polygon.
    pub fn centroid(&self) -> Vec3 {
        let n = self.boundary.len();
        if n < 3 {
            return self.boundary.iter().sum::<Vec3>() / n.max(1) as f64;
        }
        let origin = self.boundary[0];
        let mut acc = Vec3::zeros();
        let mut total = 0.0;
        for i in 1..n - 1 {
            let a = self.boundary[i] - origin;
            let b = self.boundary[i + 1] - origin;
            let w = a.cross(&b).dot(&self.plane.normal) * 0.5;
            acc += (origin * 3.0 + a + b) / 3.0 * w;
            total += w;
        }
        if total.abs() < 1e-15 {
            self.boundary.iter().sum::<Vec3>() / n as f64
        } else {
            acc / total
        }
    }

    /// Fan triangulation `(v0, vi, vi+1)` of the boundary.
    pub fn triangles(&self) -> impl Iterator<Item = [Vec3; 3]> + '_ {
        let n = self.boundary.len();
        (1..n.saturating_sub(1)).map(move |i| [self.boundary[0], self.boundary[i], self.boundary[i + 1]])
    }

    /// Whether an on-plane point lies inside the (convex) boundary, with a
    /// tolerance in meters.
    pub fn contains(&self, x: &Vec3, tol: f64) -> bool {
        let n = self.boundary.len();
        if n < 3 {
            return false;
        }
        let normal = self.plane.normal;
        let orientation = polygon_signed_area(&self.plane, &self.boundary).signum();
        (0..n).all(|i| {
            let a = self.boundary[i];
            let b = self.boundary[(i + 1) % n];
            let edge = b - a;
            let len = edge.norm();
            if len < 1e-15 {
                return true;
            }
            edge.cross(&(x - a)).dot(&normal) * orientation / len >= -tol
        })
    }
}

fn polygon_signed_area(plane: &Plane, boundary: &[Vec3]) -> f64 {
    let n = boundary.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = Vec3::zeros();
    for i in 0..n {
        s += boundary[i].cross(&boundary[(i + 1) % n]);
    }
    0.5 * s.dot(&plane.normal)
}

pub fn polygon_area(plane: &Plane, boundary: &[Vec3]) -> f64 {
    polygon_signed_area(plane, boundary).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    /// Meters.
    pub distance_threshold: f64,
    pub normal_dot_threshold: f64,
    pub max_primitives: usize,
    /// Fraction of all pixels (or points) below which extraction stops.
    pub min_inlier_fraction: f64,
    pub hypotheses_per_plane: usize,
    /// Consensus/refit alternations after the best hypothesis is chosen.
    pub refit_rounds: usize,
    /// Map-side primitives with smaller hull area are discarded (m²).
    pub min_area: f64,
    /// Strided depth downsampling factor; 1 keeps the input resolution.
    pub downsample: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            distance_threshold: 0.10,
            normal_dot_threshold: 0.9,
            max_primitives: 16,
            min_inlier_fraction: 0.01,
            hypotheses_per_plane: 512,
            refit_rounds: 3,
            min_area: 0.01,
            downsample: 1,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        let bad = |m: &str| Err(ExtractionError::InvalidConfig(m.to_string()));
        if !(self.distance_threshold > 0.0) {
            return bad("distance_threshold must be positive");
        }
        if !(self.normal_dot_threshold > 0.0 && self.normal_dot_threshold <= 1.0) {
            return bad("normal_dot_threshold must lie in (0, 1]");
        }
        if !(self.min_inlier_fraction > 0.0 && self.min_inlier_fraction <= 1.0) {
            return bad("min_inlier_fraction must lie in (0, 1]");
        }
        if self.max_primitives == 0 || self.hypotheses_per_plane == 0 || self.downsample == 0 {
            return bad("counts must be positive");
        }
        if self.min_area < 0.0 {
            return bad("min_area must be non-negative");
        }
        Ok(())
    }
}

/// Per-pixel points and normals of a depth map.
#[derive(Debug, Clone)]
pub struct OrganizedCloud {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
    /// `None` for invalid pixels and pixels without a usable tangent pair.
    pub normals: Vec<Option<Vec3>>,
    pub valid: Vec<bool>,
}

impl OrganizedCloud {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Strided downsampling with matching intrinsics (pixel `i` of the output is
/// pixel `factor·i` of the input).
pub fn downsample_depth(depth: &DepthMap, k: &Intrinsics, factor: usize) -> (DepthMap, Intrinsics) {
    if factor <= 1 {
        return (depth.clone(), *k);
    }
    let w = depth.width.div_ceil(factor);
    let h = depth.height.div_ceil(factor);
    let mut out = DepthMap::new(w, h, depth.invalid);
    for r in 0..h {
        for c in 0..w {
            out.set(c, r, depth.data[depth.index(c * factor, r * factor)]);
        }
    }
    let f = factor as f64;
    let k2 = Intrinsics::new(k.fx / f, k.fy / f, k.cx / f, k.cy / f, w, h);
    (out, k2)
}

/// Unprojects every pixel and estimates camera-facing normals from central
/// differences, falling back to one-sided differences at borders and holes.
pub fn unproject_depth(depth: &DepthMap, k: &Intrinsics) -> Result<OrganizedCloud, ExtractionError> {
    if depth.width != k.width || depth.height != k.height {
        return Err(ExtractionError::DimensionMismatch(
            depth.width,
            depth.height,
            k.width,
            k.height,
        ));
    }
    let (w, h) = (depth.width, depth.height);
    let mut points = vec![Vec3::zeros(); w * h];
    let mut valid = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if let Some(z) = depth.at_index(i) {
                points[i] = k.unproject(&Vec2::new(c as f64, r as f64), z);
                valid[i] = true;
            }
        }
    }
    let tangent = |i: usize, prev: Option<usize>, next: Option<usize>| -> Option<Vec3> {
        let p = prev.filter(|&j| valid[j]);
        let n = next.filter(|&j| valid[j]);
        match (p, n) {
            (Some(a), Some(b)) => Some(points[b] - points[a]),
            (None, Some(b)) => Some(points[b] - points[i]),
            (Some(a), None) => Some(points[i] - points[a]),
            (None, None) => None,
        }
    };
    let mut normals = vec![None; w * h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !valid[i] {
                continue;
            }
            let tx = tangent(i, (c > 0).then(|| i - 1), (c + 1 < w).then(|| i + 1));
            let ty = tangent(i, (r > 0).then(|| i - w), (r + 1 < h).then(|| i + w));
            if let (Some(tx), Some(ty)) = (tx, ty) {
                let n = tx.cross(&ty);
                let len = n.norm();
                if len > 1e-12 {
                    let mut n = n / len;
                    if n.dot(&points[i]) > 0.0 {
                        n = -n;
                    }
                    normals[i] = Some(n);
                }
            }
        }
    }
    Ok(OrganizedCloud {
        width: w,
        height: h,
        points,
        normals,
        valid,
    })
}

/// Total-least-squares plane (smallest-eigenvalue direction of the scatter).
pub fn fit_plane_tls(points: impl Iterator<Item = Vec3> + Clone) -> Option<Plane> {
    let mut count = 0usize;
    let mut sum = Vec3::zeros();
    for p in points.clone() {
        sum += p;
        count += 1;
    }
    if count < 3 {
        return None;
    }
    let c = sum / count as f64;
    let mut scatter = Mat3::zeros();
    for p in points {
        let d = p - c;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let n: Vec3 = eig.eigenvectors.column(eig.eigenvalues.imin()).into();
    if !n.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(Plane::from_point_normal(&c, &n))
}

fn plane_from_three(a: &Vec3, b: &Vec3, c: &Vec3) -> Option<Plane> {
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    let scale = (b - a).norm() * (c - a).norm();
    if len <= 1e-9 * scale || len == 0.0 {
        return None;
    }
    Some(Plane::from_point_normal(a, &(n / len)))
}

fn sample_three(rng: &mut ChaCha8Rng, n: usize) -> [usize; 3] {
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let mut c = rng.random_range(0..n - 2);
    if c >= lo {
        c += 1;
    }
    if c >= hi {
        c += 1;
    }
    [a, b, c]
}

/// Working set of candidate points for one extraction run.
struct Candidates<'a> {
    points: &'a [Vec3],
    normals: Option<&'a [Option<Vec3>]>,
    remaining: Vec<usize>,
}

impl Candidates<'_> {
    fn is_inlier(&self, plane: &Plane, idx: usize, cfg: &RansacConfig) -> bool {
        if plane.signed_distance(&self.points[idx]).abs() >= cfg.distance_threshold {
            return false;
        }
        match self.normals {
            None => true,
            Some(normals) => match normals[idx] {
                Some(n) => n.dot(&plane.normal) > cfg.normal_dot_threshold,
                None => false,
            },
        }
    }

    fn count_inliers(&self, plane: &Plane, cfg: &RansacConfig) -> usize {
        self.remaining
            .iter()
            .filter(|&&i| self.is_inlier(plane, i, cfg))
            .count()
    }

    fn inliers(&self, plane: &Plane, cfg: &RansacConfig) -> Vec<usize> {
        self.remaining
            .iter()
            .copied()
            .filter(|&i| self.is_inlier(plane, i, cfg))
            .collect()
    }

    /// One sequential-RANSAC round: best hypothesis, then alternate
    /// refit/consensus. The returned inliers satisfy both tests against the
    /// returned plane.
    fn extract_one(
        &self,
        rng: &mut ChaCha8Rng,
        cfg: &RansacConfig,
        orient: &dyn Fn(Plane, &[usize]) -> Plane,
    ) -> Option<(Plane, Vec<usize>)> {
        if self.remaining.len() < 3 {
            return None;
        }
        let mut best: Option<(Plane, usize)> = None;
        for _ in 0..cfg.hypotheses_per_plane {
            let [a, b, c] = sample_three(rng, self.remaining.len());
            let (a, b, c) = (self.remaining[a], self.remaining[b], self.remaining[c]);
            let Some(plane) = plane_from_three(&self.points[a], &self.points[b], &self.points[c]) else {
                continue;
            };
            let plane = orient(plane, &[a, b, c]);
            let count = self.count_inliers(&plane, cfg);
            if best.as_ref().is_none_or(|(_, bc)| count > *bc) {
                best = Some((plane, count));
            }
        }
        let (mut plane, _) = best?;
        let mut inliers = self.inliers(&plane, cfg);
        for _ in 0..cfg.refit_rounds {
            let Some(refit) = fit_plane_tls(inliers.iter().map(|&i| self.points[i])) else {
                break;
            };
            let refit = orient(refit, &inliers);
            let next = self.inliers(&refit, cfg);
            if next.len() < 3 {
                break;
            }
            let changed = next != inliers;
            plane = refit;
            inliers = next;
            if !changed {
                break;
            }
        }
        Some((plane, inliers))
    }
}

/// Query-side sequential RANSAC over an organized cloud. Stops after
/// `max_primitives` or when the best consensus falls below
/// `min_inlier_fraction` of all pixels.
pub fn sequential_ransac_depth(
    cloud: &OrganizedCloud,
    cfg: &RansacConfig,
) -> Result<Vec<QueryPrimitive>, ExtractionError> {
    cfg.validate()?;
    let total = cloud.width * cloud.height;
    let min_inliers = ((cfg.min_inlier_fraction * total as f64).ceil() as usize).max(3);
    let mut cand = Candidates {
        points: &cloud.points,
        normals: Some(&cloud.normals),
        remaining: (0..total)
            .filter(|&i| cloud.valid[i] && cloud.normals[i].is_some())
            .collect(),
    };
    let points = &cloud.points;
    // Camera-facing orientation: n·x < 0 at the support centroid.
    let orient = |p: Plane, support: &[usize]| {
        let c = support.iter().map(|&i| points[i]).sum::<Vec3>() / support.len() as f64;
        if p.normal.dot(&c) > 0.0 {
            p.flipped()
        } else {
            p
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut out = Vec::new();
    while out.len() < cfg.max_primitives {
        let Some((plane, inliers)) = cand.extract_one(&mut rng, cfg, &orient) else {
            break;
        };
        if inliers.len() < min_inliers {
            break;
        }
        let mask = Mask::from_indices(cloud.width, cloud.height, inliers.iter().copied());
        let mut taken = vec![false; total];
        inliers.iter().for_each(|&i| taken[i] = true);
        cand.remaining.retain(|&i| !taken[i]);
        out.push(QueryPrimitive::new(out.len(), plane, mask));
    }
    if out.is_empty() {
        return Err(ExtractionError::NoPlaneFound);
    }
    Ok(out)
}

/// Convex hull (Andrew's monotone chain), counter-clockwise.
pub fn convex_hull_2d(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts: Vec<Vector2<f64>> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>| {
        (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
    };
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * pts.len());
    for p in pts.iter() {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower_len = hull.len() + 1;
    for p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    hull
}

/// Map-side sequential RANSAC on unorganized points. Without normals only
/// the distance test applies. Each primitive's boundary is the convex hull of
/// its inliers on the fitted plane; primitives below `min_area` are dropped.
/// Normals are oriented to agree with the supplied point normals or, when
/// absent, to face the centroid of the whole cloud.
pub fn sequential_ransac_points(
    points: &[Vec3],
    normals: Option<&[Vec3]>,
    cfg: &RansacConfig,
) -> Result<Vec<MapPrimitive>, ExtractionError> {
    cfg.validate()?;
    if points.len() < 3 {
        return Err(ExtractionError::NoPlaneFound);
    }
    let wrapped: Option<Vec<Option<Vec3>>> =
        normals.map(|ns| ns.iter().map(|n| Some(n.normalize())).collect());
    let total = points.len();
    let min_inliers = ((cfg.min_inlier_fraction * total as f64).ceil() as usize).max(3);
    let centre = points.iter().sum::<Vec3>() / total as f64;
    let orient = |p: Plane, support: &[usize]| {
        let flip = match &wrapped {
            Some(ns) => {
                let mean: Vec3 = support.iter().filter_map(|&i| ns[i]).sum();
                mean.dot(&p.normal) < 0.0
            }
            None => p.signed_distance(&centre) < 0.0,
        };
        if flip {
            p.flipped()
        } else {
            p
        }
    };
    let mut cand = Candidates {
        points,
        normals: wrapped.as_deref(),
        remaining: (0..total).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut out: Vec<MapPrimitive> = Vec::new();
    let mut rounds = 0;
    while out.len() < cfg.max_primitives {
        let Some((plane, inliers)) = cand.extract_one(&mut rng, cfg, &orient) else {
            break;
        };
        if inliers.len() < min_inliers {
            break;
        }
        rounds += 1;
        let (e1, e2) = plane.basis();
        let origin = -plane.normal * plane.offset;
        let flat: Vec<Vector2<f64>> = inliers
            .iter()
            .map(|&i| {
                let d = points[i] - origin;
                Vector2::new(d.dot(&e1), d.dot(&e2))
            })
            .collect();
        let hull = convex_hull_2d(&flat);
        let boundary: Vec<Vec3> = hull.iter().map(|q| origin + e1 * q.x + e2 * q.y).collect();
        let mut prim = MapPrimitive::new(out.len(), plane, boundary);
        let mut taken = vec![false; total];
        inliers.iter().for_each(|&i| taken[i] = true);
        cand.remaining.retain(|&i| !taken[i]);
        if prim.area >= cfg.min_area {
            prim.sample_points = inliers.iter().map(|&i| plane.project_point(&points[i])).collect();
            out.push(prim);
        }
    }
    if rounds == 0 {
        return Err(ExtractionError::NoPlaneFound);
    }
    Ok(out)
}

/// `count` points uniformly distributed over the primitive's boundary
/// polygon, deterministic in `seed`.
pub fn sample_primitive_points(prim: &MapPrimitive, count: usize, seed: u64) -> Vec<Vec3> {
    let tris: Vec<[Vec3; 3]> = prim.triangles().collect();
    let areas: Vec<f64> = tris
        .iter()
        .map(|t| 0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm())
        .collect();
    let total: f64 = areas.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if tris.is_empty() || total <= 0.0 {
        let c = prim.centroid();
        return vec![prim.plane.project_point(&c); count];
    }
    let mut cumulative = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a / total;
        cumulative.push(acc);
    }
    (0..count)
        .map(|_| {
            let pick: f64 = rng.random();
            let t = cumulative
                .iter()
                .position(|&c| pick < c)
                .unwrap_or(tris.len() - 1);
            let [a, b, c] = tris[t];
            let r1: f64 = rng.random::<f64>().sqrt();
            let r2: f64 = rng.random();
            let p = a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2);
            prim.plane.project_point(&p)
        })
        .collect()
}
