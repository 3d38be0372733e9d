//! Synthetic planar rooms, query views, corrupted correspondences and
//! embeddings for exercising the pipeline end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::{MapPrimitive, QueryPrimitive};
use crate::geometry::{angle_between_deg, so3_exp, Intrinsics, Mat3, Plane, Pose, Vec3};
use crate::matching::{generate_labels, Mat, MatchLabels};
use crate::raster::{DepthMap, Mask};
use crate::render::render_with_ids;
use crate::solver::{look_rotation, PlaneCorrespondence};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("no acceptable camera after {0} attempts")]
    SamplingExhausted(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Per-pixel Gaussian depth noise, meters.
    pub depth_sigma: f64,
    /// Rotation noise applied to ground-truth query plane normals, degrees.
    pub normal_sigma_deg: f64,
    /// Per-query monocular scale `s` drawn uniformly from this range; query
    /// depth is divided by `s`.
    pub scale_range: [f64; 2],
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            depth_sigma: 0.0,
            normal_sigma_deg: 0.0,
            scale_range: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            hfov_deg: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Room size along x, y, z in meters; the floor sits at z = 0.
    pub room: [f64; 3],
    /// Boxes resting on the floor, each contributing a top and four sides.
    pub interior_boxes: usize,
    /// Box edge lengths are drawn from this range.
    pub box_size_range: [f64; 2],
    pub camera_count: usize,
    pub min_visible: usize,
    /// Pixels a primitive needs in the id buffer to count as visible.
    pub min_visible_pixels: usize,
    pub camera: CameraSpec,
    pub noise: NoiseSpec,
    /// IoU threshold for ground-truth labels.
    pub label_iou: f64,
    pub max_attempts: usize,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            room: [6.0, 5.0, 3.0],
            interior_boxes: 3,
            box_size_range: [0.4, 1.2],
            camera_count: 10,
            min_visible: 3,
            min_visible_pixels: 100,
            camera: CameraSpec::default(),
            noise: NoiseSpec::default(),
            label_iou: 0.5,
            max_attempts: 2000,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidSpec(m.to_string()));
        if !self.room.iter().all(|&v| v > 1.0 && v.is_finite()) {
            return bad("room extents must exceed 1 m");
        }
        if self.min_visible == 0 {
            return bad("min_visible must be at least 1");
        }
        let [lo, hi] = self.box_size_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad("box_size_range must be positive and ordered");
        }
        let [slo, shi] = self.noise.scale_range;
        if !(slo > 0.0 && shi >= slo) {
            return bad("scale_range must be positive and ordered");
        }
        if self.noise.depth_sigma < 0.0 || self.noise.normal_sigma_deg < 0.0 {
            return bad("noise levels must be non-negative");
        }
        if !(self.label_iou > 0.0 && self.label_iou <= 1.0) {
            return bad("label_iou must lie in (0, 1]");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Intrinsics::from_fov(self.camera.width, self.camera.height, self.camera.hfov_deg)
            .validate()
            .map_err(|e| SimError::InvalidSpec(e.to_string()))
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.camera.width, self.camera.height, self.camera.hfov_deg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    /// Monocular scale factor applied to this query's depth.
    pub scale: f64,
    pub depth: DepthMap,
    /// Visible map primitives as seen in the id buffer, planes in the camera
    /// frame with offsets divided by `scale`.
    pub primitives: Vec<QueryPrimitive>,
    /// Map index of each entry of `primitives`.
    pub source_map_index: Vec<usize>,
    pub labels: MatchLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub map: Vec<MapPrimitive>,
    pub queries: Vec<QueryRecord>,
}

/// Rectangle centred at `c` spanned by half-axes `a` and `b`, oriented along
/// `normal`.
fn rectangle(index: usize, c: Vec3, a: Vec3, b: Vec3, normal: Vec3) -> MapPrimitive {
    let plane = Plane::from_point_normal(&c, &normal);
    MapPrimitive::new(index, plane, vec![c + a + b, c - a + b, c - a - b, c + a - b])
}

fn room_shell(room: [f64; 3]) -> Vec<MapPrimitive> {
    let [w, l, h] = room;
    let (hw, hl, hh) = (w / 2.0, l / 2.0, h / 2.0);
    let faces = [
        (Vec3::new(hw, hl, 0.0), Vec3::x() * hw, Vec3::y() * hl, Vec3::z()),
        (Vec3::new(hw, hl, h), Vec3::x() * hw, Vec3::y() * hl, -Vec3::z()),
        (Vec3::new(0.0, hl, hh), Vec3::y() * hl, Vec3::z() * hh, Vec3::x()),
        (Vec3::new(w, hl, hh), Vec3::y() * hl, Vec3::z() * hh, -Vec3::x()),
        (Vec3::new(hw, 0.0, hh), Vec3::x() * hw, Vec3::z() * hh, Vec3::y()),
        (Vec3::new(hw, l, hh), Vec3::x() * hw, Vec3::z() * hh, -Vec3::y()),
    ];
    faces
        .iter()
        .enumerate()
        .map(|(i, &(c, a, b, n))| rectangle(i, c, a, b, n))
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct BoxFootprint {
    centre: Vec3,
    radius: f64,
    height: f64,
}

const WALL_CLEARANCE: f64 = 0.3;

fn place_boxes(spec: &SceneSpec, rng: &mut ChaCha8Rng, map: &mut Vec<MapPrimitive>) -> Vec<BoxFootprint> {
    let [w, l, h] = spec.room;
    let [lo, hi] = spec.box_size_range;
    let mut placed: Vec<BoxFootprint> = Vec::new();
    for _ in 0..spec.interior_boxes {
        for _attempt in 0..100 {
            let sx = rng.random_range(lo..=hi);
            let sy = rng.random_range(lo..=hi);
            let sz = rng.random_range(lo..=hi).min(h - 0.5);
            let radius = 0.5 * (sx * sx + sy * sy).sqrt();
            let margin = WALL_CLEARANCE + radius;
            if w - 2.0 * margin <= 0.0 || l - 2.0 * margin <= 0.0 {
                continue;
            }
            let cx = rng.random_range(margin..w - margin);
            let cy = rng.random_range(margin..l - margin);
            let centre = Vec3::new(cx, cy, 0.0);
            if placed
                .iter()
                .any(|b| (b.centre - centre).norm() < b.radius + radius + 0.1)
            {
                continue;
            }
            let yaw: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let ex = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
            let ey = Vec3::new(-yaw.sin(), yaw.cos(), 0.0);
            let (ax, ay, az) = (ex * (sx / 2.0), ey * (sy / 2.0), Vec3::z() * (sz / 2.0));
            let mid = Vec3::new(cx, cy, sz / 2.0);
            let faces = [
                (mid + az, ax, ay, Vec3::z()),
                (mid + ax, ay, az, ex),
                (mid - ax, ay, az, -ex),
                (mid + ay, ax, az, ey),
                (mid - ay, ax, az, -ey),
            ];
            for (c, a, b, n) in faces {
                let idx = map.len();
                map.push(rectangle(idx, c, a, b, n));
            }
            placed.push(BoxFootprint {
                centre,
                radius,
                height: sz,
            });
            break;
        }
    }
    placed
}

fn sample_camera(spec: &SceneSpec, boxes: &[BoxFootprint], rng: &mut ChaCha8Rng) -> Pose {
    let [w, l, h] = spec.room;
    loop {
        let p = Vec3::new(
            rng.random_range(0.5..w - 0.5),
            rng.random_range(0.5..l - 0.5),
            rng.random_range(0.8..(h - 0.5).max(0.9)),
        );
        let inside_box = boxes.iter().any(|b| {
            let d = Vec3::new(p.x - b.centre.x, p.y - b.centre.y, 0.0).norm();
            d < b.radius + 0.2 && p.z < b.height + 0.2
        });
        if inside_box {
            continue;
        }
        let target = Vec3::new(
            rng.random_range(0.0..w),
            rng.random_range(0.0..l),
            rng.random_range(0.0..h),
        );
        let forward = target - p;
        if forward.norm() < 1.0 {
            continue;
        }
        return Pose::new(look_rotation(&forward, &Vec3::z()), p);
    }
}

/// Axis-angle rotation with a uniformly random axis and a Gaussian angle.
fn random_small_rotation(sigma_rad: f64, rng: &mut impl Rng) -> Mat3 {
    if sigma_rad == 0.0 {
        return Mat3::identity();
    }
    let axis = random_unit(rng);
    let angle: f64 = Normal::new(0.0, sigma_rad).expect("finite sigma").sample(rng);
    so3_exp(&(axis * angle))
}

pub fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Room shell plus interior boxes, and query views rejection-sampled until
/// at least `min_visible` primitives cover `min_visible_pixels` each.
pub fn synth_scene(spec: &SceneSpec) -> Result<Scene, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut map = room_shell(spec.room);
    let boxes = place_boxes(spec, &mut rng, &mut map);
    let k = spec.intrinsics();
    let mut queries = Vec::with_capacity(spec.camera_count);
    let mut attempts = 0;
    while queries.len() < spec.camera_count {
        if attempts >= spec.max_attempts {
            return Err(SimError::SamplingExhausted(attempts));
        }
        attempts += 1;
        let pose = sample_camera(spec, &boxes, &mut rng);
        let render = render_with_ids(&map, &pose, &k);
        let mut counts = vec![0usize; map.len()];
        for id in render.ids.iter().flatten() {
            counts[*id] += 1;
        }
        let visible: Vec<usize> = (0..map.len())
            .filter(|&j| counts[j] >= spec.min_visible_pixels)
            .collect();
        if visible.len() < spec.min_visible {
            continue;
        }
        queries.push(build_query(spec, &map, &k, pose, &render, &visible, &mut rng));
    }
    Ok(Scene { map, queries })
}

fn build_query(
    spec: &SceneSpec,
    map: &[MapPrimitive],
    k: &Intrinsics,
    pose: Pose,
    render: &crate::render::Rendering,
    visible: &[usize],
    rng: &mut ChaCha8Rng,
) -> QueryRecord {
    let [slo, shi] = spec.noise.scale_range;
    let scale = if shi > slo { rng.random_range(slo..=shi) } else { slo };
    let mut depth = render.depth.clone();
    let depth_noise = (spec.noise.depth_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.noise.depth_sigma).expect("finite sigma"));
    for v in depth.data.iter_mut() {
        if *v > 0.0 {
            let noisy = match &depth_noise {
                Some(n) => *v as f64 + n.sample(rng),
                None => *v as f64,
            };
            *v = if noisy > 0.0 { (noisy / scale) as f32 } else { depth.invalid };
        }
    }
    let to_camera = pose.inverse();
    let sigma = spec.noise.normal_sigma_deg.to_radians();
    let mut primitives = Vec::with_capacity(visible.len());
    for (qi, &j) in visible.iter().enumerate() {
        let mask = Mask::from_indices(
            k.width,
            k.height,
            render.ids.iter().enumerate().filter(|(_, id)| **id == Some(j)).map(|(i, _)| i),
        );
        let cam = to_camera.transform_plane(&map[j].plane);
        let normal = random_small_rotation(sigma, rng) * cam.normal;
        primitives.push(QueryPrimitive::new(qi, Plane::new(normal, cam.offset / scale), mask));
    }
    let labels = generate_labels(&primitives, map, &pose, k, spec.label_iou).expect("masks share the image size");
    QueryRecord {
        intrinsics: *k,
        pose,
        scale,
        depth,
        primitives,
        source_map_index: visible.to_vec(),
        labels,
    }
}

/// Floor and two walls, 6 m squares meeting at the origin, seen by a camera
/// placed in the open octant and aimed near the corner.
pub fn corner_scene(seed: u64) -> (Vec<MapPrimitive>, Pose) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 3.0;
    let map = vec![
        rectangle(0, Vec3::new(half, half, 0.0), Vec3::x() * half, Vec3::y() * half, Vec3::z()),
        rectangle(1, Vec3::new(0.0, half, half), Vec3::y() * half, Vec3::z() * half, Vec3::x()),
        rectangle(2, Vec3::new(half, 0.0, half), Vec3::x() * half, Vec3::z() * half, Vec3::y()),
    ];
    let eye = Vec3::new(
        rng.random_range(2.0..3.0),
        rng.random_range(2.0..3.0),
        rng.random_range(1.2..2.2),
    );
    let target = Vec3::new(
        rng.random_range(0.2..0.6),
        rng.random_range(0.2..0.6),
        rng.random_range(0.2..0.6),
    );
    let pose = Pose::new(look_rotation(&(target - eye), &Vec3::z()), eye);
    (map, pose)
}

/// A random plane closer than this to the true query normal would be
/// consistent with the true rotation, so outliers are drawn outside it.
pub const OUTLIER_MIN_ANGLE_DEG: f64 = 10.0;

/// Noisy copies of ground-truth correspondences with planted outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub correspondences: Vec<PlaneCorrespondence>,
    pub inliers: Vec<usize>,
    pub outliers: Vec<usize>,
}

/// Inliers get a random small rotation of the query normal and additive
/// offset noise; outliers get a random query plane whose normal is at least
/// [`OUTLIER_MIN_ANGLE_DEG`] away from the true one. Every query offset is
/// then divided by `scale`.
pub fn corrupt_correspondences(
    gt: &[PlaneCorrespondence],
    outlier_rate: f64,
    normal_noise_deg: f64,
    offset_noise_m: f64,
    scale: f64,
    seed: u64,
) -> Corrupted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_out = ((outlier_rate * gt.len() as f64).round() as usize).min(gt.len());
    let mut order: Vec<usize> = (0..gt.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut outliers: Vec<usize> = order[..n_out].to_vec();
    outliers.sort_unstable();
    let offset_noise = (offset_noise_m > 0.0).then(|| Normal::new(0.0, offset_noise_m).expect("finite sigma"));
    let mut correspondences = Vec::with_capacity(gt.len());
    let mut inliers = Vec::new();
    for (i, c) in gt.iter().enumerate() {
        let mut out = *c;
        if outliers.binary_search(&i).is_ok() {
            let n = loop {
                let n = random_unit(&mut rng);
                if angle_between_deg(&n, &c.query.normal) >= OUTLIER_MIN_ANGLE_DEG {
                    break n;
                }
            };
            out.query = Plane::new(n, rng.random_range(0.5..4.0));
        } else {
            let r = random_small_rotation(normal_noise_deg.to_radians(), &mut rng);
            let dn = offset_noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            out.query = Plane {
                normal: r * c.query.normal,
                offset: c.query.offset + dn,
            };
            inliers.push(i);
        }
        out.query.offset /= scale;
        correspondences.push(out);
    }
    Corrupted {
        correspondences,
        inliers,
        outliers,
    }
}

/// Exact correspondences for a random camera-to-map `pose`: query planes
/// with normals facing the camera and offsets in `[0.5, 4]` m, weights in
/// `[200, 5000]` pixels.
pub fn random_correspondences(n: usize, pose: &Pose, seed: u64) -> Vec<PlaneCorrespondence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let query = Plane::new(random_unit(&mut rng), rng.random_range(0.5..4.0));
            PlaneCorrespondence {
                query,
                map: pose.transform_plane(&query),
                weight: rng.random_range(200.0..5000.0),
                query_index: i,
                map_index: i,
            }
        })
        .collect()
}

/// Uniformly random rigid pose with translation in `[-extent, extent]³`.
pub fn random_pose(extent: f64, rng: &mut impl Rng) -> Pose {
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let r = so3_exp(&(random_unit(rng) * angle));
    let t = Vec3::new(
        rng.random_range(-extent..extent),
        rng.random_range(-extent..extent),
        rng.random_range(-extent..extent),
    );
    Pose::new(r, t)
}

/// One-to-one labels: `n_pairs` random queries each paired with a distinct
/// random map index; the rest of both sides are unmatchable.
pub fn random_labels(nq: usize, nm: usize, n_pairs: usize, seed: u64) -> MatchLabels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pairs = n_pairs.min(nq).min(nm);
    let mut qs: Vec<usize> = (0..nq).collect();
    let mut ms: Vec<usize> = (0..nm).collect();
    for v in [&mut qs, &mut ms] {
        for i in (1..v.len()).rev() {
            v.swap(i, rng.random_range(0..=i));
        }
    }
    let mut pairs: Vec<(usize, usize)> = (0..n_pairs).map(|k| (qs[k], ms[k])).collect();
    pairs.sort_unstable();
    let mut unmatched_query = qs[n_pairs..].to_vec();
    unmatched_query.sort_unstable();
    let mut unmatched_map = ms[n_pairs..].to_vec();
    unmatched_map.sort_unstable();
    MatchLabels {
        pairs,
        unmatched_query,
        unmatched_map,
    }
}

/// Embeddings in which every labelled pair shares a standard-normal anchor
/// perturbed by independent noise of standard deviation `1/separation` per
/// entry; everything else is drawn independently.
pub fn synth_embeddings(
    labels: &MatchLabels,
    nq: usize,
    nm: usize,
    c: usize,
    separation: f64,
    seed: u64,
) -> (Mat<f64>, Mat<f64>) {
    assert!(separation > 0.0, "separation must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = 1.0 / separation;
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let anchors = Mat::from_fn(nm, c, |_, _| gauss(&mut rng));
    let map = Mat::from_fn(nm, c, |j, e| anchors.get(j, e) + noise * gauss(&mut rng));
    let mut query = Mat::from_fn(nq, c, |_, _| gauss(&mut rng));
    for &(i, j) in &labels.pairs {
        if i < nq && j < nm {
            for e in 0..c {
                query.set(i, e, anchors.get(j, e) + noise * gauss(&mut rng));
            }
        }
    }
    (query, map)
}
