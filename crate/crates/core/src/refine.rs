//! Pose refinement by direct depth alignment of query primitives.
//!
//! Each query primitive's plane-induced depth, scaled by a per-primitive
//! offset seed `δ`, is back-projected, moved by the relative transform
//! `T_tr` and compared against the map depth rendered once at the initial
//! pose. Adam runs jointly on the SE(3) tangent of `T_tr` and on `log δ`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::extraction::{MapPrimitive, QueryPrimitive};
use crate::geometry::{plane_depth_at_pixel, se3_exp, Intrinsics, Pose, Twist, Vec2, Vec3};
use crate::raster::{BilinearSample, DepthMap};
use crate::render::{render_with_ids, Rendering};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub iterations: usize,
    pub lr_pose: f64,
    pub lr_offsets: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub pixel_sample_count: usize,
    /// Iterations between full-pixel-set cost evaluations.
    pub checkpoint_interval: usize,
    /// Pixels whose absolute depth residual exceeds this are left out.
    pub max_residual: Option<f64>,
    pub rng_seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            lr_pose: 1e-3,
            lr_offsets: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            pixel_sample_count: 4096,
            checkpoint_interval: 20,
            max_residual: None,
            rng_seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn is_valid(&self) -> bool {
        self.iterations >= 1
            && self.lr_pose > 0.0
            && self.lr_offsets > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.pixel_sample_count >= 1
            && self.checkpoint_interval >= 1
            && self.max_residual.is_none_or(|g| g > 0.0)
    }
}

/// Plane-induced depth over the primitive's mask, scaled by `delta`.
/// Returns `(pixel index, depth)` pairs and the number of pixels dropped
/// because their ray misses the plane or hits it behind the camera.
pub fn offset_seeded_depth(prim: &QueryPrimitive, delta: f64, k: &Intrinsics) -> (Vec<(usize, f64)>, usize) {
    let mut out = Vec::with_capacity(prim.area);
    let mut dropped = 0;
    for idx in prim.mask.indices() {
        match plane_depth_at_pixel(k, &prim.plane, &prim.mask.pixel(idx)) {
            Ok(z) => out.push((idx, delta * z)),
            Err(_) => dropped += 1,
        }
    }
    (out, dropped)
}

/// Depth rendered at the initial pose, with the id of the front-most
/// primitive per pixel.
#[derive(Debug, Clone)]
pub struct AlignmentTarget {
    pub depth: DepthMap,
    pub ids: Vec<Option<usize>>,
    /// Residual magnitude above which a pixel is treated as invalid.
    pub max_residual: f64,
}

impl AlignmentTarget {
    pub fn render(map: &[MapPrimitive], pose: &Pose, k: &Intrinsics) -> Self {
        let Rendering { depth, ids } = render_with_ids(map, pose, k);
        Self {
            depth,
            ids,
            max_residual: f64::INFINITY,
        }
    }

    pub fn with_max_residual(mut self, max_residual: Option<f64>) -> Self {
        self.max_residual = max_residual.unwrap_or(f64::INFINITY);
        self
    }

    /// Target without surface ids; every valid pixel counts as one surface.
    pub fn from_depth(depth: DepthMap) -> Self {
        let ids = depth.data.iter().map(|&v| depth.is_valid_value(v).then_some(0)).collect();
        Self {
            depth,
            ids,
            max_residual: f64::INFINITY,
        }
    }

    /// Bilinear lookup, rejected when the four neighbours do not all belong
    /// to the same rendered primitive: interpolating across an occlusion
    /// edge or a crease yields depths that lie on no surface.
    pub fn sample(&self, u: &Vec2) -> Option<BilinearSample> {
        let s = self.depth.sample_bilinear(u)?;
        let w = self.depth.width;
        let x0 = (u.x.floor() as usize).min(w - 2);
        let y0 = (u.y.floor() as usize).min(self.depth.height - 2);
        let i = y0 * w + x0;
        let id = self.ids[i]?;
        [i + 1, i + w, i + w + 1]
            .iter()
            .all(|&j| self.ids[j] == Some(id))
            .then_some(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpedPixel {
    pub source: usize,
    pub pixel: Vec2,
    pub depth: f64,
    pub valid: bool,
}

fn warp_one(
    prim: &QueryPrimitive,
    delta: f64,
    t_tr: &Pose,
    k: &Intrinsics,
    d: &AlignmentTarget,
    idx: usize,
) -> Option<(Vec3, Vec3, Vec2, f64, BilinearSample)> {
    let u = prim.mask.pixel(idx);
    let z = plane_depth_at_pixel(k, &prim.plane, &u).ok()?;
    let x = k.unproject(&u, delta * z);
    let xp = t_tr.transform_point(&x);
    if xp.z <= 0.0 {
        return None;
    }
    let uh = Vec2::new(k.fx * xp.x / xp.z + k.cx, k.fy * xp.y / xp.z + k.cy);
    let s = d.sample(&uh)?;
    if (s.value - xp.z).abs() > d.max_residual {
        return None;
    }
    Some((x, xp, uh, xp.z, s))
}

/// Warps every mask pixel: back-project at `δ·depth`, apply `T_tr`,
/// re-project. A pixel is valid when it lands in front of the camera, inside
/// the image, on a single rendered surface and within the residual gate.
pub fn warp_primitive(prim: &QueryPrimitive, delta: f64, t_tr: &Pose, k: &Intrinsics, d: &AlignmentTarget) -> Vec<WarpedPixel> {
    prim.mask
        .indices()
        .map(|idx| {
            let u = prim.mask.pixel(idx);
            let Ok(z) = plane_depth_at_pixel(k, &prim.plane, &u) else {
                return WarpedPixel {
                    source: idx,
                    pixel: u,
                    depth: f64::NAN,
                    valid: false,
                };
            };
            let xp = t_tr.transform_point(&k.unproject(&u, delta * z));
            let pixel = Vec2::new(k.fx * xp.x / xp.z + k.cx, k.fy * xp.y / xp.z + k.cy);
            let valid = warp_one(prim, delta, t_tr, k, d, idx).is_some();
            WarpedPixel {
                source: idx,
                pixel,
                depth: xp.z,
                valid,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    /// Mean squared depth difference over valid pixels, zero when none.
    pub value: f64,
    pub valid: usize,
}

impl Residual {
    pub fn is_empty(&self) -> bool {
        self.valid == 0
    }
}

pub fn per_primitive_residual(
    prim: &QueryPrimitive,
    delta: f64,
    t_tr: &Pose,
    k: &Intrinsics,
    d: &AlignmentTarget,
    pixels: &[usize],
) -> Residual {
    let mut sum = 0.0;
    let mut valid = 0;
    for &idx in pixels {
        if let Some((_, _, _, zh, s)) = warp_one(prim, delta, t_tr, k, d, idx) {
            let e = s.value - zh;
            sum += e * e;
            valid += 1;
        }
    }
    Residual {
        value: if valid == 0 { 0.0 } else { sum / valid as f64 },
        valid,
    }
}

/// Pixel indices per query primitive at which the cost is evaluated.
pub type PixelSample = Vec<Vec<usize>>;

/// Every mask pixel of every primitive.
pub fn full_sample(prims: &[QueryPrimitive]) -> PixelSample {
    prims.iter().map(|p| p.mask.indices().collect()).collect()
}

/// `count` draws with replacement, uniform over the union of masks, so
/// each primitive is hit in proportion to its area.
pub fn draw_sample(prims: &[QueryPrimitive], count: usize, rng: &mut impl Rng) -> PixelSample {
    let pixels: Vec<Vec<usize>> = full_sample(prims);
    let mut out = vec![Vec::new(); prims.len()];
    let Ok(by_area) = WeightedIndex::new(pixels.iter().map(|p| p.len())) else {
        return out;
    };
    for _ in 0..count {
        let i = by_area.sample(rng);
        out[i].push(pixels[i][rng.random_range(0..pixels[i].len())]);
    }
    out
}

/// `(1/Nq) Σ r_i`, each residual over its sampled pixels.
pub fn depth_cost(
    prims: &[QueryPrimitive],
    deltas: &[f64],
    t_tr: &Pose,
    k: &Intrinsics,
    d: &AlignmentTarget,
    sample: &PixelSample,
) -> f64 {
    if prims.is_empty() {
        return 0.0;
    }
    let total: f64 = prims
        .iter()
        .zip(deltas)
        .zip(sample)
        .map(|((p, &delta), px)| per_primitive_residual(p, delta, t_tr, k, d, px).value)
        .sum();
    total / prims.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostGradient {
    pub cost: f64,
    /// With respect to a left perturbation `exp(ξ)·T_tr`, ordered `[ω; v]`.
    pub d_xi: Twist,
    pub d_delta: Vec<f64>,
}

/// Analytic gradient of [`depth_cost`] through bilinear sampling, the
/// pinhole projection, the rigid transform and the `δ` scaling. The set of
/// valid pixels is held fixed at the current state.
pub fn cost_gradient(
    prims: &[QueryPrimitive],
    deltas: &[f64],
    t_tr: &Pose,
    k: &Intrinsics,
    d: &AlignmentTarget,
    sample: &PixelSample,
) -> CostGradient {
    let mut cost = 0.0;
    let mut d_xi = Twist::zeros();
    let mut d_delta = vec![0.0; prims.len()];
    if prims.is_empty() {
        return CostGradient { cost, d_xi, d_delta };
    }
    let nq = prims.len() as f64;
    for (i, (prim, &delta)) in prims.iter().zip(deltas).enumerate() {
        let mut terms = Vec::new();
        for &idx in &sample[i] {
            if let Some(t) = warp_one(prim, delta, t_tr, k, d, idx) {
                terms.push(t);
            }
        }
        if terms.is_empty() {
            continue;
        }
        let norm = 1.0 / (terms.len() as f64 * nq);
        for (x, xp, _, zh, s) in terms {
            let e = s.value - zh;
            cost += e * e * norm;
            let inv_z = 1.0 / xp.z;
            // ∂e/∂x' = ∇D · ∂û/∂x' − ∂ẑ/∂x'.
            let de_dxp = Vec3::new(
                s.grad.x * k.fx * inv_z,
                s.grad.y * k.fy * inv_z,
                -(s.grad.x * k.fx * xp.x + s.grad.y * k.fy * xp.y) * inv_z * inv_z - 1.0,
            );
            let g = de_dxp * (2.0 * e * norm);
            let g_omega = xp.cross(&g);
            d_xi += Twist::new(g_omega.x, g_omega.y, g_omega.z, g.x, g.y, g.z);
            // x' = R (δ·z·ray) + t, so ∂x'/∂δ = R x / δ.
            d_delta[i] += g.dot(&(t_tr.rotation * x)) / delta;
        }
    }
    CostGradient { cost, d_xi, d_delta }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub pose: Pose,
    pub offsets: Vec<f64>,
    /// Sampled cost per iteration, before each update.
    pub trace: Vec<f64>,
    pub initial_full_cost: f64,
    pub final_full_cost: f64,
    /// Set when the rendering at the initial pose overlaps no query mask;
    /// the initial pose is returned unchanged.
    pub no_overlap: bool,
}

/// Refinement from `δ = 1` for every primitive.
pub fn refine_pose(
    p0: &Pose,
    prims: &[QueryPrimitive],
    map: &[MapPrimitive],
    k: &Intrinsics,
    cfg: &RefineConfig,
) -> RefineResult {
    refine_pose_with_offsets(p0, prims, &vec![1.0; prims.len()], map, k, cfg)
}

/// Adam on `(ξ, log δ)` with per-group learning rates and a fresh pixel
/// sample each iteration. The full-pixel-set cost is evaluated at the
/// start, every `checkpoint_interval` iterations and at the end; the best
/// checkpoint is returned, so the returned cost never exceeds the initial
/// one. The refined pose is `P0 ∘ T_tr`.
pub fn refine_pose_with_offsets(
    p0: &Pose,
    prims: &[QueryPrimitive],
    initial_offsets: &[f64],
    map: &[MapPrimitive],
    k: &Intrinsics,
    cfg: &RefineConfig,
) -> RefineResult {
    assert_eq!(initial_offsets.len(), prims.len(), "one offset seed per primitive");
    let d = AlignmentTarget::render(map, p0, k).with_max_residual(cfg.max_residual);
    let full = full_sample(prims);
    let overlap = full.iter().flatten().any(|&idx| d.depth.at_index(idx).is_some());
    let identity = Pose::identity();
    let initial_full_cost = depth_cost(prims, initial_offsets, &identity, k, &d, &full);
    if !overlap {
        return RefineResult {
            pose: *p0,
            offsets: initial_offsets.to_vec(),
            trace: Vec::new(),
            initial_full_cost,
            final_full_cost: initial_full_cost,
            no_overlap: true,
        };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let n = 6 + prims.len();
    let mut t_tr = identity;
    let mut log_delta: Vec<f64> = initial_offsets.iter().map(|v| v.ln()).collect();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best = (initial_full_cost, *p0, log_delta.clone());

    for it in 1..=cfg.iterations {
        let deltas: Vec<f64> = log_delta.iter().map(|l| l.exp()).collect();
        let sample = draw_sample(prims, cfg.pixel_sample_count, &mut rng);
        let g = cost_gradient(prims, &deltas, &t_tr, k, &d, &sample);
        trace.push(g.cost);
        let grad: Vec<f64> = g
            .d_xi
            .iter()
            .copied()
            .chain(g.d_delta.iter().zip(&deltas).map(|(gd, dl)| gd * dl))
            .collect();
        let bc1 = 1.0 - cfg.beta1.powi(it as i32);
        let bc2 = 1.0 - cfg.beta2.powi(it as i32);
        let mut step = vec![0.0; n];
        for p in 0..n {
            m[p] = cfg.beta1 * m[p] + (1.0 - cfg.beta1) * grad[p];
            v[p] = cfg.beta2 * v[p] + (1.0 - cfg.beta2) * grad[p] * grad[p];
            let lr = if p < 6 { cfg.lr_pose } else { cfg.lr_offsets };
            step[p] = lr * (m[p] / bc1) / ((v[p] / bc2).sqrt() + cfg.epsilon);
        }
        let xi = Twist::from_iterator(step[..6].iter().map(|s| -s));
        t_tr = se3_exp(&xi).compose(&t_tr);
        for (l, s) in log_delta.iter_mut().zip(&step[6..]) {
            *l -= s;
        }
        if it % cfg.checkpoint_interval == 0 || it == cfg.iterations {
            let deltas: Vec<f64> = log_delta.iter().map(|l| l.exp()).collect();
            let pose = p0.compose(&t_tr);
            let c = depth_cost(prims, &deltas, &t_tr, k, &d, &full);
            if c < best.0 {
                best = (c, pose, log_delta.clone());
            }
        }
    }
    let (final_full_cost, pose, log_best) = best;
    RefineResult {
        pose,
        offsets: log_best.iter().map(|l| l.exp()).collect(),
        trace,
        initial_full_cost,
        final_full_cost,
        no_overlap: false,
    }
}
