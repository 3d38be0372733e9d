//! Robust camera pose from plane correspondences.
//!
//! Rotation comes from normals alone: a two-correspondence minimal solver
//! inside RANSAC, then weighted Kabsch on the consensus set. Translation and
//! the monocular scale factor follow from the offsets by weighted linear
//! least squares. Degenerate inputs fall back to a coarse viewpoint built
//! from the referenced map primitives.

use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::MapPrimitive;
use crate::geometry::{angle_between_deg, kabsch, GeometryError, Mat3, Plane, Pose, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("normals of the minimal sample are (nearly) parallel")]
    ParallelNormals,
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },
    #[error("every pair of correspondences has (nearly) parallel normals")]
    AllPairsParallel,
    #[error("rank-deficient translation system: {0}")]
    RankDeficient(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

/// A putative match between a query plane (camera frame, offset possibly
/// off by an unknown scale) and a map plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneCorrespondence {
    pub query: Plane,
    pub map: Plane,
    /// Reliability weight, the query mask's pixel count.
    pub weight: f64,
    pub query_index: usize,
    pub map_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub ransac_iterations: usize,
    /// Degrees.
    pub inlier_angle_threshold: f64,
    /// Degrees.
    pub min_normal_separation: f64,
    pub rng_seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            ransac_iterations: 1024,
            inlier_angle_threshold: 5.0,
            min_normal_separation: 5.0,
            rng_seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.ransac_iterations == 0
            || !(self.inlier_angle_threshold > 0.0)
            || !(self.min_normal_separation > 0.0)
        {
            return Err(SolverError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub scale: f64,
    /// Positions in the input correspondence list.
    pub inliers: Vec<usize>,
    pub degenerate: bool,
    pub fallback_used: bool,
    /// False when the query offsets carry no scale information and `scale`
    /// was pinned to one.
    pub scale_observable: bool,
}

/// Separation between two normals as lines (sign-agnostic), in degrees.
fn line_separation_deg(a: &Vec3, b: &Vec3) -> f64 {
    let d = angle_between_deg(a, b);
    d.min(180.0 - d)
}

fn triad(a: &Vec3, b: &Vec3) -> Mat3 {
    let u = a.normalize();
    let v = (b - u * u.dot(b)).normalize();
    let w = u.cross(&v);
    Mat3::from_columns(&[u, v, w])
}

/// Rotation from two plane correspondences with non-parallel normals:
/// orthonormal triads built by Gram–Schmidt on each side, `R = Tᵐ (Tq)ᵀ`.
pub fn minimal_rotation(
    a: &PlaneCorrespondence,
    b: &PlaneCorrespondence,
    min_separation_deg: f64,
) -> Result<Mat3, SolverError> {
    if line_separation_deg(&a.query.normal, &b.query.normal) < min_separation_deg
        || line_separation_deg(&a.map.normal, &b.map.normal) < min_separation_deg
    {
        return Err(SolverError::ParallelNormals);
    }
    let tq = triad(&a.query.normal, &b.query.normal);
    let tm = triad(&a.map.normal, &b.map.normal);
    Ok(tm * tq.transpose())
}

fn angular_residual_deg(r: &Mat3, c: &PlaneCorrespondence) -> f64 {
    angle_between_deg(&(r * c.query.normal), &c.map.normal)
}

/// RANSAC over pairs of correspondences. The inlier test is purely angular;
/// equal-size consensus sets are ranked by total angular residual. When
/// there are no more admissible pairs than iterations, every pair is tried.
pub fn ransac_rotation(
    corrs: &[PlaneCorrespondence],
    cfg: &SolverConfig,
) -> Result<(Vec<usize>, Mat3), SolverError> {
    cfg.validate()?;
    if corrs.len() < 2 {
        return Err(SolverError::InsufficientCorrespondences {
            needed: 2,
            got: corrs.len(),
        });
    }
    let mut pairs = Vec::new();
    for i in 0..corrs.len() {
        for j in i + 1..corrs.len() {
            let ok = line_separation_deg(&corrs[i].query.normal, &corrs[j].query.normal)
                >= cfg.min_normal_separation
                && line_separation_deg(&corrs[i].map.normal, &corrs[j].map.normal)
                    >= cfg.min_normal_separation;
            if ok {
                pairs.push((i, j));
            }
        }
    }
    if pairs.is_empty() {
        return Err(SolverError::AllPairsParallel);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let exhaustive = pairs.len() <= cfg.ransac_iterations;
    let draws = if exhaustive {
        pairs.len()
    } else {
        cfg.ransac_iterations
    };
    let mut best: Option<(Vec<usize>, f64, Mat3)> = None;
    for it in 0..draws {
        let (i, j) = if exhaustive {
            pairs[it]
        } else {
            pairs[rng.random_range(0..pairs.len())]
        };
        let r = minimal_rotation(&corrs[i], &corrs[j], cfg.min_normal_separation)?;
        let mut inliers = Vec::new();
        let mut residual = 0.0;
        for (k, c) in corrs.iter().enumerate() {
            let e = angular_residual_deg(&r, c);
            if e <= cfg.inlier_angle_threshold {
                inliers.push(k);
                residual += e;
            }
        }
        let better = match &best {
            None => true,
            Some((bi, br, _)) => {
                inliers.len() > bi.len() || (inliers.len() == bi.len() && residual < *br)
            }
        };
        if better {
            best = Some((inliers, residual, r));
        }
    }
    let (inliers, _, r) = best.expect("at least one admissible pair");
    Ok((inliers, r))
}

/// Weighted Kabsch over the `(n^q, n^m)` pairs of the consensus set.
pub fn refine_rotation(inliers: &[PlaneCorrespondence]) -> Result<Mat3, SolverError> {
    let pairs: Vec<(Vec3, Vec3)> = inliers.iter().map(|c| (c.query.normal, c.map.normal)).collect();
    let weights: Vec<f64> = inliers.iter().map(|c| c.weight).collect();
    Ok(kabsch(&pairs, &weights)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationScale {
    pub translation: Vec3,
    pub scale: f64,
    pub scale_observable: bool,
}

/// Minimum weighted energy `Σ ωᵢ (d^q)²` (weights normalized to sum one)
/// below which the scale is considered unobservable.
pub const SCALE_OBSERVABILITY_EPS: f64 = 1e-9;

/// Weighted least squares for translation and scale under
/// `d^m = s·d^q − tᵀn^m`, i.e. minimizing `Σ ωᵢ (tᵀn^m + d^m − s d^q)²`.
/// Solved with the 4×4 weighted normal equations on `x = [t; s]`.
pub fn solve_translation_scale(inliers: &[PlaneCorrespondence]) -> Result<TranslationScale, SolverError> {
    if inliers.len() < 3 {
        return Err(SolverError::RankDeficient(format!(
            "{} correspondences, need at least 3",
            inliers.len()
        )));
    }
    let normals = nalgebra::DMatrix::from_fn(inliers.len(), 3, |r, c| inliers[r].map.normal[c]);
    let sv = normals.singular_values();
    let smallest = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smallest <= 1e-6 {
        return Err(SolverError::RankDeficient(
            "map normals do not span three directions".into(),
        ));
    }
    let total_w: f64 = inliers.iter().map(|c| c.weight).sum();
    if !(total_w > 0.0) {
        return Err(SolverError::RankDeficient("weights sum to zero".into()));
    }
    let scale_energy: f64 = inliers
        .iter()
        .map(|c| c.weight / total_w * c.query.offset * c.query.offset)
        .sum();
    let build = |with_scale: bool| {
        let mut ata = Matrix4::<f64>::zeros();
        let mut atb = Vector4::<f64>::zeros();
        for c in inliers {
            let w = c.weight / total_w;
            let n = c.map.normal;
            let (row, target) = if with_scale {
                (Vector4::new(n.x, n.y, n.z, -c.query.offset), -c.map.offset)
            } else {
                // s pinned to one: tᵀn = d^q − d^m.
                (Vector4::new(n.x, n.y, n.z, 0.0), c.query.offset - c.map.offset)
            };
            ata += row * row.transpose() * w;
            atb += row * (target * w);
        }
        (ata, atb)
    };
    let (mut ata, mut atb) = build(true);
    // The offsets may also fail to constrain s when they are explained by
    // a translation alone (e.g. three planes with independent normals).
    let eig = ata.symmetric_eigenvalues();
    let rank_ok = eig.min() > 1e-12 * eig.max().max(f64::MIN_POSITIVE);
    let scale_observable = scale_energy >= SCALE_OBSERVABILITY_EPS && rank_ok;
    if !scale_observable {
        (ata, atb) = build(false);
        ata[(3, 3)] = 1.0;
        atb[3] = 1.0;
    }
    let chol = ata
        .cholesky()
        .ok_or_else(|| SolverError::RankDeficient("normal matrix is not positive definite".into()))?;
    let x = chol.solve(&atb);
    Ok(TranslationScale {
        translation: Vec3::new(x[0], x[1], x[2]),
        scale: x[3],
        scale_observable,
    })
}

/// Viewpoint guess from map primitives: look along the negated mean normal
/// with `+z` as up, positioned at the mean of the centroids pushed 2 m out
/// along their normals.
pub fn coarse_init_heuristic(prims: &[&MapPrimitive]) -> Pose {
    if prims.is_empty() {
        return Pose::identity();
    }
    let mean_normal: Vec3 = prims.iter().map(|p| p.plane.normal).sum::<Vec3>() / prims.len() as f64;
    let forward = if mean_normal.norm() > 1e-9 {
        -mean_normal.normalize()
    } else {
        Vec3::y()
    };
    let center: Vec3 = prims
        .iter()
        .map(|p| p.centroid() + p.plane.normal * 2.0)
        .sum::<Vec3>()
        / prims.len() as f64;
    Pose::new(look_rotation(&forward, &Vec3::z()), center)
}

/// Camera-to-world rotation for a camera looking along `forward` (its `+z`)
/// with image `−y` as close to `up` as possible. Falls back to `+y` as the up
/// vector when `forward` is within 1° of `up`.
pub fn look_rotation(forward: &Vec3, up: &Vec3) -> Mat3 {
    let f = forward.normalize();
    let mut up = up.normalize();
    if line_separation_deg(&f, &up) < 1.0 {
        up = Vec3::y();
    }
    let down = -(up - f * f.dot(&up)).normalize();
    let right = down.cross(&f);
    Mat3::from_columns(&[right, down, f])
}

/// Axis-aligned bounds of a map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn of_map(map: &[MapPrimitive]) -> Option<Bounds> {
        let mut it = map.iter().flat_map(|p| p.boundary.iter());
        let first = *it.next()?;
        let (mut min, mut max) = (first, first);
        for v in it {
            min = min.inf(v);
            max = max.sup(v);
        }
        Some(Bounds { min, max })
    }
}

pub const CLAMP_MARGIN: f64 = 0.5;

/// Clamps the translation into the bounds grown by [`CLAMP_MARGIN`].
pub fn clamp_pose_to_bounds(pose: &Pose, bounds: &Bounds) -> Pose {
    let lo = bounds.min - Vec3::repeat(CLAMP_MARGIN);
    let hi = bounds.max + Vec3::repeat(CLAMP_MARGIN);
    let t = pose.translation.zip_zip_map(&lo, &hi, |v, l, h| v.clamp(l, h));
    Pose::new(pose.rotation, t)
}

fn fallback(corrs: &[PlaneCorrespondence], map: &[MapPrimitive]) -> PoseEstimate {
    let mut referenced: Vec<usize> = corrs.iter().map(|c| c.map_index).collect();
    referenced.sort_unstable();
    referenced.dedup();
    let mut prims: Vec<&MapPrimitive> = referenced.iter().filter_map(|&j| map.get(j)).collect();
    if prims.is_empty() {
        prims = map.iter().collect();
    }
    PoseEstimate {
        pose: coarse_init_heuristic(&prims),
        scale: 1.0,
        inliers: Vec::new(),
        degenerate: true,
        fallback_used: true,
        scale_observable: false,
    }
}

/// Full estimator: RANSAC rotation, Kabsch refinement, translation/scale
/// least squares. Any degeneracy yields the coarse heuristic over the map
/// primitives referenced by `corrs` (all of `map` when `corrs` is empty).
/// `map_index` values index into `map`.
pub fn estimate_pose(
    corrs: &[PlaneCorrespondence],
    map: &[MapPrimitive],
    cfg: &SolverConfig,
) -> PoseEstimate {
    let solve = || -> Result<PoseEstimate, SolverError> {
        let (inliers, _) = ransac_rotation(corrs, cfg)?;
        let chosen: Vec<PlaneCorrespondence> = inliers.iter().map(|&i| corrs[i]).collect();
        let rotation = refine_rotation(&chosen)?;
        let ts = solve_translation_scale(&chosen)?;
        if !(ts.scale > 0.0) || !ts.translation.iter().all(|v| v.is_finite()) {
            return Err(SolverError::RankDeficient(format!("non-positive scale {}", ts.scale)));
        }
        Ok(PoseEstimate {
            pose: Pose::new(rotation, ts.translation),
            scale: ts.scale,
            inliers,
            degenerate: false,
            fallback_used: false,
            scale_observable: ts.scale_observable,
        })
    };
    match solve() {
        Ok(est) => est,
        Err(err) => {
            log::debug!("pose estimation degenerate ({err}); using coarse fallback");
            fallback(corrs, map)
        }
    }
}
