//! Ground-truth match labels from mask overlap at a known pose.

use serde::{Deserialize, Serialize};

use crate::extraction::{MapPrimitive, QueryPrimitive};
use crate::geometry::{Intrinsics, Pose};
use crate::raster::{mask_iou, Mask, RasterError};
use crate::render::{project_primitive_mask, render_depth};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchLabels {
    /// `(query index, map index)`, at most one entry per query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_query: Vec<usize>,
    pub unmatched_map: Vec<usize>,
}

impl MatchLabels {
    pub fn map_index_of(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|(q, _)| *q == query).map(|&(_, m)| m)
    }

    /// Checks the structural rules against an `nq × nm` problem.
    pub fn is_consistent(&self, nq: usize, nm: usize) -> bool {
        let mut q_seen = vec![false; nq];
        let mut m_paired = vec![false; nm];
        for &(q, m) in &self.pairs {
            if q >= nq || m >= nm || q_seen[q] {
                return false;
            }
            q_seen[q] = true;
            m_paired[m] = true;
        }
        let q_ok = self.unmatched_query.iter().all(|&q| q < nq && !q_seen[q]);
        let m_ok = self.unmatched_map.iter().all(|&m| m < nm && !m_paired[m]);
        q_ok && m_ok
    }
}

/// Map masks projected at `pose` against the shared z-buffer, in map order.
pub fn project_map_masks(map: &[MapPrimitive], pose: &Pose, k: &Intrinsics) -> Vec<Mask> {
    let zbuf = render_depth(map, pose, k);
    map.iter().map(|p| project_primitive_mask(p, pose, k, &zbuf)).collect()
}

/// `ious[i][j]` between query mask `i` and projected map mask `j`.
pub fn iou_matrix(query: &[QueryPrimitive], projected: &[Mask]) -> Result<Vec<Vec<f64>>, RasterError> {
    query
        .iter()
        .map(|q| projected.iter().map(|m| mask_iou(&q.mask, m)).collect())
        .collect()
}

/// Each query takes its highest-IoU map primitive (lowest index on ties)
/// when that IoU reaches `tau_star`; map primitives never reaching
/// `tau_star` with any query are unmatchable.
pub fn labels_from_ious(ious: &[Vec<f64>], n_map: usize, tau_star: f64) -> MatchLabels {
    let mut labels = MatchLabels::default();
    let mut reached = vec![false; n_map];
    for (i, row) in ious.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, &v) in row.iter().enumerate() {
            if v >= tau_star {
                reached[j] = true;
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) if v >= tau_star => labels.pairs.push((i, j)),
            _ => labels.unmatched_query.push(i),
        }
    }
    labels.unmatched_map = (0..n_map).filter(|&j| !reached[j]).collect();
    labels
}

pub fn generate_labels(
    query: &[QueryPrimitive],
    map: &[MapPrimitive],
    gt_pose: &Pose,
    k: &Intrinsics,
    tau_star: f64,
) -> Result<MatchLabels, RasterError> {
    let projected = project_map_masks(map, gt_pose, k);
    let ious = iou_matrix(query, &projected)?;
    Ok(labels_from_ious(&ious, map.len(), tau_star))
}
