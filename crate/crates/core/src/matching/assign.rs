//! Dual-softmax assignment and mutual-nearest-neighbour extraction.

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tensor::{dot, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix<T = f64> {
    /// `Nq × Nm`.
    pub scores: Mat<T>,
    pub sigma_q: Vec<T>,
    pub sigma_m: Vec<T>,
}

/// `A_ij = σ_i^q σ_j^m · softmax over rows of column j · softmax over
/// columns of row i`.
pub fn assignment_matrix<T: Scalar>(s: &Mat<T>, sigma_q: &[T], sigma_m: &[T]) -> AssignmentMatrix<T> {
    let (nq, nm) = (s.rows, s.cols);
    let mut row_sm = s.clone();
    for i in 0..nq {
        let row = row_sm.row_mut(i);
        softmax(row);
    }
    let mut col_sm = s.clone();
    for j in 0..nm {
        let mut col: Vec<T> = (0..nq).map(|i| s.get(i, j)).collect();
        softmax(&mut col);
        for (i, v) in col.into_iter().enumerate() {
            col_sm.set(i, j, v);
        }
    }
    let scores = Mat::from_fn(nq, nm, |i, j| sigma_q[i] * sigma_m[j] * col_sm.get(i, j) * row_sm.get(i, j));
    AssignmentMatrix {
        scores,
        sigma_q: sigma_q.to_vec(),
        sigma_m: sigma_m.to_vec(),
    }
}

pub(crate) fn softmax<T: Scalar>(v: &mut [T]) {
    let max = v.iter().map(|x| x.value()).fold(f64::NEG_INFINITY, f64::max);
    let shift = T::from_f64(max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - shift).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

/// Assignment from raw embedding dot products scaled by `1/√c`, with every
/// matchability set to one.
pub fn raw_similarity_assignment(query: &Mat<f64>, map: &Mat<f64>) -> AssignmentMatrix<f64> {
    let scale = 1.0 / (query.cols.max(1) as f64).sqrt();
    let s = Mat::from_fn(query.rows, map.rows, |i, j| dot(query.row(i), map.row(j)) * scale);
    assignment_matrix(&s, &vec![1.0; query.rows], &vec![1.0; map.rows])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub query_idx: usize,
    pub map_idx: usize,
    pub score: f64,
}

/// Pairs whose score exceeds `tau` and is the strict maximum of both its
/// row and its column. Output is sorted by query index.
pub fn extract_correspondences(a: &AssignmentMatrix<f64>, tau: f64) -> Vec<Match> {
    let s = &a.scores;
    let mut out = Vec::new();
    for i in 0..s.rows {
        for j in 0..s.cols {
            let v = s.get(i, j);
            if !(v > tau) {
                continue;
            }
            let row_max = (0..s.cols).all(|k| k == j || s.get(i, k) < v);
            let col_max = (0..s.rows).all(|k| k == i || s.get(k, j) < v);
            if row_max && col_max {
                out.push(Match {
                    query_idx: i,
                    map_idx: j,
                    score: v,
                });
            }
        }
    }
    out
}
