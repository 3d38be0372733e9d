//! Negative log-likelihood matching loss with deep supervision, and its
//! exact gradient with respect to every matcher parameter.

use super::assign::AssignmentMatrix;
use super::labels::MatchLabels;
use super::model::{matcher_forward, MatchError, MatcherWeights};
use super::scalar::{Dual, Scalar};
use super::tensor::Mat;
use crate::geometry::Vec3;

pub const LOG_FLOOR: f64 = 1e-12;

fn mean_log<T: Scalar>(values: impl Iterator<Item = T>) -> T {
    let mut sum = T::zero();
    let mut n = 0usize;
    for v in values {
        sum += v.ln_floored(LOG_FLOOR);
        n += 1;
    }
    if n == 0 {
        T::zero()
    } else {
        sum.scale(1.0 / n as f64)
    }
}

/// Sum over layers of
/// `−(mean log A_ij over M* + ½ mean log(1−σ^q) over U^q + ½ mean log(1−σ^m) over U^m)`.
/// Empty label sets contribute nothing.
pub fn matching_loss<T: Scalar>(layers: &[AssignmentMatrix<T>], labels: &MatchLabels) -> T {
    let mut total = T::zero();
    for a in layers {
        let pos = mean_log(labels.pairs.iter().map(|&(i, j)| a.scores.get(i, j)));
        let uq = mean_log(labels.unmatched_query.iter().map(|&i| T::one() - a.sigma_q[i]));
        let um = mean_log(labels.unmatched_map.iter().map(|&j| T::one() - a.sigma_m[j]));
        total += -(pos + uq.scale(0.5) + um.scale(0.5));
    }
    total
}

/// Inputs of one matching problem.
#[derive(Debug, Clone)]
pub struct MatchProblem<'a> {
    pub query: &'a Mat<f64>,
    pub query_normals: &'a [Vec3],
    pub map: &'a Mat<f64>,
    pub map_normals: &'a [Vec3],
    pub labels: &'a MatchLabels,
}

fn check_labels(p: &MatchProblem) -> Result<(), MatchError> {
    if p.labels.is_consistent(p.query.rows, p.map.rows) {
        Ok(())
    } else {
        Err(MatchError::ShapeMismatch("labels do not fit the problem size".into()))
    }
}

pub fn loss_value(p: &MatchProblem, w: &MatcherWeights<f64>) -> Result<f64, MatchError> {
    check_labels(p)?;
    let out = matcher_forward(p.query, p.query_normals, p.map, p.map_normals, w)?;
    Ok(matching_loss(&out.assignments, p.labels))
}

/// Loss and its gradient in [`MatcherWeights::flatten`] order, one
/// forward-mode pass per parameter.
pub fn loss_gradient(p: &MatchProblem, w: &MatcherWeights<f64>) -> Result<(f64, Vec<f64>), MatchError> {
    check_labels(p)?;
    w.validate()?;
    let q = p.query.map(&mut Dual::constant);
    let m = p.map.map(&mut Dual::constant);
    let n = w.param_count();
    let mut grad = Vec::with_capacity(n);
    let mut value = 0.0;
    for k in 0..n {
        let mut idx = 0;
        let wd = w.map(&mut |v| {
            let d = if idx == k { Dual::variable(v) } else { Dual::constant(v) };
            idx += 1;
            d
        });
        let out = matcher_forward(&q, p.query_normals, &m, p.map_normals, &wd)?;
        let l = matching_loss(&out.assignments, p.labels);
        value = l.v;
        grad.push(l.d);
    }
    Ok((value, grad))
}
