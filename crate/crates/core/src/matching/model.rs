//! Transformer matcher over plane embeddings: alternating self-attention
//! (rotary encoding driven by plane-normal differences) and cross-attention,
//! with a similarity/matchability head after every layer.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::assign::{assignment_matrix, softmax, AssignmentMatrix};
use super::scalar::Scalar;
use super::tensor::{dot, Mat};
use crate::geometry::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid matcher configuration: {0}")]
    InvalidConfig(String),
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// `out × in`.
    pub weight: Mat<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        (0..self.weight.rows)
            .map(|o| dot(self.weight.row(o), x) + self.bias[o])
            .collect()
    }

    fn check(&self, name: &str, out: Option<usize>, inp: usize) -> Result<(), MatchError> {
        let ok = self.weight.cols == inp
            && out.is_none_or(|o| self.weight.rows == o)
            && self.bias.len() == self.weight.rows
            && self.weight.data.len() == self.weight.rows * self.weight.cols;
        if ok {
            Ok(())
        } else {
            Err(MatchError::ShapeMismatch(format!(
                "{name}: {}x{} weight, {} bias, expected input {inp}",
                self.weight.rows,
                self.weight.cols,
                self.bias.len()
            )))
        }
    }
}

impl<T: Copy> Linear<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(T) -> U) -> Linear<U> {
        Linear {
            weight: self.weight.map(f),
            bias: self.bias.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Attention unit followed by a feed-forward unit, both pre-normalized
/// and residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

impl<T: Copy> BlockWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(T) -> U) -> BlockWeights<U> {
        BlockWeights {
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            output: self.output.map(f),
            ffn_in: self.ffn_in.map(f),
            ffn_out: self.ffn_out.map(f),
        }
    }
}

impl<T: Scalar> BlockWeights<T> {
    fn check(&self, c: usize) -> Result<(), MatchError> {
        self.query.check("query", Some(c), c)?;
        self.key.check("key", Some(c), c)?;
        self.value.check("value", Some(c), c)?;
        self.output.check("output", Some(c), c)?;
        self.ffn_in.check("ffn_in", None, c)?;
        self.ffn_out.check("ffn_out", Some(c), self.ffn_in.weight.rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights<T> {
    pub self_attention: BlockWeights<T>,
    pub cross_attention: BlockWeights<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherWeights<T = f64> {
    pub c: usize,
    pub heads: usize,
    pub layers: Vec<LayerWeights<T>>,
    /// `c/2` basis vectors; head `h` owns the slice `[h·c/(2H), (h+1)·c/(2H))`.
    pub rope_bases: Vec<[T; 3]>,
    pub similarity_proj: Linear<T>,
    /// `1 × c`.
    pub matchability_proj: Linear<T>,
}

impl<T: Copy> MatcherWeights<T> {
    /// Applies `f` to every parameter in a fixed order: layers (self then
    /// cross; query, key, value, output, ffn_in, ffn_out; weight then bias),
    /// rope bases, similarity projection, matchability projection.
    pub fn map<U>(&self, f: &mut impl FnMut(T) -> U) -> MatcherWeights<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerWeights {
                self_attention: l.self_attention.map(f),
                cross_attention: l.cross_attention.map(f),
            })
            .collect();
        let rope_bases = self.rope_bases.iter().map(|b| [f(b[0]), f(b[1]), f(b[2])]).collect();
        MatcherWeights {
            c: self.c,
            heads: self.heads,
            layers,
            rope_bases,
            similarity_proj: self.similarity_proj.map(f),
            matchability_proj: self.matchability_proj.map(f),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.map(&mut |v| out.push(v));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.map(&mut |_| n += 1);
        n
    }

    /// Same structure with parameters taken from `flat` in [`Self::map`] order.
    pub fn with_params<U: Copy>(&self, flat: &[U]) -> Result<MatcherWeights<U>, MatchError> {
        let n = self.param_count();
        if flat.len() != n {
            return Err(MatchError::ShapeMismatch(format!(
                "{} parameters given, {n} expected",
                flat.len()
            )));
        }
        let mut it = flat.iter();
        Ok(self.map(&mut |_| *it.next().expect("length checked")))
    }
}

impl MatcherWeights<f64> {
    /// Seeded Gaussian initialization (σ = 1/√c) with zero biases and a
    /// feed-forward hidden width of `2c`.
    pub fn random(c: usize, heads: usize, n_layers: usize, seed: u64) -> Result<Self, MatchError> {
        check_dims(c, heads, n_layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (c as f64).sqrt()).expect("positive sigma");
        let mut linear = |out: usize, inp: usize| Linear {
            weight: Mat::from_fn(out, inp, |_, _| normal.sample(&mut rng)),
            bias: vec![0.0; out],
        };
        let mut block = || BlockWeights {
            query: linear(c, c),
            key: linear(c, c),
            value: linear(c, c),
            output: linear(c, c),
            ffn_in: linear(2 * c, c),
            ffn_out: linear(c, 2 * c),
        };
        let layers = (0..n_layers)
            .map(|_| LayerWeights {
                self_attention: block(),
                cross_attention: block(),
            })
            .collect();
        let similarity_proj = linear(c, c);
        let matchability_proj = linear(1, c);
        let rope_bases = (0..c / 2)
            .map(|_| {
                [
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                ]
            })
            .collect();
        Ok(Self {
            c,
            heads,
            layers,
            rope_bases,
            similarity_proj,
            matchability_proj,
        })
    }
}

fn check_dims(c: usize, heads: usize, n_layers: usize) -> Result<(), MatchError> {
    if n_layers == 0 {
        return Err(MatchError::InvalidConfig("at least one layer is required".into()));
    }
    if heads == 0 || c == 0 || c % (2 * heads) != 0 {
        return Err(MatchError::InvalidConfig(format!(
            "embedding width {c} must be a positive multiple of 2 x {heads} heads"
        )));
    }
    Ok(())
}

impl<T: Scalar> MatcherWeights<T> {
    pub fn validate(&self) -> Result<(), MatchError> {
        check_dims(self.c, self.heads, self.layers.len())?;
        let c = self.c;
        for l in &self.layers {
            l.self_attention.check(c)?;
            l.cross_attention.check(c)?;
        }
        if self.rope_bases.len() != c / 2 {
            return Err(MatchError::ShapeMismatch(format!(
                "{} rope bases for width {c}",
                self.rope_bases.len()
            )));
        }
        self.similarity_proj.check("similarity_proj", None, c)?;
        self.matchability_proj.check("matchability_proj", Some(1), c)
    }
}

/// Block-diagonal `c × c` rotation: block `k` rotates by `θ_k = b_kᵀn`.
pub fn rope_matrix(basis: &[[f64; 3]], n: &Vec3) -> DMatrix<f64> {
    let c = basis.len() * 2;
    let mut m = DMatrix::zeros(c, c);
    for (k, b) in basis.iter().enumerate() {
        let theta = b[0] * n.x + b[1] * n.y + b[2] * n.z;
        let (s, co) = theta.sin_cos();
        m[(2 * k, 2 * k)] = co;
        m[(2 * k, 2 * k + 1)] = -s;
        m[(2 * k + 1, 2 * k)] = s;
        m[(2 * k + 1, 2 * k + 1)] = co;
    }
    m
}

/// Rotates consecutive pairs of `x` by the rope angles for `dn`.
fn rope_apply<T: Scalar>(basis: &[[T; 3]], dn: &Vec3, x: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for (k, b) in basis.iter().enumerate() {
        let theta = b[0].scale(dn.x) + b[1].scale(dn.y) + b[2].scale(dn.z);
        let (s, co) = (theta.sin(), theta.cos());
        let (a, bb) = (x[2 * k], x[2 * k + 1]);
        out.push(co * a - s * bb);
        out.push(s * a + co * bb);
    }
    out
}

/// Unscaled bilinear score `q_iᵀ RoPE(n_j − n_i) k_j`.
pub fn attention_score(q: &[f64], k: &[f64], n_i: &Vec3, n_j: &Vec3, basis: &[[f64; 3]]) -> f64 {
    dot(q, &rope_apply(basis, &(n_j - n_i), k))
}

fn layer_norm<T: Scalar>(x: &[T]) -> Vec<T> {
    let n = x.len() as f64;
    let mut mean = T::zero();
    for &v in x {
        mean += v;
    }
    let mean = mean.scale(1.0 / n);
    let mut var = T::zero();
    for &v in x {
        var += (v - mean) * (v - mean);
    }
    let denom = (var.scale(1.0 / n) + T::from_f64(LAYER_NORM_EPS)).sqrt();
    x.iter().map(|&v| (v - mean) / denom).collect()
}

fn gelu<T: Scalar>(x: T) -> T {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let inner = (x + x * x * x.scale(0.044715)).scale(k);
    x * (T::one() + inner.tanh()).scale(0.5)
}

/// Multi-head attention of `targets` over `sources`. With `rope` set, keys
/// are rotated by the normal difference `n_j − n_i` (self-attention only).
fn attend<T: Scalar>(
    w: &BlockWeights<T>,
    heads: usize,
    targets: &[Vec<T>],
    sources: &[Vec<T>],
    rope: Option<(&[[T; 3]], &[Vec3], &[Vec3])>,
) -> Vec<Vec<T>> {
    let c = w.query.weight.rows;
    let dh = c / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let q: Vec<Vec<T>> = targets.iter().map(|x| w.query.apply(x)).collect();
    let k: Vec<Vec<T>> = sources.iter().map(|x| w.key.apply(x)).collect();
    let v: Vec<Vec<T>> = sources.iter().map(|x| w.value.apply(x)).collect();
    let mut out = Vec::with_capacity(targets.len());
    let mut weights = vec![T::zero(); sources.len()];
    for (i, qi) in q.iter().enumerate() {
        let mut mixed = vec![T::zero(); c];
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            for (j, kj) in k.iter().enumerate() {
                let s = match rope {
                    Some((bases, tn, sn)) => {
                        let bh = &bases[h * dh / 2..(h + 1) * dh / 2];
                        let rotated = rope_apply(bh, &(sn[j] - tn[i]), &kj[span.clone()]);
                        dot(&qi[span.clone()], &rotated)
                    }
                    None => dot(&qi[span.clone()], &kj[span.clone()]),
                };
                weights[j] = s.scale(inv_sqrt);
            }
            softmax(&mut weights);
            for (j, vj) in v.iter().enumerate() {
                for p in span.clone() {
                    mixed[p] += weights[j] * vj[p];
                }
            }
        }
        out.push(w.output.apply(&mixed));
    }
    out
}

fn feed_forward<T: Scalar>(w: &BlockWeights<T>, x: &mut [Vec<T>]) {
    for row in x.iter_mut() {
        let hidden: Vec<T> = w.ffn_in.apply(&layer_norm(row)).into_iter().map(gelu).collect();
        for (r, d) in row.iter_mut().zip(w.ffn_out.apply(&hidden)) {
            *r += d;
        }
    }
}

fn add_rows<T: Scalar>(x: &mut [Vec<T>], delta: Vec<Vec<T>>) {
    for (row, d) in x.iter_mut().zip(delta) {
        for (a, b) in row.iter_mut().zip(d) {
            *a += b;
        }
    }
}

/// `S_ij = P(f_i^q)·P(f_j^m)` and `σ = sigmoid(w·f + b)` on both sides.
pub fn similarity_and_matchability<T: Scalar>(
    query: &Mat<T>,
    map: &Mat<T>,
    weights: &MatcherWeights<T>,
) -> (Mat<T>, Vec<T>, Vec<T>) {
    let pq: Vec<Vec<T>> = (0..query.rows).map(|i| weights.similarity_proj.apply(query.row(i))).collect();
    let pm: Vec<Vec<T>> = (0..map.rows).map(|j| weights.similarity_proj.apply(map.row(j))).collect();
    let s = Mat::from_fn(query.rows, map.rows, |i, j| dot(&pq[i], &pm[j]));
    let sig = |m: &Mat<T>| -> Vec<T> {
        (0..m.rows)
            .map(|i| weights.matchability_proj.apply(m.row(i))[0].sigmoid())
            .collect()
    };
    (s, sig(query), sig(map))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherOutput<T = f64> {
    pub query: Mat<T>,
    pub map: Mat<T>,
    /// One assignment per layer, last layer last.
    pub assignments: Vec<AssignmentMatrix<T>>,
}

fn rows_of<T: Copy>(m: &Mat<T>) -> Vec<Vec<T>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

pub fn matcher_forward<T: Scalar>(
    query: &Mat<T>,
    query_normals: &[Vec3],
    map: &Mat<T>,
    map_normals: &[Vec3],
    weights: &MatcherWeights<T>,
) -> Result<MatcherOutput<T>, MatchError> {
    weights.validate()?;
    let c = weights.c;
    if query.rows == 0 || map.rows == 0 {
        return Err(MatchError::ShapeMismatch("both sides need at least one primitive".into()));
    }
    if query.cols != c || map.cols != c {
        return Err(MatchError::ShapeMismatch(format!(
            "embedding widths {} and {}, expected {c}",
            query.cols, map.cols
        )));
    }
    if query_normals.len() != query.rows || map_normals.len() != map.rows {
        return Err(MatchError::ShapeMismatch("one normal per primitive required".into()));
    }
    let mut xq = rows_of(query);
    let mut xm = rows_of(map);
    let mut assignments = Vec::with_capacity(weights.layers.len());
    let bases = weights.rope_bases.as_slice();
    for layer in &weights.layers {
        let sa = &layer.self_attention;
        let nq: Vec<Vec<T>> = xq.iter().map(|r| layer_norm(r)).collect();
        let dq = attend(sa, weights.heads, &nq, &nq, Some((bases, query_normals, query_normals)));
        add_rows(&mut xq, dq);
        feed_forward(sa, &mut xq);
        let nm: Vec<Vec<T>> = xm.iter().map(|r| layer_norm(r)).collect();
        let dm = attend(sa, weights.heads, &nm, &nm, Some((bases, map_normals, map_normals)));
        add_rows(&mut xm, dm);
        feed_forward(sa, &mut xm);

        let ca = &layer.cross_attention;
        let nq: Vec<Vec<T>> = xq.iter().map(|r| layer_norm(r)).collect();
        let nm: Vec<Vec<T>> = xm.iter().map(|r| layer_norm(r)).collect();
        let dq = attend(ca, weights.heads, &nq, &nm, None);
        let dm = attend(ca, weights.heads, &nm, &nq, None);
        add_rows(&mut xq, dq);
        add_rows(&mut xm, dm);
        feed_forward(ca, &mut xq);
        feed_forward(ca, &mut xm);

        let q_mat = Mat::from_rows(&xq).expect("uniform width");
        let m_mat = Mat::from_rows(&xm).expect("uniform width");
        let (s, sq, sm) = similarity_and_matchability(&q_mat, &m_mat, weights);
        assignments.push(assignment_matrix(&s, &sq, &sm));
    }
    Ok(MatcherOutput {
        query: Mat::from_rows(&xq).expect("uniform width"),
        map: Mat::from_rows(&xm).expect("uniform width"),
        assignments,
    })
}
