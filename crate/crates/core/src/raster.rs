//! Image-shaped containers: depth maps and binary masks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

/// Depth grid in meters, row-major, with an explicit invalid sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub invalid: f32,
    pub data: Vec<f32>,
}

/// Result of a bilinear lookup: value and its image-space gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearSample {
    pub value: f64,
    pub grad: Vec2,
}

impl DepthMap {
    pub const DEFAULT_INVALID: f32 = 0.0;

    pub fn new(width: usize, height: usize, invalid: f32) -> Self {
        Self {
            width,
            height,
            invalid,
            data: vec![invalid; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, depth: f32) -> Self {
        Self {
            width,
            height,
            invalid: Self::DEFAULT_INVALID,
            data: vec![depth; width * height],
        }
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    /// A stored value counts as valid when it is finite, positive and not the
    /// sentinel.
    #[inline]
    pub fn is_valid_value(&self, v: f32) -> bool {
        v.is_finite() && v > 0.0 && v != self.invalid
    }

    #[inline]
    pub fn at(&self, col: usize, row: usize) -> Option<f64> {
        let v = self.data[self.index(col, row)];
        self.is_valid_value(v).then_some(v as f64)
    }

    #[inline]
    pub fn at_index(&self, idx: usize) -> Option<f64> {
        let v = self.data[idx];
        self.is_valid_value(v).then_some(v as f64)
    }

    pub fn set(&mut self, col: usize, row: usize, depth: f32) {
        let i = self.index(col, row);
        self.data[i] = depth;
    }

    pub fn invalidate(&mut self, idx: usize) {
        self.data[idx] = self.invalid;
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&v| self.is_valid_value(v)).count()
    }

    /// Bilinear interpolation at a continuous pixel location. Returns `None`
    /// outside `[0, w−1] × [0, h−1]` or when any of the four neighbours is
    /// invalid.
    pub fn sample_bilinear(&self, u: &Vec2) -> Option<BilinearSample> {
        if self.width < 2 || self.height < 2 {
            return None;
        }
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(u.x >= 0.0 && u.y >= 0.0 && u.x <= max_x && u.y <= max_y) {
            return None;
        }
        let x0 = (u.x.floor() as usize).min(self.width - 2);
        let y0 = (u.y.floor() as usize).min(self.height - 2);
        let fx = u.x - x0 as f64;
        let fy = u.y - y0 as f64;
        let d00 = self.at(x0, y0)?;
        let d10 = self.at(x0 + 1, y0)?;
        let d01 = self.at(x0, y0 + 1)?;
        let d11 = self.at(x0 + 1, y0 + 1)?;
        let top = d00 + fx * (d10 - d00);
        let bottom = d01 + fx * (d11 - d01);
        let value = top + fy * (bottom - top);
        let gx = (1.0 - fy) * (d10 - d00) + fy * (d11 - d01);
        let gy = bottom - top;
        Some(BilinearSample {
            value,
            grad: Vec2::new(gx, gy),
        })
    }
}

/// Binary pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_indices(width: usize, height: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::new(width, height);
        for i in indices {
            m.bits[i] = true;
        }
        m
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize) {
        self.bits[row * self.width + col] = true;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// Pixel centre of a flat index.
    pub fn pixel(&self, idx: usize) -> Vec2 {
        Vec2::new((idx % self.width) as f64, (idx / self.width) as f64)
    }

    fn check_dims(&self, other: &Mask) -> Result<(), RasterError> {
        if self.width != other.width || self.height != other.height {
            return Err(RasterError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize, RasterError> {
        self.check_dims(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    /// Run-length encoding as `[start, length]` pairs of set pixels.
    pub fn to_runs(&self) -> Vec<[usize; 2]> {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < self.bits.len() {
            if self.bits[i] {
                let start = i;
                while i < self.bits.len() && self.bits[i] {
                    i += 1;
                }
                runs.push([start, i - start]);
            } else {
                i += 1;
            }
        }
        runs
    }

    pub fn from_runs(width: usize, height: usize, runs: &[[usize; 2]]) -> Option<Self> {
        let mut m = Self::new(width, height);
        for &[start, len] in runs {
            if start + len > m.bits.len() {
                return None;
            }
            m.bits[start..start + len].iter_mut().for_each(|b| *b = true);
        }
        Some(m)
    }
}

/// Serialized form of a mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRuns {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<[usize; 2]>,
}

impl From<&Mask> for MaskRuns {
    fn from(m: &Mask) -> Self {
        Self {
            width: m.width,
            height: m.height,
            runs: m.to_runs(),
        }
    }
}

/// `|a ∩ b| / |a ∪ b|`, zero for an empty union.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, RasterError> {
    a.check_dims(b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}
