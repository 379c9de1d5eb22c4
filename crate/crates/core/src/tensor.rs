//! Dense row-major matrices and the small set of reductions the attention
//! code is built from: stable softmax, block pooling, descending argsort and
//! minimal prefix selection.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a [`ProbVector`].
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    /// Builds a matrix, rejecting length mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    /// Copies a contiguous range of rows into a new matrix.
    pub fn slice_rows(&self, range: Range<usize>) -> Self {
        assert!(range.end <= self.rows, "row range out of bounds");
        Self {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    /// Rounds every entry to the nearest `f32`, the on-disk precision.
    pub fn round_to_f32(mut self) -> Self {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
        self
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entry {i} is {}",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("sums to {total}")));
        }
        Ok(Self(probs))
    }

    /// Normalizes nonnegative weights. Fails when every weight is zero.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidDistribution(format!(
                "weights sum to {total}"
            )));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(len: usize) -> Result<Self> {
        Self::from_weights(vec![1.0; len])
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Softmax over `logits`, optionally restricted to positions where `mask` is
/// `true`. Masked-out positions get exactly zero.
pub fn stable_softmax(logits: &[f64], mask: Option<&[bool]>) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::EmptyAttentionRow { row: None });
    }
    if let Some(mask) = mask {
        if mask.len() != logits.len() {
            return Err(Error::Shape(format!(
                "mask length {} != logits length {}",
                mask.len(),
                logits.len()
            )));
        }
    }
    let visible = |i: usize| mask.is_none_or(|m| m[i]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| visible(i))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyAttentionRow { row: None });
    }
    let mut exps: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &x)| if visible(i) { (x - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    for e in &mut exps {
        *e /= total;
    }
    Ok(ProbVector(exps))
}

/// Which extent of a matrix a pooling window runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Sum,
}

/// Number of blocks of width `block` needed to tile `len`.
#[inline]
pub fn block_count(len: usize, block: usize) -> usize {
    len.div_ceil(block)
}

/// Pools `m` in windows of `block` along `axis`. A ragged final window is
/// pooled over its actual length.
pub fn block_pool(m: &Tensor2D, block: usize, axis: Axis, mode: PoolMode) -> Result<Tensor2D> {
    if block == 0 {
        return Err(Error::InvalidArgument("pooling block must be >= 1".into()));
    }
    let finish = |sum: f64, len: usize| match mode {
        PoolMode::Sum => sum,
        PoolMode::Avg => sum / len as f64,
    };
    Ok(match axis {
        Axis::Rows => {
            let out_rows = block_count(m.rows, block);
            let mut out = Tensor2D::zeros(out_rows, m.cols);
            for b in 0..out_rows {
                let lo = b * block;
                let hi = (lo + block).min(m.rows);
                for c in 0..m.cols {
                    let sum: f64 = (lo..hi).map(|r| m.get(r, c)).sum();
                    out.set(b, c, finish(sum, hi - lo));
                }
            }
            out
        }
        Axis::Cols => {
            let out_cols = block_count(m.cols, block);
            let mut out = Tensor2D::zeros(m.rows, out_cols);
            for r in 0..m.rows {
                let row = m.row(r);
                for b in 0..out_cols {
                    let lo = b * block;
                    let hi = (lo + block).min(m.cols);
                    let sum: f64 = row[lo..hi].iter().sum();
                    out.set(r, b, finish(sum, hi - lo));
                }
            }
            out
        }
    })
}

/// Indices of `v` ordered by decreasing value; ties keep the lower index
/// first.
pub fn argsort_desc(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    // sort_by is stable, so equal values keep ascending index order
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx
}

/// Smallest `k` such that the first `k` entries of `sorted` sum to at least
/// `gamma`. Falls back to the full length when rounding leaves the total
/// below `gamma`.
pub fn min_prefix_count(sorted: &[f64], gamma: f64) -> Result<usize> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "coverage threshold must be positive, got {gamma}"
        )));
    }
    if sorted.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot select from an empty list".into(),
        ));
    }
    let mut acc = 0.0;
    for (i, &p) in sorted.iter().enumerate() {
        acc += p;
        if acc >= gamma {
            return Ok(i + 1);
        }
    }
    Ok(sorted.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_single_visible() {
        let p = stable_softmax(&[0.0; 4], None).unwrap();
        assert_eq!(p.as_slice(), &[0.25; 4]);
        let p = stable_softmax(&[5.0, 5.0], Some(&[true, false])).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_all_masked_is_empty_row() {
        let err = stable_softmax(&[1.0, 2.0], Some(&[false, false])).unwrap_err();
        assert!(err.to_string().contains("empty attention row"));
        assert!(stable_softmax(&[], None).is_err());
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let p = stable_softmax(&[1e300, -1e300, 0.0], None).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_hand_values() {
        let m = Tensor2D::new(1, 4, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let s = block_pool(&m, 2, Axis::Cols, PoolMode::Sum).unwrap();
        assert_eq!(s.data(), &[4.0, 12.0]);

        let m = Tensor2D::new(1, 5, vec![1.0, 2.0, 3.0, 4.0, 10.0]).unwrap();
        let a = block_pool(&m, 2, Axis::Cols, PoolMode::Avg).unwrap();
        // explicit loop over each window, ragged tail averages one entry
        let mut expect = Vec::new();
        for lo in (0..5).step_by(2) {
            let hi = (lo + 2).min(5);
            let mut s = 0.0;
            for j in lo..hi {
                s += m.get(0, j);
            }
            expect.push(s / (hi - lo) as f64);
        }
        assert_eq!(a.data(), expect.as_slice());
        assert_eq!(a.get(0, 2), 10.0);
    }

    #[test]
    fn pool_constant_and_rows_axis() {
        let m = Tensor2D::from_fn(7, 3, |_, _| 2.5);
        let p = block_pool(&m, 3, Axis::Rows, PoolMode::Avg).unwrap();
        assert_eq!(p.shape(), (3, 3));
        assert!(p.data().iter().all(|&x| x == 2.5));
        assert!(block_pool(&m, 0, Axis::Rows, PoolMode::Avg).is_err());
    }

    #[test]
    fn argsort_examples() {
        assert_eq!(argsort_desc(&[0.2, 0.5, 0.3]), vec![1, 2, 0]);
        assert_eq!(argsort_desc(&[1.0; 5]), vec![0, 1, 2, 3, 4]);
        assert!(argsort_desc(&[]).is_empty());
    }

    #[test]
    fn prefix_count_examples() {
        assert_eq!(min_prefix_count(&[0.5, 0.3, 0.2], 0.7).unwrap(), 2);
        assert_eq!(min_prefix_count(&[1.0], 0.95).unwrap(), 1);
        assert_eq!(min_prefix_count(&[0.1; 10], 0.95).unwrap(), 10);
        // more than the available mass selects everything
        assert_eq!(min_prefix_count(&[0.5, 0.5], 1.5).unwrap(), 2);
        assert!(min_prefix_count(&[0.5, 0.5], 0.0).is_err());
        assert!(min_prefix_count(&[0.5, 0.5], -1.0).is_err());
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        assert!(ProbVector::from_weights(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn tensor_rejects_bad_input() {
        assert!(Tensor2D::new(2, 2, vec![0.0; 3]).is_err());
        assert!(matches!(
            Tensor2D::new(1, 2, vec![0.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
    }
}
