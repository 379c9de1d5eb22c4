use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

use super::index_set::SparseIndexSet;
use super::kernels::AttentionOutput;

/// Floating-point allowance on the bound, relative to `Σ_j |v[j, c]|`.
pub const BOUND_SLACK: f64 = 1e-12;

/// Outcome of checking
/// `|dense[i,c] - sparse[i,c]| <= (1 - a_S(i)) * Σ_{j<=i} |v[j,c]|`
/// for every row `i` and output column `c`, where `a_S(i)` is the true
/// attention mass that row `i` puts on its selected keys.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub checked: usize,
    pub violations: usize,
    /// Worst `|diff| - bound`; negative when every entry is inside.
    pub max_excess: f64,
    /// `a_S(i)` per row.
    pub coverage: Vec<f64>,
}

impl BoundCheck {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }

    pub fn mean_coverage(&self) -> f64 {
        self.coverage.iter().sum::<f64>() / self.coverage.len() as f64
    }

    pub fn min_coverage(&self) -> f64 {
        self.coverage.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `dense` must carry row scores (see `dense_causal_attention(.., true)`).
#[allow(clippy::needless_range_loop)]
pub fn check_error_bound(
    dense: &AttentionOutput,
    sparse: &Tensor2D,
    v: &Tensor2D,
    s: &SparseIndexSet,
) -> Result<BoundCheck> {
    let scores = dense
        .row_scores
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("dense output was computed without scores".into()))?;
    let n = dense.out.rows();
    if sparse.shape() != dense.out.shape() || v.rows() != n || s.seq_len() != n {
        return Err(Error::Shape("bound check inputs disagree on shape".into()));
    }
    let dv = v.cols();
    let mut abs_prefix = vec![0.0; dv];
    let mut coverage = Vec::with_capacity(n);
    let mut violations = 0;
    let mut max_excess = f64::NEG_INFINITY;
    for i in 0..n {
        for (acc, x) in abs_prefix.iter_mut().zip(v.row(i)) {
            *acc += x.abs();
        }
        let row = scores[i].as_slice();
        let covered: f64 = s.row_keys(i).iter().map(|&j| row[j]).sum();
        let uncovered = (1.0 - covered).max(0.0);
        for c in 0..dv {
            let diff = (dense.out.get(i, c) - sparse.get(i, c)).abs();
            let bound = uncovered * abs_prefix[c];
            let excess = diff - bound;
            max_excess = max_excess.max(excess);
            if excess > BOUND_SLACK * abs_prefix[c] {
                violations += 1;
            }
        }
        coverage.push(covered);
    }
    Ok(BoundCheck {
        checked: n * dv,
        violations,
        max_excess,
        coverage,
    })
}
