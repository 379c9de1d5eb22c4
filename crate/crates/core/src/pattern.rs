//! Per-head pattern determination.
//!
//! A block of representative queries is scored two ways: once with pooled
//! queries against pooled keys (the cheap estimate a query-specific head
//! would rely on), and once exactly, with the exact scores summed per key
//! block. When the two block distributions are within `tau` in
//! Jensen-Shannon distance the estimate is trusted and the head is
//! query-specific; otherwise the head falls back to vertical-slash.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    block_count, block_pool, dot, stable_softmax, Axis, PoolMode, ProbVector, Tensor2D,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepresentativePosition {
    /// The final `block` query rows.
    #[default]
    Last,
    /// A `block`-row window centred in the sequence (ablation only).
    Middle,
}

/// A contiguous window of query rows and where it starts.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeQueries {
    pub start: usize,
    pub rows: Tensor2D,
}

impl RepresentativeQueries {
    /// Global position of the last representative row.
    pub fn last_position(&self) -> usize {
        self.start + self.rows.rows() - 1
    }
}

pub fn select_representative_queries(
    q: &Tensor2D,
    block: usize,
    position: RepresentativePosition,
) -> RepresentativeQueries {
    let n = q.rows();
    let len = block.min(n);
    let start = match position {
        RepresentativePosition::Last => n - len,
        RepresentativePosition::Middle => (n - len) / 2,
    };
    RepresentativeQueries {
        start,
        rows: q.slice_rows(start..start + len),
    }
}

/// Exact causal attention of the representative rows against every key.
/// Row `r` sits at global position `start + r`; entries past it are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeAttention {
    pub start: usize,
    pub scores: Tensor2D,
}

pub fn representative_attention(
    reps: &RepresentativeQueries,
    k: &Tensor2D,
) -> Result<RepresentativeAttention> {
    if reps.rows.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "query dim {} != key dim {}",
            reps.rows.cols(),
            k.cols()
        )));
    }
    if reps.last_position() >= k.rows() {
        return Err(Error::Shape(
            "representative rows extend past the keys".into(),
        ));
    }
    let n = k.rows();
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let mut scores = Tensor2D::zeros(reps.rows.rows(), n);
    for r in 0..reps.rows.rows() {
        let pos = reps.start + r;
        let qr = reps.rows.row(r);
        let logits: Vec<f64> = (0..=pos).map(|j| dot(qr, k.row(j)) * scale).collect();
        let probs = stable_softmax(&logits, None)?;
        scores.row_mut(r)[..=pos].copy_from_slice(probs.as_slice());
    }
    Ok(RepresentativeAttention {
        start: reps.start,
        scores,
    })
}

/// Softmax of the mean representative query against block-averaged keys.
/// Covers the key blocks visible to the last representative row, which for
/// the default trailing window is every block.
pub fn estimated_block_distribution(
    reps: &RepresentativeQueries,
    k: &Tensor2D,
    block: usize,
) -> Result<ProbVector> {
    if reps.rows.cols() != k.cols() {
        return Err(Error::Shape("query and key dims differ".into()));
    }
    let visible = reps.last_position() / block + 1;
    let pooled_q = block_pool(&reps.rows, reps.rows.rows(), Axis::Rows, PoolMode::Avg)?;
    let pooled_k = block_pool(k, block, Axis::Rows, PoolMode::Avg)?;
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let logits: Vec<f64> = (0..visible)
        .map(|b| dot(pooled_q.row(0), pooled_k.row(b)) * scale)
        .collect();
    stable_softmax(&logits, None)
}

/// Exact attention summed per key block, averaged over representative rows
/// and renormalized.
pub fn true_block_distribution(
    reps: &RepresentativeQueries,
    k: &Tensor2D,
    block: usize,
) -> Result<ProbVector> {
    let att = representative_attention(reps, k)?;
    true_block_distribution_from(&att, block)
}

pub fn true_block_distribution_from(
    att: &RepresentativeAttention,
    block: usize,
) -> Result<ProbVector> {
    if block == 0 {
        return Err(Error::InvalidArgument("block must be >= 1".into()));
    }
    let rows = att.scores.rows();
    let visible = (att.start + rows - 1) / block + 1;
    let pooled = block_pool(&att.scores, block, Axis::Cols, PoolMode::Sum)?;
    let mut mass = vec![0.0; visible];
    for r in 0..rows {
        for (m, x) in mass.iter_mut().zip(pooled.row(r)) {
            *m += x;
        }
    }
    for m in &mut mass {
        *m /= rows as f64;
    }
    ProbVector::from_weights(mass)
}

/// Square root of the base-2 Jensen-Shannon divergence; lies in `[0, 1]`.
pub fn js_distance(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (2.0 * x / (x + y)).log2())
            .sum()
    };
    let (p, q) = (p.as_slice(), q.as_slice());
    let jsd = 0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p);
    Ok(jsd.max(0.0).sqrt().min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    QuerySpecific,
    VerticalSlash,
}

impl PatternKind {
    /// Heatmap code: 0 for vertical-slash, 1 for query-specific.
    pub fn code(self) -> u8 {
        match self {
            PatternKind::VerticalSlash => 0,
            PatternKind::QuerySpecific => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternDecision {
    pub kind: PatternKind,
    pub js_distance: f64,
    pub tau: f64,
}

impl PatternDecision {
    /// Query-specific exactly when the distance is strictly below `tau`.
    pub fn from_distance(js_distance: f64, tau: f64) -> Self {
        let kind = if js_distance < tau {
            PatternKind::QuerySpecific
        } else {
            PatternKind::VerticalSlash
        };
        Self {
            kind,
            js_distance,
            tau,
        }
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!(
            "tau must lie in [0, 1], got {tau}"
        )));
    }
    Ok(())
}

/// Classifies a head from precomputed representative scores.
pub fn decide_from_attention(
    reps: &RepresentativeQueries,
    att: &RepresentativeAttention,
    k: &Tensor2D,
    block: usize,
    tau: f64,
) -> Result<PatternDecision> {
    check_tau(tau)?;
    let estimated = estimated_block_distribution(reps, k, block)?;
    let exact = true_block_distribution_from(att, block)?;
    Ok(PatternDecision::from_distance(
        js_distance(&estimated, &exact)?,
        tau,
    ))
}

pub fn decide_pattern(
    q: &Tensor2D,
    k: &Tensor2D,
    block: usize,
    tau: f64,
) -> Result<PatternDecision> {
    if block == 0 {
        return Err(Error::InvalidArgument("block must be >= 1".into()));
    }
    if q.rows() == 0 {
        return Err(Error::Shape("no query rows".into()));
    }
    let reps = select_representative_queries(q, block, RepresentativePosition::Last);
    let att = representative_attention(&reps, k)?;
    decide_from_attention(&reps, &att, k, block, tau)
}

/// Number of key blocks seen by the representative window.
pub fn visible_blocks(reps: &RepresentativeQueries, block: usize) -> usize {
    block_count(reps.last_position() + 1, block)
}
