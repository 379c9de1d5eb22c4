//! Per-head orchestration: decide the pattern, select indices, run the
//! streaming sparse kernel, and account for the work done.

use serde::{Deserialize, Serialize};

use crate::attention::{
    block_sparse_attention_stream, causal_pair_count, check_error_bound, dense_causal_attention,
    max_abs_diff, relative_l2, AttentionOutput, SparseIndexSet,
};
use crate::error::{Error, Result};
use crate::pattern::{
    check_tau, decide_from_attention, representative_attention, select_representative_queries,
    PatternDecision, RepresentativeAttention, RepresentativePosition, RepresentativeQueries,
};
use crate::selection::{
    block_estimated_attention, select_query_aware, select_vertical_slash, vertical_slash_scores,
    BudgetConfig, IndexSelection,
};
use crate::tensor::Tensor2D;

/// Operations per (representative row, key) spent on pattern search:
/// exponent, normalization, block sum and the divergence term.
pub const PATTERN_SEARCH_OPS: u64 = 4;
/// Operations per `n log2 n` spent sorting and building indices.
pub const INDEX_BUILD_OPS: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub tau: f64,
    pub block_size: usize,
    pub budget: BudgetConfig,
    pub representative: RepresentativePosition,
    /// Also run the dense oracle (quadratic) and fill the error fields.
    pub collect_error_metrics: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            block_size: 128,
            budget: BudgetConfig::default(),
            representative: RepresentativePosition::Last,
            collect_error_metrics: false,
        }
    }
}

impl HeadConfig {
    pub fn gamma(&self) -> f64 {
        self.budget.gamma
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.budget.gamma = gamma;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::InvalidArgument("block size must be >= 1".into()));
        }
        check_tau(self.tau)?;
        self.budget.validate()
    }
}

/// Modeled operation counts for one head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopRecord {
    pub representative: u64,
    pub pattern_search: u64,
    pub index_build: u64,
    pub sparse_attention: u64,
    pub dense_baseline: u64,
    pub total: u64,
    pub speedup: f64,
}

/// Cost model: representative scores `2·b·n·d`, pattern search
/// `PATTERN_SEARCH_OPS·b·n`, index build `INDEX_BUILD_OPS·n·⌈log2 n⌉`,
/// sparse attention `4·|S|·d` (QKᵀ and PV, multiply-add counted as two),
/// against a dense causal baseline of `4·n(n+1)/2·d`.
pub fn count_flops(n: usize, d: usize, block: usize, s: &SparseIndexSet) -> FlopRecord {
    let (n64, d64) = (n as u64, d as u64);
    let b = block.min(n) as u64;
    let log_n = if n > 1 {
        (n64 - 1).ilog2() as u64 + 1
    } else {
        0
    };
    let representative = 2 * b * n64 * d64;
    let pattern_search = PATTERN_SEARCH_OPS * b * n64;
    let index_build = INDEX_BUILD_OPS * n64 * log_n;
    let sparse_attention = 4 * s.pair_count() * d64;
    let dense_baseline = 4 * causal_pair_count(n) * d64;
    let total = representative + pattern_search + index_build + sparse_attention;
    FlopRecord {
        representative,
        pattern_search,
        index_build,
        sparse_attention,
        dense_baseline,
        total,
        speedup: dense_baseline as f64 / total as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub pattern: PatternDecision,
    pub selected_tokens: u64,
    pub total_causal_pairs: u64,
    pub sparsity_ratio: f64,
    pub estimated_coverage: f64,
    pub true_coverage: Option<f64>,
    pub flops: FlopRecord,
    pub error_linf: Option<f64>,
    /// Relative L2 error against the dense oracle.
    pub error_l2: Option<f64>,
    /// Entries breaking the per-row error bound, when the oracle ran.
    pub bound_violations: Option<usize>,
}

/// Lazily computed representative scores; `passes` counts evaluations.
struct RepresentativeCache<'a> {
    q: &'a Tensor2D,
    k: &'a Tensor2D,
    block: usize,
    position: RepresentativePosition,
    value: Option<(RepresentativeQueries, RepresentativeAttention)>,
    passes: usize,
}

impl<'a> RepresentativeCache<'a> {
    fn get(&mut self) -> Result<&(RepresentativeQueries, RepresentativeAttention)> {
        if self.value.is_none() {
            let reps = select_representative_queries(self.q, self.block, self.position);
            let att = representative_attention(&reps, self.k)?;
            self.passes += 1;
            self.value = Some((reps, att));
        }
        Ok(self.value.as_ref().expect("filled above"))
    }
}

/// Pattern decision and index set for one head, without the attention
/// evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPlan {
    pub decision: PatternDecision,
    /// `None` when the head fits in one block and runs dense.
    pub selection: Option<IndexSelection>,
    pub set: SparseIndexSet,
    pub estimated_coverage: f64,
    /// Times the representative attention was evaluated.
    pub representative_passes: usize,
}

pub fn plan_head(q: &Tensor2D, k: &Tensor2D, cfg: &HeadConfig) -> Result<HeadPlan> {
    cfg.validate()?;
    if q.rows() == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    if q.shape() != k.shape() {
        return Err(Error::Shape(format!(
            "queries {:?} and keys {:?} differ in shape",
            q.shape(),
            k.shape()
        )));
    }
    let n = q.rows();
    let block = cfg.block_size;
    let mut cache = RepresentativeCache {
        q,
        k,
        block,
        position: cfg.representative,
        value: None,
        passes: 0,
    };
    let decision = {
        let (reps, att) = cache.get()?;
        decide_from_attention(reps, att, k, block, cfg.tau)?
    };
    if n <= block {
        return Ok(HeadPlan {
            decision,
            selection: None,
            set: SparseIndexSet::full(n, block)?,
            estimated_coverage: 1.0,
            representative_passes: cache.passes,
        });
    }
    let selection = match decision.kind {
        crate::pattern::PatternKind::QuerySpecific => {
            let map = block_estimated_attention(q, k, block)?;
            select_query_aware(&map, &cfg.budget, n, block)?
        }
        crate::pattern::PatternKind::VerticalSlash => {
            let (_, att) = cache.get()?;
            let scores = vertical_slash_scores(att)?;
            select_vertical_slash(&scores, &cfg.budget, n, block)?
        }
    };
    Ok(HeadPlan {
        decision,
        estimated_coverage: selection.estimated_coverage,
        set: selection.set.clone(),
        selection: Some(selection),
        representative_passes: cache.passes,
    })
}

/// Runs one head end to end.
pub fn flexprefill_head(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    cfg: &HeadConfig,
) -> Result<(AttentionOutput, HeadReport)> {
    if v.rows() != k.rows() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    let plan = plan_head(q, k, cfg)?;
    let output = block_sparse_attention_stream(q, k, v, &plan.set)?;
    let n = q.rows();
    let mut report = HeadReport {
        pattern: plan.decision,
        selected_tokens: plan.set.pair_count(),
        total_causal_pairs: causal_pair_count(n),
        sparsity_ratio: plan.set.sparsity_ratio(),
        estimated_coverage: plan.estimated_coverage,
        true_coverage: None,
        flops: count_flops(n, q.cols(), cfg.block_size, &plan.set),
        error_linf: None,
        error_l2: None,
        bound_violations: None,
    };
    if cfg.collect_error_metrics {
        let dense = dense_causal_attention(q, k, v, true)?;
        let bound = check_error_bound(&dense, &output.out, v, &plan.set)?;
        report.true_coverage = Some(bound.mean_coverage());
        report.error_linf = Some(max_abs_diff(&dense.out, &output.out));
        report.error_l2 = Some(relative_l2(&dense.out, &output.out));
        report.bound_violations = Some(bound.violations);
    }
    Ok((output, report))
}

/// One head's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInput {
    pub q: Tensor2D,
    pub k: Tensor2D,
    pub v: Tensor2D,
}

#[derive(Debug, thiserror::Error)]
#[error("{} head(s) failed: {}", .failures.len(), summarize(.failures))]
pub struct MultiHeadError {
    pub failures: Vec<(usize, Error)>,
}

fn summarize(failures: &[(usize, Error)]) -> String {
    failures
        .iter()
        .map(|(h, e)| format!("head {h}: {e}"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Runs every head with at most `parallelism` workers; results come back in
/// input order and do not depend on the degree of parallelism.
pub fn flexprefill_multihead(
    heads: &[HeadInput],
    cfg: &HeadConfig,
    parallelism: usize,
) -> std::result::Result<Vec<(AttentionOutput, HeadReport)>, MultiHeadError> {
    if let Some(first) = heads.first() {
        let d = first.q.cols();
        let failures: Vec<(usize, Error)> = heads
            .iter()
            .enumerate()
            .filter(|(_, h)| h.q.cols() != d || h.k.cols() != d)
            .map(|(i, h)| {
                (
                    i,
                    Error::Shape(format!("head dim {} differs from head 0 ({d})", h.q.cols())),
                )
            })
            .collect();
        if !failures.is_empty() {
            return Err(MultiHeadError { failures });
        }
    }
    let run = |h: &HeadInput| flexprefill_head(&h.q, &h.k, &h.v, cfg);
    let results = run_heads(heads, parallelism, run);
    let mut ok = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(x) => ok.push(x),
            Err(e) => failures.push((i, e)),
        }
    }
    if failures.is_empty() {
        Ok(ok)
    } else {
        Err(MultiHeadError { failures })
    }
}

#[cfg(feature = "parallel")]
fn run_heads<T: Send>(
    heads: &[HeadInput],
    parallelism: usize,
    f: impl Fn(&HeadInput) -> T + Sync + Send,
) -> Vec<T> {
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
    {
        Ok(pool) => pool.install(|| heads.par_iter().map(&f).collect()),
        Err(_) => heads.iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_heads<T: Send>(
    heads: &[HeadInput],
    _parallelism: usize,
    f: impl Fn(&HeadInput) -> T + Sync + Send,
) -> Vec<T> {
    heads.iter().map(f).collect()
}
