//! Adaptive block-sparse attention for long-context prefill.
//!
//! Each attention head is processed independently:
//!
//! 1. The last `block` query rows are scored against every key. The
//!    block-pooled estimate of that distribution is compared with the exact
//!    one through the Jensen-Shannon distance; a small distance means pooled
//!    estimation is trustworthy and the head is treated as query-specific,
//!    otherwise it falls back to a vertical-slash pattern.
//! 2. Indices are selected greedily by cumulative attention mass until a
//!    threshold `gamma` is covered, then widened by the budget rules
//!    (sink and diagonal retention, a minimum token budget, an optional cap).
//! 3. Attention is evaluated only on the selected query-key pairs with a
//!    streaming, block-visiting kernel.
//!
//! Dense and masked reference kernels, an exhaustive subset oracle and a
//! per-row error bound check live alongside the fast paths so the sparse
//! results can always be checked against ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod attention;
pub mod engine;
pub mod error;
pub mod fpt;
pub mod pattern;
pub mod report;
pub mod selection;
pub mod tensor;
pub mod workload;

pub use attention::{AttentionOutput, SparseIndexSet};
pub use engine::{FlopRecord, HeadConfig, HeadReport};
pub use error::{Error, Result};
pub use pattern::{PatternDecision, PatternKind};
pub use selection::{BudgetConfig, QaMode};
pub use tensor::{ProbVector, Tensor2D};
