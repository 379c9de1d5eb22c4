//! Causal attention kernels: the dense oracle, the masked sparse reference
//! and the streaming block-sparse path, plus the per-row error bound check.

mod bound;
mod index_set;
mod kernels;

pub use bound::{check_error_bound, BoundCheck};
pub use index_set::{causal_pair_count, SparseIndexSet};
pub use kernels::{
    block_sparse_attention_stream, dense_causal_attention, sparse_attention_masked, AttentionOutput,
};

use crate::tensor::Tensor2D;

/// `||a - b||_2 / ||a||_2` over all entries; absolute when `a` is zero.
pub fn relative_l2(reference: &Tensor2D, other: &Tensor2D) -> f64 {
    let (mut diff, mut norm) = (0.0, 0.0);
    for (a, b) in reference.data().iter().zip(other.data()) {
        diff += (a - b) * (a - b);
        norm += a * a;
    }
    if norm > 0.0 {
        (diff / norm).sqrt()
    } else {
        diff.sqrt()
    }
}

/// Largest absolute entrywise difference.
pub fn max_abs_diff(a: &Tensor2D, b: &Tensor2D) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(feature = "parallel")]
pub(crate) fn map_indices<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indices<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}
