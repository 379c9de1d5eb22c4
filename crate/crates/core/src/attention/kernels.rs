use crate::error::{Error, Result};
use crate::tensor::{dot, stable_softmax, ProbVector, Tensor2D};

use super::index_set::SparseIndexSet;
use super::map_indices;

/// Attention result. `row_scores[i]` holds row `i`'s attention weights over
/// keys `0..=i` when scores were requested.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub out: Tensor2D,
    pub row_scores: Option<Vec<ProbVector>>,
}

fn check_shapes(q: &Tensor2D, k: &Tensor2D, v: &Tensor2D) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "query dim {} != key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    if q.rows() != k.rows() {
        return Err(Error::Shape(format!(
            "causal self-attention needs as many queries as keys ({} vs {})",
            q.rows(),
            k.rows()
        )));
    }
    if q.cols() == 0 {
        return Err(Error::Shape("head dimension must be >= 1".into()));
    }
    Ok(())
}

fn check_set(q: &Tensor2D, s: &SparseIndexSet) -> Result<()> {
    if s.seq_len() != q.rows() {
        return Err(Error::Shape(format!(
            "index set built for {} tokens, input has {}",
            s.seq_len(),
            q.rows()
        )));
    }
    Ok(())
}

fn weighted_sum(v: &Tensor2D, keys: &[usize], probs: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; v.cols()];
    for (&j, &p) in keys.iter().zip(probs) {
        for (a, x) in acc.iter_mut().zip(v.row(j)) {
            *a += p * x;
        }
    }
    acc
}

fn assemble(rows: Vec<Vec<f64>>, cols: usize) -> Result<Tensor2D> {
    let n = rows.len();
    Tensor2D::new(n, cols, rows.into_iter().flatten().collect())
}

/// Softmax(Q Kᵀ / √d + causal mask) V.
pub fn dense_causal_attention(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    keep_scores: bool,
) -> Result<AttentionOutput> {
    check_shapes(q, k, v)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let rows = map_indices(q.rows(), |i| {
        let qi = q.row(i);
        let logits: Vec<f64> = (0..=i).map(|j| dot(qi, k.row(j)) * scale).collect();
        let probs = stable_softmax(&logits, None)?;
        let keys: Vec<usize> = (0..=i).collect();
        let out = weighted_sum(v, &keys, probs.as_slice());
        Ok((out, probs))
    });
    let rows: Vec<(Vec<f64>, ProbVector)> = rows.into_iter().collect::<Result<_>>()?;
    let (outs, scores): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(AttentionOutput {
        out: assemble(outs, v.cols())?,
        row_scores: keep_scores.then_some(scores),
    })
}

/// Softmax restricted to the selected pairs of `s`, evaluated row by row
/// over an explicit key list. This is the reference sparse path.
pub fn sparse_attention_masked(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    s: &SparseIndexSet,
) -> Result<AttentionOutput> {
    check_shapes(q, k, v)?;
    check_set(q, s)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let rows = map_indices(q.rows(), |i| {
        let keys = s.row_keys(i);
        if keys.is_empty() {
            return Err(Error::EmptyAttentionRow { row: Some(i) });
        }
        let qi = q.row(i);
        let logits: Vec<f64> = keys.iter().map(|&j| dot(qi, k.row(j)) * scale).collect();
        let probs = stable_softmax(&logits, None)?;
        Ok(weighted_sum(v, &keys, probs.as_slice()))
    });
    let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
    Ok(AttentionOutput {
        out: assemble(rows, v.cols())?,
        row_scores: None,
    })
}

/// Block-sparse attention that walks, for each query block, only the key
/// blocks touched by `s`, keeping a running max and normalizer per query
/// row. Inside a visited tile, pairs outside `s` (and future keys on the
/// diagonal) are skipped, so the result equals [`sparse_attention_masked`].
pub fn block_sparse_attention_stream(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    s: &SparseIndexSet,
) -> Result<AttentionOutput> {
    check_shapes(q, k, v)?;
    check_set(q, s)?;
    let n = q.rows();
    let dv = v.cols();
    let block = s.block();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let tiles = s.rasterize();
    let membership = s.membership();

    let blocks = map_indices(tiles.len(), |qb| {
        let lo = qb * block;
        let hi = (lo + block).min(n);
        let mut out = Vec::with_capacity((hi - lo) * dv);
        let mut logits = Vec::with_capacity(block);
        let mut keys = Vec::with_capacity(block);
        for i in lo..hi {
            let qi = q.row(i);
            let mut running_max = f64::NEG_INFINITY;
            let mut normalizer = 0.0;
            let mut acc = vec![0.0; dv];
            for &kb in &tiles[qb] {
                logits.clear();
                keys.clear();
                let k_lo = kb * block;
                let k_hi = (k_lo + block).min(i + 1);
                for j in k_lo..k_hi {
                    if membership.keeps(i, j) {
                        keys.push(j);
                        logits.push(dot(qi, k.row(j)) * scale);
                    }
                }
                if keys.is_empty() {
                    continue;
                }
                let tile_max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let new_max = running_max.max(tile_max);
                let rescale = (running_max - new_max).exp();
                normalizer *= rescale;
                for a in &mut acc {
                    *a *= rescale;
                }
                for (&j, &x) in keys.iter().zip(&logits) {
                    let p = (x - new_max).exp();
                    normalizer += p;
                    for (a, vj) in acc.iter_mut().zip(v.row(j)) {
                        *a += p * vj;
                    }
                }
                running_max = new_max;
            }
            if normalizer == 0.0 {
                return Err(Error::EmptyAttentionRow { row: Some(i) });
            }
            out.extend(acc.into_iter().map(|a| a / normalizer));
        }
        Ok(out)
    });
    let blocks: Vec<Vec<f64>> = blocks.into_iter().collect::<Result<_>>()?;
    Ok(AttentionOutput {
        out: Tensor2D::new(n, dv, blocks.into_iter().flatten().collect())?,
        row_scores: None,
    })
}
