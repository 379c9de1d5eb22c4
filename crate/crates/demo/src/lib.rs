//! Browser bindings: explore one synthetic head, plot modeled speedup over
//! sequence length, and evaluate the Jensen-Shannon distance.
//!
//! Each export wraps a plain function returning JSON so the logic can be
//! tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use flexprefill::attention::dense_causal_attention;
use flexprefill::engine::{count_flops, plan_head, HeadConfig};
use flexprefill::pattern::js_distance as jsd;
use flexprefill::tensor::block_count;
use flexprefill::workload::{generate, WorkloadKind, WorkloadSpec};
use flexprefill::{ProbVector, Result, SparseIndexSet};

/// Largest sequence the explorer renders; the dense reference is quadratic.
pub const EXPLORE_MAX_LEN: usize = 2048;

#[derive(Debug, Serialize)]
pub struct HeadView {
    pub pattern: &'static str,
    pub js_distance: f64,
    pub sparsity: f64,
    pub speedup: f64,
    pub estimated_coverage: f64,
    pub blocks: usize,
    /// Fraction of each causal tile's pairs that were selected, row-major
    /// over `blocks × blocks`; -1 above the diagonal.
    pub selected: Vec<f64>,
    /// Dense attention mass per tile, averaged over the tile's query rows.
    pub dense: Vec<f64>,
}

fn kind_from_name(name: &str, window: usize) -> Result<WorkloadKind> {
    Ok(match name {
        "needle" => WorkloadKind::needle(),
        "blocky" => WorkloadKind::blocky(),
        "local" => WorkloadKind::local(window),
        "random" => WorkloadKind::Random,
        other => {
            return Err(flexprefill::Error::InvalidArgument(format!(
                "unknown workload {other:?}"
            )))
        }
    })
}

fn demo_config(gamma: f64, tau: f64, block: usize) -> HeadConfig {
    let mut cfg = HeadConfig::default().with_gamma(gamma).with_tau(tau);
    cfg.block_size = block;
    // the default 1024-token floor would make small demo heads dense
    cfg.budget.min_budget_tokens = block;
    cfg
}

fn tile_fractions(set: &SparseIndexSet, n: usize, block: usize) -> Vec<f64> {
    let nb = block_count(n, block);
    let mut hits = vec![0usize; nb * nb];
    let mut total = vec![0usize; nb * nb];
    for i in 0..n {
        for j in 0..=i {
            let t = (i / block) * nb + j / block;
            total[t] += 1;
            if set.contains(i, j) {
                hits[t] += 1;
            }
        }
    }
    hits.iter()
        .zip(&total)
        .map(|(&h, &t)| if t == 0 { -1.0 } else { h as f64 / t as f64 })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn explore(
    kind: &str,
    seq_len: usize,
    dim: usize,
    seed: u64,
    gamma: f64,
    tau: f64,
    block: usize,
) -> Result<HeadView> {
    if seq_len > EXPLORE_MAX_LEN {
        return Err(flexprefill::Error::InvalidArgument(format!(
            "sequence length is capped at {EXPLORE_MAX_LEN} in the browser"
        )));
    }
    let w = generate(&WorkloadSpec::new(
        kind_from_name(kind, seq_len.clamp(1, 64))?,
        seq_len,
        dim,
        seed,
    ))?;
    let cfg = demo_config(gamma, tau, block);
    let plan = plan_head(&w.q, &w.k, &cfg)?;
    let flops = count_flops(seq_len, dim, block, &plan.set);
    let dense = dense_causal_attention(&w.q, &w.k, &w.v, true)?;
    let nb = block_count(seq_len, block);
    let mut mass = vec![0.0; nb * nb];
    for (i, row) in dense.row_scores.iter().flatten().enumerate() {
        for (j, &p) in row.as_slice().iter().enumerate() {
            mass[(i / block) * nb + j / block] += p;
        }
    }
    for qb in 0..nb {
        let rows = (seq_len - qb * block).min(block) as f64;
        for kb in 0..nb {
            let t = qb * nb + kb;
            mass[t] = if kb > qb { -1.0 } else { mass[t] / rows };
        }
    }
    Ok(HeadView {
        pattern: match plan.decision.kind {
            flexprefill::PatternKind::QuerySpecific => "query_specific",
            flexprefill::PatternKind::VerticalSlash => "vertical_slash",
        },
        js_distance: plan.decision.js_distance,
        sparsity: plan.set.sparsity_ratio(),
        speedup: flops.speedup,
        estimated_coverage: plan.estimated_coverage,
        blocks: nb,
        selected: tile_fractions(&plan.set, seq_len, block),
        dense: mass,
    })
}

#[derive(Debug, Serialize)]
pub struct CurvePoint {
    pub seq_len: usize,
    pub speedup: f64,
    pub sparsity: f64,
}

/// Modeled speedup of a local-attention head at each length.
pub fn curve(
    lengths: &[usize],
    window: usize,
    dim: usize,
    seed: u64,
    gamma: f64,
    tau: f64,
) -> Result<Vec<CurvePoint>> {
    let cfg = HeadConfig::default().with_gamma(gamma).with_tau(tau);
    lengths
        .iter()
        .map(|&n| {
            let w = generate(&WorkloadSpec::new(
                WorkloadKind::local(window.min(n)),
                n,
                dim,
                seed,
            ))?;
            let plan = plan_head(&w.q, &w.k, &cfg)?;
            Ok(CurvePoint {
                seq_len: n,
                speedup: count_flops(n, dim, cfg.block_size, &plan.set).speedup,
                sparsity: plan.set.sparsity_ratio(),
            })
        })
        .collect()
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = "exploreHead")]
pub fn explore_head(
    kind: &str,
    seq_len: usize,
    dim: usize,
    seed: u32,
    gamma: f64,
    tau: f64,
    block: usize,
) -> std::result::Result<String, JsError> {
    to_js(explore(kind, seq_len, dim, seed as u64, gamma, tau, block))
}

#[wasm_bindgen(js_name = "speedupCurve")]
pub fn speedup_curve(
    lengths: Vec<u32>,
    window: usize,
    dim: usize,
    seed: u32,
    gamma: f64,
) -> std::result::Result<String, JsError> {
    let lengths: Vec<usize> = lengths.into_iter().map(|n| n as usize).collect();
    to_js(curve(&lengths, window, dim, seed as u64, gamma, 0.1))
}

/// Normalizes both weight vectors and returns their distance.
#[wasm_bindgen(js_name = "jsDistance")]
pub fn js_distance(p: Vec<f64>, q: Vec<f64>) -> std::result::Result<f64, JsError> {
    let run =
        || -> Result<f64> { jsd(&ProbVector::from_weights(p)?, &ProbVector::from_weights(q)?) };
    run().map_err(|e| JsError::new(&e.to_string()))
}
