#![allow(dead_code)]

use flexprefill::workload::Prng;
use flexprefill::{SparseIndexSet, Tensor2D};

pub fn random_tensor(rng: &mut Prng, rows: usize, cols: usize, scale: f64) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| scale * rng.gaussian_like())
}

pub fn qkv(seed: u64, n: usize, d: usize) -> (Tensor2D, Tensor2D, Tensor2D) {
    let mut rng = Prng::new(seed);
    (
        random_tensor(&mut rng, n, d, 1.0),
        random_tensor(&mut rng, n, d, 1.0),
        random_tensor(&mut rng, n, d, 1.0),
    )
}

/// Random causal block set where every query block keeps its diagonal.
pub fn random_block_set(rng: &mut Prng, n: usize, block: usize, density: f64) -> SparseIndexSet {
    let nb = n.div_ceil(block);
    let mut pairs = Vec::new();
    for qb in 0..nb {
        pairs.push((qb, qb));
        for kb in 0..qb {
            if rng.uniform() < density {
                pairs.push((qb, kb));
            }
        }
    }
    SparseIndexSet::block_set(n, block, pairs).unwrap()
}

/// Random line set whose slash set always contains offset 0.
pub fn random_line_set(rng: &mut Prng, n: usize, block: usize, lines: usize) -> SparseIndexSet {
    let verticals: Vec<usize> = (0..lines).map(|_| rng.below(n)).collect();
    let mut slashes: Vec<usize> = (0..lines).map(|_| rng.below(n)).collect();
    slashes.push(0);
    SparseIndexSet::vertical_slash(n, block, verticals, slashes).unwrap()
}

/// Naive triple loop with explicit exponentials and no max shift.
pub fn naive_attention(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    keep: impl Fn(usize, usize) -> bool,
) -> Tensor2D {
    let n = q.rows();
    let d = q.cols();
    let mut out = Tensor2D::zeros(n, v.cols());
    for i in 0..n {
        let mut weights = vec![0.0; n];
        let mut total = 0.0;
        for j in 0..=i {
            if !keep(i, j) {
                continue;
            }
            let mut s = 0.0;
            for c in 0..d {
                s += q.get(i, c) * k.get(j, c);
            }
            weights[j] = (s / (d as f64).sqrt()).exp();
            total += weights[j];
        }
        for c in 0..v.cols() {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += weights[j] / total * v.get(j, c);
            }
            out.set(i, c, acc);
        }
    }
    out
}
