//! Cumulative-attention index selection.
//!
//! Scores are sorted in decreasing order and the shortest prefix whose mass
//! reaches `gamma` is kept. Vertical-slash heads rank key columns and
//! diagonals from the representative attention; query-specific heads rank
//! the cells of a pooled block attention map, either globally (flattened)
//! or per query block. Budget rules are applied on top of the ranked prefix.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::SparseIndexSet;
use crate::error::{Error, Result};
use crate::pattern::RepresentativeAttention;
use crate::tensor::{
    argsort_desc, block_count, block_pool, dot, min_prefix_count, stable_softmax, Axis, PoolMode,
    ProbVector, Tensor2D,
};

/// Largest input [`oracle_min_subset`] will enumerate.
pub const ORACLE_MAX_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaMode {
    /// Rank every causal cell of the block map together.
    #[default]
    GlobalFlatten,
    /// Reach `gamma` separately within each query block.
    PerQueryBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub gamma: f64,
    pub min_budget_tokens: usize,
    pub max_budget_tokens: Option<usize>,
    pub keep_first_last_blocks: bool,
    pub qa_mode: QaMode,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            min_budget_tokens: 1024,
            max_budget_tokens: None,
            keep_first_last_blocks: true,
            qa_mode: QaMode::GlobalFlatten,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if let Some(max) = self.max_budget_tokens {
            if self.min_budget_tokens > max {
                return Err(Error::InvalidArgument(format!(
                    "minimum budget {} exceeds maximum budget {max}",
                    self.min_budget_tokens
                )));
            }
        }
        Ok(())
    }
}

/// A score list with its descending order and the minimal prefix covering
/// the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub scores: Vec<f64>,
    pub order: Vec<usize>,
    pub prefix: usize,
    /// Sum of the prefix scores, accumulated in rank order.
    pub mass: f64,
}

impl Ranked {
    pub fn new(scores: Vec<f64>, gamma: f64) -> Result<Self> {
        let order = argsort_desc(&scores);
        let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let prefix = min_prefix_count(&sorted, gamma)?;
        let mass = sorted[..prefix].iter().sum();
        Ok(Self {
            scores,
            order,
            prefix,
            mass,
        })
    }

    pub fn selected(&self) -> &[usize] {
        &self.order[..self.prefix]
    }
}

/// Normalized vertical and slash line scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LineScores {
    /// Mass per key column.
    pub vertical: ProbVector,
    /// Mass per diagonal offset (offset `o` at query `i` is key `i - o`).
    pub slash: ProbVector,
}

pub fn vertical_slash_scores(att: &RepresentativeAttention) -> Result<LineScores> {
    let n = att.scores.cols();
    let mut vertical = vec![0.0; n];
    let mut slash = vec![0.0; n];
    let mut total = 0.0;
    for r in 0..att.scores.rows() {
        let pos = att.start + r;
        let row = att.scores.row(r);
        for j in 0..=pos.min(n - 1) {
            vertical[j] += row[j];
            slash[pos - j] += row[j];
            total += row[j];
        }
    }
    if !(total > 0.0) {
        return Err(Error::InvalidDistribution(
            "representative attention is empty".into(),
        ));
    }
    let normalize = |v: Vec<f64>| ProbVector::new(v.into_iter().map(|x| x / total).collect());
    Ok(LineScores {
        vertical: normalize(vertical)?,
        slash: normalize(slash)?,
    })
}

/// Everything the budget rules need: rankings, and the pre-budget choice
/// they imply.
#[derive(Debug, Clone, PartialEq)]
pub enum Candidates {
    VerticalSlash {
        vertical: Ranked,
        slash: Ranked,
    },
    GlobalFlatten {
        /// Causal `(query_block, key_block)` cells in row-major order;
        /// `ranked` indexes into this list.
        cells: Vec<(usize, usize)>,
        ranked: Ranked,
        /// Key blocks of each query block in decreasing score order.
        row_orders: Vec<Vec<usize>>,
    },
    PerQueryBlock {
        rows: Vec<Ranked>,
    },
}

impl Candidates {
    /// The selection before any budget rule is applied.
    pub fn raw_set(&self, seq_len: usize, block: usize) -> Result<SparseIndexSet> {
        match self {
            Candidates::VerticalSlash { vertical, slash } => SparseIndexSet::vertical_slash(
                seq_len,
                block,
                vertical.selected().iter().copied(),
                slash.selected().iter().copied(),
            ),
            Candidates::GlobalFlatten { cells, ranked, .. } => SparseIndexSet::block_set(
                seq_len,
                block,
                ranked.selected().iter().map(|&c| cells[c]),
            ),
            Candidates::PerQueryBlock { rows } => SparseIndexSet::block_set(
                seq_len,
                block,
                rows.iter()
                    .enumerate()
                    .flat_map(|(qb, r)| r.selected().iter().map(move |&kb| (qb, kb))),
            ),
        }
    }

    /// Estimated mass covered before budgeting: the smaller of the two line
    /// masses, the flattened mass, or the worst query block.
    pub fn estimated_coverage(&self) -> f64 {
        match self {
            Candidates::VerticalSlash { vertical, slash } => vertical.mass.min(slash.mass),
            Candidates::GlobalFlatten { ranked, .. } => ranked.mass,
            Candidates::PerQueryBlock { rows } => {
                rows.iter().map(|r| r.mass).fold(f64::INFINITY, f64::min)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexSelection {
    pub candidates: Candidates,
    pub estimated_coverage: f64,
    pub set: SparseIndexSet,
}

pub fn select_vertical_slash(
    scores: &LineScores,
    budget: &BudgetConfig,
    seq_len: usize,
    block: usize,
) -> Result<IndexSelection> {
    budget.validate()?;
    if scores.vertical.len() != seq_len || scores.slash.len() != seq_len {
        return Err(Error::Shape(
            "line scores do not match the sequence length".into(),
        ));
    }
    let candidates = Candidates::VerticalSlash {
        vertical: Ranked::new(scores.vertical.as_slice().to_vec(), budget.gamma)?,
        slash: Ranked::new(scores.slash.as_slice().to_vec(), budget.gamma)?,
    };
    finish(candidates, budget, seq_len, block)
}

/// Causal row-softmax of block-averaged queries against block-averaged keys.
pub fn block_estimated_attention(q: &Tensor2D, k: &Tensor2D, block: usize) -> Result<Tensor2D> {
    if q.cols() != k.cols() || q.rows() != k.rows() {
        return Err(Error::Shape("queries and keys disagree on shape".into()));
    }
    let pooled_q = block_pool(q, block, Axis::Rows, PoolMode::Avg)?;
    let pooled_k = block_pool(k, block, Axis::Rows, PoolMode::Avg)?;
    let nb = pooled_q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut map = Tensor2D::zeros(nb, nb);
    for qb in 0..nb {
        let logits: Vec<f64> = (0..=qb)
            .map(|kb| dot(pooled_q.row(qb), pooled_k.row(kb)) * scale)
            .collect();
        let probs = stable_softmax(&logits, None)?;
        map.row_mut(qb)[..=qb].copy_from_slice(probs.as_slice());
    }
    Ok(map)
}

pub fn select_query_aware(
    block_map: &Tensor2D,
    budget: &BudgetConfig,
    seq_len: usize,
    block: usize,
) -> Result<IndexSelection> {
    budget.validate()?;
    let nb = block_map.rows();
    if block == 0 || block_map.cols() != nb || nb != block_count(seq_len, block) {
        return Err(Error::Shape(format!(
            "block map {}x{} does not tile {seq_len} tokens with block {block}",
            block_map.rows(),
            block_map.cols()
        )));
    }
    let row_values = |qb: usize| block_map.row(qb)[..=qb].to_vec();
    let candidates = match budget.qa_mode {
        QaMode::GlobalFlatten => {
            let cells: Vec<(usize, usize)> = (0..nb)
                .flat_map(|qb| (0..=qb).map(move |kb| (qb, kb)))
                .collect();
            let total: f64 = cells.iter().map(|&(qb, kb)| block_map.get(qb, kb)).sum();
            if !(total > 0.0) {
                return Err(Error::InvalidDistribution("block map has no mass".into()));
            }
            let flat = cells
                .iter()
                .map(|&(qb, kb)| block_map.get(qb, kb) / total)
                .collect();
            Candidates::GlobalFlatten {
                ranked: Ranked::new(flat, budget.gamma)?,
                row_orders: (0..nb).map(|qb| argsort_desc(&row_values(qb))).collect(),
                cells,
            }
        }
        QaMode::PerQueryBlock => Candidates::PerQueryBlock {
            rows: (0..nb)
                .map(|qb| {
                    let probs = ProbVector::from_weights(row_values(qb))?;
                    Ranked::new(probs.into_vec(), budget.gamma)
                })
                .collect::<Result<_>>()?,
        },
    };
    finish(candidates, budget, seq_len, block)
}

fn finish(
    candidates: Candidates,
    budget: &BudgetConfig,
    seq_len: usize,
    block: usize,
) -> Result<IndexSelection> {
    let set = apply_budget_constraints(&candidates, budget, seq_len, block)?;
    Ok(IndexSelection {
        estimated_coverage: candidates.estimated_coverage(),
        candidates,
        set,
    })
}

/// Widens (and optionally caps) the ranked selection:
///
/// * with `keep_first_last_blocks`, the first key block and the diagonal
///   block of every query block are always present (for line sets: the
///   first `block` verticals and the first `block` slash offsets);
/// * every query block gets at least `min_budget_tokens` (clamped to what it
///   can see), extended down the score order; line sets count one token per
///   line per row;
/// * `max_budget_tokens` trims from the bottom of the score order without
///   touching forced entries.
pub fn apply_budget_constraints(
    candidates: &Candidates,
    budget: &BudgetConfig,
    seq_len: usize,
    block: usize,
) -> Result<SparseIndexSet> {
    if block == 0 || seq_len == 0 {
        return Err(Error::InvalidArgument("empty geometry".into()));
    }
    match candidates {
        Candidates::VerticalSlash { vertical, slash } => {
            budget_lines(vertical, slash, budget, seq_len, block)
        }
        Candidates::GlobalFlatten {
            cells,
            ranked,
            row_orders,
        } => {
            let mut rows = vec![BTreeSet::new(); row_orders.len()];
            for &c in ranked.selected() {
                let (qb, kb) = cells[c];
                rows[qb].insert(kb);
            }
            budget_blocks(rows, row_orders, budget, seq_len, block)
        }
        Candidates::PerQueryBlock { rows } => {
            let selected = rows
                .iter()
                .map(|r| r.selected().iter().copied().collect())
                .collect();
            let orders: Vec<Vec<usize>> = rows.iter().map(|r| r.order.clone()).collect();
            budget_blocks(selected, &orders, budget, seq_len, block)
        }
    }
}

fn budget_lines(
    vertical: &Ranked,
    slash: &Ranked,
    budget: &BudgetConfig,
    n: usize,
    block: usize,
) -> Result<SparseIndexSet> {
    let forced = if budget.keep_first_last_blocks {
        block.min(n)
    } else {
        0
    };
    let mut verticals: BTreeSet<usize> = vertical.selected().iter().copied().collect();
    let mut slashes: BTreeSet<usize> = slash.selected().iter().copied().collect();
    verticals.extend(0..forced);
    slashes.extend(0..forced);

    let target = budget.min_budget_tokens.min(n);
    if budget.min_budget_tokens >= n {
        // the budget covers every visible key: dense
        verticals.extend(0..n);
    } else {
        let mut next = vertical.order.iter();
        while verticals.len() + slashes.len() < target {
            match next.next() {
                Some(&j) => {
                    verticals.insert(j);
                }
                None => break,
            }
        }
    }

    if let Some(max) = budget.max_budget_tokens {
        let lowest = |ranked: &Ranked, chosen: &BTreeSet<usize>| {
            ranked
                .order
                .iter()
                .rev()
                .find(|&&x| x >= forced && chosen.contains(&x))
                .copied()
        };
        while verticals.len() + slashes.len() > max {
            match (lowest(vertical, &verticals), lowest(slash, &slashes)) {
                (Some(v), Some(s)) if slash.scores[s] < vertical.scores[v] => {
                    slashes.remove(&s);
                }
                (Some(v), _) => {
                    verticals.remove(&v);
                }
                (None, Some(s)) => {
                    slashes.remove(&s);
                }
                (None, None) => break,
            }
        }
    }
    SparseIndexSet::vertical_slash(n, block, verticals, slashes)
}

fn budget_blocks(
    mut rows: Vec<BTreeSet<usize>>,
    orders: &[Vec<usize>],
    budget: &BudgetConfig,
    n: usize,
    block: usize,
) -> Result<SparseIndexSet> {
    for (qb, (row, order)) in rows.iter_mut().zip(orders).enumerate() {
        let is_forced = |kb: usize| budget.keep_first_last_blocks && (kb == 0 || kb == qb);
        if budget.keep_first_last_blocks {
            row.insert(0);
            row.insert(qb);
        }
        let visible = ((qb + 1) * block).min(n);
        let need = budget.min_budget_tokens.min(visible).div_ceil(block);
        let mut next = order.iter();
        while row.len() < need {
            match next.next() {
                Some(&kb) => {
                    row.insert(kb);
                }
                None => break,
            }
        }
        if let Some(max) = budget.max_budget_tokens {
            let cap = max.div_ceil(block);
            for &kb in order.iter().rev() {
                if row.len() <= cap {
                    break;
                }
                if !is_forced(kb) {
                    row.remove(&kb);
                }
            }
        }
    }
    SparseIndexSet::block_set(
        n,
        block,
        rows.into_iter()
            .enumerate()
            .flat_map(|(qb, row)| row.into_iter().map(move |kb| (qb, kb))),
    )
}

/// Exhaustive minimum-cardinality subset with mass at least `gamma`.
/// Returns the full index set when no subset reaches `gamma`.
pub fn oracle_min_subset(scores: &[f64], gamma: f64) -> Result<(usize, Vec<usize>)> {
    let len = scores.len();
    if len > ORACLE_MAX_LEN {
        return Err(Error::OracleScaleExceeded {
            len,
            limit: ORACLE_MAX_LEN,
        });
    }
    let mut best: Option<u32> = None;
    for mask in 1u32..(1u32 << len) {
        if best.is_some_and(|b| mask.count_ones() >= b.count_ones()) {
            continue;
        }
        if subset_mass(scores, mask) >= gamma {
            best = Some(mask);
        }
    }
    let mask = best.unwrap_or((1u32 << len) - 1);
    let subset: Vec<usize> = (0..len).filter(|&i| mask & (1 << i) != 0).collect();
    Ok((subset.len(), subset))
}

/// Members are summed largest first, the order the greedy prefix uses, so
/// equal multisets of scores always produce bit-identical masses.
fn subset_mass(scores: &[f64], mask: u32) -> f64 {
    let mut members: Vec<f64> = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| mask & (1 << i) != 0)
        .map(|(_, &s)| s)
        .collect();
    members.sort_by(|a, b| b.total_cmp(a));
    members.into_iter().sum()
}

/// Outcome of checking the size-constrained (primal) and mass-constrained
/// (dual) subset problems against each other.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualReport {
    /// Minimum subset size reaching `gamma` (exhaustive).
    pub k_star: usize,
    /// Size chosen by the greedy sorted prefix.
    pub greedy_size: usize,
    /// Maximum mass over all subsets of size at most `k_star`.
    pub primal_optimum: f64,
    /// Mass of the greedy top-`k_star` prefix.
    pub greedy_mass: f64,
    /// Smallest selected score; every rejected score is at most this.
    pub threshold: f64,
    pub coverage_holds: bool,
    pub greedy_attains_optimum: bool,
    pub threshold_structure: bool,
}

impl PrimalDualReport {
    pub fn all_hold(&self) -> bool {
        self.coverage_holds
            && self.greedy_attains_optimum
            && self.threshold_structure
            && self.greedy_size == self.k_star
    }
}

pub fn primal_dual_check(scores: &ProbVector, gamma: f64) -> Result<PrimalDualReport> {
    let s = scores.as_slice();
    let (k_star, _) = oracle_min_subset(s, gamma)?;
    let mut primal_optimum = f64::NEG_INFINITY;
    for mask in 1u32..(1u32 << s.len()) {
        if mask.count_ones() as usize <= k_star {
            primal_optimum = primal_optimum.max(subset_mass(s, mask));
        }
    }
    let order = argsort_desc(s);
    let sorted: Vec<f64> = order.iter().map(|&i| s[i]).collect();
    let greedy_size = min_prefix_count(&sorted, gamma)?;
    let greedy_mass: f64 = sorted[..k_star].iter().sum();
    let threshold = sorted[k_star - 1];
    let rejected_max = sorted[k_star..]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(PrimalDualReport {
        k_star,
        greedy_size,
        primal_optimum,
        greedy_mass,
        threshold,
        coverage_holds: primal_optimum >= gamma,
        greedy_attains_optimum: (greedy_mass - primal_optimum).abs() <= 1e-12,
        threshold_structure: rejected_max <= threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_budget(gamma: f64) -> BudgetConfig {
        BudgetConfig {
            gamma,
            min_budget_tokens: 0,
            max_budget_tokens: None,
            keep_first_last_blocks: false,
            qa_mode: QaMode::GlobalFlatten,
        }
    }

    fn lines(vertical: &[f64], slash: &[f64]) -> LineScores {
        LineScores {
            vertical: ProbVector::new(vertical.to_vec()).unwrap(),
            slash: ProbVector::new(slash.to_vec()).unwrap(),
        }
    }

    fn vs_parts(s: &SparseIndexSet) -> (Vec<usize>, Vec<usize>) {
        match s {
            SparseIndexSet::VerticalSlash {
                verticals, slashes, ..
            } => (
                verticals.iter().copied().collect(),
                slashes.iter().copied().collect(),
            ),
            _ => panic!("expected a line set"),
        }
    }

    #[test]
    fn default_budget_matches_reference_setup() {
        let b = BudgetConfig::default();
        assert_eq!(b.gamma, 0.95);
        assert_eq!(b.min_budget_tokens, 1024);
        assert!(b.keep_first_last_blocks);
        assert_eq!(b.qa_mode, QaMode::GlobalFlatten);
        assert!(b.max_budget_tokens.is_none());
    }

    #[test]
    fn budget_validation() {
        assert!(no_budget(0.0).validate().is_err());
        assert!(no_budget(1.0).validate().is_err());
        let mut b = no_budget(0.5);
        b.min_budget_tokens = 10;
        b.max_budget_tokens = Some(5);
        assert!(b.validate().is_err());
    }

    #[test]
    fn vertical_slash_prefix_selection() {
        let s = lines(&[0.5, 0.3, 0.2], &[0.0, 0.0, 1.0]);
        let sel = select_vertical_slash(&s, &no_budget(0.7), 3, 1).unwrap();
        assert_eq!(vs_parts(&sel.set), (vec![0, 1], vec![2]));

        // forcing adds the first block of columns and offsets
        let mut b = no_budget(0.7);
        b.keep_first_last_blocks = true;
        let sel = select_vertical_slash(&s, &b, 3, 1).unwrap();
        assert_eq!(vs_parts(&sel.set), (vec![0, 1], vec![0, 2]));
    }

    #[test]
    fn uniform_columns_need_all_ten() {
        let s = lines(&[0.1; 10], &[0.1; 10]);
        let sel = select_vertical_slash(&s, &no_budget(0.95), 10, 4).unwrap();
        match &sel.candidates {
            Candidates::VerticalSlash { vertical, .. } => assert_eq!(vertical.prefix, 10),
            _ => unreachable!(),
        }
    }

    #[test]
    fn min_budget_extends_verticals() {
        let n = 4096;
        let mut v = vec![0.0; n];
        v[100] = 1.0;
        let mut s = vec![0.0; n];
        s[0] = 1.0;
        let scores = lines(&v, &s);
        let mut b = no_budget(0.9);
        b.min_budget_tokens = 1024;
        let sel = select_vertical_slash(&scores, &b, n, 128).unwrap();
        let (vert, sl) = vs_parts(&sel.set);
        assert_eq!(sl, vec![0]);
        assert_eq!(vert.len() + sl.len(), 1024);
        assert!(vert.contains(&100));
        // 1024 lines are 8 block columns' worth of keys per row
        assert_eq!((vert.len() + sl.len()) / 128, 8);
    }

    #[test]
    fn min_budget_beyond_length_is_dense() {
        let n = 512;
        let mut v = vec![0.0; n];
        v[3] = 1.0;
        let mut b = BudgetConfig::default();
        b.gamma = 0.5;
        let sel = select_vertical_slash(&lines(&v, &v), &b, n, 128).unwrap();
        assert_eq!(sel.set.sparsity_ratio(), 0.0);

        let map = Tensor2D::from_fn(4, 4, |i, j| if j == i { 1.0 } else { 0.0 });
        let sel = select_query_aware(&map, &b, n, 128).unwrap();
        assert_eq!(sel.set, SparseIndexSet::full(n, 128).unwrap());
    }

    #[test]
    fn max_budget_trims_lowest_lines_but_not_forced() {
        let n = 16;
        let v: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let vs = ProbVector::from_weights(v).unwrap();
        let scores = LineScores {
            vertical: vs.clone(),
            slash: vs,
        };
        let mut b = no_budget(0.99);
        b.keep_first_last_blocks = true;
        b.max_budget_tokens = Some(6);
        let sel = select_vertical_slash(&scores, &b, n, 2).unwrap();
        let (vert, sl) = vs_parts(&sel.set);
        assert_eq!(vert.len() + sl.len(), 6);
        assert!(vert.contains(&0) && vert.contains(&1));
        assert!(sl.contains(&0) && sl.contains(&1));

        // unset cap leaves the set as an effectively infinite cap does
        let mut open = b.clone();
        open.max_budget_tokens = None;
        let mut huge = b.clone();
        huge.max_budget_tokens = Some(usize::MAX);
        assert_eq!(
            select_vertical_slash(&scores, &open, n, 2).unwrap().set,
            select_vertical_slash(&scores, &huge, n, 2).unwrap().set
        );
    }

    #[test]
    fn dominant_block_alone_reaches_gamma() {
        // four query blocks; cell (3, 1) carries 0.96 of the total mass
        let mut map = Tensor2D::zeros(4, 4);
        let rest = 0.04 / 9.0;
        for qb in 0..4 {
            for kb in 0..=qb {
                map.set(qb, kb, rest);
            }
        }
        map.set(3, 1, 0.96);
        let sel = select_query_aware(&map, &no_budget(0.95), 16, 4).unwrap();
        assert_eq!(sel.set, SparseIndexSet::block_set(16, 4, [(3, 1)]).unwrap());

        let mut forced = no_budget(0.95);
        forced.keep_first_last_blocks = true;
        let sel = select_query_aware(&map, &forced, 16, 4).unwrap();
        let expected = [
            (0, 0),
            (1, 0),
            (1, 1),
            (2, 0),
            (2, 2),
            (3, 0),
            (3, 1),
            (3, 3),
        ];
        assert_eq!(sel.set, SparseIndexSet::block_set(16, 4, expected).unwrap());
    }

    #[test]
    fn uniform_map_selection_count() {
        let nb = 6;
        let cells = nb * (nb + 1) / 2;
        let map = Tensor2D::from_fn(nb, nb, |i, j| if j <= i { 1.0 } else { 0.0 });
        let sel = select_query_aware(&map, &no_budget(0.5), nb * 2, 2).unwrap();
        // smallest k with k / 21 >= 0.5 by enumeration
        let k = (1..=cells)
            .find(|&k| k as f64 / cells as f64 >= 0.5)
            .unwrap();
        assert_eq!(k, 11);
        match &sel.set {
            SparseIndexSet::BlockSet { pairs, .. } => assert_eq!(pairs.len(), k),
            _ => unreachable!(),
        }
    }

    #[test]
    fn single_cell_map() {
        let map = Tensor2D::new(1, 1, vec![1.0]).unwrap();
        let sel = select_query_aware(&map, &no_budget(0.9), 3, 4).unwrap();
        assert_eq!(sel.set, SparseIndexSet::full(3, 4).unwrap());
    }

    #[test]
    fn per_query_block_reaches_gamma_in_every_row() {
        let map = Tensor2D::from_fn(5, 5, |i, j| if j <= i { (j + 1) as f64 } else { 0.0 });
        let mut b = no_budget(0.6);
        b.qa_mode = QaMode::PerQueryBlock;
        let sel = select_query_aware(&map, &b, 20, 4).unwrap();
        match &sel.candidates {
            Candidates::PerQueryBlock { rows } => {
                for r in rows {
                    assert!(r.mass >= 0.6);
                }
            }
            _ => unreachable!(),
        }
        assert!(sel.estimated_coverage >= 0.6);
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(oracle_min_subset(&[0.5, 0.3, 0.2], 0.7).unwrap().0, 2);
        assert_eq!(
            oracle_min_subset(&[0.0, 1.0, 0.0], 0.99).unwrap(),
            (1, vec![1])
        );
        assert_eq!(oracle_min_subset(&[0.125; 8], 0.5).unwrap().0, 4);
        assert!(matches!(
            oracle_min_subset(&[0.0; 21], 0.5),
            Err(Error::OracleScaleExceeded { len: 21, .. })
        ));
    }

    #[test]
    fn primal_dual_worked_example() {
        let p = ProbVector::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let r = primal_dual_check(&p, 0.6).unwrap();
        assert_eq!(r.k_star, 2);
        assert!((r.primal_optimum - 0.7).abs() < 1e-12);
        assert_eq!(r.threshold, 0.3);
        assert!(r.all_hold());

        let one_hot = ProbVector::new(vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        for gamma in [0.1, 0.5, 0.99] {
            let r = primal_dual_check(&one_hot, gamma).unwrap();
            assert_eq!(r.k_star, 1);
            assert!(r.all_hold());
        }
    }

    #[test]
    fn line_scores_from_representative_rows() {
        // every representative row puts all its mass on column 0
        let att = RepresentativeAttention {
            start: 2,
            scores: Tensor2D::from_fn(2, 4, |_, j| if j == 0 { 1.0 } else { 0.0 }),
        };
        let s = vertical_slash_scores(&att).unwrap();
        assert_eq!(s.vertical.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.slash.as_slice(), &[0.0, 0.0, 0.5, 0.5]);

        // each row attends to itself
        let att = RepresentativeAttention {
            start: 2,
            scores: Tensor2D::from_fn(2, 4, |r, j| if j == r + 2 { 1.0 } else { 0.0 }),
        };
        let s = vertical_slash_scores(&att).unwrap();
        assert_eq!(s.slash.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pooled_block_map_is_causal() {
        let q = Tensor2D::from_fn(10, 3, |i, j| ((i + 2 * j) as f64).sin());
        let k = Tensor2D::from_fn(10, 3, |_, j| j as f64);
        let map = block_estimated_attention(&q, &k, 4).unwrap();
        assert_eq!(map.shape(), (3, 3));
        for qb in 0..3 {
            for kb in 0..3 {
                if kb > qb {
                    assert_eq!(map.get(qb, kb), 0.0);
                } else {
                    // identical pooled keys: uniform over visible blocks
                    assert!((map.get(qb, kb) - 1.0 / (qb + 1) as f64).abs() < 1e-12);
                }
            }
        }
        let one = block_estimated_attention(&q.slice_rows(0..3), &k.slice_rows(0..3), 4).unwrap();
        assert_eq!(one.data(), &[1.0]);
    }
}
