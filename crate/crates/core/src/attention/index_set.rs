use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::block_count;

/// The set of query-key pairs a sparse head actually computes.
///
/// `VerticalSlash` is element-level: vertical `j` selects key `j` for every
/// query `i >= j`, and slash offset `o` selects key `i - o` for every query
/// `i >= o`. `BlockSet` selects whole `(query_block, key_block)` tiles; the
/// diagonal tile is causally masked inside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SparseIndexSet {
    VerticalSlash {
        verticals: BTreeSet<usize>,
        slashes: BTreeSet<usize>,
        block: usize,
        seq_len: usize,
    },
    BlockSet {
        pairs: BTreeSet<(usize, usize)>,
        block: usize,
        seq_len: usize,
    },
}

/// Number of causal pairs `(i, j)` with `j <= i < n`.
#[inline]
pub fn causal_pair_count(n: usize) -> u64 {
    let n = n as u64;
    n * (n + 1) / 2
}

impl SparseIndexSet {
    pub fn vertical_slash(
        seq_len: usize,
        block: usize,
        verticals: impl IntoIterator<Item = usize>,
        slashes: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        check_geometry(seq_len, block)?;
        let verticals: BTreeSet<usize> = verticals.into_iter().collect();
        let slashes: BTreeSet<usize> = slashes.into_iter().collect();
        if let Some(&v) = verticals.iter().next_back().filter(|&&v| v >= seq_len) {
            return Err(Error::InvalidIndexSet(format!(
                "vertical {v} out of range for sequence length {seq_len}"
            )));
        }
        if let Some(&s) = slashes.iter().next_back().filter(|&&s| s >= seq_len) {
            return Err(Error::InvalidIndexSet(format!(
                "slash offset {s} out of range for sequence length {seq_len}"
            )));
        }
        Ok(Self::VerticalSlash {
            verticals,
            slashes,
            block,
            seq_len,
        })
    }

    pub fn block_set(
        seq_len: usize,
        block: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        check_geometry(seq_len, block)?;
        let nb = block_count(seq_len, block);
        let pairs: BTreeSet<(usize, usize)> = pairs.into_iter().collect();
        for &(qb, kb) in &pairs {
            if qb >= nb {
                return Err(Error::InvalidIndexSet(format!(
                    "query block {qb} out of range ({nb} blocks)"
                )));
            }
            if kb > qb {
                return Err(Error::InvalidIndexSet(format!(
                    "block ({qb}, {kb}) is not causal"
                )));
            }
        }
        Ok(Self::BlockSet {
            pairs,
            block,
            seq_len,
        })
    }

    /// Every causal block, i.e. dense causal attention.
    pub fn full(seq_len: usize, block: usize) -> Result<Self> {
        let nb = block_count(seq_len, block.max(1));
        Self::block_set(
            seq_len,
            block,
            (0..nb).flat_map(|qb| (0..=qb).map(move |kb| (qb, kb))),
        )
    }

    #[inline]
    pub fn seq_len(&self) -> usize {
        match self {
            Self::VerticalSlash { seq_len, .. } | Self::BlockSet { seq_len, .. } => *seq_len,
        }
    }

    #[inline]
    pub fn block(&self) -> usize {
        match self {
            Self::VerticalSlash { block, .. } | Self::BlockSet { block, .. } => *block,
        }
    }

    pub fn num_blocks(&self) -> usize {
        block_count(self.seq_len(), self.block())
    }

    /// Whether the causal pair `(i, j)` is selected.
    pub fn contains(&self, i: usize, j: usize) -> bool {
        if j > i || i >= self.seq_len() {
            return false;
        }
        match self {
            Self::VerticalSlash {
                verticals, slashes, ..
            } => verticals.contains(&j) || slashes.contains(&(i - j)),
            Self::BlockSet { pairs, block, .. } => pairs.contains(&(i / block, j / block)),
        }
    }

    /// Selected keys of query row `i`, ascending.
    pub fn row_keys(&self, i: usize) -> Vec<usize> {
        match self {
            Self::VerticalSlash {
                verticals, slashes, ..
            } => {
                let mut keys: Vec<usize> = verticals.range(..=i).copied().collect();
                keys.extend(slashes.range(..=i).map(|s| i - s));
                keys.sort_unstable();
                keys.dedup();
                keys
            }
            Self::BlockSet { pairs, block, .. } => {
                let qb = i / block;
                pairs
                    .range((qb, 0)..=(qb, qb))
                    .flat_map(|&(_, kb)| kb * block..((kb + 1) * block).min(i + 1))
                    .collect()
            }
        }
    }

    /// All selected element pairs. Quadratic in the selection size; meant for
    /// verification at small sequence lengths.
    pub fn expand(&self) -> BTreeSet<(usize, usize)> {
        let n = self.seq_len();
        let mut out = BTreeSet::new();
        match self {
            Self::VerticalSlash {
                verticals, slashes, ..
            } => {
                for &j in verticals {
                    out.extend((j..n).map(|i| (i, j)));
                }
                for &o in slashes {
                    out.extend((o..n).map(|i| (i, i - o)));
                }
            }
            Self::BlockSet { pairs, block, .. } => {
                for &(qb, kb) in pairs {
                    for i in qb * block..((qb + 1) * block).min(n) {
                        for j in kb * block..((kb + 1) * block).min(i + 1) {
                            out.insert((i, j));
                        }
                    }
                }
            }
        }
        out
    }

    /// `|expand()|` computed without materializing the pairs.
    pub fn pair_count(&self) -> u64 {
        let n = self.seq_len();
        match self {
            Self::VerticalSlash {
                verticals, slashes, ..
            } => {
                let lines: u64 = verticals
                    .iter()
                    .chain(slashes)
                    .map(|&x| (n - x) as u64)
                    .sum();
                // vertical j and slash o share exactly the pair (j + o, j)
                let sorted: Vec<usize> = slashes.iter().copied().collect();
                let overlap: u64 = verticals
                    .iter()
                    .map(|&j| sorted.partition_point(|&o| j + o < n) as u64)
                    .sum();
                lines - overlap
            }
            Self::BlockSet { pairs, block, .. } => pairs
                .iter()
                .map(|&(qb, kb)| {
                    let rows = (((qb + 1) * block).min(n) - qb * block) as u64;
                    if qb == kb {
                        rows * (rows + 1) / 2
                    } else {
                        rows * *block as u64
                    }
                })
                .sum(),
        }
    }

    /// Fraction of causal pairs left out.
    pub fn sparsity_ratio(&self) -> f64 {
        1.0 - self.pair_count() as f64 / causal_pair_count(self.seq_len()) as f64
    }

    /// Key blocks touched by each query block, ascending. For a
    /// `VerticalSlash` set a key block is listed when any selected line
    /// crosses the tile.
    pub fn rasterize(&self) -> Vec<Vec<usize>> {
        let n = self.seq_len();
        let block = self.block();
        let nb = self.num_blocks();
        match self {
            Self::BlockSet { pairs, .. } => (0..nb)
                .map(|qb| pairs.range((qb, 0)..=(qb, qb)).map(|&(_, kb)| kb).collect())
                .collect(),
            Self::VerticalSlash {
                verticals, slashes, ..
            } => (0..nb)
                .map(|qb| {
                    let lo = qb * block;
                    let hi = ((qb + 1) * block).min(n);
                    let mut touched = vec![false; qb + 1];
                    for &j in verticals.range(..hi) {
                        touched[j / block] = true;
                    }
                    for &o in slashes.range(..hi) {
                        let first = lo.max(o) - o;
                        let last = hi - 1 - o;
                        for t in &mut touched[first / block..=last / block] {
                            *t = true;
                        }
                    }
                    touched
                        .iter()
                        .enumerate()
                        .filter_map(|(kb, &t)| t.then_some(kb))
                        .collect()
                })
                .collect(),
        }
    }

    /// Block-granular view of this set.
    pub fn to_block_set(&self) -> Self {
        match self {
            Self::BlockSet { .. } => self.clone(),
            Self::VerticalSlash { block, seq_len, .. } => Self::BlockSet {
                pairs: self
                    .rasterize()
                    .into_iter()
                    .enumerate()
                    .flat_map(|(qb, kbs)| kbs.into_iter().map(move |kb| (qb, kb)))
                    .collect(),
                block: *block,
                seq_len: *seq_len,
            },
        }
    }

    /// Membership tester with O(1) lookups for kernel inner loops.
    pub(crate) fn membership(&self) -> Membership {
        match self {
            Self::BlockSet { .. } => Membership::WholeBlocks,
            Self::VerticalSlash {
                verticals,
                slashes,
                seq_len,
                ..
            } => {
                let mut vertical = vec![false; *seq_len];
                let mut slash = vec![false; *seq_len];
                for &j in verticals {
                    vertical[j] = true;
                }
                for &o in slashes {
                    slash[o] = true;
                }
                Membership::Lines { vertical, slash }
            }
        }
    }
}

pub(crate) enum Membership {
    WholeBlocks,
    Lines {
        vertical: Vec<bool>,
        slash: Vec<bool>,
    },
}

impl Membership {
    /// Whether causal pair `(i, j)` inside an already-selected tile is kept.
    #[inline]
    pub(crate) fn keeps(&self, i: usize, j: usize) -> bool {
        match self {
            Membership::WholeBlocks => true,
            Membership::Lines { vertical, slash } => vertical[j] || slash[i - j],
        }
    }
}

fn check_geometry(seq_len: usize, block: usize) -> Result<()> {
    if seq_len == 0 {
        return Err(Error::InvalidIndexSet(
            "sequence length must be >= 1".into(),
        ));
    }
    if block == 0 {
        return Err(Error::InvalidIndexSet("block size must be >= 1".into()));
    }
    Ok(())
}
