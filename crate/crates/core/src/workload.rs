//! Synthetic Q/K/V generators with planted attention structure.
//!
//! Structure is planted in logit space: queries and keys receive aligned
//! components so that `q·k/√d` carries a chosen boost, on top of small
//! noise kept orthogonal to the planted directions.
//!
//! Randomness comes from ChaCha8 seeded with `seed` through
//! `SeedableRng::seed_from_u64`. Uniform variates take the top 53 bits of
//! each 64-bit output; "Gaussian-like" variates are centred Irwin-Hall sums
//! of four uniforms scaled to unit variance. Every tensor is rounded to
//! `f32`, the storage precision of tensor files.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Noise amplitude of query/key entries outside the planted directions.
const QK_NOISE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadKind {
    /// A few key columns that every query is drawn to. Column 0 is always
    /// one of them.
    Needle {
        spike_count: usize,
        spike_gain: f64,
    },
    /// Query and key segments assigned to clusters; a query segment attends
    /// to earlier key segments of its own cluster.
    Blocky {
        clusters: usize,
        cluster_gain: f64,
        segment_len: usize,
    },
    /// Attention decaying with distance; the logit drops by `decay_rate`
    /// at distance `window`.
    Local {
        window: usize,
        decay_rate: f64,
    },
    Random,
}

impl WorkloadKind {
    pub fn needle() -> Self {
        Self::Needle {
            spike_count: 4,
            spike_gain: 10.0,
        }
    }

    pub fn blocky() -> Self {
        Self::Blocky {
            clusters: 4,
            cluster_gain: 8.0,
            segment_len: 128,
        }
    }

    pub fn local(window: usize) -> Self {
        Self::Local {
            window,
            decay_rate: 4.5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Needle { .. } => "needle",
            Self::Blocky { .. } => "blocky",
            Self::Local { .. } => "local",
            Self::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    #[serde(flatten)]
    pub kind: WorkloadKind,
    pub seq_len: usize,
    pub dim: usize,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, seq_len: usize, dim: usize, seed: u64) -> Self {
        Self {
            kind,
            seq_len,
            dim,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.seq_len == 0 || self.dim == 0 {
            return bad("sequence length and dimension must be >= 1".into());
        }
        match self.kind {
            WorkloadKind::Needle {
                spike_count,
                spike_gain,
            } => {
                if spike_count == 0 || spike_count > self.seq_len {
                    return bad(format!(
                        "spike count {spike_count} outside 1..={}",
                        self.seq_len
                    ));
                }
                if !(spike_gain > 0.0) {
                    return bad("spike gain must be positive".into());
                }
            }
            WorkloadKind::Blocky {
                clusters,
                cluster_gain,
                segment_len,
            } => {
                if clusters == 0 || clusters > self.dim {
                    return bad(format!("cluster count {clusters} outside 1..={}", self.dim));
                }
                if !(cluster_gain > 0.0) {
                    return bad("cluster gain must be positive".into());
                }
                if segment_len == 0 {
                    return bad("segment length must be >= 1".into());
                }
            }
            WorkloadKind::Local { window, decay_rate } => {
                if window == 0 || window > self.seq_len {
                    return bad(format!("window {window} outside 1..={}", self.seq_len));
                }
                if !(decay_rate > 0.0) {
                    return bad("decay rate must be positive".into());
                }
                if self.dim < 2 {
                    return bad("local workloads need dim >= 2".into());
                }
            }
            WorkloadKind::Random => {}
        }
        Ok(())
    }
}

/// What the generator planted, for checking recovered structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantedStructure {
    Needle {
        columns: Vec<usize>,
    },
    /// `(query_segment, key_segment)` pairs sharing a cluster.
    Blocky {
        segment_len: usize,
        pairs: Vec<(usize, usize)>,
    },
    Local {
        window: usize,
    },
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub q: Tensor2D,
    pub k: Tensor2D,
    pub v: Tensor2D,
    pub truth: PlantedStructure,
}

/// Seeded source of portable pseudo-random numbers.
pub struct Prng(ChaCha8Rng);

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Zero mean, unit variance, bell-shaped on `[-2√3, 2√3]`.
    pub fn gaussian_like(&mut self) -> f64 {
        let s: f64 = (0..4).map(|_| self.uniform()).sum();
        (s - 2.0) * 3f64.sqrt()
    }

    /// Uniform integer in `0..n` by rejection.
    pub fn below(&mut self, n: usize) -> usize {
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.0.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    fn matrix(&mut self, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..cols).map(|_| scale * self.gaussian_like()).collect())
            .collect()
    }
}

/// Gram-Schmidt on `count` random directions.
fn orthonormal_directions(rng: &mut Prng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gaussian_like()).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        for (x, y) in v.iter_mut().zip(b) {
            *x -= p * y;
        }
    }
}

fn add_scaled(v: &mut [f64], dir: &[f64], scale: f64) {
    for (x, y) in v.iter_mut().zip(dir) {
        *x += scale * y;
    }
}

fn to_tensor(rows: Vec<Vec<f64>>, cols: usize) -> Result<Tensor2D> {
    let n = rows.len();
    Ok(Tensor2D::new(n, cols, rows.into_iter().flatten().collect())?.round_to_f32())
}

pub fn generate(spec: &WorkloadSpec) -> Result<Workload> {
    spec.validate()?;
    let (n, d) = (spec.seq_len, spec.dim);
    let mut rng = Prng::new(spec.seed);
    let sqrt_d = (d as f64).sqrt();
    let (q, k, truth) = match spec.kind {
        WorkloadKind::Random => (
            rng.matrix(n, d, 1.0),
            rng.matrix(n, d, 1.0),
            PlantedStructure::None,
        ),
        WorkloadKind::Needle {
            spike_count,
            spike_gain,
        } => {
            let dir = orthonormal_directions(&mut rng, 1, d);
            let mut columns = vec![0];
            while columns.len() < spike_count {
                let c = rng.below(n);
                if !columns.contains(&c) {
                    columns.push(c);
                }
            }
            columns.sort_unstable();
            let amp = (spike_gain * sqrt_d).sqrt();
            let mut q = rng.matrix(n, d, QK_NOISE);
            let mut k = rng.matrix(n, d, QK_NOISE);
            for row in &mut q {
                project_out(row, &dir);
                add_scaled(row, &dir[0], amp);
            }
            for row in &mut k {
                project_out(row, &dir);
            }
            for &c in &columns {
                add_scaled(&mut k[c], &dir[0], amp);
            }
            (q, k, PlantedStructure::Needle { columns })
        }
        WorkloadKind::Blocky {
            clusters,
            cluster_gain,
            segment_len,
        } => {
            let dirs = orthonormal_directions(&mut rng, clusters, d);
            let segments = n.div_ceil(segment_len);
            let key_cluster: Vec<usize> = (0..segments).map(|_| rng.below(clusters)).collect();
            // a query segment never shares its own segment's key cluster
            let query_cluster: Vec<usize> = key_cluster
                .iter()
                .map(|&kc| {
                    if clusters == 1 {
                        0
                    } else {
                        (kc + 1 + rng.below(clusters - 1)) % clusters
                    }
                })
                .collect();
            let amp = (cluster_gain * sqrt_d).sqrt();
            let mut q = rng.matrix(n, d, QK_NOISE);
            let mut k = rng.matrix(n, d, QK_NOISE);
            for (i, (qr, kr)) in q.iter_mut().zip(k.iter_mut()).enumerate() {
                let seg = i / segment_len;
                project_out(qr, &dirs);
                project_out(kr, &dirs);
                add_scaled(qr, &dirs[query_cluster[seg]], amp);
                add_scaled(kr, &dirs[key_cluster[seg]], amp);
            }
            let pairs = (0..segments)
                .flat_map(|qs| (0..=qs).map(move |ks| (qs, ks)))
                .filter(|&(qs, ks)| query_cluster[qs] == key_cluster[ks])
                .collect();
            (q, k, PlantedStructure::Blocky { segment_len, pairs })
        }
        WorkloadKind::Local { window, decay_rate } => {
            // logit(i, j) = A·cos(ω(i - j)) with ω = π/n is monotone in |i - j|
            let omega = std::f64::consts::PI / n as f64;
            let gain = decay_rate / (1.0 - (omega * window as f64).cos());
            let amp = (gain * sqrt_d).sqrt();
            let mut q = rng.matrix(n, d, QK_NOISE);
            let mut k = rng.matrix(n, d, QK_NOISE);
            for (i, (qr, kr)) in q.iter_mut().zip(k.iter_mut()).enumerate() {
                let (s, c) = (omega * i as f64).sin_cos();
                qr[0] = amp * c;
                qr[1] = amp * s;
                kr[0] = amp * c;
                kr[1] = amp * s;
            }
            (q, k, PlantedStructure::Local { window })
        }
    };
    let v = rng.matrix(n, d, 1.0);
    Ok(Workload {
        q: to_tensor(q, d)?,
        k: to_tensor(k, d)?,
        v: to_tensor(v, d)?,
        truth,
    })
}

/// Seed used for head `head` of a multi-head workload.
pub fn head_seed(seed: u64, head: usize) -> u64 {
    seed.wrapping_add((head as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// `heads` independent draws of the same kind, seeded per head.
pub fn generate_heads(spec: &WorkloadSpec, heads: usize) -> Result<Vec<Workload>> {
    (0..heads)
        .map(|h| {
            generate(&WorkloadSpec {
                seed: head_seed(spec.seed, h),
                ..spec.clone()
            })
        })
        .collect()
}
