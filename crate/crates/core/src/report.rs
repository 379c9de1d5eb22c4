//! Run reports, heatmap grids and parameter sweeps.
//!
//! Reports serialize with a fixed field order and shortest round-trip float
//! formatting, so identical runs produce identical bytes.

use serde::{Deserialize, Serialize};

use crate::engine::{
    flexprefill_multihead, HeadConfig, HeadInput, HeadReport, INDEX_BUILD_OPS, PATTERN_SEARCH_OPS,
};
use crate::error::{Error, Result};
use crate::pattern::PatternKind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub pattern_search_ops: u64,
    pub index_build_ops: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            pattern_search_ops: PATTERN_SEARCH_OPS,
            index_build_ops: INDEX_BUILD_OPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub layer: usize,
    pub head: usize,
    #[serde(flatten)]
    pub report: HeadReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub layer: usize,
    pub query_specific: usize,
    pub vertical_slash: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub head_count: usize,
    pub mean_sparsity: f64,
    pub query_specific: usize,
    pub vertical_slash: usize,
    pub per_layer: Vec<LayerCounts>,
    pub total_flops: u64,
    pub dense_flops: u64,
    pub speedup: f64,
}

impl Aggregates {
    pub fn compute(heads: &[HeadEntry]) -> Self {
        let is_qs = |e: &HeadEntry| e.report.pattern.kind == PatternKind::QuerySpecific;
        let query_specific = heads.iter().filter(|e| is_qs(e)).count();
        let layers = heads.iter().map(|e| e.layer + 1).max().unwrap_or(0);
        let per_layer = (0..layers)
            .map(|layer| {
                let in_layer = heads.iter().filter(|e| e.layer == layer);
                let qs = in_layer.clone().filter(|e| is_qs(e)).count();
                LayerCounts {
                    layer,
                    query_specific: qs,
                    vertical_slash: in_layer.count() - qs,
                }
            })
            .collect();
        let total_flops = heads.iter().map(|e| e.report.flops.total).sum();
        let dense_flops = heads.iter().map(|e| e.report.flops.dense_baseline).sum();
        let sparsity_sum: f64 = heads.iter().map(|e| e.report.sparsity_ratio).sum();
        Self {
            head_count: heads.len(),
            mean_sparsity: if heads.is_empty() {
                0.0
            } else {
                sparsity_sum / heads.len() as f64
            },
            query_specific,
            vertical_slash: heads.len() - query_specific,
            per_layer,
            total_flops,
            dense_flops,
            speedup: if total_flops == 0 {
                1.0
            } else {
                dense_flops as f64 / total_flops as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: ToolInfo,
    pub config: HeadConfig,
    pub cost_model: CostModel,
    pub inputs: Vec<InputDigest>,
    pub heads: Vec<HeadEntry>,
    pub aggregates: Aggregates,
}

impl RunReport {
    pub fn new(
        tool: ToolInfo,
        config: HeadConfig,
        inputs: Vec<InputDigest>,
        heads: Vec<HeadEntry>,
    ) -> Self {
        let aggregates = Aggregates::compute(&heads);
        Self {
            tool,
            config,
            cost_model: CostModel::default(),
            inputs,
            heads,
            aggregates,
        }
    }

    /// True when the stored aggregates equal a fresh recomputation.
    pub fn aggregates_consistent(&self) -> bool {
        Aggregates::compute(&self.heads) == self.aggregates
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("report encoding: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::MalformedHeader(format!("report: {e}")))
    }
}

/// Runs every layer's heads and labels the results.
pub fn run_layers(
    layers: &[Vec<HeadInput>],
    cfg: &HeadConfig,
    parallelism: usize,
) -> Result<Vec<HeadEntry>> {
    let mut entries = Vec::new();
    for (layer, heads) in layers.iter().enumerate() {
        let results = flexprefill_multihead(heads, cfg, parallelism).map_err(|e| {
            e.failures
                .into_iter()
                .next()
                .map(|(_, err)| err)
                .unwrap_or_else(|| Error::InvalidArgument("multi-head run failed".into()))
        })?;
        entries.extend(
            results
                .into_iter()
                .enumerate()
                .map(|(head, (_, report))| HeadEntry {
                    layer,
                    head,
                    report,
                }),
        );
    }
    Ok(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapKind {
    Sparsity,
    Pattern,
    Jsd,
}

impl std::str::FromStr for HeatmapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparsity" => Ok(Self::Sparsity),
            "pattern" => Ok(Self::Pattern),
            "jsd" => Ok(Self::Jsd),
            other => Err(Error::InvalidArgument(format!(
                "unknown heatmap {other:?}; expected sparsity, pattern or jsd"
            ))),
        }
    }
}

impl HeatmapKind {
    pub const ALL: [HeatmapKind; 3] = [Self::Sparsity, Self::Pattern, Self::Jsd];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sparsity => "sparsity",
            Self::Pattern => "pattern",
            Self::Jsd => "jsd",
        }
    }

    fn value(self, r: &HeadReport) -> String {
        match self {
            Self::Sparsity => r.sparsity_ratio.to_string(),
            Self::Pattern => r.pattern.kind.code().to_string(),
            Self::Jsd => r.pattern.js_distance.to_string(),
        }
    }
}

/// Layer rows by head columns, header `layer,h0,h1,...`.
pub fn heatmap_csv(report: &RunReport, what: HeatmapKind) -> Result<String> {
    if report.heads.is_empty() {
        return Err(Error::InvalidArgument("report has no heads".into()));
    }
    let layers = report.heads.iter().map(|e| e.layer).max().unwrap() + 1;
    let heads = report.heads.iter().map(|e| e.head).max().unwrap() + 1;
    let mut grid: Vec<Vec<Option<String>>> = vec![vec![None; heads]; layers];
    for e in &report.heads {
        let cell = &mut grid[e.layer][e.head];
        if cell.is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate entry for layer {} head {}",
                e.layer, e.head
            )));
        }
        *cell = Some(what.value(&e.report));
    }
    let mut out = String::from("layer");
    for h in 0..heads {
        out.push_str(&format!(",h{h}"));
    }
    out.push('\n');
    for (layer, row) in grid.into_iter().enumerate() {
        out.push_str(&layer.to_string());
        for (head, cell) in row.into_iter().enumerate() {
            let cell = cell.ok_or_else(|| {
                Error::InvalidArgument(format!("missing entry for layer {layer} head {head}"))
            })?;
            out.push(',');
            out.push_str(&cell);
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Gamma,
    Tau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub mean_sparsity: f64,
    pub total_flops: u64,
    pub speedup: f64,
    /// Mean relative L2 error over heads, when the oracle ran.
    pub error_l2: Option<f64>,
    pub query_specific_heads: usize,
}

pub fn sweep(
    layers: &[Vec<HeadInput>],
    base: &HeadConfig,
    param: SweepParam,
    values: &[f64],
    parallelism: usize,
) -> Result<Vec<SweepRow>> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a sweep needs at least 2 points, got {}",
            values.len()
        )));
    }
    values
        .iter()
        .map(|&value| {
            let cfg = match param {
                SweepParam::Gamma => base.clone().with_gamma(value),
                SweepParam::Tau => base.clone().with_tau(value),
            };
            cfg.validate()?;
            let entries = run_layers(layers, &cfg, parallelism)?;
            let agg = Aggregates::compute(&entries);
            let errors: Option<Vec<f64>> = entries.iter().map(|e| e.report.error_l2).collect();
            Ok(SweepRow {
                param,
                value,
                mean_sparsity: agg.mean_sparsity,
                total_flops: agg.total_flops,
                speedup: agg.speedup,
                error_l2: errors.map(|e| e.iter().sum::<f64>() / e.len() as f64),
                query_specific_heads: agg.query_specific,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "param,value,mean_sparsity,total_flops,speedup,error_l2,query_specific_heads\n",
    );
    for r in rows {
        let param = match r.param {
            SweepParam::Gamma => "gamma",
            SweepParam::Tau => "tau",
        };
        out.push_str(&format!(
            "{param},{},{},{},{},{},{}\n",
            r.value,
            r.mean_sparsity,
            r.total_flops,
            r.speedup,
            r.error_l2.map(|e| e.to_string()).unwrap_or_default(),
            r.query_specific_heads
        ));
    }
    out
}

pub fn sweep_json(rows: &[SweepRow]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(rows)
        .map_err(|e| Error::InvalidArgument(format!("sweep encoding: {e}")))?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{generate, WorkloadKind, WorkloadSpec};

    #[test]
    fn json_round_trip_keeps_aggregates_exact() {
        let mut cfg = HeadConfig::default();
        cfg.block_size = 32;
        cfg.budget.min_budget_tokens = 32;
        let layers: Vec<Vec<HeadInput>> = (0..2)
            .map(|l| {
                (0..3)
                    .map(|h| {
                        let w = generate(&WorkloadSpec::new(
                            WorkloadKind::Random,
                            100 + 7 * h,
                            8,
                            l * 10 + h as u64,
                        ))
                        .unwrap();
                        HeadInput {
                            q: w.q,
                            k: w.k,
                            v: w.v,
                        }
                    })
                    .collect()
            })
            .collect();
        let entries = run_layers(&layers, &cfg, 2).unwrap();
        let tool = ToolInfo {
            name: "t".into(),
            version: "0".into(),
        };
        let report = RunReport::new(tool, cfg, vec![], entries);
        let back = RunReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
        assert!(back.aggregates_consistent());
        assert_eq!(back.aggregates.per_layer.len(), 2);
        let csv = heatmap_csv(&back, HeatmapKind::Pattern).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("layer,h0,h1,h2\n"));
    }

    #[test]
    fn heatmap_names_parse() {
        for k in HeatmapKind::ALL {
            assert_eq!(k.name().parse::<HeatmapKind>().unwrap(), k);
        }
        assert!("entropy".parse::<HeatmapKind>().is_err());
    }
}
