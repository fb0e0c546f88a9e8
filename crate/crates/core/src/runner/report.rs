use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memhier::{energy_report, AccessKind, EnergyError, EnergyLedger, LevelCounters};
use crate::pagetable::NodeCensus;
use crate::walker::{HitCounters, TlbStats};

use super::scenario::{Generator, Mode, Scenario};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSummary {
    pub generator: Generator,
    pub footprint: u64,
    pub references: u64,
    pub seed: u64,
}

/// Mean and percentiles of a small-integer distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub mean: f64,
    pub p50: u32,
    pub p90: u32,
    pub p99: u32,
    pub max: u32,
    /// `histogram[n]` counts walks with `n` accesses.
    pub histogram: Vec<u64>,
}

impl Distribution {
    pub fn from_histogram(histogram: Vec<u64>) -> Self {
        let total: u64 = histogram.iter().sum();
        let weighted: u64 = histogram.iter().enumerate().map(|(n, &c)| n as u64 * c).sum();
        let pct = |p: f64| -> u32 {
            let need = (p * total as f64).ceil() as u64;
            let mut acc = 0;
            for (n, &c) in histogram.iter().enumerate() {
                acc += c;
                if acc >= need.max(1) {
                    return n as u32;
                }
            }
            0
        };
        let max = histogram.iter().rposition(|&c| c > 0).unwrap_or(0) as u32;
        Self {
            mean: if total == 0 { 0.0 } else { weighted as f64 / total as f64 },
            p50: pct(0.5),
            p90: pct(0.9),
            p99: pct(0.99),
            max,
            histogram,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateSummary {
    pub windows: u64,
    pub prioritized_windows: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VirtSummary {
    pub guest_accesses_per_walk: f64,
    pub host_accesses_per_walk: f64,
    pub host_walks_per_walk: f64,
    pub mean_host_skipped_levels: f64,
    pub vpwc: HitCounters,
    pub nested_tlb: HitCounters,
    pub host_census: NodeCensus,
}

/// Everything measured by one run, after warm-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub mode: Mode,
    pub layout: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub host_layout: Option<String>,
    pub workload: WorkloadSummary,
    /// Measured references (excluding warm-up).
    pub references: u64,
    pub walks: u64,
    pub unmapped: u64,
    pub accesses_per_walk: Distribution,
    pub mean_walk_latency: f64,
    /// Per reference, TLB hits included.
    pub mean_translation_latency: f64,
    pub mean_skipped_levels: f64,
    pub pte_dram_per_walk: f64,
    pub tlb: TlbStats,
    pub pwc: HitCounters,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub virt: Option<VirtSummary>,
    pub caches: Vec<LevelCounters>,
    pub data_l2_miss_ratio: f64,
    pub pte_l2_miss_ratio: f64,
    pub energy: EnergyLedger,
    pub cache_energy: f64,
    pub dram_energy: f64,
    pub census: NodeCensus,
    pub replicated_entries: u64,
    pub distinct_pte_lines: u64,
    pub gate: GateSummary,
    pub config: Scenario,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn counter(&self, level: &str, kind: AccessKind) -> Option<&LevelCounters> {
        self.caches.iter().find(|c| c.level == level && c.kind == kind)
    }

    /// Human-readable summary with aligned columns.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("label".into(), self.label.clone()),
            ("mode".into(), format!("{:?}", self.mode).to_lowercase()),
            ("layout".into(), self.layout.clone()),
        ];
        if let Some(h) = &self.host_layout {
            rows.push(("host layout".into(), h.clone()));
        }
        let w = &self.workload;
        rows.extend([
            ("workload".into(), format!("{} over {} bytes, seed {}", w.generator, w.footprint, w.seed)),
            ("references".into(), self.references.to_string()),
            ("walks".into(), self.walks.to_string()),
            ("unmapped".into(), self.unmapped.to_string()),
            ("accesses/walk".into(), format!("{:.3}", self.accesses_per_walk.mean)),
            (
                "accesses/walk p50/p90/p99/max".into(),
                format!(
                    "{}/{}/{}/{}",
                    self.accesses_per_walk.p50, self.accesses_per_walk.p90, self.accesses_per_walk.p99, self.accesses_per_walk.max
                ),
            ),
            ("walk latency (cycles)".into(), format!("{:.2}", self.mean_walk_latency)),
            ("translation latency (cycles)".into(), format!("{:.2}", self.mean_translation_latency)),
            ("skipped levels/walk".into(), format!("{:.3}", self.mean_skipped_levels)),
            ("pte DRAM accesses/walk".into(), format!("{:.4}", self.pte_dram_per_walk)),
            ("L2 TLB miss rate".into(), format!("{:.4}", self.tlb.l2_miss_rate())),
            ("PWC hit rate".into(), format!("{:.4}", self.pwc.hit_rate())),
        ]);
        if let Some(v) = &self.virt {
            rows.extend([
                ("guest accesses/walk".into(), format!("{:.3}", v.guest_accesses_per_walk)),
                ("host accesses/walk".into(), format!("{:.3}", v.host_accesses_per_walk)),
                ("host walks/walk".into(), format!("{:.3}", v.host_walks_per_walk)),
                ("vPWC hit rate".into(), format!("{:.4}", v.vpwc.hit_rate())),
                ("nested TLB hit rate".into(), format!("{:.4}", v.nested_tlb.hit_rate())),
            ]);
        }
        rows.extend([
            ("data L2 miss ratio".into(), format!("{:.4}", self.data_l2_miss_ratio)),
            ("pte L2 miss ratio".into(), format!("{:.4}", self.pte_l2_miss_ratio)),
            ("cache energy".into(), format!("{:.0}", self.cache_energy)),
            ("DRAM energy".into(), format!("{:.0}", self.dram_energy)),
            (
                "page-table nodes 4k/2m/1g".into(),
                format!("{}/{}/{}", self.census.nodes_4k, self.census.nodes_2m, self.census.nodes_1g),
            ),
            ("page-table bytes".into(), self.census.total_bytes.to_string()),
            ("replicated entries".into(), self.replicated_entries.to_string()),
            ("distinct pte lines".into(), self.distinct_pte_lines.to_string()),
            ("prioritized windows".into(), format!("{}/{}", self.gate.prioritized_windows, self.gate.windows)),
        ]);
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("report {variant:?} ran a different workload than the baseline {baseline:?}")]
    WorkloadMismatch { baseline: String, variant: String },
    #[error(transparent)]
    Energy(#[from] EnergyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub metric: String,
    pub baseline: f64,
    pub value: f64,
    /// `(value - baseline) / baseline`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

fn relative(v: f64, base: f64) -> f64 {
    if base == 0.0 {
        if v == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(v)
        }
    } else {
        (v - base) / base
    }
}

fn metrics(r: &MetricsReport) -> Vec<(&'static str, f64)> {
    vec![
        ("accesses_per_walk", r.accesses_per_walk.mean),
        ("walk_latency", r.mean_walk_latency),
        ("translation_latency", r.mean_translation_latency),
        ("pte_dram_per_walk", r.pte_dram_per_walk),
        ("l2_tlb_miss_rate", r.tlb.l2_miss_rate()),
        ("data_l2_miss_ratio", r.data_l2_miss_ratio),
        ("pte_l2_miss_ratio", r.pte_l2_miss_ratio),
        ("distinct_pte_lines", r.distinct_pte_lines as f64),
        ("page_table_bytes", r.census.total_bytes as f64),
    ]
}

impl ComparisonReport {
    pub fn delta(&self, variant: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant && r.metric == metric).map(|r| r.delta)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,metric,baseline,value,delta\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.variant, r.metric, r.baseline, r.value, r.delta);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}

/// Relative deltas of each variant against `baseline`.
pub fn compare(baseline: &MetricsReport, variants: &[MetricsReport]) -> Result<ComparisonReport, CompareError> {
    let mut rows = Vec::new();
    let base_metrics = metrics(baseline);
    for v in variants {
        if v.workload != baseline.workload {
            return Err(CompareError::WorkloadMismatch { baseline: baseline.label.clone(), variant: v.label.clone() });
        }
        for ((name, b), (_, x)) in base_metrics.iter().zip(metrics(v)) {
            rows.push(ComparisonRow { variant: v.label.clone(), metric: name.to_string(), baseline: *b, value: x, delta: relative(x, *b) });
        }
        let e = energy_report(&v.energy, &baseline.energy)?;
        rows.push(ComparisonRow {
            variant: v.label.clone(),
            metric: "cache_energy".into(),
            baseline: baseline.cache_energy,
            value: v.cache_energy,
            delta: e.cache,
        });
        rows.push(ComparisonRow {
            variant: v.label.clone(),
            metric: "dram_energy".into(),
            baseline: baseline.dram_energy,
            value: v.dram_energy,
            delta: e.dram,
        });
    }
    Ok(ComparisonReport { baseline: baseline.label.clone(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_from_histogram() {
        let d = Distribution::from_histogram(vec![0, 50, 30, 15, 5]);
        assert_eq!(d.mean, (50.0 + 60.0 + 45.0 + 20.0) / 100.0);
        assert_eq!((d.p50, d.p90, d.p99, d.max), (1, 3, 4, 4));
        let empty = Distribution::from_histogram(vec![0; 5]);
        assert_eq!((empty.mean, empty.max), (0.0, 0));
    }

    #[test]
    fn relative_deltas() {
        assert_eq!(relative(2.0, 4.0), -0.5);
        assert_eq!(relative(0.0, 0.0), 0.0);
        assert_eq!(relative(1.0, 0.0), f64::INFINITY);
    }
}
