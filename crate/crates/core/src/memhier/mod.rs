//! Inclusive L1D/L2/L3 plus fixed-latency DRAM, shared by data and
//! page-table accesses.
//!
//! Lines remember whether they hold page-table entries. While the pressure
//! gate reports a high L2-TLB miss rate, L2 and L3 evictions prefer data
//! lines over page-table lines.

mod cache;
mod energy;
mod gate;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cache::{select_victim, victim_for_draw, CacheConfig, CacheLevel, KindCounters, Line, PRIORITIZE_DATA_EVICTION};
pub use energy::{energy_report, EnergyCoefficients, EnergyDelta, EnergyError, EnergyLedger, SplitCount};
pub use gate::{GateConfig, PressureGate};

use crate::addressing::PhysAddr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Data,
    Pte,
}

impl AccessKind {
    pub(crate) const fn slot(self) -> usize {
        match self {
            AccessKind::Data => 0,
            AccessKind::Pte => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AccessKind::Data => "data",
            AccessKind::Pte => "pte",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ServicedAt {
    L1,
    L2,
    L3,
    Dram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplacementMode {
    Normal,
    Prioritize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyConfig {
    pub l1: CacheConfig,
    pub l2: CacheConfig,
    pub l3: CacheConfig,
    pub dram_latency: u32,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self { l1: CacheConfig::l1d(), l2: CacheConfig::l2(), l3: CacheConfig::l3(), dram_latency: 170 }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, c) in [("l1", &self.l1), ("l2", &self.l2), ("l3", &self.l3)] {
            c.validate().map_err(|e| format!("{name}: {e}"))?;
        }
        if self.l1.line != self.l2.line || self.l2.line != self.l3.line {
            return Err("all levels must share one line size".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemAccess {
    pub latency: u32,
    pub serviced_at: ServicedAt,
}

/// One CSV row of the counter dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCounters {
    pub level: String,
    pub kind: AccessKind,
    pub probes: u64,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

#[derive(Debug, Clone)]
pub struct MemHierarchy {
    cfg: HierarchyConfig,
    l1: CacheLevel,
    l2: CacheLevel,
    l3: CacheLevel,
    dram: [u64; 2],
    gate: PressureGate,
    rng: ChaCha8Rng,
    coefficients: EnergyCoefficients,
}

impl MemHierarchy {
    pub fn new(cfg: HierarchyConfig, gate: GateConfig, seed: u64) -> Self {
        Self {
            cfg,
            l1: CacheLevel::new(cfg.l1),
            l2: CacheLevel::new(cfg.l2),
            l3: CacheLevel::new(cfg.l3),
            dram: [0; 2],
            gate: PressureGate::new(gate),
            rng: ChaCha8Rng::seed_from_u64(seed),
            coefficients: EnergyCoefficients::default(),
        }
    }

    pub fn with_coefficients(mut self, coefficients: EnergyCoefficients) -> Self {
        self.coefficients = coefficients;
        self
    }

    pub fn config(&self) -> &HierarchyConfig {
        &self.cfg
    }

    pub fn mode(&self) -> ReplacementMode {
        self.gate.mode()
    }

    pub fn gate(&self) -> &PressureGate {
        &self.gate
    }

    /// Feeds one trace reference into the pressure gate.
    pub fn update_pressure(&mut self, l2_tlb_miss: bool) -> ReplacementMode {
        self.gate.update_pressure(l2_tlb_miss)
    }

    /// Reads one line through the hierarchy, filling every level on the way
    /// back. Latencies are cumulative: the hit latency of the servicing level,
    /// or L3 latency plus DRAM latency on a full miss.
    pub fn access(&mut self, addr: PhysAddr, kind: AccessKind, ctx: u16) -> MemAccess {
        let line = self.l1.line_addr(addr.as_u64());
        let mode = self.gate.mode();
        if self.l1.probe(line, kind) {
            return MemAccess { latency: self.cfg.l1.latency, serviced_at: ServicedAt::L1 };
        }
        let serviced_at = if self.l2.probe(line, kind) {
            ServicedAt::L2
        } else if self.l3.probe(line, kind) {
            ServicedAt::L3
        } else {
            self.dram[kind.slot()] += 1;
            ServicedAt::Dram
        };
        if serviced_at == ServicedAt::Dram {
            if let Some(victim) = self.l3.fill(line, kind, ctx, mode, &mut self.rng) {
                // Inclusion: an L3 eviction removes the line everywhere.
                self.l2.invalidate(victim);
                self.l1.invalidate(victim);
            }
        }
        if serviced_at >= ServicedAt::L3 {
            if let Some(victim) = self.l2.fill(line, kind, ctx, mode, &mut self.rng) {
                self.l1.invalidate(victim);
            }
        }
        self.l1.fill(line, kind, ctx, ReplacementMode::Normal, &mut self.rng);
        let latency = match serviced_at {
            ServicedAt::L1 => unreachable!(),
            ServicedAt::L2 => self.cfg.l2.latency,
            ServicedAt::L3 => self.cfg.l3.latency,
            ServicedAt::Dram => self.cfg.l3.latency + self.cfg.dram_latency,
        };
        MemAccess { latency, serviced_at }
    }

    pub fn level(&self, at: ServicedAt) -> Option<&CacheLevel> {
        match at {
            ServicedAt::L1 => Some(&self.l1),
            ServicedAt::L2 => Some(&self.l2),
            ServicedAt::L3 => Some(&self.l3),
            ServicedAt::Dram => None,
        }
    }

    pub fn dram_accesses(&self, kind: AccessKind) -> u64 {
        self.dram[kind.slot()]
    }

    /// Clears access counters (not contents), e.g. after warm-up.
    pub fn reset_counters(&mut self) {
        self.l1.reset_counters();
        self.l2.reset_counters();
        self.l3.reset_counters();
        self.dram = [0; 2];
        self.gate.reset_window_stats();
    }

    pub fn counters(&self) -> Vec<LevelCounters> {
        let mut rows = Vec::new();
        for (name, level) in [("L1D", &self.l1), ("L2", &self.l2), ("L3", &self.l3)] {
            for kind in [AccessKind::Data, AccessKind::Pte] {
                let c = level.counters(kind);
                rows.push(LevelCounters {
                    level: name.into(),
                    kind,
                    probes: c.probes,
                    hits: c.hits,
                    misses: c.misses,
                    evictions: c.evictions,
                });
            }
        }
        for kind in [AccessKind::Data, AccessKind::Pte] {
            let n = self.dram[kind.slot()];
            rows.push(LevelCounters { level: "DRAM".into(), kind, probes: n, hits: n, misses: 0, evictions: 0 });
        }
        rows
    }

    pub fn counters_csv(&self) -> String {
        counters_to_csv(&self.counters())
    }

    pub fn ledger(&self) -> EnergyLedger {
        let split = |l: &CacheLevel| SplitCount {
            data: l.counters(AccessKind::Data).probes,
            pte: l.counters(AccessKind::Pte).probes,
        };
        EnergyLedger {
            coefficients: self.coefficients,
            l1: split(&self.l1),
            l2: split(&self.l2),
            l3: split(&self.l3),
            dram: SplitCount { data: self.dram[0], pte: self.dram[1] },
        }
    }
}

pub fn counters_to_csv(rows: &[LevelCounters]) -> String {
    let mut out = String::from("level,kind,probes,hits,misses,evictions\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.level, r.kind.name(), r.probes, r.hits, r.misses, r.evictions);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hier() -> MemHierarchy {
        MemHierarchy::new(HierarchyConfig::default(), GateConfig::default(), 1)
    }

    #[test]
    fn cold_then_warm() {
        let mut m = hier();
        let a = PhysAddr::new(0x1234_5640);
        let cold = m.access(a, AccessKind::Data, 0);
        assert_eq!(cold, MemAccess { latency: 42 + 170, serviced_at: ServicedAt::Dram });
        let warm = m.access(a, AccessKind::Data, 0);
        assert_eq!(warm, MemAccess { latency: 4, serviced_at: ServicedAt::L1 });
        // Same line, different byte.
        assert_eq!(m.access(a.add(8), AccessKind::Data, 0).latency, 4);
    }

    #[test]
    fn l1_sized_loop_hits_in_steady_state() {
        let mut m = hier();
        let lines = (32 << 10) / 64;
        for _ in 0..2 {
            for i in 0..lines {
                m.access(PhysAddr::new(i * 64), AccessKind::Data, 0);
            }
        }
        m.reset_counters();
        for i in 0..lines {
            assert_eq!(m.access(PhysAddr::new(i * 64), AccessKind::Data, 0).serviced_at, ServicedAt::L1);
        }
        let c = m.level(ServicedAt::L1).unwrap().counters(AccessKind::Data);
        assert_eq!((c.hits, c.misses), (lines, 0));
    }

    #[test]
    fn one_line_over_l1_capacity_thrashes() {
        let mut m = hier();
        // 9 lines in one L1 set (64 sets): stride 64 lines.
        let addrs: Vec<PhysAddr> = (0..9).map(|i| PhysAddr::new(i * 64 * 64)).collect();
        for _ in 0..3 {
            for &a in &addrs {
                m.access(a, AccessKind::Data, 0);
            }
        }
        m.reset_counters();
        for &a in &addrs {
            assert_eq!(m.access(a, AccessKind::Data, 0).serviced_at, ServicedAt::L2);
        }
    }

    #[test]
    fn probes_chain_between_levels() {
        let mut m = hier();
        let mut x = 0x9e37_79b9_7f4a_7c15u64;
        for i in 0..50_000u64 {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            let kind = if i % 3 == 0 { AccessKind::Pte } else { AccessKind::Data };
            m.access(PhysAddr::new(x % (64 << 20)), kind, 0);
        }
        for kind in [AccessKind::Data, AccessKind::Pte] {
            let l1 = m.level(ServicedAt::L1).unwrap().counters(kind);
            let l2 = m.level(ServicedAt::L2).unwrap().counters(kind);
            let l3 = m.level(ServicedAt::L3).unwrap().counters(kind);
            for c in [l1, l2, l3] {
                assert_eq!(c.hits + c.misses, c.probes);
            }
            assert_eq!(l2.probes, l1.misses);
            assert_eq!(l3.probes, l2.misses);
            assert_eq!(m.dram_accesses(kind), l3.misses);
        }
    }

    #[test]
    fn inclusion_holds_under_prioritization() {
        let gate = GateConfig { force: Some(ReplacementMode::Prioritize), ..Default::default() };
        let small = HierarchyConfig {
            l1: CacheConfig { size: 1 << 10, ways: 2, line: 64, latency: 4 },
            l2: CacheConfig { size: 4 << 10, ways: 4, line: 64, latency: 12 },
            l3: CacheConfig { size: 16 << 10, ways: 4, line: 64, latency: 42 },
            dram_latency: 170,
        };
        let mut m = MemHierarchy::new(small, gate, 3);
        let mut x = 12345u64;
        let mut touched = Vec::new();
        for i in 0..20_000u64 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let a = (x >> 20) % (1 << 20);
            let kind = if i % 2 == 0 { AccessKind::Pte } else { AccessKind::Data };
            m.access(PhysAddr::new(a), kind, 0);
            touched.push(a >> 6);
        }
        let l1 = m.level(ServicedAt::L1).unwrap();
        let l2 = m.level(ServicedAt::L2).unwrap();
        let l3 = m.level(ServicedAt::L3).unwrap();
        for &line in &touched {
            if l1.contains(line) {
                assert!(l2.contains(line));
            }
            if l2.contains(line) {
                assert!(l3.contains(line));
            }
        }
        // Page-table lines dominate the prioritized L3.
        let (data, pte) = l3.occupancy();
        assert!(pte > 2 * data, "data {data} pte {pte}");
    }

    #[test]
    fn csv_dump_has_a_row_per_level_and_kind() {
        let mut m = hier();
        m.access(PhysAddr::new(0), AccessKind::Pte, 0);
        let csv = m.counters_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "level,kind,probes,hits,misses,evictions");
        assert_eq!(lines.len(), 1 + 8);
        assert!(lines.contains(&"L1D,pte,1,0,1,0"));
        assert!(lines.contains(&"DRAM,pte,1,1,0,0"));
    }
}
