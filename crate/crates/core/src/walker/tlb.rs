use serde::{Deserialize, Serialize};

use crate::addressing::{PhysAddr, VirtAddr};
use crate::pagetable::{PageSize, Translation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlbConfig {
    pub entries: usize,
    pub ways: usize,
    pub latency: u32,
}

impl TlbConfig {
    pub const fn l1_4k() -> Self {
        Self { entries: 64, ways: 4, latency: 1 }
    }

    pub const fn l1_2m() -> Self {
        Self { entries: 32, ways: 4, latency: 1 }
    }

    pub const fn l2() -> Self {
        Self { entries: 1536, ways: 12, latency: 9 }
    }

    /// 16-entry fully associative gPA -> hPA cache.
    pub const fn nested() -> Self {
        Self { entries: 16, ways: 16, latency: 1 }
    }

    pub fn sets(&self) -> usize {
        self.entries / self.ways.max(1)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.ways == 0 || !self.entries.is_multiple_of(self.ways) {
            return Err(format!("{} entries do not divide into {} ways", self.entries, self.ways));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    vpn: u64,
    frame: PhysAddr,
    size: PageSize,
    stamp: u64,
    valid: bool,
}

const EMPTY: Slot = Slot { vpn: 0, frame: PhysAddr::new(0), size: PageSize::Size4K, stamp: 0, valid: false };

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitCounters {
    pub lookups: u64,
    pub hits: u64,
}

impl HitCounters {
    pub fn misses(&self) -> u64 {
        self.lookups - self.hits
    }

    pub fn hit_rate(&self) -> f64 {
        if self.lookups == 0 {
            0.0
        } else {
            self.hits as f64 / self.lookups as f64
        }
    }
}

/// Set-associative translation cache with LRU per set. Each page size
/// indexes its own set from the page number.
#[derive(Debug, Clone)]
pub struct Tlb {
    cfg: TlbConfig,
    sizes: Vec<PageSize>,
    slots: Vec<Slot>,
    clock: u64,
    counters: HitCounters,
}

impl Tlb {
    pub fn new(cfg: TlbConfig, sizes: &[PageSize]) -> Self {
        Self { cfg, sizes: sizes.to_vec(), slots: vec![EMPTY; cfg.entries], clock: 0, counters: HitCounters::default() }
    }

    pub fn config(&self) -> &TlbConfig {
        &self.cfg
    }

    pub fn supports(&self, size: PageSize) -> bool {
        self.sizes.contains(&size)
    }

    fn set_range(&self, vpn: u64) -> std::ops::Range<usize> {
        let sets = self.cfg.sets();
        if sets == 0 {
            return 0..0;
        }
        let set = (vpn % sets as u64) as usize;
        set * self.cfg.ways..(set + 1) * self.cfg.ways
    }

    /// Probes every supported page size; counts one lookup.
    pub fn lookup(&mut self, addr: u64) -> Option<Translation> {
        self.clock += 1;
        self.counters.lookups += 1;
        for i in 0..self.sizes.len() {
            let size = self.sizes[i];
            let vpn = addr >> size.shift();
            let range = self.set_range(vpn);
            if let Some(s) = self.slots[range].iter_mut().find(|s| s.valid && s.size == size && s.vpn == vpn) {
                s.stamp = self.clock;
                self.counters.hits += 1;
                return Some(Translation { frame: s.frame, size });
            }
        }
        None
    }

    pub fn fill(&mut self, addr: u64, t: Translation) {
        if !self.supports(t.size) {
            return;
        }
        self.clock += 1;
        let vpn = addr >> t.size.shift();
        let range = self.set_range(vpn);
        let new = Slot { vpn, frame: t.frame, size: t.size, stamp: self.clock, valid: true };
        let set = &mut self.slots[range];
        if set.is_empty() {
            return;
        }
        let way = set
            .iter()
            .position(|s| s.valid && s.size == t.size && s.vpn == vpn)
            .or_else(|| set.iter().position(|s| !s.valid))
            .unwrap_or_else(|| set.iter().enumerate().min_by_key(|(_, s)| s.stamp).map(|(i, _)| i).unwrap());
        set[way] = new;
    }

    pub fn flush(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = EMPTY);
    }

    pub fn counters(&self) -> HitCounters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = HitCounters::default();
    }

    pub fn occupancy(&self) -> usize {
        self.slots.iter().filter(|s| s.valid).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TlbsConfig {
    pub enabled: bool,
    pub l1_4k: TlbConfig,
    pub l1_2m: TlbConfig,
    pub l2: TlbConfig,
}

impl Default for TlbsConfig {
    fn default() -> Self {
        Self { enabled: true, l1_4k: TlbConfig::l1_4k(), l1_2m: TlbConfig::l1_2m(), l2: TlbConfig::l2() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TlbLevel {
    L1,
    L2,
    Miss,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlbStats {
    pub lookups: u64,
    pub l1_hits: u64,
    pub l2_hits: u64,
    pub misses: u64,
}

impl TlbStats {
    pub fn l2_miss_rate(&self) -> f64 {
        if self.lookups == 0 {
            0.0
        } else {
            self.misses as f64 / self.lookups as f64
        }
    }
}

/// Split L1 (4 kB and 2 MB) plus unified L2.
#[derive(Debug, Clone)]
pub struct Tlbs {
    enabled: bool,
    pub l1_4k: Tlb,
    pub l1_2m: Tlb,
    pub l2: Tlb,
    stats: TlbStats,
}

impl Tlbs {
    pub fn new(cfg: &TlbsConfig) -> Self {
        Self {
            enabled: cfg.enabled,
            l1_4k: Tlb::new(cfg.l1_4k, &[PageSize::Size4K]),
            l1_2m: Tlb::new(cfg.l1_2m, &[PageSize::Size2M]),
            l2: Tlb::new(cfg.l2, &[PageSize::Size4K, PageSize::Size2M]),
            stats: TlbStats::default(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    /// Returns the hit (if any), the level that answered and the lookup
    /// latency. Both L1 structures are probed in parallel.
    pub fn lookup(&mut self, va: VirtAddr) -> (Option<Translation>, TlbLevel, u32) {
        self.stats.lookups += 1;
        if !self.enabled {
            self.stats.misses += 1;
            return (None, TlbLevel::Miss, 0);
        }
        let a = va.as_u64();
        let l1_latency = self.l1_4k.config().latency.max(self.l1_2m.config().latency);
        let hit = self.l1_4k.lookup(a).or_else(|| self.l1_2m.lookup(a));
        if let Some(t) = hit {
            self.stats.l1_hits += 1;
            return (Some(t), TlbLevel::L1, l1_latency);
        }
        let latency = l1_latency + self.l2.config().latency;
        if let Some(t) = self.l2.lookup(a) {
            self.stats.l2_hits += 1;
            self.fill_l1(a, t);
            return (Some(t), TlbLevel::L2, latency);
        }
        self.stats.misses += 1;
        (None, TlbLevel::Miss, latency)
    }

    fn fill_l1(&mut self, a: u64, t: Translation) {
        match t.size {
            PageSize::Size4K => self.l1_4k.fill(a, t),
            PageSize::Size2M => self.l1_2m.fill(a, t),
            PageSize::Size1G => {}
        }
    }

    pub fn fill(&mut self, va: VirtAddr, t: Translation) {
        if !self.enabled {
            return;
        }
        let a = va.as_u64();
        self.fill_l1(a, t);
        self.l2.fill(a, t);
    }

    pub fn flush(&mut self) {
        self.l1_4k.flush();
        self.l1_2m.flush();
        self.l2.flush();
    }

    pub fn stats(&self) -> TlbStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = TlbStats::default();
        self.l1_4k.reset_counters();
        self.l1_2m.reset_counters();
        self.l2.reset_counters();
    }
}
