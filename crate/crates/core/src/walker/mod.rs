//! Native translation: TLBs, paging-structure caches, and the serial page
//! walk that sends every entry read into the memory hierarchy.

mod pwc;
mod tlb;

use serde::{Deserialize, Serialize};

pub use pwc::{PartialWalk, Pwc, PwcConfig, PwcStore};
pub use tlb::{HitCounters, Tlb, TlbConfig, TlbLevel, TlbStats, Tlbs, TlbsConfig};

use crate::addressing::{bit_field, PhysAddr, VirtAddr, PAGE_OFFSET_BITS};
use crate::memhier::{AccessKind, MemHierarchy, ServicedAt};
use crate::pagetable::{PageTable, Translation};

/// Which table an access belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Native,
    Guest,
    Host,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkAccess {
    /// Address sent to the memory hierarchy.
    pub addr: PhysAddr,
    pub serviced_at: ServicedAt,
    pub latency: u32,
    pub dimension: Dimension,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkResult {
    pub accesses: Vec<WalkAccess>,
    /// Levels skipped through the PWC (guest dimension when virtualized).
    pub skipped_levels: u32,
    /// Levels skipped through the vPWC, summed over host walks.
    pub host_skipped_levels: u32,
    pub translation: Option<Translation>,
    /// TLB and PWC lookup cost plus the serial access latencies.
    pub total_latency: u32,
    /// Pointers followed by this walk, root first.
    pub followed: Vec<PartialWalk>,
}

impl WalkResult {
    pub fn pte_accesses(&self) -> usize {
        self.accesses.len()
    }

    pub fn dram_accesses(&self) -> usize {
        self.accesses.iter().filter(|a| a.serviced_at == ServicedAt::Dram).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranslateResult {
    pub translation: Option<Translation>,
    pub tlb_level: TlbLevel,
    /// Present on a TLB miss.
    pub walk: Option<WalkResult>,
    pub latency: u32,
}

/// Outcome of one table descent, independent of where entries are fetched.
#[derive(Debug, Clone)]
pub(crate) struct Descent {
    pub translation: Option<Translation>,
    pub skipped: u32,
    pub followed: Vec<PartialWalk>,
    pub pwc_probed: bool,
}

/// Walks `table` for `va`, starting from the deepest PWC hit. `fetch` is
/// called with the address of every entry read, in order. The PWC is filled
/// only when the walk reaches a terminal entry.
pub(crate) fn descend<E>(
    table: &PageTable,
    va: u64,
    pwc: &mut Pwc,
    mut fetch: impl FnMut(PhysAddr) -> Result<(), E>,
) -> Result<Descent, E> {
    let va_bits = table.va_bits();
    let pwc_probed = pwc.enabled();
    let (mut base, mut top, skipped) = match pwc.lookup_raw(va, va_bits) {
        Some(hit) => (hit.node, va_bits - hit.tag_bits, hit.skipped),
        None => (table.root().0, va_bits, 0),
    };
    let mut depth = skipped;
    let mut followed = Vec::with_capacity(4);
    let miss = |followed, skipped| Descent { translation: None, skipped, followed, pwc_probed };
    loop {
        let Some(node) = table.node(base) else {
            return Ok(miss(followed, skipped));
        };
        let w = node.index_bits();
        if top < w + PAGE_OFFSET_BITS {
            return Ok(miss(followed, skipped));
        }
        let idx = bit_field(va, top, w);
        fetch(node.entry_addr(idx))?;
        depth += 1;
        let e = node.entry(idx);
        if !e.is_present() {
            return Ok(miss(followed, skipped));
        }
        if e.is_terminal() {
            let translation = Some(Translation { frame: e.frame(), size: e.page_size() });
            pwc.fill_raw(va, va_bits, &followed);
            return Ok(Descent { translation, skipped, followed, pwc_probed });
        }
        top -= w;
        base = e.frame();
        followed.push(PartialWalk { tag_bits: va_bits - top, node: base, skipped: depth });
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkerConfig {
    pub tlb: TlbsConfig,
    pub pwc: PwcConfig,
}

impl WalkerConfig {
    /// No TLBs and no PWCs: every reference walks from the root.
    pub fn uncached() -> Self {
        Self { tlb: TlbsConfig { enabled: false, ..Default::default() }, pwc: PwcConfig::disabled() }
    }
}

/// Per-core native translation state.
#[derive(Debug, Clone)]
pub struct Walker {
    pub tlbs: Tlbs,
    pub pwc: Pwc,
}

impl Walker {
    pub fn new(cfg: &WalkerConfig) -> Self {
        Self { tlbs: Tlbs::new(&cfg.tlb), pwc: Pwc::new(cfg.pwc) }
    }

    pub fn translate(&mut self, va: VirtAddr, table: &PageTable, mem: &mut MemHierarchy) -> TranslateResult {
        let (hit, tlb_level, tlb_latency) = self.tlbs.lookup(va);
        if let Some(t) = hit {
            return TranslateResult { translation: Some(t), tlb_level, walk: None, latency: tlb_latency };
        }
        let mut walk = self.walk(va, table, mem);
        walk.total_latency += tlb_latency;
        if let Some(t) = walk.translation {
            self.tlbs.fill(va, t);
        }
        TranslateResult { translation: walk.translation, tlb_level, latency: walk.total_latency, walk: Some(walk) }
    }

    /// Page walk only; the TLBs are neither probed nor filled.
    pub fn walk(&mut self, va: VirtAddr, table: &PageTable, mem: &mut MemHierarchy) -> WalkResult {
        let mut accesses = Vec::with_capacity(4);
        let d = descend::<std::convert::Infallible>(table, va.as_u64(), &mut self.pwc, |addr| {
            let r = mem.access(addr, AccessKind::Pte, 0);
            accesses.push(WalkAccess { addr, serviced_at: r.serviced_at, latency: r.latency, dimension: Dimension::Native });
            Ok(())
        })
        .unwrap_or_else(|never| match never {});
        let pwc_cost = if d.pwc_probed { self.pwc.config().latency } else { 0 };
        let total_latency = pwc_cost + accesses.iter().map(|a| a.latency).sum::<u32>();
        WalkResult {
            accesses,
            skipped_levels: d.skipped,
            host_skipped_levels: 0,
            translation: d.translation,
            total_latency,
            followed: d.followed,
        }
    }

    pub fn flush(&mut self) {
        self.tlbs.flush();
        self.pwc.flush();
    }

    pub fn reset_stats(&mut self) {
        self.tlbs.reset_stats();
        self.pwc.reset_counters();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::LevelScheme;
    use crate::memhier::{GateConfig, HierarchyConfig};
    use crate::pagetable::{build_table, reference_translate, LayoutPolicy, MappingSet, PageSize, Unfragmented};

    const BASE: u64 = 0x1000_0000_0000;

    fn mem() -> MemHierarchy {
        MemHierarchy::new(HierarchyConfig::default(), GateConfig::default(), 0)
    }

    fn dense(pages: u64, scheme: &[u32]) -> PageTable {
        let mut m = MappingSet::new();
        for i in 0..pages {
            m.insert(VirtAddr::new_unchecked(BASE + (i << 12)), PhysAddr::new(i << 12), PageSize::Size4K).unwrap();
        }
        build_table(&m, &LayoutPolicy::new(LevelScheme::new(scheme).unwrap()), &mut Unfragmented)
    }

    fn va(off: u64) -> VirtAddr {
        VirtAddr::new_unchecked(BASE + off)
    }

    #[test]
    fn cold_walk_touches_every_level() {
        for (scheme, levels) in [(&[9, 9, 9, 9][..], 4), (&[18, 18][..], 2), (&[9, 18, 9][..], 3)] {
            let t = dense(1024, scheme);
            let mut w = Walker::new(&WalkerConfig::default());
            let r = w.translate(va(0x5123), &t, &mut mem());
            let walk = r.walk.unwrap();
            assert_eq!(walk.accesses.len(), levels, "{scheme:?}");
            assert_eq!(walk.skipped_levels, 0);
            assert_eq!(r.translation, reference_translate(&t, va(0x5123)));
        }
    }

    #[test]
    fn warm_pwc_leaves_one_access() {
        for scheme in [&[9, 9, 9, 9][..], &[18, 18][..]] {
            let t = dense(1024, scheme);
            let mut w = Walker::new(&WalkerConfig::default());
            let mut m = mem();
            w.translate(va(0), &t, &mut m);
            let r = w.translate(va(0x7000), &t, &mut m);
            let walk = r.walk.unwrap();
            assert_eq!(walk.accesses.len(), 1, "{scheme:?}");
            assert_eq!(walk.skipped_levels as usize, scheme.len() - 1);
            assert_eq!(walk.accesses.len() as u32 + walk.skipped_levels, scheme.len() as u32);
        }
    }

    #[test]
    fn tlb_hit_has_no_accesses() {
        let t = dense(16, &[9, 9, 9, 9]);
        let mut w = Walker::new(&WalkerConfig::default());
        let mut m = mem();
        w.translate(va(0x1000), &t, &mut m);
        let r = w.translate(va(0x1008), &t, &mut m);
        assert_eq!(r.tlb_level, TlbLevel::L1);
        assert!(r.walk.is_none());
        assert_eq!(r.latency, 1);
    }

    #[test]
    fn latency_adds_up() {
        let t = dense(16, &[9, 9, 9, 9]);
        let mut w = Walker::new(&WalkerConfig::default());
        let r = w.translate(va(0), &t, &mut mem());
        let walk = r.walk.unwrap();
        // TLB 1 + 9, PWC 1, four cold misses.
        assert_eq!(walk.total_latency, 10 + 1 + 4 * 212);
        assert_eq!(r.latency, walk.total_latency);
    }

    #[test]
    fn fill_records_each_followed_pointer() {
        let t = dense(16, &[9, 9, 9, 9]);
        let mut w = Walker::new(&WalkerConfig::default());
        w.translate(va(0), &t, &mut mem());
        assert_eq!(w.pwc.total_len(), 3);
        let s = LevelScheme::conventional();
        let hit = w.pwc.lookup(va(0x1000), &s).unwrap();
        assert_eq!(hit.skipped, 3);
        assert_eq!(w.pwc.lookup(VirtAddr::new_unchecked(BASE + (1 << 39)), &s), None);
    }

    #[test]
    fn unmapped_walk_still_costs_accesses() {
        let t = dense(16, &[9, 9, 9, 9]);
        let mut w = Walker::new(&WalkerConfig::default());
        let r = w.translate(va(1 << 30), &t, &mut mem());
        assert_eq!(r.translation, None);
        assert_eq!(r.walk.unwrap().accesses.len(), 2);
        assert_eq!(w.pwc.total_len(), 0);
    }

    #[test]
    fn uncached_walks_are_full_length() {
        let t = dense(64, &[9, 9, 9, 9]);
        let mut w = Walker::new(&WalkerConfig::uncached());
        let mut m = mem();
        for i in 0..64 {
            let r = w.translate(va(i << 12), &t, &mut m);
            assert_eq!(r.walk.unwrap().accesses.len(), 4);
        }
    }
}
