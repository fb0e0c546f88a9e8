//! Two-dimensional translation under nested paging.
//!
//! Every guest page-table entry lives at a guest-physical address, so the
//! walker must translate it through the host table before reading it. The
//! nested TLB caches those gPA -> hPA translations and the vPWC shortens the
//! host walks that remain. The final data gPA is translated the same way.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::{PhysAddr, VirtAddr};
use crate::memhier::{AccessKind, MemHierarchy};
use crate::pagetable::{PageSize, PageTable, Translation};
use crate::walker::{
    descend, Dimension, HitCounters, Pwc, PwcConfig, TlbConfig, TlbLevel, Tlbs, TlbsConfig, TranslateResult, WalkAccess,
    WalkResult,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VirtError {
    #[error("guest-physical address {0:#x} is not mapped by the host table")]
    HostUnmapped(u64),
}

/// Accesses of a cold nested walk with `g` guest and `h` host levels.
pub fn naive_access_count(g_levels: usize, h_levels: usize) -> usize {
    g_levels * h_levels + g_levels + h_levels
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NestedTlbConfig {
    pub enabled: bool,
    pub entries: usize,
    pub latency: u32,
}

impl Default for NestedTlbConfig {
    fn default() -> Self {
        let t = TlbConfig::nested();
        Self { enabled: true, entries: t.entries, latency: t.latency }
    }
}

/// Fully associative gPA page -> hPA cache with LRU.
#[derive(Debug, Clone)]
pub struct NestedTlb {
    enabled: bool,
    tlb: crate::walker::Tlb,
}

impl NestedTlb {
    pub fn new(cfg: NestedTlbConfig) -> Self {
        let geometry = TlbConfig { entries: cfg.entries, ways: cfg.entries.max(1), latency: cfg.latency };
        Self { enabled: cfg.enabled && cfg.entries > 0, tlb: crate::walker::Tlb::new(geometry, &[PageSize::Size4K, PageSize::Size2M]) }
    }

    pub fn lookup(&mut self, gpa: u64) -> Option<Translation> {
        if !self.enabled {
            return None;
        }
        self.tlb.lookup(gpa)
    }

    pub fn fill(&mut self, gpa: u64, t: Translation) {
        if self.enabled {
            self.tlb.fill(gpa, t);
        }
    }

    pub fn latency(&self) -> u32 {
        if self.enabled {
            self.tlb.config().latency
        } else {
            0
        }
    }

    pub fn counters(&self) -> HitCounters {
        self.tlb.counters()
    }

    pub fn flush(&mut self) {
        self.tlb.flush();
    }

    pub fn reset_counters(&mut self) {
        self.tlb.reset_counters();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VirtConfig {
    /// TLBs caching the combined gVA -> hPA translation.
    pub tlb: TlbsConfig,
    pub guest_pwc: PwcConfig,
    pub vpwc: PwcConfig,
    pub nested_tlb: NestedTlbConfig,
}

impl VirtConfig {
    pub fn uncached() -> Self {
        Self {
            tlb: TlbsConfig { enabled: false, ..Default::default() },
            guest_pwc: PwcConfig::disabled(),
            vpwc: PwcConfig::disabled(),
            nested_tlb: NestedTlbConfig { enabled: false, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestedCounters {
    pub host_walks: u64,
    pub host_walk_accesses: u64,
}

#[derive(Debug, Clone)]
pub struct VirtWalker {
    pub tlbs: Tlbs,
    pub guest_pwc: Pwc,
    pub vpwc: Pwc,
    pub nested_tlb: NestedTlb,
    counters: NestedCounters,
}

/// State a host translation needs, borrowed apart from the guest PWC.
struct HostSide<'a> {
    host: &'a PageTable,
    vpwc: &'a mut Pwc,
    nested_tlb: &'a mut NestedTlb,
    mem: &'a mut MemHierarchy,
    accesses: &'a mut Vec<WalkAccess>,
    latency: u32,
    host_skipped: u32,
    counters: &'a mut NestedCounters,
}

impl HostSide<'_> {
    /// gPA -> host translation of the containing page.
    fn translate(&mut self, gpa: u64) -> Result<Translation, VirtError> {
        self.latency += self.nested_tlb.latency();
        if let Some(t) = self.nested_tlb.lookup(gpa) {
            return Ok(t);
        }
        self.counters.host_walks += 1;
        let mem = &mut *self.mem;
        let accesses = &mut *self.accesses;
        let mut latency = 0;
        let d = descend::<std::convert::Infallible>(self.host, gpa, self.vpwc, |addr| {
            let r = mem.access(addr, AccessKind::Pte, 0);
            latency += r.latency;
            accesses.push(WalkAccess { addr, serviced_at: r.serviced_at, latency: r.latency, dimension: Dimension::Host });
            Ok(())
        })
        .unwrap_or_else(|never| match never {});
        if d.pwc_probed {
            latency += self.vpwc.config().latency;
        }
        self.latency += latency;
        self.host_skipped += d.skipped;
        let t = d.translation.ok_or(VirtError::HostUnmapped(gpa))?;
        self.nested_tlb.fill(gpa, t);
        Ok(t)
    }
}

impl VirtWalker {
    pub fn new(cfg: &VirtConfig) -> Self {
        Self {
            tlbs: Tlbs::new(&cfg.tlb),
            guest_pwc: Pwc::new(cfg.guest_pwc),
            vpwc: Pwc::new(cfg.vpwc),
            nested_tlb: NestedTlb::new(cfg.nested_tlb),
            counters: NestedCounters::default(),
        }
    }

    /// Resolves `gva` to a host-physical translation. The returned
    /// translation has the smaller of the guest and host page sizes.
    pub fn nested_translate(
        &mut self,
        gva: VirtAddr,
        guest: &PageTable,
        host: &PageTable,
        mem: &mut MemHierarchy,
    ) -> Result<TranslateResult, VirtError> {
        let (hit, tlb_level, tlb_latency) = self.tlbs.lookup(gva);
        if let Some(t) = hit {
            return Ok(TranslateResult { translation: Some(t), tlb_level, walk: None, latency: tlb_latency });
        }
        let mut walk = self.walk(gva, guest, host, mem)?;
        walk.total_latency += tlb_latency;
        if let Some(t) = walk.translation {
            self.tlbs.fill(gva, t);
        }
        debug_assert_eq!(tlb_level, TlbLevel::Miss);
        Ok(TranslateResult { translation: walk.translation, tlb_level, latency: walk.total_latency, walk: Some(walk) })
    }

    /// The 2D walk alone, without the gVA TLBs.
    pub fn walk(
        &mut self,
        gva: VirtAddr,
        guest: &PageTable,
        host: &PageTable,
        mem: &mut MemHierarchy,
    ) -> Result<WalkResult, VirtError> {
        let mut accesses = Vec::with_capacity(8);
        let mut side = HostSide {
            host,
            vpwc: &mut self.vpwc,
            nested_tlb: &mut self.nested_tlb,
            mem,
            accesses: &mut accesses,
            latency: 0,
            host_skipped: 0,
            counters: &mut self.counters,
        };
        let d = descend(guest, gva.as_u64(), &mut self.guest_pwc, |entry_gpa: PhysAddr| {
            let g = entry_gpa.as_u64();
            let hpa = side.translate(g)?.resolve(g);
            let r = side.mem.access(hpa, AccessKind::Pte, 0);
            side.latency += r.latency;
            side.accesses.push(WalkAccess {
                addr: hpa,
                serviced_at: r.serviced_at,
                latency: r.latency,
                dimension: Dimension::Guest,
            });
            Ok(())
        })?;
        if d.pwc_probed {
            side.latency += self.guest_pwc.config().latency;
        }
        let translation = match d.translation {
            Some(gt) => {
                let data_gpa = gt.resolve(gva.as_u64()).as_u64();
                let ht = side.translate(data_gpa)?;
                let size = if gt.size.bytes() <= ht.size.bytes() { gt.size } else { ht.size };
                let hpa = ht.resolve(data_gpa).align_down(size.bytes());
                Some(Translation { frame: hpa, size })
            }
            None => None,
        };
        let (total_latency, host_skipped) = (side.latency, side.host_skipped);
        let host_accesses = accesses.iter().filter(|a| a.dimension == Dimension::Host).count() as u64;
        self.counters.host_walk_accesses += host_accesses;
        Ok(WalkResult {
            accesses,
            skipped_levels: d.skipped,
            host_skipped_levels: host_skipped,
            translation,
            total_latency,
            followed: d.followed,
        })
    }

    pub fn counters(&self) -> NestedCounters {
        self.counters
    }

    pub fn flush(&mut self) {
        self.tlbs.flush();
        self.guest_pwc.flush();
        self.vpwc.flush();
        self.nested_tlb.flush();
    }

    pub fn reset_stats(&mut self) {
        self.tlbs.reset_stats();
        self.guest_pwc.reset_counters();
        self.vpwc.reset_counters();
        self.nested_tlb.reset_counters();
        self.counters = NestedCounters::default();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::LevelScheme;
    use crate::memhier::{GateConfig, HierarchyConfig};
    use crate::pagetable::{build_table, build_table_in, reference_translate, LayoutPolicy, MappingSet, NodeRegion, Unfragmented};

    const GVA: u64 = 0x1000_0000_0000;
    const HOST: u64 = 0x1000_0000_0000;

    fn mem() -> MemHierarchy {
        MemHierarchy::new(HierarchyConfig::default(), GateConfig::default(), 0)
    }

    struct Pair {
        guest: PageTable,
        host: PageTable,
    }

    /// One guest data page of `g_size` at gPA 0 and a host table mapping it
    /// with `h_size` pages and every guest node with 4 kB pages.
    fn pair(g: &[u32], h: &[u32], g_size: PageSize, h_size: PageSize) -> Pair {
        let mut gm = MappingSet::new();
        gm.insert(VirtAddr::new_unchecked(GVA), PhysAddr::new(0), g_size).unwrap();
        let guest = build_table(&gm, &LayoutPolicy::new(LevelScheme::new(g).unwrap()).without_nf(), &mut Unfragmented);
        let mut hm = MappingSet::new();
        let mut off = 0;
        while off < g_size.bytes().max(h_size.bytes()) {
            hm.insert(VirtAddr::new_unchecked(off), PhysAddr::new(HOST + off), h_size).unwrap();
            off += h_size.bytes();
        }
        for n in guest.nodes() {
            for p in 0..n.size().bytes() >> 12 {
                let gpa = n.base().as_u64() + (p << 12);
                hm.insert(VirtAddr::new_unchecked(gpa), PhysAddr::new(HOST + gpa), PageSize::Size4K).unwrap();
            }
        }
        let region = NodeRegion {
            base_4k: PhysAddr::new(0x10_0000_0000),
            base_2m: PhysAddr::new(0x20_0000_0000),
            base_1g: PhysAddr::new(0x40_0000_0000),
        };
        let host = build_table_in(&hm, &LayoutPolicy::new(LevelScheme::new(h).unwrap()).without_nf(), &mut Unfragmented, region);
        Pair { guest, host }
    }

    fn cold_count(p: &Pair) -> usize {
        let mut w = VirtWalker::new(&VirtConfig::uncached());
        let r = w.nested_translate(VirtAddr::new_unchecked(GVA + 0x123), &p.guest, &p.host, &mut mem()).unwrap();
        r.walk.unwrap().accesses.len()
    }

    #[test]
    fn naive_counts() {
        assert_eq!(naive_access_count(4, 4), 24);
        assert_eq!(naive_access_count(2, 2), 8);
        assert_eq!(naive_access_count(2, 4), 14);
        assert_eq!(naive_access_count(4, 2), 14);
    }

    #[test]
    fn cold_counts_match_the_formula() {
        let four = [9, 9, 9, 9];
        let two = [18, 18];
        for (g, h) in [(&four[..], &four[..]), (&two[..], &four[..]), (&four[..], &two[..]), (&two[..], &two[..])] {
            let p = pair(g, h, PageSize::Size4K, PageSize::Size4K);
            assert_eq!(cold_count(&p), naive_access_count(g.len(), h.len()), "{g:?}/{h:?}");
        }
    }

    #[test]
    fn large_pages_remove_a_row_or_column() {
        let four = [9, 9, 9, 9];
        // A guest 2 MB page drops the guest L1 access and its host walk.
        let p = pair(&four, &four, PageSize::Size2M, PageSize::Size4K);
        assert_eq!(cold_count(&p), 24 - 5);
        // A host 2 MB page shortens only the data walk, which lands in it.
        let p = pair(&four, &four, PageSize::Size4K, PageSize::Size2M);
        assert_eq!(cold_count(&p), 24 - 1);
    }

    #[test]
    fn composes_the_two_oracles() {
        let p = pair(&[18, 18], &[9, 9, 9, 9], PageSize::Size4K, PageSize::Size2M);
        let gva = VirtAddr::new_unchecked(GVA + 0xABC);
        let g = reference_translate(&p.guest, gva).unwrap().resolve(gva.as_u64());
        let h = reference_translate(&p.host, VirtAddr::new_unchecked(g.as_u64())).unwrap().resolve(g.as_u64());
        let mut w = VirtWalker::new(&VirtConfig::default());
        let mut m = mem();
        for _ in 0..3 {
            let r = w.nested_translate(gva, &p.guest, &p.host, &mut m).unwrap();
            let t = r.translation.unwrap();
            assert_eq!(t.size, PageSize::Size4K);
            assert_eq!(t.resolve(gva.as_u64()), h);
        }
    }

    #[test]
    fn warm_flat_flat_needs_at_most_three() {
        let p = pair(&[18, 18], &[18, 18], PageSize::Size4K, PageSize::Size4K);
        let mut w = VirtWalker::new(&VirtConfig::default());
        let mut m = mem();
        let gva = VirtAddr::new_unchecked(GVA);
        w.walk(gva, &p.guest, &p.host, &mut m).unwrap();
        let r = w.walk(gva, &p.guest, &p.host, &mut m).unwrap();
        assert!(r.accesses.len() <= 3, "{}", r.accesses.len());
        assert_eq!(r.skipped_levels, 1);
    }

    #[test]
    fn missing_host_mapping_is_a_config_error() {
        let mut gm = MappingSet::new();
        gm.insert(VirtAddr::new_unchecked(GVA), PhysAddr::new(0), PageSize::Size4K).unwrap();
        let guest = build_table(&gm, &LayoutPolicy::conventional(), &mut Unfragmented);
        let host = build_table(&MappingSet::new(), &LayoutPolicy::conventional(), &mut Unfragmented);
        let mut w = VirtWalker::new(&VirtConfig::default());
        let err = w.nested_translate(VirtAddr::new_unchecked(GVA), &guest, &host, &mut mem()).unwrap_err();
        assert_eq!(err, VirtError::HostUnmapped(guest.root().0.as_u64() + (GVA >> 39 & 511) * 8));
    }

    #[test]
    fn guest_unmapped_is_not_an_error() {
        let p = pair(&[9, 9, 9, 9], &[9, 9, 9, 9], PageSize::Size4K, PageSize::Size4K);
        let mut w = VirtWalker::new(&VirtConfig::default());
        let r = w.nested_translate(VirtAddr::new_unchecked(GVA + (1 << 30)), &p.guest, &p.host, &mut mem()).unwrap();
        assert_eq!(r.translation, None);
    }
}
