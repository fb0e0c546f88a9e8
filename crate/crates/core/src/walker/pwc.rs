use serde::{Deserialize, Serialize};

use crate::addressing::{prefix_bits, LevelScheme, PhysAddr, VirtAddr};

use super::tlb::HitCounters;

/// Capacities of the three partial-walk stores.
///
/// Stores are named by how far the cached node sits above the node holding
/// the terminal entry: `leaf` caches pointers to that node itself, `mid` to
/// its parent, `upper` to anything higher. Under `[9,9,9,9]` these are the
/// usual L2, L3 and L4 paging-structure caches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PwcConfig {
    pub enabled: bool,
    pub upper: usize,
    pub mid: usize,
    pub leaf: usize,
    pub latency: u32,
}

impl Default for PwcConfig {
    fn default() -> Self {
        Self { enabled: true, upper: 4, mid: 4, leaf: 24, latency: 1 }
    }
}

impl PwcConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }
}

/// A cached partial walk: after consuming the top `tag_bits` VA bits
/// (`skipped` nodes), the walk continues at `node`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialWalk {
    pub tag_bits: u32,
    pub node: PhysAddr,
    pub skipped: u32,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    tag_bits: u32,
    tag: u64,
    node: PhysAddr,
    skipped: u32,
    stamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PwcStore {
    Leaf,
    Mid,
    Upper,
}

impl PwcStore {
    pub const ALL: [PwcStore; 3] = [PwcStore::Leaf, PwcStore::Mid, PwcStore::Upper];

    fn slot(self) -> usize {
        self as usize
    }
}

/// Fully associative partial-walk caches with LRU replacement.
#[derive(Debug, Clone)]
pub struct Pwc {
    cfg: PwcConfig,
    stores: [Vec<Entry>; 3],
    clock: u64,
    counters: HitCounters,
}

impl Pwc {
    pub fn new(cfg: PwcConfig) -> Self {
        Self { cfg, stores: Default::default(), clock: 0, counters: HitCounters::default() }
    }

    pub fn config(&self) -> &PwcConfig {
        &self.cfg
    }

    pub fn enabled(&self) -> bool {
        self.cfg.enabled
    }

    fn capacity(&self, store: PwcStore) -> usize {
        match store {
            PwcStore::Leaf => self.cfg.leaf,
            PwcStore::Mid => self.cfg.mid,
            PwcStore::Upper => self.cfg.upper,
        }
    }

    /// Deepest cached partial walk whose tag matches `va`.
    pub fn lookup(&mut self, va: VirtAddr, scheme: &LevelScheme) -> Option<PartialWalk> {
        self.lookup_raw(va.as_u64(), scheme.va_bits())
    }

    pub(crate) fn lookup_raw(&mut self, va: u64, va_bits: u32) -> Option<PartialWalk> {
        if !self.cfg.enabled {
            return None;
        }
        self.clock += 1;
        self.counters.lookups += 1;
        let mut best: Option<(usize, usize)> = None;
        let mut best_bits = 0;
        for (s, store) in self.stores.iter().enumerate() {
            for (i, e) in store.iter().enumerate() {
                if e.tag_bits > best_bits && prefix_bits(va, va_bits, e.tag_bits) == e.tag {
                    best = Some((s, i));
                    best_bits = e.tag_bits;
                }
            }
        }
        let (s, i) = best?;
        self.counters.hits += 1;
        let e = &mut self.stores[s][i];
        e.stamp = self.clock;
        Some(PartialWalk { tag_bits: e.tag_bits, node: e.node, skipped: e.skipped })
    }

    /// Inserts the pointers a completed walk followed, root first. The last
    /// one led to the node holding the terminal entry.
    pub fn fill(&mut self, va: VirtAddr, scheme: &LevelScheme, followed: &[PartialWalk]) {
        self.fill_raw(va.as_u64(), scheme.va_bits(), followed)
    }

    pub(crate) fn fill_raw(&mut self, va: u64, va_bits: u32, followed: &[PartialWalk]) {
        if !self.cfg.enabled {
            return;
        }
        let n = followed.len();
        for (i, p) in followed.iter().enumerate() {
            let store = match n - 1 - i {
                0 => PwcStore::Leaf,
                1 => PwcStore::Mid,
                _ => PwcStore::Upper,
            };
            self.insert(store, prefix_bits(va, va_bits, p.tag_bits), *p);
        }
    }

    fn insert(&mut self, store: PwcStore, tag: u64, p: PartialWalk) {
        let cap = self.capacity(store);
        if cap == 0 {
            return;
        }
        self.clock += 1;
        let entry = Entry { tag_bits: p.tag_bits, tag, node: p.node, skipped: p.skipped, stamp: self.clock };
        let v = &mut self.stores[store.slot()];
        if let Some(e) = v.iter_mut().find(|e| e.tag_bits == p.tag_bits && e.tag == tag) {
            *e = entry;
        } else if v.len() < cap {
            v.push(entry);
        } else {
            let lru = v.iter().enumerate().min_by_key(|(_, e)| e.stamp).map(|(i, _)| i).unwrap();
            v[lru] = entry;
        }
    }

    pub fn len(&self, store: PwcStore) -> usize {
        self.stores[store.slot()].len()
    }

    pub fn total_len(&self) -> usize {
        self.stores.iter().map(Vec::len).sum()
    }

    /// Cached `(tag_bits, tag)` pairs of one store, oldest first.
    pub fn tags(&self, store: PwcStore) -> Vec<(u32, u64)> {
        let mut v: Vec<&Entry> = self.stores[store.slot()].iter().collect();
        v.sort_by_key(|e| e.stamp);
        v.into_iter().map(|e| (e.tag_bits, e.tag)).collect()
    }

    pub fn flush(&mut self) {
        self.stores.iter_mut().for_each(Vec::clear);
    }

    pub fn counters(&self) -> HitCounters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = HitCounters::default();
    }
}
