//! Radix page tables with per-subtree flattening.
//!
//! A [`LayoutPolicy`] names the nominal level grouping (for example `[18, 18]`
//! to merge L4+L3 and L2+L1 into 2 MB nodes). The builder realizes it per
//! subtree: a large node whose allocation is refused falls back to a 4 kB node
//! and hands the remaining index bits to its children, and 1 GB regions
//! dense in 2 MB data pages can be kept unflattened at L2+L1 (NF regions).

mod alloc;
mod entry;
mod mapping;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use alloc::{FragmentedAllocator, NodeAllocator, NodeRegion, Unfragmented};
pub use entry::{PageSize, PtEntry};
pub use mapping::{Mapping, MappingError, MappingSet};
pub(crate) use mapping::parse_hex;

use crate::addressing::{bit_field, LevelScheme, PhysAddr, VirtAddr};
use alloc::Bump;

pub const DEFAULT_NF_THRESHOLD: usize = 32;
const GIB: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("slot {index} of the root node is already in use")]
    SlotOccupied { index: u64 },
    #[error("recursion index {0} out of range")]
    BadRecursionIndex(u64),
    #[error("{0}")]
    Unsupported(String),
}

/// A resolved translation: the base of the page and its size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Translation {
    pub frame: PhysAddr,
    pub size: PageSize,
}

impl Translation {
    /// Physical address of `va` within this page.
    pub fn resolve(&self, va: u64) -> PhysAddr {
        self.frame.add(va & (self.size.bytes() - 1))
    }
}

/// One page-table node: `size / 8` entries stored as raw words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PtNode {
    base: PhysAddr,
    size: PageSize,
    /// VA bits still untranslated on entry to this node (48 for the root).
    span_bits: u32,
    words: Vec<u64>,
}

impl PtNode {
    fn new(base: PhysAddr, size: PageSize, span_bits: u32) -> Self {
        Self { base, size, span_bits, words: vec![0; size.entries()] }
    }

    pub fn base(&self) -> PhysAddr {
        self.base
    }

    pub fn size(&self) -> PageSize {
        self.size
    }

    pub fn index_bits(&self) -> u32 {
        self.size.index_bits()
    }

    pub fn span_bits(&self) -> u32 {
        self.span_bits
    }

    /// Bits left for the page offset after indexing this node.
    pub fn below_bits(&self) -> u32 {
        self.span_bits - self.index_bits()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    #[inline]
    pub fn entry(&self, index: u64) -> PtEntry {
        PtEntry::from_raw(self.words[index as usize])
    }

    pub(crate) fn set(&mut self, index: u64, e: PtEntry) {
        self.words[index as usize] = e.raw();
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, PtEntry)> + '_ {
        self.words.iter().enumerate().map(|(i, &w)| (i as u64, PtEntry::from_raw(w)))
    }

    /// Physical address of entry `index`.
    pub fn entry_addr(&self, index: u64) -> PhysAddr {
        self.base.add(index * 8)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageTable {
    root: PhysAddr,
    root_size: PageSize,
    scheme: LevelScheme,
    nodes: BTreeMap<PhysAddr, PtNode>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCensus {
    pub nodes_4k: usize,
    pub nodes_2m: usize,
    pub nodes_1g: usize,
    pub total_bytes: u64,
}

impl NodeCensus {
    pub fn count(&self, size: PageSize) -> usize {
        match size {
            PageSize::Size4K => self.nodes_4k,
            PageSize::Size2M => self.nodes_2m,
            PageSize::Size1G => self.nodes_1g,
        }
    }

    pub fn total_nodes(&self) -> usize {
        self.nodes_4k + self.nodes_2m + self.nodes_1g
    }
}

impl PageTable {
    /// Root register contents: node address plus its size bits.
    pub fn root(&self) -> (PhysAddr, PageSize) {
        (self.root, self.root_size)
    }

    pub fn scheme(&self) -> &LevelScheme {
        &self.scheme
    }

    pub fn va_bits(&self) -> u32 {
        self.scheme.va_bits()
    }

    #[inline]
    pub fn node(&self, base: PhysAddr) -> Option<&PtNode> {
        self.nodes.get(&base)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &PtNode> {
        self.nodes.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Reads the 8-byte word at a physical address inside a node.
    pub fn read_entry(&self, addr: PhysAddr) -> Option<PtEntry> {
        let (_, node) = self.nodes.range(..=addr).next_back()?;
        let off = addr.as_u64() - node.base.as_u64();
        (off < node.size.bytes()).then(|| node.entry(off / 8))
    }

    pub fn census(&self) -> NodeCensus {
        count_nodes(self)
    }

    /// Terminal entries that map a page larger than the coverage of their
    /// slot, i.e. copies of a 2 MB translation inside a flattened L2+L1 node.
    pub fn replicated_entries(&self) -> usize {
        self.nodes
            .values()
            .map(|n| {
                let natural = n.below_bits();
                n.entries()
                    .filter(|(_, e)| e.is_present() && e.is_terminal() && e.page_size().shift() > natural)
                    .count()
            })
            .sum()
    }

    /// Nodes visited by a plain descent for `va`, root first.
    pub fn path(&self, va: VirtAddr) -> Vec<&PtNode> {
        let mut out = Vec::new();
        let raw = va.as_u64();
        let mut node = match self.nodes.get(&self.root) {
            Some(n) => n,
            None => return out,
        };
        let mut top = self.va_bits();
        loop {
            out.push(node);
            let w = node.index_bits();
            if top < w + crate::addressing::PAGE_OFFSET_BITS {
                return out;
            }
            let e = node.entry(bit_field(raw, top, w));
            if !e.is_present() || e.is_terminal() || e.is_recursive() {
                return out;
            }
            top -= w;
            node = match self.nodes.get(&e.frame()) {
                Some(n) => n,
                None => return out,
            };
        }
    }

    pub(crate) fn root_node_mut(&mut self) -> &mut PtNode {
        self.nodes.get_mut(&self.root).expect("root node present")
    }
}

/// Which levels to merge, plus the NF-region threshold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutPolicy {
    pub scheme: LevelScheme,
    /// Number of 2 MB data pages in a 1 GB region at which its L2+L1 node is
    /// left unflattened. `None` disables NF marking.
    pub nf_threshold: Option<usize>,
}

impl LayoutPolicy {
    pub fn new(scheme: LevelScheme) -> Self {
        Self { scheme, nf_threshold: Some(DEFAULT_NF_THRESHOLD) }
    }

    pub fn conventional() -> Self {
        Self::new(LevelScheme::conventional())
    }

    pub fn flattened() -> Self {
        Self::new(LevelScheme::flattened())
    }

    pub fn without_nf(mut self) -> Self {
        self.nf_threshold = None;
        self
    }

    pub fn with_nf_threshold(mut self, threshold: usize) -> Self {
        self.nf_threshold = Some(threshold.max(1));
        self
    }
}

/// 1 GB-aligned regions holding at least `threshold` 2 MB mappings.
pub fn mark_nf_regions(maps: &MappingSet, threshold: usize) -> BTreeSet<VirtAddr> {
    let threshold = threshold.max(1);
    let mut counts: BTreeMap<VirtAddr, usize> = BTreeMap::new();
    for (va, m) in maps.iter() {
        if m.size == PageSize::Size2M {
            *counts.entry(va.align_down(GIB)).or_default() += 1;
        }
    }
    counts.into_iter().filter(|&(_, c)| c >= threshold).map(|(r, _)| r).collect()
}

pub fn build_table(maps: &MappingSet, layout: &LayoutPolicy, alloc: &mut dyn NodeAllocator) -> PageTable {
    build_table_in(maps, layout, alloc, NodeRegion::default())
}

/// Builds a table whose nodes are placed in `region`.
pub fn build_table_in(
    maps: &MappingSet,
    layout: &LayoutPolicy,
    alloc: &mut dyn NodeAllocator,
    region: NodeRegion,
) -> PageTable {
    let nf = match layout.nf_threshold {
        Some(t) => mark_nf_regions(maps, t),
        None => BTreeSet::new(),
    };
    let mut b = Builder { scheme: &layout.scheme, nf, alloc, bump: Bump::new(region), nodes: BTreeMap::new() };
    let va_bits = layout.scheme.va_bits();
    let root_size = b.plan(va_bits, 0);
    let root = b.create(root_size, va_bits);
    for (va, m) in maps.iter() {
        b.insert(root, va.as_u64(), m);
    }
    PageTable { root, root_size, scheme: layout.scheme.clone(), nodes: b.nodes }
}

struct Builder<'a> {
    scheme: &'a LevelScheme,
    nf: BTreeSet<VirtAddr>,
    alloc: &'a mut dyn NodeAllocator,
    bump: Bump,
    nodes: BTreeMap<PhysAddr, PtNode>,
}

impl Builder<'_> {
    /// Size of a new node whose index field starts just below VA bit `top`.
    fn plan(&mut self, top: u32, va: u64) -> PageSize {
        let bottom = self.scheme.next_boundary_below(top);
        let width = top - bottom;
        let size = PageSize::from_index_bits(width).expect("scheme widths are 9, 18 or 27");
        if size == PageSize::Size4K {
            return size;
        }
        let flattens_l2_l1 = top == 30 && bottom == self.scheme.offset_bits();
        if flattens_l2_l1 && self.nf.contains(&VirtAddr::new_unchecked(va & !(GIB - 1))) {
            return PageSize::Size4K;
        }
        if self.alloc.grant(size) {
            size
        } else {
            PageSize::Size4K
        }
    }

    fn create(&mut self, size: PageSize, span_bits: u32) -> PhysAddr {
        let base = self.bump.take(size);
        self.nodes.insert(base, PtNode::new(base, size, span_bits));
        base
    }

    fn insert(&mut self, root: PhysAddr, va: u64, m: Mapping) {
        let mut base = root;
        let mut top = self.scheme.va_bits();
        let page_shift = m.size.shift();
        loop {
            let node = self.nodes.get_mut(&base).expect("node exists");
            let w = node.index_bits();
            let below = top - w;
            let idx = bit_field(va, top, w);
            if below == page_shift {
                debug_assert!(!node.entry(idx).is_present());
                node.set(idx, PtEntry::page(m.pa, m.size));
                return;
            }
            if below < page_shift {
                // The slot granularity is finer than the page: replicate.
                let copies = 1u64 << (page_shift - below);
                for j in 0..copies {
                    node.set(idx + j, PtEntry::page(m.pa, m.size));
                }
                return;
            }
            let e = node.entry(idx);
            if e.is_present() {
                debug_assert!(!e.is_terminal());
                base = e.frame();
                top = below;
                continue;
            }
            let size = self.plan(below, va);
            let child = self.create(size, below);
            self.nodes.get_mut(&base).unwrap().set(idx, PtEntry::table(child, size));
            base = child;
            top = below;
        }
    }
}

/// Software descent over the node map; the oracle the hardware walkers are
/// checked against. Node widths come from the nodes themselves, not from the
/// size bits in the entries.
pub fn reference_translate(table: &PageTable, va: VirtAddr) -> Option<Translation> {
    let raw = va.as_u64();
    let mut node = table.nodes.get(&table.root)?;
    let mut top = table.va_bits();
    loop {
        let w = node.size.index_bits();
        if top < w + crate::addressing::PAGE_OFFSET_BITS {
            return None;
        }
        let e = node.entry(bit_field(raw, top, w));
        if !e.is_present() {
            return None;
        }
        if e.is_terminal() {
            return Some(Translation { frame: e.frame(), size: e.page_size() });
        }
        top -= w;
        node = table.nodes.get(&e.frame())?;
    }
}

pub fn count_nodes(table: &PageTable) -> NodeCensus {
    let mut c = NodeCensus::default();
    for n in table.nodes.values() {
        match n.size {
            PageSize::Size4K => c.nodes_4k += 1,
            PageSize::Size2M => c.nodes_2m += 1,
            PageSize::Size1G => c.nodes_1g += 1,
        }
        c.total_bytes += n.size.bytes();
    }
    c
}

/// Points root slot `rec_index` back at the root. A 2 MB root gets the entry
/// replicated over the 512 slots whose top 9 index bits equal `rec_index`.
pub fn install_recursion(table: &mut PageTable, rec_index: u64) -> Result<(), TableError> {
    if rec_index >= 512 {
        return Err(TableError::BadRecursionIndex(rec_index));
    }
    let (root, root_size) = table.root();
    let slots = match root_size {
        PageSize::Size4K => rec_index..rec_index + 1,
        PageSize::Size2M => rec_index * 512..(rec_index + 1) * 512,
        PageSize::Size1G => {
            return Err(TableError::Unsupported("recursion through a 1 GB root node".into()));
        }
    };
    let node = table.root_node_mut();
    if let Some(index) = slots.clone().find(|&i| node.entry(i).is_present()) {
        return Err(TableError::SlotOccupied { index });
    }
    let e = PtEntry::table(root, root_size).with_recursive();
    for i in slots {
        node.set(i, e);
    }
    Ok(())
}
