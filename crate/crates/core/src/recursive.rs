//! Self-referencing page tables.
//!
//! With a root entry pointing back at the root, a virtual address whose top
//! fields repeat that entry's index walks "one level short" per repetition
//! and ends on a page-table node instead of a data page. A recursive entry
//! inside an 18-bit node only advances the cursor by 9 bits, so its low 9
//! index bits double as the high bits of the next field.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::{bit_field, low_mask, PhysAddr, VirtAddr, PAGE_OFFSET_BITS};
use crate::pagetable::{PageSize, PageTable, PtNode};

pub const DEFAULT_REC_INDEX: u64 = 510;

const OVERLAP_BITS: u32 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexMode {
    /// Recursive entries in 18-bit nodes advance the cursor by 9 bits.
    Overlap,
    /// Every entry advances the cursor by its node's full width.
    NoOverlap,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecursionError {
    #[error("no page-table entry at {0:#x}")]
    NotPresent(u64),
    #[error("cursor at bit {cursor} cannot index a {width}-bit node or end on a {size} node")]
    Misaligned { cursor: u32, width: u32, size: PageSize },
    #[error("recursion through a 1 GB node is not supported")]
    HugeNode,
    #[error("{0} recursions do not fit the table's index fields")]
    NoBitBudget(usize),
    #[error("node {0:#x} is not part of the table")]
    UnknownNode(u64),
    #[error("node {0:#x} is not reachable through the recursive entry")]
    Unreachable(u64),
    #[error("root slot {0} does not hold a recursive entry")]
    NotInstalled(u64),
}

/// What a recursive-window walk resolved to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolved {
    /// Byte inside a page-table node.
    Node { base: PhysAddr, addr: PhysAddr },
    /// Byte inside a data page.
    Data { addr: PhysAddr, size: PageSize },
}

impl Resolved {
    pub fn addr(&self) -> PhysAddr {
        match *self {
            Resolved::Node { addr, .. } | Resolved::Data { addr, .. } => addr,
        }
    }
}

fn advance(node: &PtNode, recursive: bool, mode: IndexMode) -> Result<u32, RecursionError> {
    let w = node.index_bits();
    if !recursive {
        return Ok(w);
    }
    match (w, mode) {
        (27, _) => Err(RecursionError::HugeNode),
        (18, IndexMode::Overlap) => Ok(OVERLAP_BITS),
        _ => Ok(w),
    }
}

enum Step<'a> {
    Descend(&'a PtNode),
    Stop(&'a PtNode),
}

/// After following a pointer with `cursor` VA bits left: stop if the rest
/// is exactly a byte offset into the next node, descend if it still indexes it.
fn after_pointer(table: &PageTable, frame: PhysAddr, cursor: u32) -> Result<Step<'_>, RecursionError> {
    let next = table.node(frame).ok_or(RecursionError::UnknownNode(frame.as_u64()))?;
    if cursor == next.size().shift() {
        Ok(Step::Stop(next))
    } else if cursor >= next.index_bits() + PAGE_OFFSET_BITS {
        Ok(Step::Descend(next))
    } else {
        Err(RecursionError::Misaligned { cursor, width: next.index_bits(), size: next.size() })
    }
}

pub fn recursive_translate(table: &PageTable, va: VirtAddr) -> Result<Resolved, RecursionError> {
    recursive_translate_with(table, va, IndexMode::Overlap)
}

pub fn recursive_translate_with(table: &PageTable, va: VirtAddr, mode: IndexMode) -> Result<Resolved, RecursionError> {
    let raw = va.as_u64();
    let (root, _) = table.root();
    let mut node = table.node(root).ok_or(RecursionError::UnknownNode(root.as_u64()))?;
    let mut cursor = table.va_bits();
    loop {
        let w = node.index_bits();
        if cursor < w {
            return Err(RecursionError::Misaligned { cursor, width: w, size: node.size() });
        }
        let idx = bit_field(raw, cursor, w);
        let e = node.entry(idx);
        if !e.is_present() {
            return Err(RecursionError::NotPresent(node.entry_addr(idx).as_u64()));
        }
        if e.is_terminal() {
            let size = e.page_size();
            return Ok(Resolved::Data { addr: e.frame().add(raw & (size.bytes() - 1)), size });
        }
        cursor -= advance(node, e.is_recursive(), mode)?;
        match after_pointer(table, e.frame(), cursor)? {
            Step::Stop(n) => return Ok(Resolved::Node { base: n.base(), addr: n.base().add(raw & low_mask(cursor)) }),
            Step::Descend(n) => node = n,
        }
    }
}

/// Builds the VA that recurses `k` times through root slot `rec_index` and
/// then follows `target`'s indices until the walk lands on a node. The page
/// offset selects `target`'s entry in that node.
pub fn make_recursive_va(
    table: &PageTable,
    rec_index: u64,
    k: usize,
    target: VirtAddr,
    mode: IndexMode,
) -> Result<VirtAddr, RecursionError> {
    if k == 0 {
        return Ok(target);
    }
    let t = target.as_u64();
    let va_bits = table.va_bits();
    let (root, _) = table.root();
    let mut node = table.node(root).ok_or(RecursionError::UnknownNode(root.as_u64()))?;
    let rec_entry = rec_index << (node.index_bits() - OVERLAP_BITS);
    if !node.entry(rec_entry).is_recursive() {
        return Err(RecursionError::NotInstalled(rec_index));
    }
    let mut cursor = va_bits;
    let mut raw = 0u64;
    let mut steps = 0;
    loop {
        let w = node.index_bits();
        if cursor < w {
            return Err(RecursionError::NoBitBudget(k));
        }
        let idx = if steps < k {
            // High 9 bits carry the recursion index; the rest is written by
            // the next field (overlap) or left zero.
            rec_entry
        } else {
            bit_field(t, node.span_bits(), w)
        };
        raw |= idx << (cursor - w);
        let e = node.entry(idx);
        if !e.is_present() || e.is_terminal() {
            return Err(RecursionError::NotPresent(node.entry_addr(idx).as_u64()));
        }
        cursor -= advance(node, e.is_recursive(), mode)?;
        steps += 1;
        let step = after_pointer(table, e.frame(), cursor).map_err(|_| RecursionError::NoBitBudget(k))?;
        match step {
            Step::Stop(n) => {
                if steps < k {
                    return Err(RecursionError::NoBitBudget(k));
                }
                let entry = bit_field(t, n.span_bits(), n.index_bits());
                raw |= entry * 8;
                return Ok(VirtAddr::canonicalize(raw, va_bits));
            }
            Step::Descend(n) => node = n,
        }
    }
}

/// Searches for a recursion count whose window VA resolves into `node`.
pub fn find_node_va(
    table: &PageTable,
    rec_index: u64,
    node: PhysAddr,
    mode: IndexMode,
) -> Result<(usize, VirtAddr), RecursionError> {
    let target = route_to(table, node).ok_or(RecursionError::UnknownNode(node.as_u64()))?;
    let size = table.node(node).map(|n| n.size()).ok_or(RecursionError::UnknownNode(node.as_u64()))?;
    let max_k = (table.va_bits() / OVERLAP_BITS) as usize;
    for k in 1..=max_k {
        let Ok(va) = make_recursive_va(table, rec_index, k, target, mode) else {
            continue;
        };
        if let Ok(Resolved::Node { base, addr }) = recursive_translate_with(table, va, mode) {
            if base == node && addr.align_down(size.bytes()) == node {
                return Ok((k, va));
            }
        }
    }
    Err(RecursionError::Unreachable(node.as_u64()))
}

/// A VA whose ordinary descent passes through `node`, skipping recursive
/// entries.
fn route_to(table: &PageTable, node: PhysAddr) -> Option<VirtAddr> {
    let (root, _) = table.root();
    let va_bits = table.va_bits();
    let mut stack = vec![(root, 0u64)];
    while let Some((base, prefix)) = stack.pop() {
        if base == node {
            return Some(VirtAddr::canonicalize(prefix, va_bits));
        }
        let n = table.node(base)?;
        for (i, e) in n.entries() {
            if e.is_present() && !e.is_terminal() && !e.is_recursive() {
                stack.push((e.frame(), prefix | (i << n.below_bits())));
            }
        }
    }
    None
}
