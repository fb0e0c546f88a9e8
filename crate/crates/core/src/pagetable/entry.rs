use std::fmt;

use serde::{Deserialize, Serialize};

use crate::addressing::PhysAddr;

/// Size of a page or of a page-table node. Nodes hold 8-byte entries, so a
/// node of size `s` indexes `log2(s) - 3` bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PageSize {
    #[serde(rename = "4k")]
    Size4K,
    #[serde(rename = "2m")]
    Size2M,
    #[serde(rename = "1g")]
    Size1G,
}

impl PageSize {
    pub const ALL: [PageSize; 3] = [PageSize::Size4K, PageSize::Size2M, PageSize::Size1G];

    pub const fn shift(self) -> u32 {
        match self {
            PageSize::Size4K => 12,
            PageSize::Size2M => 21,
            PageSize::Size1G => 30,
        }
    }

    pub const fn bytes(self) -> u64 {
        1 << self.shift()
    }

    /// Index width of a node this large.
    pub const fn index_bits(self) -> u32 {
        self.shift() - 3
    }

    pub const fn entries(self) -> usize {
        1 << self.index_bits()
    }

    pub fn from_index_bits(bits: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.index_bits() == bits)
    }

    pub fn from_shift(shift: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.shift() == shift)
    }

    const fn code(self) -> u64 {
        match self {
            PageSize::Size4K => 0,
            PageSize::Size2M => 1,
            PageSize::Size1G => 2,
        }
    }

    const fn from_code(code: u64) -> Self {
        match code {
            0 => PageSize::Size4K,
            1 => PageSize::Size2M,
            _ => PageSize::Size1G,
        }
    }
}

impl fmt::Display for PageSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PageSize::Size4K => "4k",
            PageSize::Size2M => "2m",
            PageSize::Size1G => "1g",
        })
    }
}

impl std::str::FromStr for PageSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "4k" | "4kb" => Ok(PageSize::Size4K),
            "2m" | "2mb" => Ok(PageSize::Size2M),
            "1g" | "1gb" => Ok(PageSize::Size1G),
            other => Err(format!("unknown page size {other:?}")),
        }
    }
}

/// An 8-byte page-table entry.
///
/// Layout: bit 0 present, bit 7 terminal, bit 9 recursive marker, bits 10-11
/// size code, bits 12-51 frame. For a pointer entry the size code is the size
/// of the node pointed to (the two extra bits the walker needs to know how
/// many index bits the next level consumes); for a terminal entry it is the
/// size of the mapped page.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PtEntry(u64);

impl PtEntry {
    const PRESENT: u64 = 1 << 0;
    const TERMINAL: u64 = 1 << 7;
    const RECURSIVE: u64 = 1 << 9;
    const SIZE_SHIFT: u32 = 10;
    const SIZE_MASK: u64 = 0b11 << Self::SIZE_SHIFT;
    const FRAME_MASK: u64 = 0x000F_FFFF_FFFF_F000;

    pub const EMPTY: PtEntry = PtEntry(0);

    /// Pointer to a next-level node of `size` at `frame`.
    pub fn table(frame: PhysAddr, size: PageSize) -> Self {
        debug_assert!(frame.is_aligned(size.bytes()));
        Self(Self::PRESENT | (size.code() << Self::SIZE_SHIFT) | (frame.as_u64() & Self::FRAME_MASK))
    }

    /// Terminal translation of a `size` page at `frame`.
    pub fn page(frame: PhysAddr, size: PageSize) -> Self {
        debug_assert!(frame.is_aligned(size.bytes()));
        Self(
            Self::PRESENT
                | Self::TERMINAL
                | (size.code() << Self::SIZE_SHIFT)
                | (frame.as_u64() & Self::FRAME_MASK),
        )
    }

    pub fn with_recursive(self) -> Self {
        Self(self.0 | Self::RECURSIVE)
    }

    pub const fn from_raw(raw: u64) -> Self {
        Self(raw)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    pub const fn is_present(self) -> bool {
        self.0 & Self::PRESENT != 0
    }

    pub const fn is_terminal(self) -> bool {
        self.0 & Self::TERMINAL != 0
    }

    pub const fn is_recursive(self) -> bool {
        self.0 & Self::RECURSIVE != 0
    }

    pub const fn frame(self) -> PhysAddr {
        PhysAddr::new(self.0 & Self::FRAME_MASK)
    }

    fn size_code(self) -> PageSize {
        PageSize::from_code((self.0 & Self::SIZE_MASK) >> Self::SIZE_SHIFT)
    }

    /// Size of the node this pointer entry refers to.
    pub fn next_node_size(self) -> PageSize {
        debug_assert!(!self.is_terminal());
        self.size_code()
    }

    /// Size of the page a terminal entry maps.
    pub fn page_size(self) -> PageSize {
        debug_assert!(self.is_terminal());
        self.size_code()
    }
}

impl fmt::Debug for PtEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.is_present() {
            return f.write_str("PtEntry(empty)");
        }
        let kind = if self.is_terminal() { "page" } else { "table" };
        write!(
            f,
            "PtEntry({kind} {} {}{})",
            self.frame(),
            self.size_code(),
            if self.is_recursive() { " recursive" } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodings_round_trip() {
        for size in PageSize::ALL {
            let frame = PhysAddr::new(0x40_0000_0000);
            let t = PtEntry::table(frame, size);
            assert!(t.is_present() && !t.is_terminal() && !t.is_recursive());
            assert_eq!(t.frame(), frame);
            assert_eq!(t.next_node_size(), size);
            let p = PtEntry::page(frame, size);
            assert!(p.is_terminal());
            assert_eq!(p.page_size(), size);
            assert!(t.with_recursive().is_recursive());
        }
        assert!(!PtEntry::EMPTY.is_present());
    }

    #[test]
    fn sizes() {
        assert_eq!(PageSize::Size4K.entries(), 512);
        assert_eq!(PageSize::Size2M.entries(), 262_144);
        assert_eq!(PageSize::from_index_bits(18), Some(PageSize::Size2M));
        assert_eq!(PageSize::from_shift(30), Some(PageSize::Size1G));
        assert_eq!("2M".parse::<PageSize>().unwrap(), PageSize::Size2M);
    }
}
