//! Virtual-address decomposition under arbitrary radix level schemes.
//!
//! A [`LevelScheme`] lists the index width of every page-table level from the
//! root down. The conventional x86-64/Armv8 4-level layout is `[9, 9, 9, 9]`;
//! merging two adjacent levels into one 2 MB node yields an 18-bit field, so a
//! fully flattened two-level table is `[18, 18]`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Widths a single level may use: 4 kB, 2 MB and 1 GB nodes of 8-byte entries.
pub const VALID_WIDTHS: [u32; 3] = [9, 18, 27];
pub const MAX_LEVELS: usize = 5;
pub const PAGE_OFFSET_BITS: u32 = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddrError {
    #[error("address {addr:#x} is not canonical for a {va_bits}-bit address space")]
    NonCanonical { addr: u64, va_bits: u32 },
    #[error("index {index} does not fit the {width}-bit field of level {level}")]
    IndexOutOfRange { level: usize, index: u64, width: u32 },
    #[error("offset {offset:#x} does not fit in {bits} bits")]
    OffsetOutOfRange { offset: u64, bits: u32 },
    #[error("expected {expected} indices, got {got}")]
    IndexCount { expected: usize, got: usize },
    #[error("depth {depth} outside 1..{levels}")]
    DepthOutOfRange { depth: usize, levels: usize },
    #[error("invalid level scheme: {0}")]
    InvalidScheme(String),
}

/// Mask with the low `bits` bits set.
#[inline]
pub const fn low_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Extracts the `width`-bit field that ends just below bit `top` (exclusive).
#[inline]
pub const fn bit_field(value: u64, top: u32, width: u32) -> u64 {
    (value >> (top - width)) & low_mask(width)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtAddr(u64);

impl VirtAddr {
    /// Checks that bits above `va_bits` sign-extend bit `va_bits - 1`.
    pub fn new(raw: u64, va_bits: u32) -> Result<Self, AddrError> {
        if is_canonical(raw, va_bits) {
            Ok(Self(raw))
        } else {
            Err(AddrError::NonCanonical { addr: raw, va_bits })
        }
    }

    /// Sign-extends bit `va_bits - 1` into the upper bits.
    pub fn canonicalize(raw: u64, va_bits: u32) -> Self {
        let shift = 64 - va_bits;
        Self((((raw << shift) as i64) >> shift) as u64)
    }

    /// Wraps a raw value without a canonical check; for addresses known to lie
    /// in the lower half (trace generators, mapping files).
    pub const fn new_unchecked(raw: u64) -> Self {
        Self(raw)
    }

    pub const fn as_u64(self) -> u64 {
        self.0
    }

    pub fn is_aligned(self, align: u64) -> bool {
        self.0.is_multiple_of(align)
    }

    pub fn align_down(self, align: u64) -> Self {
        Self(self.0 & !(align - 1))
    }
}

impl fmt::Display for VirtAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhysAddr(u64);

impl PhysAddr {
    pub const fn new(raw: u64) -> Self {
        Self(raw)
    }

    pub const fn as_u64(self) -> u64 {
        self.0
    }

    pub fn is_aligned(self, align: u64) -> bool {
        self.0.is_multiple_of(align)
    }

    pub fn align_down(self, align: u64) -> Self {
        Self(self.0 & !(align - 1))
    }

    pub const fn add(self, off: u64) -> Self {
        Self(self.0 + off)
    }
}

impl fmt::Display for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

pub fn is_canonical(raw: u64, va_bits: u32) -> bool {
    if va_bits >= 64 {
        return true;
    }
    let upper = raw >> (va_bits - 1);
    upper == 0 || upper == low_mask(64 - (va_bits - 1))
}

/// Page-table shape: per-level index widths, root first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SchemeRepr", into = "Vec<u32>")]
pub struct LevelScheme {
    widths: Vec<u32>,
    offset_bits: u32,
    va_bits: u32,
}

impl LevelScheme {
    /// Builds a scheme over 4 kB pages; `va_bits` is implied by the widths and
    /// must come out as 48 or 57.
    pub fn new(widths: &[u32]) -> Result<Self, AddrError> {
        let va_bits = widths.iter().sum::<u32>() + PAGE_OFFSET_BITS;
        Self::with_bits(widths, PAGE_OFFSET_BITS, va_bits)
    }

    pub fn with_bits(widths: &[u32], offset_bits: u32, va_bits: u32) -> Result<Self, AddrError> {
        if widths.is_empty() || widths.len() > MAX_LEVELS {
            return Err(AddrError::InvalidScheme(format!(
                "need 1..={MAX_LEVELS} levels, got {}",
                widths.len()
            )));
        }
        if let Some(w) = widths.iter().find(|w| !VALID_WIDTHS.contains(w)) {
            return Err(AddrError::InvalidScheme(format!("width {w} not in {VALID_WIDTHS:?}")));
        }
        let total = widths.iter().sum::<u32>() + offset_bits;
        if total != va_bits {
            return Err(AddrError::InvalidScheme(format!(
                "widths {widths:?} + offset {offset_bits} = {total} bits, expected {va_bits}"
            )));
        }
        if va_bits != 48 && va_bits != 57 {
            return Err(AddrError::InvalidScheme(format!("{va_bits}-bit address space unsupported")));
        }
        Ok(Self { widths: widths.to_vec(), offset_bits, va_bits })
    }

    pub fn conventional() -> Self {
        Self::new(&[9, 9, 9, 9]).unwrap()
    }

    pub fn flattened() -> Self {
        Self::new(&[18, 18]).unwrap()
    }

    pub fn five_level() -> Self {
        Self::new(&[9, 9, 9, 9, 9]).unwrap()
    }

    pub fn widths(&self) -> &[u32] {
        &self.widths
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn offset_bits(&self) -> u32 {
        self.offset_bits
    }

    pub fn va_bits(&self) -> u32 {
        self.va_bits
    }

    /// Bit positions (exclusive top of each field) at which a node boundary
    /// sits, root first: e.g. `[48, 39, 30, 21]` for `[9, 9, 9, 9]`.
    pub fn level_tops(&self) -> Vec<u32> {
        let mut top = self.va_bits;
        self.widths
            .iter()
            .map(|w| {
                let t = top;
                top -= w;
                t
            })
            .collect()
    }

    /// Nearest node boundary strictly below `top`, or the page offset.
    pub fn next_boundary_below(&self, top: u32) -> u32 {
        let mut cursor = self.va_bits;
        for w in &self.widths {
            cursor -= w;
            if cursor < top {
                return cursor;
            }
        }
        self.offset_bits
    }
}

/// Serialized form: a width list, or the same written as `"9,9,9,9"`.
#[derive(Deserialize)]
#[serde(untagged)]
enum SchemeRepr {
    Widths(Vec<u32>),
    Text(String),
}

impl TryFrom<SchemeRepr> for LevelScheme {
    type Error = AddrError;

    fn try_from(r: SchemeRepr) -> Result<Self, Self::Error> {
        match r {
            SchemeRepr::Widths(w) => Self::new(&w),
            SchemeRepr::Text(t) => t.parse(),
        }
    }
}

impl TryFrom<Vec<u32>> for LevelScheme {
    type Error = AddrError;

    fn try_from(widths: Vec<u32>) -> Result<Self, Self::Error> {
        Self::new(&widths)
    }
}

impl From<LevelScheme> for Vec<u32> {
    fn from(s: LevelScheme) -> Self {
        s.widths
    }
}

impl fmt::Display for LevelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

impl std::str::FromStr for LevelScheme {
    type Err = AddrError;

    /// Parses `9,9,9,9` or `[18,18]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim().trim_start_matches('[').trim_end_matches(']');
        let widths = trimmed
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<u32>()
                    .map_err(|_| AddrError::InvalidScheme(format!("bad width {p:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(&widths)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decomposed {
    pub indices: Vec<u64>,
    pub offset: u64,
}

pub fn decompose(va: VirtAddr, scheme: &LevelScheme) -> Result<Decomposed, AddrError> {
    let raw = va.as_u64();
    if !is_canonical(raw, scheme.va_bits) {
        return Err(AddrError::NonCanonical { addr: raw, va_bits: scheme.va_bits });
    }
    let indices = scheme
        .level_tops()
        .into_iter()
        .zip(&scheme.widths)
        .map(|(top, &w)| bit_field(raw, top, w))
        .collect();
    Ok(Decomposed { indices, offset: raw & low_mask(scheme.offset_bits) })
}

pub fn compose(indices: &[u64], offset: u64, scheme: &LevelScheme) -> Result<VirtAddr, AddrError> {
    if indices.len() != scheme.levels() {
        return Err(AddrError::IndexCount { expected: scheme.levels(), got: indices.len() });
    }
    if offset > low_mask(scheme.offset_bits) {
        return Err(AddrError::OffsetOutOfRange { offset, bits: scheme.offset_bits });
    }
    let mut raw = 0u64;
    for (level, (&index, &w)) in indices.iter().zip(&scheme.widths).enumerate() {
        if index > low_mask(w) {
            return Err(AddrError::IndexOutOfRange { level, index, width: w });
        }
        raw = (raw << w) | index;
    }
    raw = (raw << scheme.offset_bits) | offset;
    Ok(VirtAddr::canonicalize(raw, scheme.va_bits))
}

/// Top `Σ widths[0..depth]` bits of `va`: the key under which a partial walk
/// that consumed `depth` levels is cached.
pub fn region_tag(va: VirtAddr, depth: usize, scheme: &LevelScheme) -> Result<u64, AddrError> {
    if depth == 0 || depth >= scheme.levels() {
        return Err(AddrError::DepthOutOfRange { depth, levels: scheme.levels() });
    }
    let bits: u32 = scheme.widths[..depth].iter().sum();
    Ok(prefix_bits(va.as_u64(), scheme.va_bits, bits))
}

/// The `bits` most significant bits of the low `va_bits` of `raw`.
#[inline]
pub fn prefix_bits(raw: u64, va_bits: u32, bits: u32) -> u64 {
    (raw & low_mask(va_bits)) >> (va_bits - bits)
}
