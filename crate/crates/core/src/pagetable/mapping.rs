use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::path::Path;

use thiserror::Error;

use super::PageSize;
use crate::addressing::{PhysAddr, VirtAddr};

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("{va} -> {pa} is not aligned to its {size} page")]
    Misaligned { va: VirtAddr, pa: PhysAddr, size: PageSize },
    #[error("mapping at {va} overlaps the mapping at {existing}")]
    Overlap { va: VirtAddr, existing: VirtAddr },
    #[error("{0} data pages are not supported")]
    UnsupportedSize(PageSize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mapping {
    pub pa: PhysAddr,
    pub size: PageSize,
}

/// Non-overlapping set of virtual-to-physical page mappings, ordered by VA.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MappingSet {
    map: BTreeMap<VirtAddr, Mapping>,
}

impl MappingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, va: VirtAddr, pa: PhysAddr, size: PageSize) -> Result<(), MappingError> {
        if size == PageSize::Size1G {
            return Err(MappingError::UnsupportedSize(size));
        }
        if !va.is_aligned(size.bytes()) || !pa.is_aligned(size.bytes()) {
            return Err(MappingError::Misaligned { va, pa, size });
        }
        if let Some((&prev, m)) = self.map.range(..=va).next_back() {
            if prev.as_u64() + m.size.bytes() > va.as_u64() {
                return Err(MappingError::Overlap { va, existing: prev });
            }
        }
        let end = va.as_u64() + size.bytes();
        if let Some((&next, _)) = self.map.range(va..).next() {
            if next.as_u64() < end {
                return Err(MappingError::Overlap { va, existing: next });
            }
        }
        self.map.insert(va, Mapping { pa, size });
        Ok(())
    }

    /// Mapping covering `va`, with the page's base VA.
    pub fn lookup(&self, va: VirtAddr) -> Option<(VirtAddr, Mapping)> {
        let (&base, &m) = self.map.range(..=va).next_back()?;
        (va.as_u64() < base.as_u64() + m.size.bytes()).then_some((base, m))
    }

    pub fn iter(&self) -> impl Iterator<Item = (VirtAddr, Mapping)> + '_ {
        self.map.iter().map(|(&va, &m)| (va, m))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn count(&self, size: PageSize) -> usize {
        self.map.values().filter(|m| m.size == size).count()
    }

    pub fn mapped_bytes(&self) -> u64 {
        self.map.values().map(|m| m.size.bytes()).sum()
    }

    /// Parses `<hex va> <hex pa> <4k|2m>` lines; blank lines and `#` comments
    /// are skipped.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self, MappingError> {
        let mut set = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let fields: Vec<&str> = body.split_whitespace().collect();
            let [va, pa, size] = fields[..] else {
                return Err(MappingError::Parse { line: lineno, msg: format!("expected 3 fields, got {}", fields.len()) });
            };
            let parse_err = |msg: String| MappingError::Parse { line: lineno, msg };
            let va = parse_hex(va).map_err(parse_err)?;
            let pa = parse_hex(pa).map_err(parse_err)?;
            let size: PageSize = size.parse().map_err(parse_err)?;
            set.insert(VirtAddr::new_unchecked(va), PhysAddr::new(pa), size).map_err(|e| match e {
                MappingError::Parse { .. } | MappingError::Io(_) => e,
                other => MappingError::Parse { line: lineno, msg: other.to_string() },
            })?;
        }
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MappingError> {
        let file = std::fs::File::open(path)?;
        Self::parse(io::BufReader::new(file))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (va, m) in self.iter() {
            writeln!(w, "{:#x} {:#x} {}", va.as_u64(), m.pa.as_u64(), m.size)?;
        }
        Ok(())
    }
}

pub(crate) fn parse_hex(s: &str) -> Result<u64, String> {
    let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).unwrap_or(s);
    u64::from_str_radix(&digits.replace('_', ""), 16).map_err(|e| format!("bad hex value {s:?}: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn va(x: u64) -> VirtAddr {
        VirtAddr::new_unchecked(x)
    }

    #[test]
    fn rejects_overlap_and_misalignment() {
        let mut s = MappingSet::new();
        s.insert(va(0x20_0000), PhysAddr::new(0x40_0000), PageSize::Size2M).unwrap();
        assert!(matches!(
            s.insert(va(0x21_0000), PhysAddr::new(0), PageSize::Size4K),
            Err(MappingError::Overlap { .. })
        ));
        assert!(matches!(
            s.insert(va(0x1000), PhysAddr::new(0x1000), PageSize::Size2M),
            Err(MappingError::Misaligned { .. })
        ));
        // A 2 MB page over an existing 4 kB page.
        s.insert(va(0x60_1000), PhysAddr::new(0x1000), PageSize::Size4K).unwrap();
        assert!(s.insert(va(0x60_0000), PhysAddr::new(0x80_0000), PageSize::Size2M).is_err());
        assert!(s.insert(va(0x1000), PhysAddr::new(0x1000), PageSize::Size1G).is_err());
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn lookup_covers_whole_page() {
        let mut s = MappingSet::new();
        s.insert(va(0x20_0000), PhysAddr::new(0x40_0000), PageSize::Size2M).unwrap();
        assert_eq!(s.lookup(va(0x3f_ffff)).unwrap().0, va(0x20_0000));
        assert!(s.lookup(va(0x40_0000)).is_none());
        assert!(s.lookup(va(0x1f_ffff)).is_none());
    }

    #[test]
    fn text_format() {
        let text = "# a comment\n0x1000 0x5000 4k\n\n200000 400000 2m  # trailing\n";
        let s = MappingSet::parse(text.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        let mut out = Vec::new();
        s.write_to(&mut out).unwrap();
        assert_eq!(MappingSet::parse(out.as_slice()).unwrap(), s);

        let bad = "0x1000 0x5000 4k\n0x2000 zz 4k\n";
        match MappingSet::parse(bad.as_bytes()) {
            Err(MappingError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let overlap = "0x0 0x0 2m\n0x1000 0x1000 4k\n";
        assert!(matches!(MappingSet::parse(overlap.as_bytes()), Err(MappingError::Parse { line: 2, .. })));
    }
}
