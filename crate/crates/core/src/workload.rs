//! Synthetic reference traces and address-space layouts.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::{PhysAddr, VirtAddr};
use crate::pagetable::{parse_hex, MappingSet, PageSize};

/// Default start of the traced region.
pub const DEFAULT_BASE: u64 = 0x1000_0000_0000;

const PAGE: u64 = 4096;
const LARGE: u64 = 2 << 20;
const LINE: u64 = 64;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("footprint {footprint:#x} is not a multiple of {align:#x}")]
    Misaligned { footprint: u64, align: u64 },
    #[error("large-page fraction {0} is outside [0, 1]")]
    BadFraction(f64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "R")]
    Read,
    #[serde(rename = "W")]
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemRef {
    pub op: Op,
    pub va: VirtAddr,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceMeta {
    pub generator: String,
    pub footprint: u64,
    pub base: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    pub meta: TraceMeta,
    pub refs: Vec<MemRef>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MemRef> {
        self.refs.iter()
    }

    /// Moves every reference so the region starts at `base`.
    pub fn rebase(mut self, base: u64) -> Self {
        let old = self.meta.base;
        for r in &mut self.refs {
            r.va = VirtAddr::new_unchecked(r.va.as_u64() - old + base);
        }
        self.meta.base = base;
        self
    }

    pub fn within_footprint(&self) -> bool {
        let (lo, hi) = (self.meta.base, self.meta.base + self.meta.footprint);
        self.refs.iter().all(|r| (lo..hi).contains(&r.va.as_u64()))
    }

    /// Number of distinct `1 << shift`-byte regions referenced.
    pub fn distinct_regions(&self, shift: u32) -> usize {
        let mut v: Vec<u64> = self.refs.iter().map(|r| r.va.as_u64() >> shift).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    }

    pub fn write_to<W: Write>(&self, w: W) -> io::Result<()> {
        let mut w = io::BufWriter::new(w);
        writeln!(w, "# generator: {}", self.meta.generator)?;
        writeln!(w, "# footprint: {:#x}", self.meta.footprint)?;
        writeln!(w, "# base: {:#x}", self.meta.base)?;
        writeln!(w, "# seed: {}", self.meta.seed)?;
        for r in &self.refs {
            let op = match r.op {
                Op::Read => 'R',
                Op::Write => 'W',
            };
            writeln!(w, "{op} {:#x}", r.va.as_u64())?;
        }
        w.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    /// Parses `R|W <hex va>` lines. `# key: value` comments carry metadata;
    /// other comments and blank lines are skipped.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self, WorkloadError> {
        let mut meta = BTreeMap::new();
        let mut refs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let trimmed = line.trim();
            if let Some(comment) = trimmed.strip_prefix('#') {
                if let Some((k, v)) = comment.split_once(':') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            let body = trimmed.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |msg: String| WorkloadError::Parse { line: lineno, msg };
            let mut fields = body.split_whitespace();
            let op = match fields.next() {
                Some("R") | Some("r") => Op::Read,
                Some("W") | Some("w") => Op::Write,
                Some(other) => return Err(err(format!("expected R or W, got {other:?}"))),
                None => unreachable!(),
            };
            let va = fields.next().ok_or_else(|| err("missing address".into()))?;
            let va = parse_hex(va).map_err(err)?;
            if let Some(extra) = fields.next() {
                return Err(err(format!("unexpected field {extra:?}")));
            }
            refs.push(MemRef { op, va: VirtAddr::new_unchecked(va) });
        }
        let number = |key: &str| -> Result<u64, WorkloadError> {
            match meta.get(key) {
                None => Ok(0),
                Some(v) => {
                    let parsed = if v.starts_with("0x") { parse_hex(v) } else { v.parse().map_err(|e| format!("{e}")) };
                    parsed.map_err(|msg| WorkloadError::Parse { line: 0, msg: format!("metadata {key}: {msg}") })
                }
            }
        };
        let meta = TraceMeta {
            generator: meta.get("generator").cloned().unwrap_or_else(|| "file".into()),
            footprint: number("footprint")?,
            base: number("base")?,
            seed: number("seed")?,
        };
        Ok(Trace { meta, refs })
    }
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace, WorkloadError> {
    let f = std::fs::File::open(path)?;
    Trace::parse(io::BufReader::new(f))
}

pub fn save_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<(), WorkloadError> {
    Ok(trace.save(path)?)
}

fn meta(generator: &str, footprint: u64, seed: u64) -> TraceMeta {
    TraceMeta { generator: generator.into(), footprint, base: DEFAULT_BASE, seed }
}

fn read(va: u64) -> MemRef {
    MemRef { op: Op::Read, va: VirtAddr::new_unchecked(va) }
}

/// `n` 8-byte-aligned reads uniform over the footprint.
pub fn gen_uniform_random(seed: u64, footprint: u64, n: usize) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = (footprint / 8).max(1);
    let refs = (0..n).map(|_| read(DEFAULT_BASE + rng.random_range(0..words) * 8)).collect();
    Trace { meta: meta("uniform", footprint, seed), refs }
}

/// Reads at `stride` byte steps, wrapping at the footprint.
pub fn gen_sequential(footprint: u64, stride: u64, n: usize) -> Trace {
    let footprint = footprint.max(1);
    let refs = (0..n as u64).map(|i| read(DEFAULT_BASE + (i * stride) % footprint)).collect();
    Trace { meta: meta("sequential", footprint, 0), refs }
}

/// Follows a random cycle through every page of the footprint, one read per
/// page at a fixed per-page line.
pub fn gen_pointer_chase(seed: u64, footprint: u64, n: usize) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pages = (footprint / PAGE).max(1);
    let mut order: Vec<u32> = (0..pages as u32).collect();
    order.shuffle(&mut rng);
    let lines: Vec<u8> = (0..pages).map(|_| rng.random_range(0..(PAGE / LINE) as u8)).collect();
    let refs = (0..n)
        .map(|i| {
            let p = order[i % order.len()] as u64;
            read(DEFAULT_BASE + p * PAGE + lines[p as usize] as u64 * LINE)
        })
        .collect();
    Trace { meta: meta("chase", footprint, seed), refs }
}

/// Share of the footprint backed by 2 MB pages, placed at the start of the
/// address space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FragmentationPolicy {
    large_page_fraction: f64,
}

impl FragmentationPolicy {
    pub const SMALL_ONLY: Self = Self { large_page_fraction: 0.0 };
    pub const HALF: Self = Self { large_page_fraction: 0.5 };
    pub const LARGE_ONLY: Self = Self { large_page_fraction: 1.0 };

    pub fn new(fraction: f64) -> Result<Self, WorkloadError> {
        if (0.0..=1.0).contains(&fraction) {
            Ok(Self { large_page_fraction: fraction })
        } else {
            Err(WorkloadError::BadFraction(fraction))
        }
    }

    pub fn large_page_fraction(&self) -> f64 {
        self.large_page_fraction
    }
}

impl Default for FragmentationPolicy {
    fn default() -> Self {
        Self::SMALL_ONLY
    }
}

impl TryFrom<f64> for FragmentationPolicy {
    type Error = WorkloadError;

    fn try_from(f: f64) -> Result<Self, Self::Error> {
        Self::new(f)
    }
}

impl From<FragmentationPolicy> for f64 {
    fn from(p: FragmentationPolicy) -> Self {
        p.large_page_fraction
    }
}

impl FromStr for FragmentationPolicy {
    type Err = WorkloadError;

    /// Accepts `0.5` or `50%`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || WorkloadError::Parse { line: 0, msg: format!("bad large-page fraction {s:?}") };
        let f = match s.strip_suffix('%') {
            Some(p) => p.trim().parse::<f64>().map_err(|_| bad())? / 100.0,
            None => s.parse::<f64>().map_err(|_| bad())?,
        };
        Self::new(f)
    }
}

impl fmt::Display for FragmentationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.large_page_fraction * 100.0)
    }
}

/// [`layout_at`] with the default VA base and physical frames from 0.
pub fn layout(footprint: u64, frag: FragmentationPolicy, seed: u64) -> Result<MappingSet, WorkloadError> {
    layout_at(DEFAULT_BASE, 0, footprint, frag, seed)
}

/// Maps `[va_base, va_base + footprint)`. The leading share given by `frag`
/// uses 2 MB pages mapped in order from `pa_base`; the rest uses 4 kB pages
/// whose frames are a seeded permutation of the remaining physical range.
pub fn layout_at(
    va_base: u64,
    pa_base: u64,
    footprint: u64,
    frag: FragmentationPolicy,
    seed: u64,
) -> Result<MappingSet, WorkloadError> {
    if footprint == 0 || !footprint.is_multiple_of(PAGE) {
        return Err(WorkloadError::Misaligned { footprint, align: PAGE });
    }
    let f = frag.large_page_fraction();
    if f > 0.0 && (!footprint.is_multiple_of(LARGE) || !va_base.is_multiple_of(LARGE) || !pa_base.is_multiple_of(LARGE)) {
        return Err(WorkloadError::Misaligned { footprint, align: LARGE });
    }
    let large_pages = (f * (footprint / LARGE) as f64).round() as u64;
    let large_bytes = large_pages * LARGE;
    let mut maps = MappingSet::new();
    let insert = |maps: &mut MappingSet, va: u64, pa: u64, size| {
        maps.insert(VirtAddr::new_unchecked(va), PhysAddr::new(pa), size).expect("layout mappings are disjoint and aligned")
    };
    for i in 0..large_pages {
        insert(&mut maps, va_base + i * LARGE, pa_base + i * LARGE, PageSize::Size2M);
    }
    let small = (footprint - large_bytes) / PAGE;
    let mut frames: Vec<u64> = (0..small).collect();
    frames.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6c61_796f_7574));
    for (i, &frame) in frames.iter().enumerate() {
        let off = large_bytes + i as u64 * PAGE;
        insert(&mut maps, va_base + off, pa_base + large_bytes + frame * PAGE, PageSize::Size4K);
    }
    Ok(maps)
}
