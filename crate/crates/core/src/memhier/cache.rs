use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AccessKind, ReplacementMode};

/// Probability that a prioritized eviction picks the LRU data line instead of
/// the global LRU line.
pub const PRIORITIZE_DATA_EVICTION: f64 = 0.99;

const INVALID: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub size: u64,
    pub ways: usize,
    #[serde(default = "default_line")]
    pub line: u64,
    pub latency: u32,
}

fn default_line() -> u64 {
    64
}

impl CacheConfig {
    pub const fn l1d() -> Self {
        Self { size: 32 << 10, ways: 8, line: 64, latency: 4 }
    }

    pub const fn l2() -> Self {
        Self { size: 256 << 10, ways: 8, line: 64, latency: 12 }
    }

    pub const fn l3() -> Self {
        Self { size: 16 << 20, ways: 8, line: 64, latency: 42 }
    }

    pub fn sets(&self) -> usize {
        (self.size / self.line) as usize / self.ways
    }

    pub fn validate(&self) -> Result<(), String> {
        let lines = self.size / self.line.max(1);
        if self.line == 0 || !self.line.is_power_of_two() {
            return Err(format!("line size {} is not a power of two", self.line));
        }
        if self.ways == 0 || lines == 0 || !lines.is_multiple_of(self.ways as u64) {
            return Err(format!("{} bytes do not divide into {} ways", self.size, self.ways));
        }
        if !self.sets().is_power_of_two() {
            return Err(format!("{} sets is not a power of two", self.sets()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Line {
    /// Full line address; `u64::MAX` when the way is empty.
    pub tag: u64,
    pub stamp: u64,
    pub is_pte: bool,
    pub ctx: u16,
}

impl Line {
    pub const EMPTY: Line = Line { tag: INVALID, stamp: 0, is_pte: false, ctx: 0 };

    pub fn is_valid(&self) -> bool {
        self.tag != INVALID
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounters {
    pub probes: u64,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

/// Picks the way to evict from a full set.
///
/// Normal mode evicts the global LRU line. Prioritize mode evicts, with
/// probability 0.99, the LRU data line belonging to `ctx`; if the set holds no
/// such line, or on the remaining draws, it evicts the global LRU line.
pub fn select_victim<R: Rng + ?Sized>(set: &[Line], mode: ReplacementMode, ctx: u16, rng: &mut R) -> usize {
    match mode {
        ReplacementMode::Normal => lru_way(set, |_| true),
        ReplacementMode::Prioritize => {
            let draw: f64 = rng.random();
            victim_for_draw(set, mode, ctx, draw)
        }
    }
}

/// [`select_victim`] with the random draw supplied by the caller.
pub fn victim_for_draw(set: &[Line], mode: ReplacementMode, ctx: u16, draw: f64) -> usize {
    let global = lru_way(set, |_| true);
    if mode == ReplacementMode::Normal || draw >= PRIORITIZE_DATA_EVICTION {
        return global;
    }
    let data = lru_way(set, |l| !l.is_pte && l.ctx == ctx);
    // lru_way returns usize::MAX when nothing matches.
    if data == usize::MAX {
        global
    } else {
        data
    }
}

fn lru_way(set: &[Line], keep: impl Fn(&Line) -> bool) -> usize {
    let mut best = usize::MAX;
    let mut best_stamp = u64::MAX;
    for (i, l) in set.iter().enumerate() {
        if keep(l) && l.stamp < best_stamp {
            best = i;
            best_stamp = l.stamp;
        }
    }
    best
}

/// One set-associative cache level with true LRU.
#[derive(Debug, Clone)]
pub struct CacheLevel {
    cfg: CacheConfig,
    set_mask: u64,
    line_shift: u32,
    lines: Vec<Line>,
    clock: u64,
    counters: [KindCounters; 2],
}

impl CacheLevel {
    pub fn new(cfg: CacheConfig) -> Self {
        let sets = cfg.sets();
        Self {
            cfg,
            set_mask: sets as u64 - 1,
            line_shift: cfg.line.trailing_zeros(),
            lines: vec![Line::EMPTY; sets * cfg.ways],
            clock: 0,
            counters: [KindCounters::default(); 2],
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn line_addr(&self, addr: u64) -> u64 {
        addr >> self.line_shift
    }

    fn set_range(&self, line: u64) -> std::ops::Range<usize> {
        let set = (line & self.set_mask) as usize;
        set * self.cfg.ways..(set + 1) * self.cfg.ways
    }

    pub fn set_of(&self, line: u64) -> &[Line] {
        &self.lines[self.set_range(line)]
    }

    /// Looks `line` up, refreshing LRU on a hit.
    pub fn probe(&mut self, line: u64, kind: AccessKind) -> bool {
        self.clock += 1;
        let range = self.set_range(line);
        let c = &mut self.counters[kind.slot()];
        c.probes += 1;
        for l in &mut self.lines[range] {
            if l.tag == line {
                l.stamp = self.clock;
                l.is_pte = kind == AccessKind::Pte;
                c.hits += 1;
                return true;
            }
        }
        c.misses += 1;
        false
    }

    pub fn contains(&self, line: u64) -> bool {
        self.set_of(line).iter().any(|l| l.tag == line)
    }

    /// Installs `line`, returning the evicted line address if a valid line
    /// had to make room.
    pub fn fill<R: Rng + ?Sized>(
        &mut self,
        line: u64,
        kind: AccessKind,
        ctx: u16,
        mode: ReplacementMode,
        rng: &mut R,
    ) -> Option<u64> {
        self.clock += 1;
        let range = self.set_range(line);
        let set = &mut self.lines[range];
        let new = Line { tag: line, stamp: self.clock, is_pte: kind == AccessKind::Pte, ctx };
        if let Some(l) = set.iter_mut().find(|l| l.tag == line) {
            *l = new;
            return None;
        }
        if let Some(l) = set.iter_mut().find(|l| !l.is_valid()) {
            *l = new;
            return None;
        }
        let way = select_victim(set, mode, ctx, rng);
        let victim = set[way];
        set[way] = new;
        let slot = if victim.is_pte { AccessKind::Pte } else { AccessKind::Data }.slot();
        self.counters[slot].evictions += 1;
        Some(victim.tag)
    }

    pub fn invalidate(&mut self, line: u64) -> bool {
        let range = self.set_range(line);
        match self.lines[range].iter_mut().find(|l| l.tag == line) {
            Some(l) => {
                *l = Line::EMPTY;
                true
            }
            None => false,
        }
    }

    pub fn counters(&self, kind: AccessKind) -> KindCounters {
        self.counters[kind.slot()]
    }

    pub fn reset_counters(&mut self) {
        self.counters = [KindCounters::default(); 2];
    }

    /// Valid lines by kind: `(data, pte)`.
    pub fn occupancy(&self) -> (usize, usize) {
        self.lines.iter().filter(|l| l.is_valid()).fold((0, 0), |(d, p), l| if l.is_pte { (d, p + 1) } else { (d + 1, p) })
    }
}
