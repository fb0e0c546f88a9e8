//! Scenario configuration and the replay engine.

mod report;
pub mod repro;
mod scenario;
mod sweep;

use std::collections::HashSet;

use thiserror::Error;

pub use report::{compare, CompareError, ComparisonReport, ComparisonRow, Distribution, GateSummary, MetricsReport, VirtSummary, WorkloadSummary};
pub use scenario::{ByteSize, FragmentationSpec, Generator, HostSpec, Mode, Overrides, PrioMode, Scenario, TranslationSpec, WorkloadSpec};
pub use sweep::{sweep, SweepAxes};

use crate::addressing::{PhysAddr, VirtAddr};
use crate::memhier::{AccessKind, MemHierarchy, ServicedAt};
use crate::pagetable::{build_table, build_table_in, FragmentedAllocator, MappingError, MappingSet, NodeRegion, PageSize, PageTable};
use crate::virtwalker::{VirtConfig, VirtError, VirtWalker};
use crate::walker::{TranslateResult, Walker, WalkerConfig};
use crate::workload::{self, Trace, WorkloadError};

/// Guest-physical to host-physical displacement of the guest's memory.
pub const HOST_OFFSET: u64 = 0x1000_0000_0000;

/// Node placement for host tables, clear of every guest-derived hPA.
const HOST_NODE_REGION: NodeRegion = NodeRegion {
    base_4k: PhysAddr::new(0x0800_0000_0000),
    base_2m: PhysAddr::new(0x0900_0000_0000),
    base_1g: PhysAddr::new(0x0C00_0000_0000),
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Virt(#[from] VirtError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

/// The tables a scenario replays against.
#[derive(Debug, Clone)]
pub struct Tables {
    pub native: PageTable,
    /// Present for virtualized runs; `native` is then the guest table.
    pub host: Option<PageTable>,
}

pub fn make_trace(cfg: &Scenario) -> Result<Trace, RunError> {
    let w = &cfg.workload;
    let n = w.references as usize;
    let t = match w.generator {
        Generator::Uniform => workload::gen_uniform_random(cfg.seed, w.footprint.0, n),
        Generator::Sequential => workload::gen_sequential(w.footprint.0, w.stride, n),
        Generator::Chase => workload::gen_pointer_chase(cfg.seed, w.footprint.0, n),
        Generator::File => {
            let path = w.trace.as_ref().ok_or_else(|| RunError::Config("missing trace path".into()))?;
            return Ok(workload::load_trace(path)?);
        }
    };
    Ok(t.rebase(w.base))
}

/// Guest mappings: the mapping file if given, else the generated layout.
pub fn guest_mappings(cfg: &Scenario) -> Result<MappingSet, RunError> {
    if let Some(path) = &cfg.workload.mappings {
        return Ok(MappingSet::load(path)?);
    }
    Ok(workload::layout_at(cfg.workload.base, 0, cfg.workload.footprint.0, cfg.fragmentation.large_page_fraction, cfg.seed)?)
}

/// Host mappings for a guest: its memory with the host's page-size mix,
/// plus every guest page-table node as 4 kB pages. Guest memory from a
/// mapping file is backed page for page at the guest's page sizes.
pub fn host_mappings(cfg: &Scenario, guest: &PageTable, host: &HostSpec) -> Result<MappingSet, RunError> {
    let mut maps = match &cfg.workload.mappings {
        Some(path) => {
            let mut m = MappingSet::new();
            for (_, g) in MappingSet::load(path)?.iter() {
                back_guest_page(&mut m, g.pa.as_u64(), g.size)?;
            }
            m
        }
        None => workload::layout_at(0, HOST_OFFSET, cfg.workload.footprint.0, host.large_page_fraction, cfg.seed ^ 0x686f_7374)?,
    };
    for n in guest.nodes() {
        for p in 0..n.size().bytes() >> 12 {
            let gpa = n.base().as_u64() + (p << 12);
            maps.insert(VirtAddr::new_unchecked(gpa), PhysAddr::new(HOST_OFFSET + gpa), PageSize::Size4K)
                .map_err(|e| RunError::Config(format!("guest node page {gpa:#x}: {e}")))?;
        }
    }
    Ok(maps)
}

/// Maps one guest page at `gpa` in the host, tolerating aliased guest frames.
fn back_guest_page(m: &mut MappingSet, gpa: u64, size: PageSize) -> Result<(), MappingError> {
    let at = |a: u64| VirtAddr::new_unchecked(a);
    if m.lookup(at(gpa)).is_some_and(|(b, h)| b.as_u64() + h.size.bytes() >= gpa + size.bytes()) {
        return Ok(());
    }
    match m.insert(at(gpa), PhysAddr::new(HOST_OFFSET + gpa), size) {
        Err(MappingError::Overlap { .. }) => {
            for p in (gpa..gpa + size.bytes()).step_by(4096) {
                if m.lookup(at(p)).is_none() {
                    m.insert(at(p), PhysAddr::new(HOST_OFFSET + p), PageSize::Size4K)?;
                }
            }
            Ok(())
        }
        r => r,
    }
}

pub fn build_tables(cfg: &Scenario) -> Result<Tables, RunError> {
    let maps = guest_mappings(cfg)?;
    let mut alloc = FragmentedAllocator::new(cfg.seed, cfg.fragmentation.fail_2m, cfg.fragmentation.fail_1g);
    let native = build_table(&maps, &cfg.translation.layout_policy(), &mut alloc);
    drop(maps);
    let host = match (&cfg.translation.mode, &cfg.translation.host) {
        (Mode::Virtualized, Some(h)) => {
            let hm = host_mappings(cfg, &native, h)?;
            let mut halloc = FragmentedAllocator::new(cfg.seed ^ 1, cfg.fragmentation.fail_2m, cfg.fragmentation.fail_1g);
            Some(build_table_in(&hm, &h.layout_policy(), &mut halloc, HOST_NODE_REGION))
        }
        _ => None,
    };
    Ok(Tables { native, host })
}

#[allow(clippy::large_enum_variant)]
enum Engine {
    Native(Walker),
    Virt(VirtWalker),
}

impl Engine {
    fn translate(&mut self, va: VirtAddr, t: &Tables, mem: &mut MemHierarchy) -> Result<TranslateResult, RunError> {
        match self {
            Engine::Native(w) => Ok(w.translate(va, &t.native, mem)),
            Engine::Virt(w) => Ok(w.nested_translate(va, &t.native, t.host.as_ref().expect("host table"), mem)?),
        }
    }

    fn reset_stats(&mut self) {
        match self {
            Engine::Native(w) => w.reset_stats(),
            Engine::Virt(w) => w.reset_stats(),
        }
    }
}

#[derive(Default)]
struct Tally {
    references: u64,
    walks: u64,
    unmapped: u64,
    histogram: Vec<u64>,
    walk_latency: u64,
    translation_latency: u64,
    skipped: u64,
    host_skipped: u64,
    guest_accesses: u64,
    host_accesses: u64,
    pte_dram: u64,
    pte_lines: HashSet<u64>,
}

impl Tally {
    fn record(&mut self, r: &TranslateResult) {
        self.references += 1;
        self.translation_latency += r.latency as u64;
        if r.translation.is_none() {
            self.unmapped += 1;
        }
        let Some(w) = &r.walk else { return };
        self.walks += 1;
        let n = w.accesses.len();
        if self.histogram.len() <= n {
            self.histogram.resize(n + 1, 0);
        }
        self.histogram[n] += 1;
        self.walk_latency += w.total_latency as u64;
        self.skipped += w.skipped_levels as u64;
        self.host_skipped += w.host_skipped_levels as u64;
        for a in &w.accesses {
            match a.dimension {
                crate::walker::Dimension::Host => self.host_accesses += 1,
                _ => self.guest_accesses += 1,
            }
            if a.serviced_at == ServicedAt::Dram {
                self.pte_dram += 1;
            }
            self.pte_lines.insert(a.addr.as_u64() >> 6);
        }
    }
}

fn per(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Validates, builds the tables and trace, and replays every reference.
pub fn run_scenario(cfg: &Scenario) -> Result<MetricsReport, RunError> {
    cfg.validate()?;
    let trace = make_trace(cfg)?;
    let tables = build_tables(cfg)?;
    run_with(cfg, &trace, &tables)
}

/// Replays `trace` against prebuilt tables.
pub fn run_with(cfg: &Scenario, trace: &Trace, tables: &Tables) -> Result<MetricsReport, RunError> {
    let mut mem = MemHierarchy::new(cfg.caches, cfg.gate, cfg.seed).with_coefficients(cfg.energy);
    let t = &cfg.translation;
    let mut engine = match t.mode {
        Mode::Native => Engine::Native(Walker::new(&WalkerConfig { tlb: t.tlb, pwc: t.pwc })),
        Mode::Virtualized => {
            if tables.host.is_none() {
                return Err(RunError::Config("virtualized run without a host table".into()));
            }
            Engine::Virt(VirtWalker::new(&VirtConfig { tlb: t.tlb, guest_pwc: t.pwc, vpwc: t.vpwc, nested_tlb: t.nested_tlb }))
        }
    };
    let mut tally = Tally::default();
    for (i, r) in trace.refs.iter().enumerate() {
        if i as u64 == cfg.warmup && i > 0 {
            tally = Tally::default();
            mem.reset_counters();
            engine.reset_stats();
        }
        let res = engine.translate(r.va, tables, &mut mem)?;
        if let Some(tr) = res.translation {
            mem.access(tr.resolve(r.va.as_u64()), AccessKind::Data, 0);
        }
        mem.update_pressure(res.tlb_level == crate::walker::TlbLevel::Miss);
        tally.record(&res);
    }
    Ok(build_report(cfg, trace, tables, &engine, &mem, tally))
}

fn miss_ratio(mem: &MemHierarchy, kind: AccessKind) -> f64 {
    let c = mem.level(ServicedAt::L2).expect("L2 exists").counters(kind);
    per(c.misses, c.probes)
}

fn build_report(cfg: &Scenario, trace: &Trace, tables: &Tables, engine: &Engine, mem: &MemHierarchy, tally: Tally) -> MetricsReport {
    let (tlb, pwc, virt) = match engine {
        Engine::Native(w) => (w.tlbs.stats(), w.pwc.counters(), None),
        Engine::Virt(w) => {
            let c = w.counters();
            let v = VirtSummary {
                guest_accesses_per_walk: per(tally.guest_accesses, tally.walks),
                host_accesses_per_walk: per(tally.host_accesses, tally.walks),
                host_walks_per_walk: per(c.host_walks, tally.walks),
                mean_host_skipped_levels: per(tally.host_skipped, c.host_walks),
                vpwc: w.vpwc.counters(),
                nested_tlb: w.nested_tlb.counters(),
                host_census: tables.host.as_ref().map(|h| h.census()).unwrap_or_default(),
            };
            (w.tlbs.stats(), w.guest_pwc.counters(), Some(v))
        }
    };
    let ledger = mem.ledger();
    let footprint = if trace.meta.footprint > 0 { trace.meta.footprint } else { cfg.workload.footprint.0 };
    MetricsReport {
        label: cfg.label.clone(),
        mode: cfg.translation.mode,
        layout: cfg.translation.layout.to_string(),
        host_layout: cfg.translation.host.as_ref().map(|h| h.layout.to_string()),
        workload: WorkloadSummary {
            generator: cfg.workload.generator,
            footprint,
            references: trace.len() as u64,
            seed: cfg.seed,
        },
        references: tally.references,
        walks: tally.walks,
        unmapped: tally.unmapped,
        accesses_per_walk: Distribution::from_histogram(tally.histogram),
        mean_walk_latency: per(tally.walk_latency, tally.walks),
        mean_translation_latency: per(tally.translation_latency, tally.references),
        mean_skipped_levels: per(tally.skipped, tally.walks),
        pte_dram_per_walk: per(tally.pte_dram, tally.walks),
        tlb,
        pwc,
        virt,
        caches: mem.counters(),
        data_l2_miss_ratio: miss_ratio(mem, AccessKind::Data),
        pte_l2_miss_ratio: miss_ratio(mem, AccessKind::Pte),
        cache_energy: ledger.cache_energy(),
        dram_energy: ledger.dram_energy(),
        energy: ledger,
        census: tables.native.census(),
        replicated_entries: tables.native.replicated_entries() as u64,
        distinct_pte_lines: tally.pte_lines.len() as u64,
        gate: GateSummary { windows: mem.gate().windows(), prioritized_windows: mem.gate().prioritized_windows() },
        config: cfg.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::LevelScheme;
    use crate::walker::PwcConfig;

    fn small(layout: LevelScheme) -> Scenario {
        let mut s = Scenario::default();
        s.workload.footprint = ByteSize(64 << 20);
        s.workload.references = 20_000;
        s.translation.layout = layout;
        s
    }

    #[test]
    fn uncached_native_walks_are_full_length() {
        let mut s = small(LevelScheme::conventional());
        s.translation.tlb.enabled = false;
        s.translation.pwc = PwcConfig::disabled();
        let r = run_scenario(&s).unwrap();
        assert_eq!(r.walks, 20_000);
        assert_eq!(r.accesses_per_walk.mean, 4.0);
        assert_eq!(r.unmapped, 0);
    }

    #[test]
    fn uncached_virtualized_walks_cost_24() {
        let mut s = small(LevelScheme::conventional()).virtualized(LevelScheme::conventional());
        s.workload.references = 2_000;
        s.translation.tlb.enabled = false;
        s.translation.pwc = PwcConfig::disabled();
        s.translation.vpwc = PwcConfig::disabled();
        s.translation.nested_tlb.enabled = false;
        let r = run_scenario(&s).unwrap();
        assert_eq!(r.accesses_per_walk.mean, 24.0);
        let v = r.virt.unwrap();
        assert_eq!((v.guest_accesses_per_walk, v.host_accesses_per_walk), (4.0, 20.0));
    }

    #[test]
    fn reports_are_deterministic() {
        let s = small(LevelScheme::flattened());
        let a = run_scenario(&s).unwrap().to_json();
        let b = run_scenario(&s).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn warmup_resets_counters() {
        let mut s = small(LevelScheme::conventional());
        s.warmup = 5_000;
        let r = run_scenario(&s).unwrap();
        assert_eq!(r.references, 15_000);
        assert_eq!(r.tlb.lookups, 15_000);
        assert_eq!(r.workload.references, 20_000);
    }

    #[test]
    fn compare_flat_against_conventional() {
        let mut s = small(LevelScheme::conventional());
        s.translation.tlb.enabled = false;
        s.translation.pwc = PwcConfig::disabled();
        let base = run_scenario(&s).unwrap();
        s.translation.layout = LevelScheme::flattened();
        s.label = "flat".into();
        let flat = run_scenario(&s).unwrap();
        let c = compare(&base, std::slice::from_ref(&flat)).unwrap();
        assert_eq!(c.delta("flat", "accesses_per_walk"), Some(-0.5));
        let same = compare(&base, std::slice::from_ref(&base)).unwrap();
        assert!(same.rows.iter().all(|r| r.delta == 0.0));
        assert!(c.to_csv().starts_with("variant,metric,baseline,value,delta\n"));

        let mut other = flat;
        other.workload.seed += 1;
        assert!(matches!(compare(&base, &[other]), Err(CompareError::WorkloadMismatch { .. })));
    }

    #[test]
    fn invalid_config_fails_before_simulating() {
        let mut s = small(LevelScheme::conventional());
        s.translation.mode = Mode::Virtualized;
        assert!(matches!(run_scenario(&s), Err(RunError::Config(_))));
    }

    #[test]
    fn text_report_is_aligned() {
        let r = run_scenario(&small(LevelScheme::flattened())).unwrap();
        let text = r.to_text();
        let cols: Vec<usize> = text.lines().map(|l| l.find("  ").unwrap()).collect();
        let value_cols: Vec<usize> =
            text.lines().map(|l| l.len() - l[l.find("  ").unwrap()..].trim_start().len()).collect();
        assert!(cols.iter().all(|&c| c > 0));
        assert!(value_cols.windows(2).all(|w| w[0] == w[1]));
    }
}
