//! The acceptance matrix: each check builds its own scenarios and reports
//! pass or fail with the measured values.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::addressing::{LevelScheme, PhysAddr, VirtAddr};
use crate::memhier::{GateConfig, HierarchyConfig, MemHierarchy, ReplacementMode};
use crate::pagetable::{
    build_table, install_recursion, reference_translate, FragmentedAllocator, LayoutPolicy, MappingSet, PageSize,
    PageTable, Unfragmented,
};
use crate::recursive::{find_node_va, recursive_translate_with, IndexMode, Resolved, DEFAULT_REC_INDEX};
use crate::virtwalker::naive_access_count;
use crate::walker::{PwcConfig, Walker, WalkerConfig};
use crate::workload::{self, FragmentationPolicy, DEFAULT_BASE};

use super::{compare, run_scenario, ByteSize, Generator, MetricsReport, PrioMode, RunError, Scenario};

pub const CHECK_COUNT: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {:>2} {}: {}", self.id, self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReproConfig {
    pub seed: u64,
    /// Footprint of the steady-state traces.
    pub footprint: u64,
    pub references: u64,
    pub warmup: u64,
    /// Oracle cases are `tables * probes` translations.
    pub oracle_tables: usize,
    pub oracle_probes: usize,
    /// Restricts the run to these check ids.
    pub only: Option<Vec<u32>>,
}

impl Default for ReproConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            footprint: 8 << 30,
            references: 1_000_000,
            warmup: 200_000,
            oracle_tables: 2_000,
            oracle_probes: 50,
            only: None,
        }
    }
}

impl ReproConfig {
    fn wants(&self, id: u32) -> bool {
        self.only.as_ref().is_none_or(|o| o.contains(&id))
    }
}

/// Runs the selected checks in id order.
pub fn run_repro(cfg: &ReproConfig) -> Result<Vec<Check>, RunError> {
    let mut lab = Lab { cfg: cfg.clone(), runs: HashMap::new() };
    let mut out = Vec::new();
    for id in 1..=CHECK_COUNT {
        if cfg.wants(id) {
            out.push(lab.check(id)?);
        }
    }
    Ok(out)
}

fn check(id: u32, name: &'static str, passed: bool, detail: String) -> Check {
    Check { id, name, passed, detail }
}

fn within(x: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&x)
}

struct Lab {
    cfg: ReproConfig,
    runs: HashMap<String, MetricsReport>,
}

impl Lab {
    fn base(&self) -> Scenario {
        let mut s = Scenario { seed: self.cfg.seed, warmup: self.cfg.warmup, ..Default::default() };
        s.workload.footprint = ByteSize(self.cfg.footprint);
        s.workload.references = self.cfg.references;
        s
    }

    fn with(&self, layout: LevelScheme, generator: Generator) -> Scenario {
        let mut s = self.base();
        s.label = format!("{layout} {generator}");
        s.translation.layout = layout;
        s.workload.generator = generator;
        s.workload.stride = 4096;
        s
    }

    fn virt(&self, guest: LevelScheme, host: LevelScheme, generator: Generator) -> Scenario {
        let mut s = self.with(guest.clone(), generator).virtualized(host.clone());
        s.label = format!("{guest}/{host} {generator}");
        s
    }

    fn run(&mut self, s: &Scenario) -> Result<MetricsReport, RunError> {
        let key = s.to_toml();
        if let Some(r) = self.runs.get(&key) {
            return Ok(r.clone());
        }
        let r = run_scenario(s)?;
        self.runs.insert(key, r.clone());
        Ok(r)
    }

    fn check(&mut self, id: u32) -> Result<Check, RunError> {
        match id {
            1 => self.cold_counts(),
            2 => Ok(self.census()),
            3 => self.pwc_effect(),
            4 => self.virt_steady_state(),
            5 => Ok(self.oracle()),
            6 => Ok(recursion()),
            7 => self.fallback(),
            8 => self.prioritization(),
            9 => self.nf_effect(),
            10 => self.energy(),
            _ => Err(RunError::Config(format!("no check {id}"))),
        }
    }

    fn cold_counts(&mut self) -> Result<Check, RunError> {
        let conv = LevelScheme::conventional;
        let flat = LevelScheme::flattened;
        let mid = || LevelScheme::new(&[9, 18, 9]).expect("valid scheme");
        let mut cases: Vec<(String, Scenario, usize)> = Vec::new();
        for (l, n) in [(conv(), 4), (flat(), 2), (mid(), 3)] {
            cases.push((l.to_string(), cold(self.cfg.seed, l, None), n));
        }
        for (g, h) in [(conv(), conv()), (flat(), conv()), (conv(), flat()), (flat(), flat())] {
            let n = naive_access_count(g.levels(), h.levels());
            cases.push((format!("{g}/{h}"), cold(self.cfg.seed, g, Some(h)), n));
        }
        let mut ok = true;
        let mut parts = Vec::new();
        for (name, s, want) in cases {
            let r = self.run(&s)?;
            let d = &r.accesses_per_walk;
            let exact = r.walks > 0 && d.histogram.iter().enumerate().all(|(n, &c)| c == 0 || n == want);
            ok &= exact;
            parts.push(format!("{name}={:.2}", d.mean));
        }
        ok &= naive_access_count(4, 4) == 24 && naive_access_count(2, 4) == 14 && naive_access_count(2, 2) == 8;
        Ok(check(1, "cold access counts", ok, parts.join(" ")))
    }

    fn census(&self) -> Check {
        let maps = workload::layout(8 << 30, FragmentationPolicy::SMALL_ONLY, self.cfg.seed).expect("aligned layout");
        let conv = build_table(&maps, &LayoutPolicy::conventional(), &mut Unfragmented).census();
        let flat = build_table(&maps, &LayoutPolicy::flattened(), &mut Unfragmented).census();
        let ok = conv.nodes_4k == 4106
            && conv.nodes_2m == 0
            && flat.nodes_2m == 9
            && flat.nodes_4k == 0
            && conv.total_bytes == 4106 * 4096
            && flat.total_bytes == 9 << 21;
        let detail = format!(
            "conventional {} x 4 kB ({:.1} MB), flattened {} x 2 MB ({:.1} MB)",
            conv.nodes_4k,
            conv.total_bytes as f64 / 1e6,
            flat.nodes_2m,
            flat.total_bytes as f64 / 1e6
        );
        check(2, "node census", ok, detail)
    }

    fn pwc_effect(&mut self) -> Result<Check, RunError> {
        let conv = self.run(&self.with(LevelScheme::conventional(), Generator::Uniform))?;
        let flat = self.run(&self.with(LevelScheme::flattened(), Generator::Uniform))?;
        let seq = self.run(&self.with(LevelScheme::flattened(), Generator::Sequential))?;
        let chase = self.run(&self.with(LevelScheme::flattened(), Generator::Chase))?;
        let (c, f, s, p) =
            (conv.accesses_per_walk.mean, flat.accesses_per_walk.mean, seq.accesses_per_walk.mean, chase.accesses_per_walk.mean);
        let ok = within(c, 2.0, 2.6) && within(f, 1.0, 1.05) && (s - 1.0).abs() <= 0.01 && (p - 1.0).abs() <= 0.01;
        let detail = format!("random conventional {c:.3}, flattened {f:.3}; flattened sequential {s:.3}, chase {p:.3}");
        Ok(check(3, "steady-state PWC effect", ok, detail))
    }

    fn virt_steady_state(&mut self) -> Result<Check, RunError> {
        let flat = LevelScheme::flattened;
        let rnd = self.run(&self.virt(flat(), flat(), Generator::Uniform))?;
        let seq = self.run(&self.virt(flat(), flat(), Generator::Sequential))?;
        let chase = self.run(&self.virt(flat(), flat(), Generator::Chase))?;
        let (r, s, c) = (rnd.accesses_per_walk.mean, seq.accesses_per_walk.mean, chase.accesses_per_walk.mean);
        let ok = within(r, 2.5, 3.2) && s <= 3.0 && c <= 3.0;
        let detail = format!("flat/flat random {r:.3}, sequential {s:.3}, chase {c:.3}");
        Ok(check(4, "virtualized steady state", ok, detail))
    }

    fn oracle(&self) -> Check {
        let (cases, failures) = oracle_suite(self.cfg.seed, self.cfg.oracle_tables, self.cfg.oracle_probes);
        let detail = match &failures.first() {
            None => format!("{cases} cases agree"),
            Some(f) => format!("{} of {cases} cases disagree, first: {f}", failures.len()),
        };
        check(5, "oracle equivalence", failures.is_empty(), detail)
    }

    fn fallback(&mut self) -> Result<Check, RunError> {
        let maps = scattered_mappings(self.cfg.seed, 64);
        let conv = build_table(&maps, &LayoutPolicy::conventional(), &mut Unfragmented);
        let mut ok = true;
        for scheme in [LevelScheme::flattened(), LevelScheme::new(&[9, 18, 9]).expect("valid scheme")] {
            let fb = build_table(&maps, &LayoutPolicy::new(scheme), &mut FragmentedAllocator::exhausted());
            ok &= same_structure(&conv, &fb);
        }
        let refused = |mut s: Scenario| {
            s.fragmentation.fail_2m = 1.0;
            s
        };
        let flat = LevelScheme::flattened;
        let native = self.run(&refused(cold(self.cfg.seed, flat(), None)))?;
        let virt = self.run(&refused(cold(self.cfg.seed, flat(), Some(flat()))))?;
        let n = native.accesses_per_walk.mean;
        let v = virt.accesses_per_walk.mean;
        ok &= n == 4.0 && v == 24.0 && native.census.nodes_2m == 0;
        let detail = format!("node-for-node identical: {ok}; refused [18,18] walks {n:.2}, virtualized {v:.2}");
        Ok(check(7, "graceful fallback", ok, detail))
    }

    fn prioritization(&mut self) -> Result<Check, RunError> {
        let mut ok = true;
        let mut parts = Vec::new();
        let l3_bytes = HierarchyConfig::default().l3.size;
        for layout in [LevelScheme::conventional(), LevelScheme::flattened()] {
            let s = self.with(layout.clone(), Generator::Uniform);
            let off = self.run(&s.clone().with_prio(PrioMode::Off))?;
            let on = self.run(&s.with_prio(PrioMode::On))?;
            let lat = 1.0 - on.mean_walk_latency / off.mean_walk_latency;
            let dram = 1.0 - on.pte_dram_per_walk / off.pte_dram_per_walk;
            let l2 = on.data_l2_miss_ratio - off.data_l2_miss_ratio;
            let fits = off.distinct_pte_lines * 64 <= l3_bytes;
            ok &= lat >= 0.15 && dram >= 0.5 && l2 <= 0.10 && fits;
            parts.push(format!(
                "{layout}: latency {:.1} -> {:.1} (-{:.0}%), pte DRAM/walk {:.3} -> {:.3} (-{:.0}%), data L2 miss {:+.1} pp, pte set {:.1} MB",
                off.mean_walk_latency,
                on.mean_walk_latency,
                lat * 100.0,
                off.pte_dram_per_walk,
                on.pte_dram_per_walk,
                dram * 100.0,
                l2 * 100.0,
                (off.distinct_pte_lines * 64) as f64 / 1e6
            ));
        }
        Ok(check(8, "prioritization trend", ok, parts.join("; ")))
    }

    fn nf_effect(&mut self) -> Result<Check, RunError> {
        let mut s = self.with(LevelScheme::new(&[9, 9, 18]).expect("valid scheme"), Generator::Uniform);
        s.fragmentation.large_page_fraction = FragmentationPolicy::LARGE_ONLY;
        s.translation.nf_threshold = 0;
        let plain = self.run(&s)?;
        s.translation.nf_threshold = crate::pagetable::DEFAULT_NF_THRESHOLD;
        let nf = self.run(&s)?;
        let ratio = plain.distinct_pte_lines as f64 / nf.distinct_pte_lines.max(1) as f64;
        let ok = ratio >= 100.0 && nf.accesses_per_walk.mean <= plain.accesses_per_walk.mean;
        let detail = format!(
            "distinct pte lines {} without NF vs {} with NF ({ratio:.0}x); accesses/walk {:.3} vs {:.3}",
            plain.distinct_pte_lines, nf.distinct_pte_lines, plain.accesses_per_walk.mean, nf.accesses_per_walk.mean
        );
        Ok(check(9, "NF-region effect", ok, detail))
    }

    fn energy(&mut self) -> Result<Check, RunError> {
        let conv = LevelScheme::conventional;
        let flat = LevelScheme::flattened;
        let pairs = [
            ("native", self.with(conv(), Generator::Uniform), self.with(flat(), Generator::Uniform)),
            ("virtualized", self.virt(conv(), conv(), Generator::Uniform), self.virt(flat(), flat(), Generator::Uniform)),
        ];
        let mut ok = true;
        let mut parts = Vec::new();
        for (name, base, variant) in pairs {
            let b = self.run(&base.with_prio(PrioMode::Off))?;
            let mut f = self.run(&variant.clone().with_prio(PrioMode::Off))?;
            let mut fp = self.run(&variant.with_prio(PrioMode::On))?;
            f.label = "flattened".into();
            fp.label = "flattened+prioritized".into();
            let c = compare(&b, &[f, fp]).map_err(|e| RunError::Config(e.to_string()))?;
            for v in ["flattened", "flattened+prioritized"] {
                let ce = c.delta(v, "cache_energy").unwrap_or(f64::NAN);
                let de = c.delta(v, "dram_energy").unwrap_or(f64::NAN);
                ok &= ce <= 0.0 && de <= 0.0;
                parts.push(format!("{name} {v} cache {:+.1}% DRAM {:+.1}%", ce * 100.0, de * 100.0));
            }
        }
        Ok(check(10, "energy monotonicity", ok, parts.join(", ")))
    }
}

/// A small run with every translation cache off, so each walk is cold.
fn cold(seed: u64, layout: LevelScheme, host: Option<LevelScheme>) -> Scenario {
    let mut s = Scenario { seed, label: "cold".into(), ..Default::default() };
    s.workload.footprint = ByteSize(16 << 20);
    s.workload.references = 2_000;
    s.translation.layout = layout;
    if let Some(h) = host {
        s = s.virtualized(h);
    }
    s.translation.tlb.enabled = false;
    s.translation.pwc = PwcConfig::disabled();
    s.translation.vpwc = PwcConfig::disabled();
    s.translation.nested_tlb.enabled = false;
    s
}

fn same_structure(a: &PageTable, b: &PageTable) -> bool {
    a.root() == b.root() && a.node_count() == b.node_count() && a.nodes().zip(b.nodes()).all(|(x, y)| x == y)
}

/// 4 kB mappings spread over several 1 GB and 512 GB regions.
fn scattered_mappings(seed: u64, n: usize) -> MappingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = MappingSet::new();
    while m.len() < n {
        let va = DEFAULT_BASE + rng.random_range(0..4u64) * (512 << 30) + rng.random_range(0..(4u64 << 18)) * 4096;
        let _ = m.insert(VirtAddr::new_unchecked(va), PhysAddr::new(rng.random_range(0..1u64 << 28) << 12), PageSize::Size4K);
    }
    m
}

/// Random small table for the oracle suite, clustered so large nodes stay few.
fn random_mappings(rng: &mut ChaCha8Rng) -> MappingSet {
    let mut m = MappingSet::new();
    let regions: Vec<u64> = (0..rng.random_range(1..=3))
        .map(|_| DEFAULT_BASE + rng.random_range(0..1u64 << 17) * (1 << 30))
        .collect();
    let n = rng.random_range(1..=32);
    let large = rng.random_range(0.0..1.0);
    for _ in 0..n {
        let r = regions[rng.random_range(0..regions.len())];
        let size = if rng.random_bool(large) { PageSize::Size2M } else { PageSize::Size4K };
        let slot = rng.random_range(0..(1u64 << 30) / size.bytes());
        let va = r + slot * size.bytes();
        let pa = rng.random_range(0..(1u64 << 39) / size.bytes()) * size.bytes();
        let _ = m.insert(VirtAddr::new_unchecked(va), PhysAddr::new(pa), size);
    }
    m
}

const ORACLE_SCHEMES: [&[u32]; 6] = [&[9, 9, 9, 9], &[18, 18], &[9, 18, 9], &[18, 9, 9], &[9, 9, 18], &[9, 9, 9, 9, 9]];

/// Compares hardware translation, the reference walk and the mapping set on
/// random tables, allocator failures and cache states. Returns the number of
/// cases and a description of each disagreement.
pub fn oracle_suite(seed: u64, tables: usize, probes: usize) -> (usize, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f72_6163_6c65);
    let mut failures = Vec::new();
    let mut cases = 0;
    let prio = |m| GateConfig { force: Some(m), ..Default::default() };
    let mut mems = [
        MemHierarchy::new(HierarchyConfig::default(), prio(ReplacementMode::Normal), seed),
        MemHierarchy::new(HierarchyConfig::default(), prio(ReplacementMode::Prioritize), seed + 1),
    ];
    for t in 0..tables {
        let maps = random_mappings(&mut rng);
        let mut scheme = LevelScheme::new(ORACLE_SCHEMES[rng.random_range(0..ORACLE_SCHEMES.len())]).expect("valid scheme");
        if scheme.widths().iter().sum::<u32>() == 45 {
            scheme = LevelScheme::five_level();
        }
        let mut policy = LayoutPolicy::new(scheme);
        if rng.random_bool(0.5) {
            policy = policy.without_nf();
        }
        let fail = [0.0, 0.5, 1.0][rng.random_range(0..3)];
        let table = build_table(&maps, &policy, &mut FragmentedAllocator::new(rng.random(), fail, 0.0));
        let mut walkers = [Walker::new(&WalkerConfig::default()), Walker::new(&WalkerConfig::default())];
        let keys: Vec<(VirtAddr, crate::pagetable::Mapping)> = maps.iter().collect();
        for _ in 0..probes {
            cases += 1;
            let va = if rng.random_bool(0.9) {
                let (base, m) = keys[rng.random_range(0..keys.len())];
                VirtAddr::new_unchecked(base.as_u64() + rng.random_range(0..m.size.bytes()))
            } else {
                VirtAddr::canonicalize(keys[0].0.as_u64() ^ (rng.random_range(1..1u64 << 40) << 12), table.va_bits())
            };
            if rng.random_bool(0.1) {
                walkers.iter_mut().for_each(Walker::flush);
            }
            let expect = maps.lookup(va).map(|(b, m)| m.pa.add(va.as_u64() - b.as_u64()));
            let oracle = reference_translate(&table, va).map(|t| t.resolve(va.as_u64()));
            let hw: Vec<Option<PhysAddr>> = walkers
                .iter_mut()
                .zip(mems.iter_mut())
                .map(|(w, m)| w.translate(va, &table, m).translation.map(|t| t.resolve(va.as_u64())))
                .collect();
            if oracle != expect || hw.iter().any(|h| *h != expect) {
                failures.push(format!(
                    "table {t} {} va {va}: mapping {expect:?}, reference {oracle:?}, hardware {hw:?}",
                    policy.scheme
                ));
            }
        }
    }
    (cases, failures)
}

/// Every node of small tables in each supported scheme is reachable through
/// the recursive window, and the two flattened-root failures appear without
/// overlapping index fields.
fn recursion() -> Check {
    let mut ok = true;
    let mut reached = 0;
    let mut detail = Vec::new();
    for seed in 0..4u64 {
        let maps = scattered_mappings(seed, 64);
        for widths in [&[9, 9, 9, 9][..], &[9, 18, 9], &[18, 9, 9]] {
            let scheme = LevelScheme::new(widths).expect("valid scheme");
            let mut table = build_table(&maps, &LayoutPolicy::new(scheme.clone()), &mut Unfragmented);
            if install_recursion(&mut table, DEFAULT_REC_INDEX).is_err() {
                ok = false;
                continue;
            }
            for node in table.nodes() {
                let good = match find_node_va(&table, DEFAULT_REC_INDEX, node.base(), IndexMode::Overlap) {
                    Ok((_, va)) => matches!(
                        recursive_translate_with(&table, va, IndexMode::Overlap),
                        Ok(Resolved::Node { base, .. }) if base == node.base()
                    ),
                    Err(_) => false,
                };
                reached += good as usize;
                ok &= good;
            }
            if widths == [18, 9, 9] {
                let root = table.root().0;
                let l1 = table.path(maps.iter().next().expect("mappings").0)[2].base();
                let fails = |n: PhysAddr| find_node_va(&table, DEFAULT_REC_INDEX, n, IndexMode::NoOverlap).is_err();
                let both = fails(root) && fails(l1);
                ok &= both;
                if seed == 0 {
                    detail.push(format!("[18,9,9] root and L1 unreachable without overlap: {both}"));
                }
            }
        }
    }
    detail.insert(0, format!("{reached} nodes reached"));
    check(6, "recursive walks", ok, detail.join("; "))
}
