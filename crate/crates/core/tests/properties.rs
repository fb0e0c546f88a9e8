use proptest::prelude::*;

use flatwalk_core::addressing::{compose, decompose, LevelScheme, PhysAddr, VirtAddr};
use flatwalk_core::memhier::{AccessKind, GateConfig, HierarchyConfig, MemHierarchy, ReplacementMode, ServicedAt};
use flatwalk_core::pagetable::{
    build_table, reference_translate, FragmentedAllocator, LayoutPolicy, MappingSet, PageSize, Unfragmented,
};
use flatwalk_core::runner::{build_tables, ByteSize, Scenario};
use flatwalk_core::virtwalker::{VirtConfig, VirtWalker};
use flatwalk_core::walker::{PwcConfig, Walker, WalkerConfig};
use flatwalk_core::workload::{gen_uniform_random, FragmentationPolicy, Trace, DEFAULT_BASE};

const GIB: u64 = 1 << 30;

fn schemes() -> impl Strategy<Value = LevelScheme> {
    prop_oneof![
        Just(LevelScheme::conventional()),
        Just(LevelScheme::flattened()),
        Just(LevelScheme::new(&[9, 18, 9]).unwrap()),
        Just(LevelScheme::new(&[18, 9, 9]).unwrap()),
        Just(LevelScheme::new(&[9, 9, 18]).unwrap()),
        Just(LevelScheme::new(&[27, 9]).unwrap()),
        Just(LevelScheme::five_level()),
    ]
}

fn table_schemes() -> impl Strategy<Value = LevelScheme> {
    prop_oneof![
        Just(LevelScheme::conventional()),
        Just(LevelScheme::flattened()),
        Just(LevelScheme::new(&[9, 18, 9]).unwrap()),
        Just(LevelScheme::new(&[18, 9, 9]).unwrap()),
        Just(LevelScheme::new(&[9, 9, 18]).unwrap()),
    ]
}

/// Up to 24 mappings inside two 1 GB regions; (region, slot, is_2m, frame).
fn mapping_sets() -> impl Strategy<Value = MappingSet> {
    (0u64..1 << 17, 0u64..1 << 17, prop::collection::vec((any::<bool>(), 0u64..512, 0u64..512, any::<bool>(), 1u64..1 << 20), 1..24))
        .prop_map(|(r0, r1, items)| {
            let mut m = MappingSet::new();
            for (second, hi, lo, large, frame) in items {
                let region = DEFAULT_BASE + if second { r1 } else { r0 } * GIB;
                let (va, size, pa) = if large {
                    (region + (hi << 21), PageSize::Size2M, frame << 21)
                } else {
                    (region + (hi << 21) + (lo << 12), PageSize::Size4K, frame << 12)
                };
                let _ = m.insert(VirtAddr::new_unchecked(va), PhysAddr::new(pa), size);
            }
            m
        })
}

fn stored(maps: &MappingSet, va: u64) -> Option<u64> {
    maps.lookup(VirtAddr::new_unchecked(va)).map(|(b, m)| m.pa.as_u64() + va - b.as_u64())
}

fn probes(maps: &MappingSet, offsets: &[u64]) -> Vec<u64> {
    let list: Vec<_> = maps.iter().collect();
    offsets
        .iter()
        .enumerate()
        .map(|(i, &o)| {
            let (b, m) = list[i % list.len()];
            if i % 7 == 6 {
                b.as_u64() ^ ((o | 1) << 12) & ((1 << 47) - 1)
            } else {
                b.as_u64() + o % m.size.bytes()
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn compose_inverts_decompose(scheme in schemes(), raw in any::<u64>()) {
        let va = VirtAddr::canonicalize(raw, scheme.va_bits());
        let d = decompose(va, &scheme).unwrap();
        prop_assert_eq!(d.indices.len(), scheme.levels());
        for (i, w) in d.indices.iter().zip(scheme.widths()) {
            prop_assert!(*i < 1 << w);
        }
        prop_assert_eq!(compose(&d.indices, d.offset, &scheme).unwrap(), va);
    }

    #[test]
    fn flattened_indices_concatenate_conventional_ones(raw in any::<u64>()) {
        let va = VirtAddr::canonicalize(raw, 48);
        let four = decompose(va, &LevelScheme::conventional()).unwrap().indices;
        let two = decompose(va, &LevelScheme::flattened()).unwrap().indices;
        prop_assert_eq!(two[0], four[0] << 9 | four[1]);
        prop_assert_eq!(two[1], four[2] << 9 | four[3]);
        let mid = decompose(va, &LevelScheme::new(&[9, 18, 9]).unwrap()).unwrap().indices;
        prop_assert_eq!(&mid, &vec![four[0], four[1] << 9 | four[2], four[3]]);
    }

    #[test]
    fn trace_text_round_trips(seed in any::<u64>(), n in 0usize..200) {
        let t = gen_uniform_random(seed, 1 << 30, n).rebase(DEFAULT_BASE);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Trace::parse(&buf[..]).unwrap();
        prop_assert_eq!(back.refs, t.refs);
        prop_assert_eq!(back.meta, t.meta);
    }

    #[test]
    fn cache_counters_are_conserved(seed in any::<u64>(), prio in any::<bool>(), addrs in prop::collection::vec((0u64..1 << 26, any::<bool>()), 1..3000)) {
        let mode = if prio { ReplacementMode::Prioritize } else { ReplacementMode::Normal };
        let mut m = MemHierarchy::new(HierarchyConfig::default(), GateConfig { force: Some(mode), ..Default::default() }, seed);
        let mut at = [0u64; 4];
        for &(a, pte) in &addrs {
            let kind = if pte { AccessKind::Pte } else { AccessKind::Data };
            let r = m.access(PhysAddr::new(a << 6), kind, 0);
            at[r.serviced_at as usize] += 1;
        }
        let level = |s| m.level(s).unwrap();
        let total = |s: ServicedAt, f: fn(flatwalk_core::memhier::KindCounters) -> u64| {
            f(level(s).counters(AccessKind::Data)) + f(level(s).counters(AccessKind::Pte))
        };
        prop_assert_eq!(total(ServicedAt::L1, |c| c.probes), addrs.len() as u64);
        for s in [ServicedAt::L1, ServicedAt::L2, ServicedAt::L3] {
            prop_assert_eq!(total(s, |c| c.probes), total(s, |c| c.hits) + total(s, |c| c.misses));
        }
        prop_assert_eq!(total(ServicedAt::L2, |c| c.probes), total(ServicedAt::L1, |c| c.misses));
        prop_assert_eq!(total(ServicedAt::L3, |c| c.probes), total(ServicedAt::L2, |c| c.misses));
        prop_assert_eq!(m.dram_accesses(AccessKind::Data) + m.dram_accesses(AccessKind::Pte), total(ServicedAt::L3, |c| c.misses));
        prop_assert_eq!(at[ServicedAt::Dram as usize], total(ServicedAt::L3, |c| c.misses));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn reference_walk_matches_the_mapping_list(
        maps in mapping_sets(),
        scheme in table_schemes(),
        fail in prop_oneof![Just(0.0), Just(0.5), Just(1.0)],
        nf in any::<bool>(),
        seed in any::<u64>(),
        offsets in prop::collection::vec(any::<u64>(), 64),
    ) {
        let mut policy = LayoutPolicy::new(scheme);
        if !nf {
            policy = policy.without_nf();
        }
        let table = build_table(&maps, &policy, &mut FragmentedAllocator::new(seed, fail, 0.0));
        for va in probes(&maps, &offsets) {
            let got = reference_translate(&table, VirtAddr::new_unchecked(va)).map(|t| t.resolve(va).as_u64());
            prop_assert_eq!(got, stored(&maps, va), "va {:#x}", va);
        }
    }

    #[test]
    fn hardware_walks_match_the_oracle(
        maps in mapping_sets(),
        scheme in table_schemes(),
        prio in any::<bool>(),
        seed in any::<u64>(),
        offsets in prop::collection::vec(any::<u64>(), 128),
    ) {
        let table = build_table(&maps, &LayoutPolicy::new(scheme), &mut Unfragmented);
        let mode = if prio { ReplacementMode::Prioritize } else { ReplacementMode::Normal };
        let mut mem = MemHierarchy::new(HierarchyConfig::default(), GateConfig { force: Some(mode), ..Default::default() }, seed);
        let mut cached = Walker::new(&WalkerConfig::default());
        let mut bare = Walker::new(&WalkerConfig::uncached());
        for va in probes(&maps, &offsets) {
            let v = VirtAddr::new_unchecked(va);
            let oracle = reference_translate(&table, v);
            let hw = cached.translate(v, &table, &mut mem);
            prop_assert_eq!(hw.translation, oracle);
            let cold = bare.walk(v, &table, &mut mem);
            prop_assert_eq!(cold.translation, oracle);
            if let Some(w) = &hw.walk {
                // Walk caches only ever remove accesses.
                prop_assert!(w.accesses.len() <= cold.accesses.len());
                prop_assert_eq!(w.accesses.len() + w.skipped_levels as usize, cold.accesses.len());
            }
        }
    }

    #[test]
    fn nf_marking_removes_replication(maps in mapping_sets()) {
        let scheme = LevelScheme::new(&[9, 9, 18]).unwrap();
        let plain = build_table(&maps, &LayoutPolicy::new(scheme.clone()).without_nf(), &mut Unfragmented);
        let marked = build_table(&maps, &LayoutPolicy::new(scheme).with_nf_threshold(1), &mut Unfragmented);
        prop_assert_eq!(plain.replicated_entries(), 512 * maps.count(PageSize::Size2M));
        prop_assert_eq!(marked.replicated_entries(), 0);
        prop_assert!(marked.census().total_bytes <= plain.census().total_bytes);
    }

    #[test]
    fn table_size_grows_with_mappings(maps in mapping_sets(), scheme in table_schemes(), extra in mapping_sets()) {
        let policy = LayoutPolicy::new(scheme).without_nf();
        let small = build_table(&maps, &policy, &mut Unfragmented).census();
        let mut more = maps.clone();
        for (va, m) in extra.iter() {
            let _ = more.insert(va, m.pa, m.size);
        }
        let big = build_table(&more, &policy, &mut Unfragmented).census();
        for size in PageSize::ALL {
            prop_assert!(big.count(size) >= small.count(size));
        }
        prop_assert!(big.total_bytes >= small.total_bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn nested_translation_composes_guest_and_host(
        guest_flat in any::<bool>(),
        host_flat in any::<bool>(),
        large in prop_oneof![Just(0.0), Just(0.5), Just(1.0)],
        seed in 0u64..1000,
        offsets in prop::collection::vec(0u64..64 << 20, 64),
    ) {
        let pick = |f: bool| if f { LevelScheme::flattened() } else { LevelScheme::conventional() };
        let mut s = Scenario { seed, ..Default::default() };
        s.workload.footprint = ByteSize(64 << 20);
        s.translation.layout = pick(guest_flat);
        s.fragmentation.large_page_fraction = FragmentationPolicy::new(large).unwrap();
        let s = s.virtualized(pick(host_flat));
        let tables = build_tables(&s).unwrap();
        let host = tables.host.as_ref().unwrap();
        let mut mem = MemHierarchy::new(HierarchyConfig::default(), GateConfig::default(), seed);
        let mut warm = VirtWalker::new(&VirtConfig::default());
        let mut cold = VirtWalker::new(&VirtConfig { guest_pwc: PwcConfig::disabled(), ..VirtConfig::uncached() });
        for o in offsets {
            let gva = VirtAddr::new_unchecked(DEFAULT_BASE + o);
            let gpa = reference_translate(&tables.native, gva).unwrap().resolve(gva.as_u64());
            let hpa = reference_translate(host, VirtAddr::new_unchecked(gpa.as_u64())).unwrap().resolve(gpa.as_u64());
            for w in [&mut warm, &mut cold] {
                let t = w.nested_translate(gva, &tables.native, host, &mut mem).unwrap();
                prop_assert_eq!(t.translation.map(|t| t.resolve(gva.as_u64())), Some(hpa));
            }
        }
    }
}
