use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use flatwalk_bench::{addresses, native_fixture, nested_fixture};
use flatwalk_core::addressing::{LevelScheme, PhysAddr};
use flatwalk_core::memhier::{AccessKind, GateConfig, HierarchyConfig, MemHierarchy, ReplacementMode};
use flatwalk_core::pagetable::{build_table, reference_translate, LayoutPolicy, Unfragmented};
use flatwalk_core::virtwalker::{VirtConfig, VirtWalker};
use flatwalk_core::walker::{Walker, WalkerConfig};
use flatwalk_core::workload::{layout, FragmentationPolicy};

const FOOTPRINT: u64 = 1 << 30;
const N: usize = 4096;

fn schemes() -> [(&'static str, LevelScheme); 3] {
    [
        ("conventional", LevelScheme::conventional()),
        ("flattened", LevelScheme::flattened()),
        ("mid", LevelScheme::new(&[9, 18, 9]).unwrap()),
    ]
}

fn reference_walks(c: &mut Criterion) {
    let mut g = c.benchmark_group("reference_translate");
    g.throughput(Throughput::Elements(N as u64));
    for (name, scheme) in schemes() {
        let (table, vas) = native_fixture(scheme, FOOTPRINT, N);
        g.bench_function(name, |b| {
            b.iter(|| vas.iter().filter_map(|&va| reference_translate(&table, va)).count())
        });
    }
    g.finish();
}

fn hardware_walks(c: &mut Criterion) {
    let mut g = c.benchmark_group("translate");
    g.throughput(Throughput::Elements(N as u64));
    for (name, scheme) in schemes() {
        let (table, vas) = native_fixture(scheme, FOOTPRINT, N);
        let mut mem = MemHierarchy::new(HierarchyConfig::default(), GateConfig::default(), 1);
        let mut w = Walker::new(&WalkerConfig::default());
        g.bench_function(name, |b| {
            b.iter(|| {
                for &va in &vas {
                    black_box(w.translate(va, &table, &mut mem));
                }
            })
        });
    }
    g.finish();
}

fn nested_walks(c: &mut Criterion) {
    let mut g = c.benchmark_group("nested_translate");
    g.throughput(Throughput::Elements(N as u64));
    let conv = LevelScheme::conventional;
    let flat = LevelScheme::flattened;
    for (name, guest, host) in [("conv-conv", conv(), conv()), ("flat-flat", flat(), flat())] {
        let (tables, vas) = nested_fixture(guest, host, 256 << 20, N);
        let host = tables.host.as_ref().unwrap();
        let mut mem = MemHierarchy::new(HierarchyConfig::default(), GateConfig::default(), 1);
        let mut w = VirtWalker::new(&VirtConfig::default());
        g.bench_function(name, |b| {
            b.iter(|| {
                for &va in &vas {
                    black_box(w.nested_translate(va, &tables.native, host, &mut mem).unwrap());
                }
            })
        });
    }
    g.finish();
}

fn cache_accesses(c: &mut Criterion) {
    let mut g = c.benchmark_group("memhier_access");
    let lines: Vec<PhysAddr> = addresses(64 << 20, N).iter().map(|va| PhysAddr::new(va.as_u64() & ((64 << 20) - 1))).collect();
    g.throughput(Throughput::Elements(N as u64));
    for mode in [ReplacementMode::Normal, ReplacementMode::Prioritize] {
        let mut mem = MemHierarchy::new(HierarchyConfig::default(), GateConfig { force: Some(mode), ..Default::default() }, 1);
        g.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| {
                for (i, &a) in lines.iter().enumerate() {
                    let kind = if i % 4 == 0 { AccessKind::Pte } else { AccessKind::Data };
                    black_box(mem.access(a, kind, 0));
                }
            })
        });
    }
    g.finish();
}

fn table_builds(c: &mut Criterion) {
    let mut g = c.benchmark_group("build_table");
    g.sample_size(10);
    let maps = layout(256 << 20, FragmentationPolicy::HALF, 1).unwrap();
    for (name, scheme) in schemes() {
        let policy = LayoutPolicy::new(scheme);
        g.bench_function(name, |b| {
            b.iter_batched(|| (), |_| build_table(&maps, &policy, &mut Unfragmented), BatchSize::LargeInput)
        });
    }
    g.finish();
}

criterion_group!(benches, reference_walks, hardware_walks, nested_walks, cache_accesses, table_builds);
criterion_main!(benches);
