//! Fixtures shared by the benchmarks.

use flatwalk_core::addressing::{LevelScheme, VirtAddr};
use flatwalk_core::pagetable::{build_table, LayoutPolicy, PageTable, Unfragmented};
use flatwalk_core::runner::{build_tables, ByteSize, Scenario, Tables};
use flatwalk_core::workload::{gen_uniform_random, layout, FragmentationPolicy, DEFAULT_BASE};

/// A table over `footprint` bytes of 4 kB pages and `n` random addresses in it.
pub fn native_fixture(scheme: LevelScheme, footprint: u64, n: usize) -> (PageTable, Vec<VirtAddr>) {
    let maps = layout(footprint, FragmentationPolicy::SMALL_ONLY, 1).expect("aligned footprint");
    let table = build_table(&maps, &LayoutPolicy::new(scheme), &mut Unfragmented);
    (table, addresses(footprint, n))
}

/// Guest and host tables for a virtualized run over `footprint` bytes.
pub fn nested_fixture(guest: LevelScheme, host: LevelScheme, footprint: u64, n: usize) -> (Tables, Vec<VirtAddr>) {
    let mut s = Scenario::default();
    s.workload.footprint = ByteSize(footprint);
    s.translation.layout = guest;
    let tables = build_tables(&s.virtualized(host)).expect("valid scenario");
    (tables, addresses(footprint, n))
}

pub fn addresses(footprint: u64, n: usize) -> Vec<VirtAddr> {
    gen_uniform_random(2, footprint, n).rebase(DEFAULT_BASE).refs.iter().map(|r| r.va).collect()
}
