//! Trace-driven simulation of virtual-address translation: flattened radix
//! page tables, page-walk caches, nested two-dimensional walks, recursive
//! self-mapping tables and page-table-aware cache replacement.

pub mod addressing;
pub mod memhier;
pub mod pagetable;
pub mod walker;
pub mod virtwalker;
pub mod recursive;
pub mod workload;
pub mod runner;

pub use addressing::{LevelScheme, PhysAddr, VirtAddr};
pub use memhier::{AccessKind, HierarchyConfig, LevelCounters, MemHierarchy, ReplacementMode};
pub use pagetable::{build_table, reference_translate, LayoutPolicy, MappingSet, PageSize, PageTable, Translation};
pub use runner::{compare, run_scenario, ComparisonReport, MetricsReport, RunError, Scenario};
pub use virtwalker::{VirtError, VirtWalker};
pub use walker::{Walker, WalkerConfig};
pub use workload::{FragmentationPolicy, Trace};
