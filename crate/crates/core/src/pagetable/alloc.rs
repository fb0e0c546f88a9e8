use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PageSize;
use crate::addressing::PhysAddr;

/// Decides whether a large page-table node allocation succeeds. The builder
/// never asks about 4 kB nodes; those always succeed.
pub trait NodeAllocator {
    fn grant(&mut self, size: PageSize) -> bool;
}

impl<F: FnMut(PageSize) -> bool> NodeAllocator for F {
    fn grant(&mut self, size: PageSize) -> bool {
        self(size)
    }
}

/// Grants every request.
#[derive(Debug, Clone, Copy, Default)]
pub struct Unfragmented;

impl NodeAllocator for Unfragmented {
    fn grant(&mut self, _size: PageSize) -> bool {
        true
    }
}

/// Refuses large requests at a fixed rate per size, reproducibly per seed.
#[derive(Debug, Clone)]
pub struct FragmentedAllocator {
    rng: ChaCha8Rng,
    fail_2m: f64,
    fail_1g: f64,
}

impl FragmentedAllocator {
    pub fn new(seed: u64, fail_2m: f64, fail_1g: f64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), fail_2m, fail_1g }
    }

    /// Every large request fails.
    pub fn exhausted() -> Self {
        Self::new(0, 1.0, 1.0)
    }
}

impl NodeAllocator for FragmentedAllocator {
    fn grant(&mut self, size: PageSize) -> bool {
        let rate = match size {
            PageSize::Size4K => return true,
            PageSize::Size2M => self.fail_2m,
            PageSize::Size1G => self.fail_1g,
        };
        if rate <= 0.0 {
            true
        } else if rate >= 1.0 {
            false
        } else {
            !self.rng.random_bool(rate)
        }
    }
}

/// Physical placement of page-table nodes: one bump pointer per size class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRegion {
    pub base_4k: PhysAddr,
    pub base_2m: PhysAddr,
    pub base_1g: PhysAddr,
}

impl Default for NodeRegion {
    fn default() -> Self {
        Self {
            base_4k: PhysAddr::new(0x100_0000_0000),
            base_2m: PhysAddr::new(0x200_0000_0000),
            base_1g: PhysAddr::new(0x400_0000_0000),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Bump {
    next: [u64; 3],
}

impl Bump {
    pub(crate) fn new(region: NodeRegion) -> Self {
        Self { next: [region.base_4k.as_u64(), region.base_2m.as_u64(), region.base_1g.as_u64()] }
    }

    pub(crate) fn take(&mut self, size: PageSize) -> PhysAddr {
        let slot = match size {
            PageSize::Size4K => 0,
            PageSize::Size2M => 1,
            PageSize::Size1G => 2,
        };
        let at = self.next[slot];
        self.next[slot] += size.bytes();
        PhysAddr::new(at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fragmented_is_deterministic() {
        let draw = |seed| {
            let mut a = FragmentedAllocator::new(seed, 0.5, 0.0);
            (0..64).map(|_| a.grant(PageSize::Size2M)).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
        let mut a = FragmentedAllocator::exhausted();
        assert!(a.grant(PageSize::Size4K));
        assert!(!a.grant(PageSize::Size2M));
        assert!(!a.grant(PageSize::Size1G));
    }

    #[test]
    fn closures_are_allocators() {
        let mut calls = 0;
        let mut f = |s: PageSize| {
            calls += 1;
            s != PageSize::Size1G
        };
        assert!(f.grant(PageSize::Size2M));
        assert!(!f.grant(PageSize::Size1G));
        assert_eq!(calls, 2);
    }

    #[test]
    fn bump_classes_are_independent() {
        let mut b = Bump::new(NodeRegion::default());
        let a = b.take(PageSize::Size4K);
        let c = b.take(PageSize::Size2M);
        let d = b.take(PageSize::Size4K);
        assert_eq!(d.as_u64() - a.as_u64(), 4096);
        assert!(c.is_aligned(PageSize::Size2M.bytes()));
    }
}
