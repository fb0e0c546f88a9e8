use serde::{Deserialize, Serialize};

use super::ReplacementMode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub enabled: bool,
    /// Window length in memory references.
    pub window: u64,
    /// L2-TLB misses per reference above which the next window prioritizes.
    pub threshold: f64,
    /// Pins the mode regardless of counters.
    pub force: Option<ReplacementMode>,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { enabled: false, window: 10_000, threshold: 0.05, force: None }
    }
}

/// TLB-pressure detector driving prioritized replacement in L2 and L3.
#[derive(Debug, Clone)]
pub struct PressureGate {
    cfg: GateConfig,
    refs: u64,
    misses: u64,
    mode: ReplacementMode,
    windows: u64,
    prioritized_windows: u64,
}

impl PressureGate {
    pub fn new(cfg: GateConfig) -> Self {
        let mode = cfg.force.unwrap_or(ReplacementMode::Normal);
        Self { cfg, refs: 0, misses: 0, mode, windows: 0, prioritized_windows: 0 }
    }

    pub fn mode(&self) -> ReplacementMode {
        self.mode
    }

    pub fn config(&self) -> &GateConfig {
        &self.cfg
    }

    /// Accounts one memory reference. The mode only changes when a window
    /// closes.
    pub fn update_pressure(&mut self, l2_tlb_miss: bool) -> ReplacementMode {
        if let Some(m) = self.cfg.force {
            return m;
        }
        if !self.cfg.enabled {
            return ReplacementMode::Normal;
        }
        self.refs += 1;
        self.misses += l2_tlb_miss as u64;
        if self.refs >= self.cfg.window {
            let ratio = self.misses as f64 / self.refs as f64;
            self.mode = if ratio > self.cfg.threshold { ReplacementMode::Prioritize } else { ReplacementMode::Normal };
            self.windows += 1;
            self.prioritized_windows += (self.mode == ReplacementMode::Prioritize) as u64;
            self.refs = 0;
            self.misses = 0;
        }
        self.mode
    }

    pub fn windows(&self) -> u64 {
        self.windows
    }

    pub fn prioritized_windows(&self) -> u64 {
        self.prioritized_windows
    }

    pub fn reset_window_stats(&mut self) {
        self.windows = 0;
        self.prioritized_windows = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gate(threshold: f64) -> PressureGate {
        PressureGate::new(GateConfig { enabled: true, window: 100, threshold, force: None })
    }

    #[test]
    fn quiet_window_stays_normal() {
        let mut g = gate(0.05);
        for _ in 0..1000 {
            assert_eq!(g.update_pressure(false), ReplacementMode::Normal);
        }
        assert_eq!(g.windows(), 10);
        assert_eq!(g.prioritized_windows(), 0);
    }

    #[test]
    fn all_miss_window_prioritizes_only_at_boundary() {
        for threshold in [0.01, 0.5, 0.99] {
            let mut g = gate(threshold);
            for i in 0..99 {
                assert_eq!(g.update_pressure(true), ReplacementMode::Normal, "ref {i}");
            }
            assert_eq!(g.update_pressure(true), ReplacementMode::Prioritize);
        }
    }

    #[test]
    fn ratio_must_exceed_threshold() {
        let mut g = gate(0.05);
        for i in 0..100 {
            g.update_pressure(i < 5);
        }
        assert_eq!(g.mode(), ReplacementMode::Normal);
        for i in 0..100 {
            g.update_pressure(i < 6);
        }
        assert_eq!(g.mode(), ReplacementMode::Prioritize);
        // Falls back once pressure drops.
        for _ in 0..100 {
            g.update_pressure(false);
        }
        assert_eq!(g.mode(), ReplacementMode::Normal);
    }

    #[test]
    fn disabled_and_forced() {
        let mut g = PressureGate::new(GateConfig::default());
        for _ in 0..20_000 {
            assert_eq!(g.update_pressure(true), ReplacementMode::Normal);
        }
        let mut f = PressureGate::new(GateConfig { force: Some(ReplacementMode::Prioritize), ..Default::default() });
        assert_eq!(f.mode(), ReplacementMode::Prioritize);
        assert_eq!(f.update_pressure(false), ReplacementMode::Prioritize);
    }
}
