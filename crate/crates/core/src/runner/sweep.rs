use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::addressing::LevelScheme;
use crate::workload::FragmentationPolicy;

use super::{run_scenario, MetricsReport, PrioMode, RunError, Scenario};

/// Cartesian product of scenario variations; an empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub layouts: Vec<LevelScheme>,
    pub fractions: Vec<FragmentationPolicy>,
    pub prio: Vec<PrioMode>,
}

impl SweepAxes {
    pub fn expand(&self, base: &Scenario) -> Vec<Scenario> {
        let layouts = if self.layouts.is_empty() { vec![base.translation.layout.clone()] } else { self.layouts.clone() };
        let fractions =
            if self.fractions.is_empty() { vec![base.fragmentation.large_page_fraction] } else { self.fractions.clone() };
        let prios = if self.prio.is_empty() { vec![base.prio()] } else { self.prio.clone() };
        let mut out = Vec::new();
        for l in &layouts {
            for &f in &fractions {
                for &p in &prios {
                    let mut s = base.clone().with_prio(p);
                    s.translation.layout = l.clone();
                    s.fragmentation.large_page_fraction = f;
                    s.label = format!("{} {} {} prio={}", base.label, l, f, p).trim().to_string();
                    out.push(s);
                }
            }
        }
        out
    }
}

/// Runs every expanded scenario in parallel; results keep expansion order.
pub fn sweep(base: &Scenario, axes: &SweepAxes) -> Result<Vec<MetricsReport>, RunError> {
    axes.expand(base).par_iter().map(run_scenario).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::ByteSize;

    #[test]
    fn expansion_is_a_product() {
        let axes = SweepAxes {
            layouts: vec![LevelScheme::conventional(), LevelScheme::flattened()],
            fractions: vec![FragmentationPolicy::SMALL_ONLY, FragmentationPolicy::HALF, FragmentationPolicy::LARGE_ONLY],
            prio: vec![],
        };
        let v = axes.expand(&Scenario::default());
        assert_eq!(v.len(), 6);
        assert!(v.iter().all(|s| s.prio() == PrioMode::Off));
        assert_eq!(SweepAxes::default().expand(&Scenario::default()).len(), 1);
    }

    #[test]
    fn sweep_matches_individual_runs() {
        let mut base = Scenario::default();
        base.workload.footprint = ByteSize(32 << 20);
        base.workload.references = 5_000;
        let axes = SweepAxes { layouts: vec![LevelScheme::conventional(), LevelScheme::flattened()], ..Default::default() };
        let all = sweep(&base, &axes).unwrap();
        let single: Vec<_> = axes.expand(&base).iter().map(|s| run_scenario(s).unwrap()).collect();
        assert_eq!(all, single);
    }
}
