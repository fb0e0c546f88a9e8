use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative dynamic energy per access at each level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyCoefficients {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub dram: f64,
}

impl Default for EnergyCoefficients {
    fn default() -> Self {
        Self { l1: 1.0, l2: 2.0, l3: 10.0, dram: 100.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCount {
    pub data: u64,
    pub pte: u64,
}

impl SplitCount {
    pub fn total(&self) -> u64 {
        self.data + self.pte
    }
}

/// Access counters per level, split data/page-table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub coefficients: EnergyCoefficients,
    pub l1: SplitCount,
    pub l2: SplitCount,
    pub l3: SplitCount,
    pub dram: SplitCount,
}

impl EnergyLedger {
    pub fn cache_energy(&self) -> f64 {
        let c = &self.coefficients;
        self.l1.total() as f64 * c.l1 + self.l2.total() as f64 * c.l2 + self.l3.total() as f64 * c.l3
    }

    pub fn dram_energy(&self) -> f64 {
        self.dram.total() as f64 * self.coefficients.dram
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyDelta {
    /// (variant - baseline) / baseline over L1+L2+L3.
    pub cache: f64,
    pub dram: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("energy coefficients differ between runs")]
    MismatchedCoefficients,
}

pub fn energy_report(ledger: &EnergyLedger, baseline: &EnergyLedger) -> Result<EnergyDelta, EnergyError> {
    if ledger.coefficients != baseline.coefficients {
        return Err(EnergyError::MismatchedCoefficients);
    }
    Ok(EnergyDelta {
        cache: relative(ledger.cache_energy(), baseline.cache_energy()),
        dram: relative(ledger.dram_energy(), baseline.dram_energy()),
    })
}

fn relative(v: f64, base: f64) -> f64 {
    if base == 0.0 {
        if v == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (v - base) / base
    }
}
