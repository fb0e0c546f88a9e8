use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::addressing::LevelScheme;
use crate::memhier::{EnergyCoefficients, GateConfig, HierarchyConfig, ReplacementMode};
use crate::pagetable::{LayoutPolicy, DEFAULT_NF_THRESHOLD};
use crate::virtwalker::NestedTlbConfig;
use crate::walker::{PwcConfig, TlbsConfig};
use crate::workload::{FragmentationPolicy, DEFAULT_BASE};

use super::RunError;

/// A byte count written as an integer or with a binary unit (`8GiB`, `512M`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "SizeRepr", into = "String")]
pub struct ByteSize(pub u64);

#[derive(Deserialize)]
#[serde(untagged)]
enum SizeRepr {
    Int(u64),
    Text(String),
}

impl TryFrom<SizeRepr> for ByteSize {
    type Error = String;

    fn try_from(r: SizeRepr) -> Result<Self, Self::Error> {
        match r {
            SizeRepr::Int(n) => Ok(ByteSize(n)),
            SizeRepr::Text(s) => s.parse(),
        }
    }
}

impl From<ByteSize> for String {
    fn from(b: ByteSize) -> Self {
        b.to_string()
    }
}

impl FromStr for ByteSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
        let (num, unit) = s.split_at(split);
        let n: u64 = num.parse().map_err(|_| format!("bad size {s:?}"))?;
        let shift = match unit.trim().to_ascii_lowercase().as_str() {
            "" | "b" => 0,
            "k" | "kb" | "kib" => 10,
            "m" | "mb" | "mib" => 20,
            "g" | "gb" | "gib" => 30,
            "t" | "tb" | "tib" => 40,
            other => return Err(format!("unknown size unit {other:?}")),
        };
        n.checked_mul(1 << shift).map(ByteSize).ok_or_else(|| format!("size {s:?} overflows"))
    }
}

impl fmt::Display for ByteSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (shift, unit) in [(40, "TiB"), (30, "GiB"), (20, "MiB"), (10, "KiB")] {
            if self.0 >= 1 << shift && self.0.is_multiple_of(1 << shift) {
                return write!(f, "{}{unit}", self.0 >> shift);
            }
        }
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Uniform,
    Sequential,
    Chase,
    File,
}

impl FromStr for Generator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" | "random" => Ok(Generator::Uniform),
            "sequential" | "seq" => Ok(Generator::Sequential),
            "chase" | "pointer-chase" => Ok(Generator::Chase),
            "file" => Ok(Generator::File),
            _ => Err(format!("unknown generator {s:?}")),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Generator::Uniform => "uniform",
            Generator::Sequential => "sequential",
            Generator::Chase => "chase",
            Generator::File => "file",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub generator: Generator,
    pub footprint: ByteSize,
    pub references: u64,
    /// Byte step of the sequential generator.
    pub stride: u64,
    /// Start of the traced region.
    pub base: u64,
    /// Trace file for the `file` generator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    /// Mapping file replacing the generated layout.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mappings: Option<PathBuf>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            generator: Generator::Uniform,
            footprint: ByteSize(1 << 30),
            references: 1_000_000,
            stride: 64,
            base: DEFAULT_BASE,
            trace: None,
            mappings: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FragmentationSpec {
    pub large_page_fraction: FragmentationPolicy,
    /// Probability that a 2 MB page-table node allocation is refused.
    pub fail_2m: f64,
    pub fail_1g: f64,
}

impl Default for FragmentationSpec {
    fn default() -> Self {
        Self { large_page_fraction: FragmentationPolicy::SMALL_ONLY, fail_2m: 0.0, fail_1g: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Native,
    Virtualized,
}

fn default_nf() -> usize {
    DEFAULT_NF_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostSpec {
    pub layout: LevelScheme,
    /// Share of guest-physical memory the host backs with 2 MB pages.
    #[serde(default)]
    pub large_page_fraction: FragmentationPolicy,
    #[serde(default = "default_nf")]
    pub nf_threshold: usize,
}

impl HostSpec {
    pub fn new(layout: LevelScheme) -> Self {
        Self { layout, large_page_fraction: FragmentationPolicy::SMALL_ONLY, nf_threshold: DEFAULT_NF_THRESHOLD }
    }

    pub fn layout_policy(&self) -> LayoutPolicy {
        policy(&self.layout, self.nf_threshold)
    }
}

fn policy(scheme: &LevelScheme, nf: usize) -> LayoutPolicy {
    let p = LayoutPolicy::new(scheme.clone());
    if nf == 0 {
        p.without_nf()
    } else {
        p.with_nf_threshold(nf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslationSpec {
    pub mode: Mode,
    /// Native table, or guest table when virtualized.
    pub layout: LevelScheme,
    /// 2 MB pages per 1 GB region that keep its L2+L1 unflattened; 0 disables.
    pub nf_threshold: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub host: Option<HostSpec>,
    pub tlb: TlbsConfig,
    pub pwc: PwcConfig,
    pub vpwc: PwcConfig,
    pub nested_tlb: NestedTlbConfig,
}

impl Default for TranslationSpec {
    fn default() -> Self {
        Self {
            mode: Mode::Native,
            layout: LevelScheme::conventional(),
            nf_threshold: DEFAULT_NF_THRESHOLD,
            host: None,
            tlb: TlbsConfig::default(),
            pwc: PwcConfig::default(),
            vpwc: PwcConfig::default(),
            nested_tlb: NestedTlbConfig::default(),
        }
    }
}

impl TranslationSpec {
    pub fn layout_policy(&self) -> LayoutPolicy {
        policy(&self.layout, self.nf_threshold)
    }
}

/// Replacement setting of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrioMode {
    /// Plain LRU throughout.
    Off,
    /// Page-table lines are always prioritized.
    On,
    /// The pressure gate decides per window.
    Gated,
}

impl FromStr for PrioMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" | "normal" => Ok(PrioMode::Off),
            "on" | "prioritize" => Ok(PrioMode::On),
            "gated" | "auto" => Ok(PrioMode::Gated),
            _ => Err(format!("unknown prioritization mode {s:?} (off, on, gated)")),
        }
    }
}

impl fmt::Display for PrioMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrioMode::Off => "off",
            PrioMode::On => "on",
            PrioMode::Gated => "gated",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub label: String,
    pub seed: u64,
    /// References replayed before counters are reset.
    pub warmup: u64,
    pub workload: WorkloadSpec,
    pub fragmentation: FragmentationSpec,
    pub translation: TranslationSpec,
    pub caches: HierarchyConfig,
    pub gate: GateConfig,
    pub energy: EnergyCoefficients,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            label: "run".into(),
            seed: 1,
            warmup: 0,
            workload: WorkloadSpec::default(),
            fragmentation: FragmentationSpec::default(),
            translation: TranslationSpec::default(),
            caches: HierarchyConfig::default(),
            gate: GateConfig::default(),
            energy: EnergyCoefficients::default(),
        }
    }
}

/// Command-line style adjustments applied on top of a scenario file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub layout: Option<LevelScheme>,
    pub frag: Option<FragmentationPolicy>,
    pub prio: Option<PrioMode>,
    /// Host layout; switches the run to virtualized.
    pub virt: Option<LevelScheme>,
    pub seed: Option<u64>,
    pub trace: Option<PathBuf>,
    pub label: Option<String>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| RunError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn with_prio(mut self, prio: PrioMode) -> Self {
        self.gate.force = match prio {
            PrioMode::Off => Some(ReplacementMode::Normal),
            PrioMode::On => Some(ReplacementMode::Prioritize),
            PrioMode::Gated => None,
        };
        self.gate.enabled = prio == PrioMode::Gated;
        self
    }

    pub fn prio(&self) -> PrioMode {
        match (self.gate.force, self.gate.enabled) {
            (Some(ReplacementMode::Prioritize), _) => PrioMode::On,
            (None, true) => PrioMode::Gated,
            _ => PrioMode::Off,
        }
    }

    /// Switches to a virtualized run with the given host layout.
    pub fn virtualized(mut self, host: LevelScheme) -> Self {
        self.translation.mode = Mode::Virtualized;
        match &mut self.translation.host {
            Some(h) => h.layout = host,
            None => self.translation.host = Some(HostSpec::new(host)),
        }
        self
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(l) = &o.layout {
            self.translation.layout = l.clone();
        }
        if let Some(f) = o.frag {
            self.fragmentation.large_page_fraction = f;
        }
        if let Some(p) = o.prio {
            *self = std::mem::take(self).with_prio(p);
        }
        if let Some(h) = &o.virt {
            *self = std::mem::take(self).virtualized(h.clone());
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = &o.trace {
            self.workload.generator = Generator::File;
            self.workload.trace = Some(t.clone());
        }
        if let Some(l) = &o.label {
            self.label = l.clone();
        }
    }

    /// Rejects configurations that cannot run, before any simulation.
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        let w = &self.workload;
        if w.footprint.0 == 0 || !w.footprint.0.is_multiple_of(4096) {
            return bad(format!("footprint {} is not a positive multiple of 4 KiB", w.footprint));
        }
        if !w.base.is_multiple_of(2 << 20) {
            return bad(format!("workload base {:#x} is not 2 MiB aligned", w.base));
        }
        if self.fragmentation.large_page_fraction.large_page_fraction() > 0.0 && !w.footprint.0.is_multiple_of(2 << 20) {
            return bad(format!("footprint {} must be 2 MiB aligned when using large pages", w.footprint));
        }
        for (name, p) in [("fail_2m", self.fragmentation.fail_2m), ("fail_1g", self.fragmentation.fail_1g)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if w.generator == Generator::File && w.trace.is_none() {
            return bad("the file generator needs a trace path".into());
        }
        if w.generator == Generator::Sequential && w.stride == 0 {
            return bad("sequential stride must be positive".into());
        }
        if self.warmup > 0 && w.generator != Generator::File && self.warmup >= w.references {
            return bad(format!("warmup {} leaves no measured references", self.warmup));
        }
        match (self.translation.mode, &self.translation.host) {
            (Mode::Virtualized, None) => return bad("virtualized runs need a host layout".into()),
            (Mode::Native, Some(_)) => return bad("a host layout is only valid for virtualized runs".into()),
            (Mode::Virtualized, Some(h)) if h.large_page_fraction.large_page_fraction() > 0.0 && !w.footprint.0.is_multiple_of(2 << 20) => {
                return bad("host large pages need a 2 MiB aligned footprint".into());
            }
            _ => {}
        }
        if self.translation.layout.va_bits() != 48 && self.translation.mode == Mode::Virtualized {
            return bad("virtualized runs support 48-bit schemes only".into());
        }
        let t = &self.translation.tlb;
        for (name, c) in [("l1_4k", t.l1_4k), ("l1_2m", t.l1_2m), ("l2", t.l2)] {
            c.validate().map_err(|e| RunError::Config(format!("tlb {name}: {e}")))?;
        }
        self.caches.validate().map_err(RunError::Config)?;
        if self.gate.window == 0 {
            return bad("gate window must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gate.threshold) {
            return bad(format!("gate threshold {} is not a ratio", self.gate.threshold));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!("8GiB".parse::<ByteSize>().unwrap(), ByteSize(8 << 30));
        assert_eq!("512M".parse::<ByteSize>().unwrap(), ByteSize(512 << 20));
        assert_eq!("4096".parse::<ByteSize>().unwrap(), ByteSize(4096));
        assert!("12 parsecs".parse::<ByteSize>().is_err());
        assert_eq!(ByteSize(8 << 30).to_string(), "8GiB");
        assert_eq!(ByteSize(3000).to_string(), "3000");
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let s = Scenario::from_toml(
            r#"
            label = "flat"
            [workload]
            footprint = "2GiB"
            references = 1000
            [translation]
            layout = [18, 18]
            [translation.pwc]
            leaf = 8
            "#,
        )
        .unwrap();
        assert_eq!(s.workload.footprint, ByteSize(2 << 30));
        assert_eq!(s.translation.layout, LevelScheme::flattened());
        assert_eq!(s.translation.pwc.leaf, 8);
        assert_eq!(s.translation.pwc.mid, 4);
        assert_eq!(Scenario::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Scenario::from_toml("[workload]\nfootprnt = 1\n").is_err());
        assert!(Scenario::from_toml("[translation]\nlayout = [10, 26]\n").is_err());
    }

    #[test]
    fn inconsistent_combinations() {
        let mut s = Scenario::default();
        s.translation.mode = Mode::Virtualized;
        assert!(s.validate().is_err());
        let s = Scenario::default().virtualized(LevelScheme::flattened());
        assert!(s.validate().is_ok());
        let mut s = Scenario::default();
        s.workload.generator = Generator::File;
        assert!(s.validate().is_err());
        let mut s = Scenario::default();
        s.workload.footprint = ByteSize(4096 * 3);
        s.fragmentation.large_page_fraction = FragmentationPolicy::HALF;
        assert!(s.validate().is_err());
    }

    #[test]
    fn overrides() {
        let mut s = Scenario::default();
        s.apply(&Overrides {
            layout: Some(LevelScheme::flattened()),
            prio: Some(PrioMode::On),
            virt: Some(LevelScheme::conventional()),
            seed: Some(9),
            ..Default::default()
        });
        assert_eq!(s.translation.layout, LevelScheme::flattened());
        assert_eq!(s.prio(), PrioMode::On);
        assert_eq!(s.translation.mode, Mode::Virtualized);
        assert_eq!(s.translation.host.as_ref().unwrap().layout, LevelScheme::conventional());
        assert_eq!(s.seed, 9);
        s.apply(&Overrides { prio: Some(PrioMode::Gated), ..Default::default() });
        assert_eq!(s.prio(), PrioMode::Gated);
    }
}
