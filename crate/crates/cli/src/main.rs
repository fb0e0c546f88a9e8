use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use flatwalk_core::runner::repro::{run_repro, ReproConfig};
use flatwalk_core::runner::{
    compare, guest_mappings, make_trace, run_scenario, sweep, ByteSize, Generator, MetricsReport, Overrides, PrioMode,
    Scenario, SweepAxes,
};
use flatwalk_core::{FragmentationPolicy, LevelScheme};

#[derive(Parser)]
#[command(name = "flatwalk", version, about = "Trace-driven simulator for flattened page tables and page walks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and print its metrics report.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
        /// Also write the cache counters as CSV.
        #[arg(long)]
        counters: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the product of layouts, page-size mixes and replacement modes.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Layout to include; repeatable.
        #[arg(long = "layouts", value_name = "SCHEME")]
        layouts: Vec<LevelScheme>,
        /// Large-page fraction to include; repeatable.
        #[arg(long = "fracs", value_name = "FRACTION")]
        fracs: Vec<FragmentationPolicy>,
        /// Replacement mode to include; repeatable.
        #[arg(long = "prios", value_name = "MODE")]
        prios: Vec<PrioMode>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relative deltas of variant reports against a baseline report.
    Compare {
        baseline: PathBuf,
        #[arg(required = true)]
        variants: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = CompareFormat::Csv)]
        format: CompareFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance matrix and print one line per check.
    Repro {
        /// Comma-separated check ids.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u32>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Steady-state trace length.
        #[arg(long)]
        references: Option<u64>,
        /// Write the checks as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic trace, and optionally the matching mapping file.
    GenTrace {
        #[arg(long, default_value = "uniform")]
        generator: Generator,
        #[arg(long, default_value = "1GiB")]
        footprint: ByteSize,
        #[arg(long, default_value_t = 1_000_000)]
        references: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        stride: u64,
        /// Large-page fraction of the mapping file.
        #[arg(long, default_value = "0")]
        frag: FragmentationPolicy,
        #[arg(long)]
        mappings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file (TOML); defaults apply when omitted.
    config: Option<PathBuf>,
    #[arg(long)]
    layout: Option<LevelScheme>,
    #[arg(long)]
    frag: Option<FragmentationPolicy>,
    #[arg(long)]
    prio: Option<PrioMode>,
    /// Host layout; makes the run virtualized.
    #[arg(long)]
    virt: Option<LevelScheme>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
}

impl ScenarioArgs {
    fn scenario(&self) -> Result<Scenario> {
        let mut s = match &self.config {
            Some(p) => Scenario::load(p)?,
            None => Scenario::default(),
        };
        s.apply(&Overrides {
            layout: self.layout.clone(),
            frag: self.frag,
            prio: self.prio,
            virt: self.virt.clone(),
            seed: self.seed,
            trace: self.trace.clone(),
            label: self.label.clone(),
        });
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum CompareFormat {
    Csv,
    Json,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    MetricsReport::from_json(&text).with_context(|| format!("parsing report {}", path.display()))
}

fn sweep_table(reports: &[MetricsReport]) -> String {
    let header = ["label", "accesses/walk", "walk latency", "pte DRAM/walk", "L2 TLB miss"];
    let rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                format!("{:.3}", r.accesses_per_walk.mean),
                format!("{:.2}", r.mean_walk_latency),
                format!("{:.4}", r.pte_dram_per_walk),
                format!("{:.4}", r.tlb.l2_miss_rate()),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let mut parts = Vec::new();
        for (i, c) in cells.iter().enumerate() {
            if i == 0 {
                parts.push(format!("{c:<w$}", w = widths[i]));
            } else {
                parts.push(format!("{c:>w$}", w = widths[i]));
            }
        }
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec());
    for r in &rows {
        line(r.iter().map(String::as_str).collect());
    }
    out
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { scenario, format, counters, out } => {
            let report = run_scenario(&scenario.scenario()?)?;
            if let Some(p) = counters {
                fs::write(&p, flatwalk_core::memhier::counters_to_csv(&report.caches))
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            let text = match format {
                ReportFormat::Text => report.to_text(),
                ReportFormat::Json => report.to_json() + "\n",
            };
            emit(out.as_deref(), &text)?;
        }
        Command::Sweep { scenario, layouts, fracs, prios, format, out } => {
            let axes = SweepAxes { layouts, fractions: fracs, prio: prios };
            let reports = sweep(&scenario.scenario()?, &axes)?;
            let text = match format {
                ReportFormat::Text => sweep_table(&reports),
                ReportFormat::Json => serde_json::to_string_pretty(&reports)? + "\n",
            };
            emit(out.as_deref(), &text)?;
        }
        Command::Compare { baseline, variants, format, out } => {
            let base = load_report(&baseline)?;
            let vs = variants.iter().map(|p| load_report(p)).collect::<Result<Vec<_>>>()?;
            let c = compare(&base, &vs)?;
            let text = match format {
                CompareFormat::Csv => c.to_csv(),
                CompareFormat::Json => c.to_json() + "\n",
            };
            emit(out.as_deref(), &text)?;
        }
        Command::Repro { only, seed, references, out } => {
            let mut cfg = ReproConfig { seed, ..Default::default() };
            if !only.is_empty() {
                cfg.only = Some(only);
            }
            if let Some(n) = references {
                if n == 0 {
                    bail!("--references must be positive");
                }
                cfg.references = n;
                cfg.warmup = n / 5;
            }
            let checks = run_repro(&cfg)?;
            if checks.is_empty() {
                bail!("no checks selected");
            }
            for c in &checks {
                println!("{c}");
            }
            if let Some(p) = out {
                fs::write(&p, serde_json::to_string_pretty(&checks)? + "\n")
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
        Command::GenTrace { generator, footprint, references, seed, stride, frag, mappings, out } => {
            if generator == Generator::File {
                bail!("gen-trace needs a synthetic generator");
            }
            let mut s = Scenario { seed, ..Default::default() };
            s.workload.generator = generator;
            s.workload.footprint = footprint;
            s.workload.references = references;
            s.workload.stride = stride;
            s.fragmentation.large_page_fraction = frag;
            s.validate()?;
            let trace = make_trace(&s)?;
            let mut buf = Vec::new();
            trace.write_to(&mut buf)?;
            emit(out.as_deref(), std::str::from_utf8(&buf)?)?;
            if let Some(p) = mappings {
                let mut f = io::BufWriter::new(fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?);
                guest_mappings(&s)?.write_to(&mut f)?;
                f.flush()?;
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
