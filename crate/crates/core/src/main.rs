use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use devisol::bench::{
    check_against_solo, measure_switch, run_attacks, run_schedule, run_workload, write_csv, write_json, AttackCase,
    BenchConfig, DriverKind, WorkloadKind, WorkloadSpec,
};
use devisol::{Error, IommuMode, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Parser)]
#[command(name = "bench", about = "Workloads, scheduling and containment checks on the simulated device")]
struct Cli {
    /// Flat key=value file with cost constants and sizes.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one workload on one driver stack.
    Run {
        #[arg(long, value_enum, default_value = "library")]
        driver: DriverKind,
        #[arg(long, value_enum, default_value = "matmul")]
        workload: WorkloadKind,
        #[arg(long, default_value_t = 16)]
        size: u32,
        #[arg(long, default_value_t = 10)]
        iters: u32,
        #[arg(long, value_enum, default_value = "system")]
        iommu: IommuMode,
    },
    /// Time-multiplex several libs and compare each with a solo run.
    Schedule {
        #[arg(long, default_value_t = 2)]
        libs: u32,
        /// Device cycles per epoch.
        #[arg(long, default_value_t = 500)]
        epoch: u64,
        #[arg(long, value_enum, default_value = "matmul")]
        workload: WorkloadKind,
        #[arg(long, default_value_t = 8)]
        size: u32,
        #[arg(long, default_value_t = 3)]
        iters: u32,
        #[arg(long, value_enum, default_value = "system")]
        iommu: IommuMode,
    },
    /// Cost of a revoke + bind between two idle libs.
    SwitchTime {
        #[arg(long, default_value_t = 100)]
        switches: u32,
        /// Pool sizes to compare; the cost must not depend on them.
        #[arg(long, value_delimiter = ',', default_value = "64,1024")]
        pools: Vec<u32>,
        #[arg(long, value_enum, default_value = "system")]
        iommu: IommuMode,
    },
    /// Run the containment suite (all cases, both IOMMU deployments).
    Attack {
        /// Case letter (a-h) or name.
        #[arg(long)]
        case: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::from(1)
        }
    }
}

/// Returns whether every check passed.
fn run(cli: Cli) -> Result<bool> {
    let cfg = match &cli.config {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::default(),
    };
    let out = io::stdout().lock();
    match cli.cmd {
        Cmd::Run { driver, workload, size, iters, iommu } => {
            let spec = WorkloadSpec::new(workload, size, iters, driver).with_iommu(iommu).with_config(cfg);
            let r = run_workload(&spec)?;
            match cli.format {
                Format::Json => write_json(&r, out)?,
                Format::Csv => write_csv(&[r], out)?,
            }
            Ok(true)
        }
        Cmd::Schedule { libs, epoch, workload, size, iters, iommu } => {
            if libs == 0 {
                return Err(Error::Config("--libs must be at least 1".into()));
            }
            // Vary the size so the libs do not all compute the same thing.
            let specs: Vec<WorkloadSpec> = (0..libs)
                .map(|i| {
                    WorkloadSpec::new(workload, size + i, iters, DriverKind::Library)
                        .with_iommu(iommu)
                        .with_config(cfg)
                })
                .collect();
            let reports = run_schedule(&specs, epoch)?;
            let verdict = check_against_solo(&specs, &reports);
            match cli.format {
                Format::Json => write_json(&reports, out)?,
                Format::Csv => write_csv(&reports, out)?,
            }
            if let Err(e) = &verdict {
                eprintln!("bench: {e}");
            }
            Ok(verdict.is_ok())
        }
        Cmd::SwitchTime { switches, pools, iommu } => {
            let reports = pools
                .iter()
                .map(|&pool_pages| measure_switch(&BenchConfig { pool_pages, ..cfg }, iommu, switches))
                .collect::<Result<Vec<_>>>()?;
            let constant = reports.windows(2).all(|w| w[0].mean == w[1].mean) && reports.iter().all(|r| r.stddev == 0.0);
            match cli.format {
                Format::Json => write_json(&reports, out)?,
                Format::Csv => {
                    let mut out = out;
                    writeln!(out, "pool_pages,switches,mean,stddev,snapshots,restores").map_err(io_err)?;
                    for r in &reports {
                        writeln!(out, "{},{},{},{},{},{}", r.pool_pages, r.switches, r.mean, r.stddev, r.snapshots, r.restores)
                            .map_err(io_err)?;
                    }
                }
            }
            if !constant {
                eprintln!("bench: switch cost depends on pool size");
            }
            Ok(constant)
        }
        Cmd::Attack { case } => {
            let only = match case {
                Some(key) => vec![AttackCase::find(&key).ok_or_else(|| Error::Config(format!("unknown attack case `{key}`")))?],
                None => Vec::new(),
            };
            let report = run_attacks(&cfg, &only)?;
            let mut err = io::stderr().lock();
            for o in &report.outcomes {
                let _ = writeln!(
                    err,
                    "{} ({}) [{}]: {} (expected {}; observed {}; victim {})",
                    o.case.letter,
                    o.case.name,
                    iommu_name(o.iommu),
                    if o.passed { "PASS" } else { "FAIL" },
                    o.case.expected,
                    o.observed,
                    if o.victim_intact { "intact" } else { "MODIFIED" },
                );
            }
            match cli.format {
                Format::Json => write_json(&report, out)?,
                Format::Csv => {
                    let mut out = out;
                    writeln!(out, "case,name,iommu,passed,victim_intact").map_err(io_err)?;
                    for o in &report.outcomes {
                        writeln!(out, "{},{},{},{},{}", o.case.letter, o.case.name, iommu_name(o.iommu), o.passed, o.victim_intact)
                            .map_err(io_err)?;
                    }
                }
            }
            Ok(report.all_passed())
        }
    }
}

fn iommu_name(m: IommuMode) -> String {
    m.to_possible_value().map(|v| v.get_name().to_owned()).unwrap_or_default()
}

fn io_err(e: io::Error) -> Error {
    Error::Config(e.to_string())
}
