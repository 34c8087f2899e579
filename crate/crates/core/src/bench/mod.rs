//! Benchmark and adversarial harness.
//!
//! All numbers are simulated cost units from the ledger (see
//! [`CostModel`]); wall-clock time is reported but never compared.

mod attack;
mod config;
mod report;
mod schedule;
pub mod stack;
pub mod workload;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use attack::{run_attacks, AttackCase, AttackOutcome, AttackReport, ATTACK_CASES};
pub use config::BenchConfig;
pub use report::{write_csv, write_json};
pub use schedule::{check_against_solo, measure_switch, run_schedule, SwitchReport};
pub use workload::{Digests, WorkloadKind};

use crate::devcore::{Core, CoreConfig, SchedulerCalls};
use crate::error::{Error, Result};
use crate::legacydrv::{LegacyCalls, LegacyConfig, LegacyDriver};
use crate::libdrv::{LibConfig, LibDriver};
use crate::machine::{IommuMode, MachineConfig};
use crate::platform::{AppId, CostLedger, CostModel};
use crate::simdev::DeviceConfig;
use stack::{LegacySession, LibSession};
use workload::{run_to_end, Job};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DriverKind {
    Library,
    Legacy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub size: u32,
    pub iters: u32,
    pub driver: DriverKind,
    pub iommu: IommuMode,
    pub config: BenchConfig,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, size: u32, iters: u32, driver: DriverKind) -> Self {
        Self {
            kind,
            size,
            iters,
            driver,
            iommu: IommuMode::System,
            config: BenchConfig::default(),
        }
    }

    pub fn with_iommu(mut self, iommu: IommuMode) -> Self {
        self.iommu = iommu;
        self
    }

    pub fn with_driver(mut self, driver: DriverKind) -> Self {
        self.driver = driver;
        self
    }

    pub fn with_config(mut self, config: BenchConfig) -> Self {
        self.config = config;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub spec: WorkloadSpec,
    /// Simulated time of each iteration; the first includes launch.
    pub per_iteration: Vec<u64>,
    pub iteration_ledgers: Vec<CostLedger>,
    pub first_iteration: u64,
    /// Mean over iterations 2.. (over iteration 1 when there is only one).
    pub steady_mean: f64,
    pub ledger: CostLedger,
    /// Mean simulated cost of one bind or revoke charged to this run.
    pub switch_cost: Option<f64>,
    pub digests: Digests,
    pub wall_ms: f64,
}

impl RunReport {
    fn build(
        spec: WorkloadSpec,
        start: CostLedger,
        marks: &[CostLedger],
        end: CostLedger,
        digests: Option<Digests>,
        wall_ms: f64,
    ) -> Result<Self> {
        let costs = spec.config.costs;
        let mut prev = start;
        let mut iteration_ledgers = Vec::with_capacity(marks.len());
        for m in marks {
            iteration_ledgers.push(m.since(&prev));
            prev = *m;
        }
        let per_iteration: Vec<u64> = iteration_ledgers.iter().map(|l| l.simulated_time(&costs)).collect();
        let digests = digests.ok_or_else(|| Error::VerifyFail("workload produced no result".into()))?;
        Ok(Self {
            first_iteration: per_iteration[0],
            steady_mean: steady_mean(&per_iteration),
            per_iteration,
            iteration_ledgers,
            ledger: end.since(&start),
            switch_cost: None,
            digests,
            wall_ms,
            spec,
        })
    }

    pub fn simulated_time(&self, costs: &CostModel) -> u64 {
        self.ledger.simulated_time(costs)
    }
}

pub fn steady_mean(per_iteration: &[u64]) -> f64 {
    let tail = if per_iteration.len() > 1 { &per_iteration[1..] } else { per_iteration };
    tail.iter().sum::<u64>() as f64 / tail.len() as f64
}

pub fn machine_config(cfg: &BenchConfig, iommu: IommuMode) -> MachineConfig {
    MachineConfig {
        system_pages: cfg.system_pages,
        device: DeviceConfig {
            vram_bytes: cfg.vram_bytes,
            ..DeviceConfig::default()
        },
        iommu,
        costs: cfg.costs,
    }
}

pub fn core_config(cfg: &BenchConfig, iommu: IommuMode) -> CoreConfig {
    CoreConfig {
        machine: machine_config(cfg, iommu),
        segment_size: cfg.segment_size,
        ..CoreConfig::default()
    }
}

pub fn lib_config(cfg: &BenchConfig) -> LibConfig {
    LibConfig {
        pool_pages: cfg.pool_pages,
        poll_quantum: cfg.poll_quantum,
    }
}

/// Runs one workload on one stack and verifies it against the host oracle.
pub fn run_workload(spec: &WorkloadSpec) -> Result<RunReport> {
    let started = Instant::now();
    let cfg = &spec.config;
    match spec.driver {
        DriverKind::Library => {
            let app = AppId(1);
            let mut core = Core::new(core_config(cfg, spec.iommu));
            core.device_init()?;
            core.create_app(app, cfg.pool_pages)?;
            let mut job = Job::new(spec.kind, spec.size, spec.iters)?;
            let start = *core.ledger();
            let mut lib = LibDriver::init(&mut core.port(app), lib_config(cfg))?;
            core.bind_device_lib(lib.id())?;
            let marks = run_to_end(&mut job, &mut LibSession { core: &mut core, lib: &mut lib, app })?;
            let end = *core.ledger();
            RunReport::build(spec.clone(), start, &marks, end, job.digests(), ms(started))
        }
        DriverKind::Legacy => {
            let mut drv = LegacyDriver::new(LegacyConfig {
                machine: machine_config(cfg, spec.iommu),
                kernel_pool_pages: cfg.kernel_pool_pages,
                poll_quantum: cfg.poll_quantum,
            })?;
            let mut job = Job::new(spec.kind, spec.size, spec.iters)?;
            let start = *drv.ledger();
            let client = drv.open(AppId(1))?;
            let marks = run_to_end(&mut job, &mut LegacySession { drv: &mut drv, client })?;
            let end = *drv.ledger();
            RunReport::build(spec.clone(), start, &marks, end, job.digests(), ms(started))
        }
    }
}

/// Legacy steady-state time over library steady-state time for `spec`.
pub fn speedup(spec: &WorkloadSpec) -> Result<f64> {
    let lib = run_workload(&spec.clone().with_driver(DriverKind::Library))?;
    let legacy = run_workload(&spec.clone().with_driver(DriverKind::Legacy))?;
    if lib.digests != legacy.digests {
        return Err(Error::VerifyFail(format!(
            "{:?} n={}: stacks disagree ({:?} vs {:?})",
            spec.kind, spec.size, lib.digests, legacy.digests
        )));
    }
    Ok(legacy.steady_mean / lib.steady_mean)
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}
