//! Round-robin time multiplexing and switch-cost measurement.

use std::time::Instant;

use serde::Serialize;

use super::stack::LibSession;
use super::workload::{Job, Step};
use super::{core_config, lib_config, run_workload, BenchConfig, DriverKind, RunReport, WorkloadSpec};
use crate::devcore::{Core, SchedulerCalls};
use crate::error::{Error, Result};
use crate::libdrv::{BufferHandle, LibDriver};
use crate::machine::IommuMode;
use crate::platform::{AppId, CostLedger};
use crate::simdev::isa::Instruction;

struct Slot {
    app: AppId,
    lib: LibDriver,
    job: Job<BufferHandle>,
    waiting: Option<u64>,
    /// Ledger charged to this lib so far.
    charged: CostLedger,
    start: CostLedger,
    marks: Vec<CostLedger>,
    switches: u64,
    switch_cost: u64,
}

fn add(a: &CostLedger, d: &CostLedger) -> CostLedger {
    CostLedger {
        crossings: a.crossings + d.crossings,
        bytes_copied: a.bytes_copied + d.bytes_copied,
        instructions_validated: a.instructions_validated + d.instructions_validated,
        device_cycles: a.device_cycles + d.device_cycles,
        core_calls: a.core_calls + d.core_calls,
        snapshots: a.snapshots + d.snapshots,
        restores: a.restores + d.restores,
        poll_rounds: a.poll_rounds + d.poll_rounds,
    }
}

/// Runs every spec as its own lib on one device, binding each for up to
/// `epoch` device cycles in turn. Revocation waits for the device to go
/// idle, so an epoch shorter than a batch still completes that batch.
///
/// All specs share the first spec's configuration and IOMMU mode. Each
/// lib's report carries only the costs incurred while it was bound (plus
/// its own launch).
pub fn run_schedule(specs: &[WorkloadSpec], epoch: u64) -> Result<Vec<RunReport>> {
    let started = Instant::now();
    let first = specs.first().ok_or_else(|| Error::Config("no workloads to schedule".into()))?;
    if specs.iter().any(|s| s.driver != DriverKind::Library) {
        return Err(Error::Config("only library-stack workloads can be scheduled".into()));
    }
    if epoch == 0 {
        return Err(Error::Config("epoch must be positive".into()));
    }
    let cfg = first.config;
    let mut core = Core::new(core_config(&cfg, first.iommu));
    core.device_init()?;
    let mut slots = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let app = AppId(i as u32 + 1);
        core.create_app(app, cfg.pool_pages)?;
        let job = Job::new(spec.kind, spec.size, spec.iters)?;
        let before = *core.ledger();
        let lib = LibDriver::init(&mut core.port(app), lib_config(&cfg))?;
        let charged = core.ledger().since(&before);
        slots.push(Slot {
            app,
            lib,
            job,
            waiting: None,
            charged,
            start: CostLedger::default(),
            marks: Vec::new(),
            switches: 0,
            switch_cost: 0,
        });
    }

    while slots.iter().any(|s| !s.job.is_done()) {
        for slot in slots.iter_mut().filter(|s| !s.job.is_done()) {
            let t0 = *core.ledger();
            core.bind_device_lib(slot.lib.id())?;
            let bind = core.ledger().since(&t0).simulated_time(&cfg.costs);
            let res = run_epoch(&mut core, slot, epoch, cfg.poll_quantum, t0);
            let t1 = *core.ledger();
            core.revoke_device_lib(slot.lib.id())?;
            let revoke = core.ledger().since(&t1).simulated_time(&cfg.costs);
            res?;
            slot.switches += 2;
            slot.switch_cost += bind + revoke;
            slot.charged = add(&slot.charged, &core.ledger().since(&t0));
        }
    }

    let wall = started.elapsed().as_secs_f64() * 1e3;
    specs
        .iter()
        .zip(slots)
        .map(|(spec, slot)| {
            let mut r = RunReport::build(
                WorkloadSpec { config: cfg, iommu: first.iommu, ..spec.clone() },
                slot.start,
                &slot.marks,
                slot.charged,
                slot.job.digests(),
                wall,
            )?;
            r.switch_cost = Some(slot.switch_cost as f64 / slot.switches as f64);
            Ok(r)
        })
        .collect()
}

fn run_epoch(core: &mut Core, slot: &mut Slot, epoch: u64, quantum: u64, t0: CostLedger) -> Result<()> {
    let mut used = 0u64;
    loop {
        if let Some(seq) = slot.waiting {
            let mut port = core.port(slot.app);
            if slot.lib.poll_fence(&mut port, seq)? {
                slot.waiting = None;
                continue;
            }
            if used >= epoch {
                return Ok(());
            }
            port.record_poll_round();
            let ran = port.advance(quantum.min(epoch - used));
            if ran == 0 {
                return Err(Error::Stalled);
            }
            used += ran;
            continue;
        }
        if used >= epoch || slot.job.is_done() {
            return Ok(());
        }
        let before = core.ledger().device_cycles;
        let step = slot.job.step(&mut LibSession {
            core: &mut *core,
            lib: &mut slot.lib,
            app: slot.app,
        })?;
        used += core.ledger().device_cycles - before;
        match step {
            Step::Continue => {}
            Step::Wait(seq) => slot.waiting = Some(seq),
            Step::IterationDone => {
                let so_far = add(&slot.charged, &core.ledger().since(&t0));
                slot.marks.push(so_far);
            }
            Step::Done => return Ok(()),
        }
    }
}

/// Compares scheduled results with solo runs of the same specs.
pub fn check_against_solo(specs: &[WorkloadSpec], scheduled: &[RunReport]) -> Result<()> {
    for (i, (spec, r)) in specs.iter().zip(scheduled).enumerate() {
        let solo = run_workload(spec)?;
        if solo.digests != r.digests {
            return Err(Error::VerifyFail(format!(
                "lib {}: scheduled digests {:?} differ from solo {:?}",
                i + 1,
                r.digests,
                solo.digests
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SwitchReport {
    pub pool_pages: u32,
    pub switches: u32,
    /// Simulated cost of one revoke + bind.
    pub mean: f64,
    pub stddev: f64,
    pub samples: Vec<u64>,
    pub snapshots: u64,
    pub restores: u64,
    pub tlb_flushes: u64,
    pub cache_flushes: u64,
}

/// Alternates two idle libs on the device `switches` times and reports the
/// cost of each revoke + bind pair.
pub fn measure_switch(cfg: &BenchConfig, iommu: IommuMode, switches: u32) -> Result<SwitchReport> {
    let mut core = Core::new(core_config(cfg, iommu));
    core.device_init()?;
    let mut libs = Vec::new();
    for app in [AppId(1), AppId(2)] {
        core.create_app(app, cfg.pool_pages)?;
        let mut lib = LibDriver::init(&mut core.port(app), lib_config(cfg))?;
        // Give each lib a programmed ring and some history to restore.
        core.bind_device_lib(lib.id())?;
        let mut port = core.port(app);
        let seq = lib.submit(&mut port, &[Instruction::Nop; 3])?;
        lib.wait_fence(&mut port, seq)?;
        core.revoke_device_lib(lib.id())?;
        libs.push(lib.id());
    }
    core.bind_device_lib(libs[0])?;
    let before = *core.ledger();
    let counters = core.machine().device.counters;
    let mut samples = Vec::with_capacity(switches as usize);
    for k in 0..switches as usize {
        let t = *core.ledger();
        core.revoke_device_lib(libs[k % 2])?;
        core.bind_device_lib(libs[(k + 1) % 2])?;
        samples.push(core.ledger().since(&t).simulated_time(&cfg.costs));
    }
    let d = core.ledger().since(&before);
    let after = core.machine().device.counters;
    let n = samples.len().max(1) as f64;
    let mean = samples.iter().sum::<u64>() as f64 / n;
    let var = samples.iter().map(|s| (*s as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(SwitchReport {
        pool_pages: cfg.pool_pages,
        switches,
        mean,
        stddev: var.sqrt(),
        samples,
        snapshots: d.snapshots,
        restores: d.restores,
        tlb_flushes: after.tlb_flushes - counters.tlb_flushes,
        cache_flushes: after.cache_flushes - counters.cache_flushes,
    })
}
