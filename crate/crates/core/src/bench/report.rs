use std::io::Write;

use serde::Serialize;

use super::{DriverKind, RunReport, WorkloadKind};
use crate::error::{Error, Result};
use crate::machine::IommuMode;

pub fn write_json<T: Serialize + ?Sized, W: Write>(value: &T, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::Config(e.to_string()))?;
    writeln!(out).map_err(|e| Error::Config(e.to_string()))
}

#[derive(Serialize)]
struct Row {
    workload: WorkloadKind,
    size: u32,
    iters: u32,
    driver: DriverKind,
    iommu: IommuMode,
    iteration: usize,
    simulated_time: u64,
    crossings: u64,
    bytes_copied: u64,
    instructions_validated: u64,
    device_cycles: u64,
    core_calls: u64,
    poll_rounds: u64,
    result_digest: String,
    scanout_digest: String,
}

/// One CSV row per iteration of every report.
pub fn write_csv<W: Write>(reports: &[RunReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        for (i, (t, l)) in r.per_iteration.iter().zip(&r.iteration_ledgers).enumerate() {
            w.serialize(Row {
                workload: r.spec.kind,
                size: r.spec.size,
                iters: r.spec.iters,
                driver: r.spec.driver,
                iommu: r.spec.iommu,
                iteration: i + 1,
                simulated_time: *t,
                crossings: l.crossings,
                bytes_copied: l.bytes_copied,
                instructions_validated: l.instructions_validated,
                device_cycles: l.device_cycles,
                core_calls: l.core_calls,
                poll_rounds: l.poll_rounds,
                result_digest: format!("{:016x}", r.digests.result),
                scanout_digest: r.digests.scanout.map(|d| format!("{d:016x}")).unwrap_or_default(),
            })
            .map_err(|e| Error::Config(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::Config(e.to_string()))
}
