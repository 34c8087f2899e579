use serde::{Deserialize, Serialize};

/// Per-unit costs used to turn ledger counters into simulated time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    /// Cost of one user/kernel boundary crossing.
    pub cross: u64,
    /// Cost per 4 bytes copied across the boundary.
    pub copy: u64,
    /// Cost per instruction word validated in software.
    pub check: u64,
    /// Cost per device cycle.
    pub cycle: u64,
    /// Cost per core entry-point invocation.
    pub call: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            cross: 1000,
            copy: 1,
            check: 2,
            cycle: 1,
            call: 10,
        }
    }
}

/// Counters behind every performance number the harness reports.
///
/// The five counters in `simulated_time` are the cost basis. The remaining
/// fields are bookkeeping used by tests (snapshot/restore pairs, poll rounds).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub crossings: u64,
    pub bytes_copied: u64,
    pub instructions_validated: u64,
    pub device_cycles: u64,
    pub core_calls: u64,
    pub snapshots: u64,
    pub restores: u64,
    pub poll_rounds: u64,
}

impl CostLedger {
    pub fn simulated_time(&self, c: &CostModel) -> u64 {
        self.crossings * c.cross
            + self.bytes_copied * c.copy / 4
            + self.instructions_validated * c.check
            + self.device_cycles * c.cycle
            + self.core_calls * c.call
    }

    /// Counter-wise difference `self - earlier`.
    pub fn since(&self, earlier: &CostLedger) -> CostLedger {
        CostLedger {
            crossings: self.crossings - earlier.crossings,
            bytes_copied: self.bytes_copied - earlier.bytes_copied,
            instructions_validated: self.instructions_validated - earlier.instructions_validated,
            device_cycles: self.device_cycles - earlier.device_cycles,
            core_calls: self.core_calls - earlier.core_calls,
            snapshots: self.snapshots - earlier.snapshots,
            restores: self.restores - earlier.restores,
            poll_rounds: self.poll_rounds - earlier.poll_rounds,
        }
    }

    /// True when no counter of `self` is below the matching one in `earlier`.
    pub fn dominates(&self, earlier: &CostLedger) -> bool {
        self.crossings >= earlier.crossings
            && self.bytes_copied >= earlier.bytes_copied
            && self.instructions_validated >= earlier.instructions_validated
            && self.device_cycles >= earlier.device_cycles
            && self.core_calls >= earlier.core_calls
            && self.snapshots >= earlier.snapshots
            && self.restores >= earlier.restores
            && self.poll_rounds >= earlier.poll_rounds
    }
}
