//! A simulated accelerator with two driver stacks over it.
//!
//! * [`simdev`]: the device model (registers, command processor, IOMMU,
//!   memory controller, cache, display).
//! * [`platform`]: system memory, address spaces, system IOMMU, cost ledger.
//! * [`devcore`]: the trusted core and its nine-call API.
//! * [`libdrv`]: the untrusted per-application library driver.
//! * [`legacydrv`]: a monolithic kernel driver used as the baseline.
//! * [`bench`]: workloads, scheduler, attack suite and reports.

#[macro_use]
mod api;

pub mod bench;
pub mod devcore;
pub mod error;
pub mod iommu;
pub mod legacydrv;
pub mod libdrv;
pub mod machine;
pub mod platform;
pub mod simdev;

pub use error::{Error, Result};
pub use machine::{IommuMode, Machine, MachineConfig};
