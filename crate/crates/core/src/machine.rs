//! The simulated computer: host platform plus one accelerator.
//!
//! Both driver stacks sit on a `Machine`. It owns the clock (`tick`), the
//! bus glue between device and system memory, and the hardware bring-up
//! sequence shared by the trusted core and the legacy driver.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::platform::{CostModel, Platform, DEFAULT_SYSTEM_PAGES};
use crate::simdev::regs::*;
use crate::simdev::{firmware_image, DeviceConfig, DeviceState, ExecReport, HostBus, Scanout};

/// Which translation unit guards the system aperture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum IommuMode {
    /// Platform IOMMU; the device's own unit stays disabled.
    System,
    /// The device's built-in IOMMU.
    Builtin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MachineConfig {
    pub system_pages: u32,
    pub device: DeviceConfig,
    pub iommu: IommuMode,
    pub costs: CostModel,
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self {
            system_pages: DEFAULT_SYSTEM_PAGES,
            device: DeviceConfig::default(),
            iommu: IommuMode::System,
            costs: CostModel::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Machine {
    pub platform: Platform,
    pub device: DeviceState,
    pub iommu: IommuMode,
    pub costs: CostModel,
}

impl Machine {
    pub fn new(cfg: MachineConfig) -> Self {
        Self {
            platform: Platform::new(cfg.system_pages, cfg.device.tlb_entries),
            device: DeviceState::new(cfg.device),
            iommu: cfg.iommu,
            costs: cfg.costs,
        }
    }

    fn split(&mut self) -> (&mut DeviceState, HostBus<'_>) {
        (
            &mut self.device,
            HostBus {
                mem: &mut self.platform.mem,
                system_iommu: &mut self.platform.system_iommu,
            },
        )
    }

    pub fn mmio_read(&self, offset: u32) -> Result<u32> {
        self.device.mmio_read(offset)
    }

    pub fn mmio_write(&mut self, offset: u32, value: u32) -> Result<()> {
        let (dev, mut bus) = self.split();
        dev.mmio_write(&mut bus, offset, value)
    }

    /// Advances the device clock by up to `budget` cycles and charges the
    /// cycles actually used to the ledger.
    pub fn tick(&mut self, budget: u64) -> ExecReport {
        let (dev, mut bus) = self.split();
        let rep = dev.step(&mut bus, budget);
        self.platform.ledger.device_cycles += rep.cycles_used;
        rep
    }

    /// Steps until the command processor is idle.
    pub fn run_until_idle(&mut self) -> u64 {
        let mut total = 0;
        while self.device.busy() {
            total += self.tick(1 << 16).cycles_used;
        }
        total
    }

    pub fn scanout(&mut self) -> Result<Scanout> {
        let (dev, mut bus) = self.split();
        dev.scanout(&mut bus)
    }

    /// Points the active IOMMU at `root`. Does not flush.
    pub fn set_iommu_root(&mut self, root: u32) -> Result<()> {
        match self.iommu {
            IommuMode::Builtin => self.mmio_write(IOMMU_ROOT, root),
            IommuMode::System => {
                self.platform.system_iommu.set_root(root);
                Ok(())
            }
        }
    }

    pub fn iommu_root(&self) -> u32 {
        match self.iommu {
            IommuMode::Builtin => self.device.mmio_read(IOMMU_ROOT).unwrap_or(0),
            IommuMode::System => self.platform.system_iommu.root(),
        }
    }

    /// Flushes the active IOMMU's TLB.
    pub fn flush_tlb(&mut self) -> Result<()> {
        self.mmio_write(TLB_FLUSH, 1)?;
        if self.iommu == IommuMode::System {
            self.platform.system_iommu.flush();
        }
        Ok(())
    }

    pub fn flush_cache(&mut self) -> Result<()> {
        self.mmio_write(CACHE_FLUSH, 1)
    }

    /// Hardware bring-up: firmware load, interrupts on, IOMMU selection,
    /// command-processor reset, display block cleared, no memory reachable.
    pub fn init_hardware(&mut self) -> Result<()> {
        self.mmio_write(FW_CTRL, 0)?;
        self.mmio_write(FW_ADDR, 0)?;
        for w in firmware_image() {
            self.mmio_write(FW_DATA, w)?;
        }
        self.mmio_write(FW_CTRL, FW_CMD_LOAD)?;
        self.mmio_write(IRQ_ENABLE, 1)?;
        self.mmio_write(
            IOMMU_ENABLE,
            (self.iommu == IommuMode::Builtin) as u32,
        )?;
        self.mmio_write(CP_RESET, 1)?;
        for r in [DISP_PLL, DISP_TIMING_H, DISP_TIMING_V, DISP_ENABLE] {
            self.mmio_write(r, 0)?;
        }
        self.mmio_write(MC_SEG_BASE, 0)?;
        self.mmio_write(MC_SEG_LIMIT, 0)?;
        self.set_iommu_root(0)?;
        self.flush_tlb()
    }

    pub fn simulated_time(&self) -> u64 {
        self.platform.ledger.simulated_time(&self.costs)
    }
}
