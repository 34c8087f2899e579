//! The trusted core.
//!
//! The core is the only component that touches sensitive registers, page
//! tables or the memory controller. Libraries reach it through exactly
//! seven calls ([`LibCalls`]) and the system scheduler through two
//! ([`SchedulerCalls`]). Everything else on [`Core`] is either boot-time
//! setup or read-only inspection for the harness.

mod acl;
mod info;
mod range;

use std::collections::BTreeMap;

use serde::Serialize;

pub use acl::{Access, RegisterAcl};
pub use info::{InfoPage, INFO_VERSION};
pub use range::RangeAllocator;

use crate::error::{Error, Result};
use crate::iommu::{self, TableError};
use crate::machine::{IommuMode, Machine, MachineConfig};
use crate::platform::{AppId, CostLedger, Owner, PAGE_SIZE};
use crate::simdev::regs::{self, RegClass};
use crate::simdev::{mode_sequence, DisplayMode};

/// Identifies one library instance inside the core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct LibId(pub u32);

entry_points! {
    /// Calls available to untrusted libraries. `app` is the calling process
    /// as established by the OS, not a value the library can forge.
    pub trait LibCalls, names = LIB_CALLS {
        fn init_device_lib(&mut self, app: AppId) -> Result<(LibId, InfoPage)>;
        fn iommu_map_page(&mut self, app: AppId, lib: LibId, vaddr: u32, iaddr: u32) -> Result<()>;
        fn iommu_unmap_page(&mut self, app: AppId, lib: LibId, vaddr: u32) -> Result<()>;
        fn alloc_device_memory(&mut self, app: AppId, lib: LibId, size: u32) -> Result<u32>;
        fn release_device_memory(&mut self, app: AppId, lib: LibId, addr: u32, size: u32) -> Result<()>;
        fn access_register(&mut self, app: AppId, lib: LibId, reg: u32, value: u32, is_write: bool) -> Result<u32>;
        fn set_mode(&mut self, app: AppId, lib: LibId, display: u32, mode: DisplayMode) -> Result<()>;
    }
}

entry_points! {
    /// Calls available to the system scheduler.
    pub trait SchedulerCalls, names = SCHEDULER_CALLS {
        fn bind_device_lib(&mut self, id: LibId) -> Result<()>;
        fn revoke_device_lib(&mut self, id: LibId) -> Result<()>;
    }
}

const DEVICE_MEMORY_CALLS: [&str; 2] = ["alloc_device_memory", "release_device_memory"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreConfig {
    pub machine: MachineConfig,
    pub segment_size: u32,
    /// False models a device without its own memory: no segments and no
    /// device-memory calls.
    pub device_memory: bool,
    pub displays: Vec<Vec<DisplayMode>>,
}

pub const DEFAULT_SEGMENT_SIZE: u32 = 1 << 20;
pub const DEVICE_ALLOC_ALIGN: u32 = 256;

pub fn default_displays() -> Vec<Vec<DisplayMode>> {
    vec![vec![DisplayMode::new(64, 48, 60), DisplayMode::new(128, 96, 60)]]
}

impl Default for CoreConfig {
    fn default() -> Self {
        Self {
            machine: MachineConfig::default(),
            segment_size: DEFAULT_SEGMENT_SIZE,
            device_memory: true,
            displays: default_displays(),
        }
    }
}

impl CoreConfig {
    /// A device with no memory of its own behind the built-in IOMMU.
    pub fn without_device_memory() -> Self {
        let mut cfg = Self::default();
        cfg.device_memory = false;
        cfg.machine.iommu = IommuMode::Builtin;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LibState {
    Initialized,
    Bound,
    RevokedIdle,
}

/// Saved management-register state plus the lib's isolation context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegisterSnapshot {
    /// (offset, value) for every management register, in offset order.
    pub m_regs: Vec<(u32, u32)>,
    pub iommu_root: u32,
    pub seg_base: u32,
    pub seg_limit: u32,
}

impl RegisterSnapshot {
    fn zeroed(iommu_root: u32, seg_base: u32, seg_limit: u32) -> Self {
        Self {
            m_regs: regs::management_offsets().map(|o| (o, 0)).collect(),
            iommu_root,
            seg_base,
            seg_limit,
        }
    }

    pub fn get(&self, reg: u32) -> Option<u32> {
        self.m_regs.iter().find(|(o, _)| *o == reg).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone)]
pub struct LibContext {
    pub id: LibId,
    pub app: AppId,
    pub state: LibState,
    pub snapshot: RegisterSnapshot,
    /// `[seg_base, seg_limit)` in device memory.
    pub seg_base: u32,
    pub seg_limit: u32,
    pub table_root: u32,
    /// iaddr -> physical frame.
    pub mappings: BTreeMap<u32, u32>,
    pub info_vaddr: u32,
    heap: RangeAllocator,
}

impl LibContext {
    pub fn device_allocations(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.heap.live()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Hooks {
    skip_switch_flush: bool,
}

pub struct Core {
    machine: Machine,
    cfg: CoreConfig,
    acl: RegisterAcl,
    libs: BTreeMap<LibId, LibContext>,
    bound: Option<LibId>,
    initialized: bool,
    slots: Vec<Option<LibId>>,
    info: InfoPage,
    info_frame: u32,
    next_id: u32,
    hooks: Hooks,
}

impl Core {
    pub fn new(cfg: CoreConfig) -> Self {
        let vram = cfg.machine.device.vram_bytes;
        let n_slots = if cfg.device_memory && cfg.segment_size > 0 {
            (vram / cfg.segment_size) as usize
        } else {
            0
        };
        let info = InfoPage {
            version: INFO_VERSION,
            vram_total: if cfg.device_memory { vram } else { 0 },
            segment_size: if cfg.device_memory { cfg.segment_size } else { 0 },
            displays: cfg.displays.clone(),
        };
        Self {
            machine: Machine::new(cfg.machine),
            acl: RegisterAcl::default(),
            libs: BTreeMap::new(),
            bound: None,
            initialized: false,
            slots: vec![None; n_slots],
            info,
            info_frame: 0,
            next_id: 1,
            hooks: Hooks::default(),
            cfg,
        }
    }

    pub fn config(&self) -> &CoreConfig {
        &self.cfg
    }

    /// Names of the entry points this build exports.
    pub fn exported_entry_points(&self) -> Vec<&'static str> {
        LIB_CALLS
            .iter()
            .filter(|n| self.cfg.device_memory || !DEVICE_MEMORY_CALLS.contains(n))
            .chain(SCHEDULER_CALLS.iter())
            .copied()
            .collect()
    }

    /// One-time device bring-up.
    pub fn device_init(&mut self) -> Result<()> {
        if self.initialized {
            return Err(Error::DoubleInit);
        }
        self.machine.init_hardware()?;
        let frame = self
            .machine
            .platform
            .mem
            .alloc_frame(Owner::Core)
            .ok_or(Error::OutOfMemory)?;
        let bytes = self.info.to_bytes();
        self.machine.platform.mem.write(frame * PAGE_SIZE, &bytes);
        self.info_frame = frame;
        self.initialized = true;
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Creates a process with `reserve_pages` of launch-time heap.
    pub fn create_app(&mut self, app: AppId, reserve_pages: u32) -> Result<()> {
        self.machine.platform.create_app(app, reserve_pages)
    }

    /// A handle through which application `app` talks to the system.
    pub fn port(&mut self, app: AppId) -> AppPort<'_> {
        AppPort { core: self, app }
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    /// Harness access to the clock and scanout. Not reachable from a lib.
    pub fn machine_mut(&mut self) -> &mut Machine {
        &mut self.machine
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.machine.platform.ledger
    }

    pub fn bound(&self) -> Option<LibId> {
        self.bound
    }

    pub fn lib(&self, id: LibId) -> Option<&LibContext> {
        self.libs.get(&id)
    }

    pub fn libs(&self) -> impl Iterator<Item = &LibContext> {
        self.libs.values()
    }

    pub fn info(&self) -> &InfoPage {
        &self.info
    }

    /// Suppresses TLB and cache flushes on bind/revoke. Exists only so tests
    /// can show that those flushes are required.
    #[doc(hidden)]
    pub fn debug_skip_switch_flush(&mut self, skip: bool) {
        self.hooks.skip_switch_flush = skip;
    }

    fn charge_lib_call(&mut self) {
        let l = &mut self.machine.platform.ledger;
        l.crossings += 1;
        l.core_calls += 1;
    }

    fn lib_of(&self, app: AppId, lib: LibId) -> Result<&LibContext> {
        let ctx = self.libs.get(&lib).ok_or(Error::NoEnt)?;
        if ctx.app != app {
            return Err(Error::Perm);
        }
        Ok(ctx)
    }

    fn lib_of_mut(&mut self, app: AppId, lib: LibId) -> Result<&mut LibContext> {
        let ctx = self.libs.get_mut(&lib).ok_or(Error::NoEnt)?;
        if ctx.app != app {
            return Err(Error::Perm);
        }
        Ok(ctx)
    }

    fn require_bound(&self, app: AppId, lib: LibId) -> Result<()> {
        self.lib_of(app, lib)?;
        if self.bound != Some(lib) {
            return Err(Error::NotBound);
        }
        Ok(())
    }

    fn require_init(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::Inval)
        }
    }

    fn switch_flush(&mut self) -> Result<()> {
        if !self.hooks.skip_switch_flush {
            self.machine.flush_cache()?;
            self.machine.flush_tlb()?;
        }
        Ok(())
    }

    fn take_snapshot(&self, ctx: &LibContext) -> RegisterSnapshot {
        RegisterSnapshot {
            m_regs: regs::management_offsets()
                .map(|o| (o, self.machine.mmio_read(o).unwrap_or(0)))
                .collect(),
            iommu_root: ctx.table_root,
            seg_base: ctx.seg_base,
            seg_limit: ctx.seg_limit,
        }
    }
}

impl LibCalls for Core {
    fn init_device_lib(&mut self, app: AppId) -> Result<(LibId, InfoPage)> {
        self.charge_lib_call();
        self.require_init()?;
        if !self.machine.platform.has_app(app) {
            return Err(Error::NoEnt);
        }
        let slot = if self.cfg.device_memory {
            Some(
                self.slots
                    .iter()
                    .position(|s| s.is_none())
                    .ok_or(Error::OutOfVram)?,
            )
        } else {
            None
        };
        let root_frame = self
            .machine
            .platform
            .mem
            .alloc_frame(Owner::Core)
            .ok_or(Error::OutOfMemory)?;
        let info_vaddr = self.machine.platform.map_readonly(app, self.info_frame)?;
        let id = LibId(self.next_id);
        self.next_id += 1;
        let (seg_base, seg_limit) = match slot {
            Some(i) => {
                self.slots[i] = Some(id);
                let base = i as u32 * self.cfg.segment_size;
                (base, base + self.cfg.segment_size)
            }
            None => (0, 0),
        };
        let table_root = root_frame * PAGE_SIZE;
        self.libs.insert(
            id,
            LibContext {
                id,
                app,
                state: LibState::Initialized,
                snapshot: RegisterSnapshot::zeroed(table_root, seg_base, seg_limit),
                seg_base,
                seg_limit,
                table_root,
                mappings: BTreeMap::new(),
                info_vaddr,
                heap: RangeAllocator::new(seg_limit - seg_base, DEVICE_ALLOC_ALIGN),
            },
        );
        Ok((id, self.info.clone()))
    }

    fn iommu_map_page(&mut self, app: AppId, lib: LibId, vaddr: u32, iaddr: u32) -> Result<()> {
        self.charge_lib_call();
        let root = self.lib_of(app, lib)?.table_root;
        // The isolation check: only the caller's own pages may be mapped.
        let mapping = self
            .machine
            .platform
            .lookup(app, vaddr)
            .map_err(|_| Error::Perm)?;
        if self.machine.platform.mem.owner(mapping.frame) != Some(Owner::App(app)) {
            return Err(Error::Perm);
        }
        if iaddr % PAGE_SIZE != 0 || !iommu::in_aperture(iaddr) {
            return Err(Error::Inval);
        }
        let mem = &mut self.machine.platform.mem;
        iommu::table_map(mem, root, iaddr, mapping.frame, true, |m| {
            m.alloc_frame(Owner::Core)
        })
        .map_err(|e| match e {
            TableError::Exists => Error::Exist,
            TableError::NoMemory => Error::OutOfMemory,
            TableError::Misaligned | TableError::OutOfAperture => Error::Inval,
        })?;
        mem.pin(mapping.frame);
        self.libs
            .get_mut(&lib)
            .unwrap()
            .mappings
            .insert(iaddr, mapping.frame);
        Ok(())
    }

    fn iommu_unmap_page(&mut self, app: AppId, lib: LibId, vaddr: u32) -> Result<()> {
        self.charge_lib_call();
        let root = self.lib_of(app, lib)?.table_root;
        let frame = self
            .machine
            .platform
            .lookup(app, vaddr)
            .map_err(|_| Error::NoEnt)?
            .frame;
        let ctx = self.libs.get_mut(&lib).unwrap();
        let iaddrs: Vec<u32> = ctx
            .mappings
            .iter()
            .filter(|(_, f)| **f == frame)
            .map(|(i, _)| *i)
            .collect();
        if iaddrs.is_empty() {
            return Err(Error::NoEnt);
        }
        for ia in iaddrs {
            ctx.mappings.remove(&ia);
            iommu::table_unmap(&mut self.machine.platform.mem, root, ia);
            self.machine.platform.mem.unpin(frame);
        }
        if self.bound == Some(lib) {
            self.machine.flush_tlb()?;
        }
        Ok(())
    }

    fn alloc_device_memory(&mut self, app: AppId, lib: LibId, size: u32) -> Result<u32> {
        self.charge_lib_call();
        if !self.cfg.device_memory {
            return Err(Error::NoSys);
        }
        let ctx = self.lib_of_mut(app, lib)?;
        if size == 0 {
            return Err(Error::Inval);
        }
        ctx.heap.alloc(size).ok_or(Error::OutOfSegment)
    }

    fn release_device_memory(&mut self, app: AppId, lib: LibId, addr: u32, size: u32) -> Result<()> {
        self.charge_lib_call();
        if !self.cfg.device_memory {
            return Err(Error::NoSys);
        }
        let ctx = self.lib_of_mut(app, lib)?;
        if ctx.heap.release(addr, size) {
            Ok(())
        } else {
            Err(Error::Inval)
        }
    }

    fn access_register(
        &mut self,
        app: AppId,
        lib: LibId,
        reg: u32,
        value: u32,
        is_write: bool,
    ) -> Result<u32> {
        self.charge_lib_call();
        self.require_bound(app, lib)?;
        if !self.acl.allows(reg, is_write) {
            return Err(Error::Perm);
        }
        if is_write {
            self.machine.mmio_write(reg, value)?;
            Ok(value)
        } else {
            self.machine.mmio_read(reg)
        }
    }

    fn set_mode(&mut self, app: AppId, lib: LibId, display: u32, mode: DisplayMode) -> Result<()> {
        self.charge_lib_call();
        self.require_bound(app, lib)?;
        if !self.info.supports(display, mode) {
            return Err(Error::Inval);
        }
        for (reg, v) in mode_sequence(mode) {
            self.machine.mmio_write(reg, v)?;
        }
        Ok(())
    }
}

impl SchedulerCalls for Core {
    fn bind_device_lib(&mut self, id: LibId) -> Result<()> {
        self.machine.platform.ledger.core_calls += 1;
        if self.bound.is_some() {
            return Err(Error::Busy);
        }
        let snap = self.libs.get(&id).ok_or(Error::NoEnt)?.snapshot.clone();
        self.machine.mmio_write(regs::MC_SEG_BASE, snap.seg_base)?;
        self.machine.mmio_write(regs::MC_SEG_LIMIT, snap.seg_limit)?;
        self.machine.set_iommu_root(snap.iommu_root)?;
        for &(reg, v) in &snap.m_regs {
            if reg != regs::RB_TAIL {
                self.machine.mmio_write(reg, v)?;
            }
        }
        // Tail last; equal to head for any snapshot taken at revoke.
        if let Some(t) = snap.get(regs::RB_TAIL) {
            self.machine.mmio_write(regs::RB_TAIL, t)?;
        }
        self.switch_flush()?;
        self.machine.platform.ledger.restores += 1;
        self.libs.get_mut(&id).unwrap().state = LibState::Bound;
        self.bound = Some(id);
        Ok(())
    }

    fn revoke_device_lib(&mut self, id: LibId) -> Result<()> {
        self.machine.platform.ledger.core_calls += 1;
        if !self.libs.contains_key(&id) {
            return Err(Error::NoEnt);
        }
        if self.bound != Some(id) {
            return Err(Error::NotBound);
        }
        // No further lib calls reach the device from here on.
        self.bound = None;
        self.machine.run_until_idle();
        let snap = self.take_snapshot(&self.libs[&id]);
        self.machine.platform.ledger.snapshots += 1;
        self.machine.mmio_write(regs::CP_RESET, 1)?;
        self.switch_flush()?;
        self.machine.mmio_write(regs::MC_SEG_BASE, 0)?;
        self.machine.mmio_write(regs::MC_SEG_LIMIT, 0)?;
        self.machine.set_iommu_root(0)?;
        let ctx = self.libs.get_mut(&id).unwrap();
        ctx.snapshot = snap;
        ctx.state = LibState::RevokedIdle;
        Ok(())
    }
}

/// An application's view of the system: the seven core calls bound to its
/// own process identity, its own memory, the OS page allocator, and the
/// device clock for polling.
pub struct AppPort<'a> {
    core: &'a mut Core,
    app: AppId,
}

impl AppPort<'_> {
    pub fn app(&self) -> AppId {
        self.app
    }

    pub fn init_device_lib(&mut self) -> Result<(LibId, InfoPage)> {
        self.core.init_device_lib(self.app)
    }

    pub fn iommu_map_page(&mut self, lib: LibId, vaddr: u32, iaddr: u32) -> Result<()> {
        self.core.iommu_map_page(self.app, lib, vaddr, iaddr)
    }

    pub fn iommu_unmap_page(&mut self, lib: LibId, vaddr: u32) -> Result<()> {
        self.core.iommu_unmap_page(self.app, lib, vaddr)
    }

    pub fn alloc_device_memory(&mut self, lib: LibId, size: u32) -> Result<u32> {
        self.core.alloc_device_memory(self.app, lib, size)
    }

    pub fn release_device_memory(&mut self, lib: LibId, addr: u32, size: u32) -> Result<()> {
        self.core.release_device_memory(self.app, lib, addr, size)
    }

    pub fn access_register(&mut self, lib: LibId, reg: u32, value: u32, is_write: bool) -> Result<u32> {
        self.core.access_register(self.app, lib, reg, value, is_write)
    }

    pub fn set_mode(&mut self, lib: LibId, display: u32, mode: DisplayMode) -> Result<()> {
        self.core.set_mode(self.app, lib, display, mode)
    }

    pub fn reserved_pages(&self) -> u32 {
        self.core.machine.platform.reserved_pages(self.app)
    }

    pub fn take_reserved(&mut self, n: u32) -> Vec<u32> {
        self.core.machine.platform.take_reserved(self.app, n)
    }

    pub fn alloc_pages(&mut self, n: u32) -> Result<Vec<u32>> {
        self.core.machine.platform.alloc_pages(self.app, n)
    }

    pub fn read(&self, vaddr: u32, buf: &mut [u8]) -> Result<()> {
        self.core.machine.platform.user_read(self.app, vaddr, buf)
    }

    pub fn write(&mut self, vaddr: u32, data: &[u8]) -> Result<()> {
        self.core.machine.platform.user_write(self.app, vaddr, data)
    }

    pub fn read_u32(&self, vaddr: u32) -> Result<u32> {
        self.core.machine.platform.user_read_u32(self.app, vaddr)
    }

    pub fn write_u32(&mut self, vaddr: u32, value: u32) -> Result<()> {
        self.core.machine.platform.user_write_u32(self.app, vaddr, value)
    }

    /// Lets the device run for up to `budget` cycles while the app waits.
    pub fn advance(&mut self, budget: u64) -> u64 {
        self.core.machine.tick(budget).cycles_used
    }

    pub fn record_poll_round(&mut self) {
        self.core.machine.platform.ledger.poll_rounds += 1;
    }

    pub fn ledger(&self) -> &CostLedger {
        self.core.ledger()
    }
}

/// Whether `reg` is a management register.
pub fn is_management(reg: u32) -> bool {
    regs::info(reg).is_some_and(|r| r.class == RegClass::Management)
}

#[cfg(test)]
mod tests;
