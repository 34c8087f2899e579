//! Monolithic kernel driver used as the baseline.
//!
//! Every request is a system call: the caller's data is copied into the
//! kernel, buffers are named by opaque ids, and command batches are
//! validated word by word and patched with real device addresses before
//! they reach the ring. Isolation here is purely a software property of
//! this code.

use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use crate::devcore::{default_displays, InfoPage, RangeAllocator, DEVICE_ALLOC_ALIGN, INFO_VERSION};
use crate::error::{Error, Result};
use crate::iommu::{self, APERTURE_BASE};
use crate::libdrv::{Placement, SlabPool, RING_WORDS};
use crate::machine::{Machine, MachineConfig};
use crate::platform::{AppId, Owner, PAGE_SIZE};
use crate::simdev::isa::{self, ComputeOp, Instruction};
use crate::simdev::regs::{self, FB_BASE, IH_PAGE_ADDR, RB_BASE, RB_SIZE, RB_TAIL};
use crate::simdev::{mode_sequence, DisplayMode, IrqFlags, STATUS_FLAGS, STATUS_SEQ};

pub const DEFAULT_KERNEL_POOL_PAGES: u32 = 512;

const STATUS_PAGE: u32 = 0;
const RING_PAGE: u32 = 1;
const STAGING_PAGE: u32 = 5;
const FIXED_PAGES: u32 = 6;
const RING_BYTES: u32 = RING_WORDS * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ClientId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct BufferId(pub u32);

/// A buffer reference inside a command batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufRef {
    pub id: BufferId,
    /// Byte offset into the buffer.
    pub offset: u32,
}

impl BufRef {
    pub fn new(id: BufferId, offset: u32) -> Self {
        Self { id, offset }
    }
}

/// An instruction as submitted by an application: memory operands name
/// buffers, never device addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsInstr {
    Nop,
    SetReg {
        reg: u32,
        value: u32,
    },
    Compute {
        op: ComputeOp,
        dst: BufRef,
        src1: BufRef,
        src2: BufRef,
        count: u32,
    },
    Copy {
        dst: BufRef,
        src: BufRef,
        count: u32,
    },
}

impl CsInstr {
    /// Words this instruction occupies in the submitted stream: the opcode
    /// word plus each operand, where a buffer reference is two words.
    pub fn wire_words(&self) -> u32 {
        match self {
            CsInstr::Nop => 1,
            CsInstr::SetReg { .. } => 3,
            CsInstr::Compute { .. } => 1 + 1 + 3 * 2 + 1,
            CsInstr::Copy { .. } => 1 + 2 * 2 + 1,
        }
    }
}

pub fn wire_words(batch: &[CsInstr]) -> u32 {
    batch.iter().map(CsInstr::wire_words).sum()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KBuffer {
    pub id: BufferId,
    pub owner: ClientId,
    pub placement: Placement,
    pub size: u32,
    /// VRAM device address, or byte offset into the kernel pool.
    addr: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LegacyConfig {
    pub machine: MachineConfig,
    pub kernel_pool_pages: u32,
    pub poll_quantum: u64,
}

impl Default for LegacyConfig {
    fn default() -> Self {
        Self {
            machine: MachineConfig::default(),
            kernel_pool_pages: DEFAULT_KERNEL_POOL_PAGES,
            poll_quantum: crate::libdrv::DEFAULT_POLL_QUANTUM,
        }
    }
}

entry_points! {
    /// System calls of the monolithic driver. `map` exists in the table but
    /// is not implemented.
    pub trait LegacyCalls, names = LEGACY_CALLS {
        fn open(&mut self, app: AppId) -> Result<ClientId>;
        fn close(&mut self, client: ClientId) -> Result<()>;
        fn alloc(&mut self, client: ClientId, size: u32, placement: Placement) -> Result<BufferId>;
        fn free(&mut self, client: ClientId, id: BufferId) -> Result<()>;
        fn write(&mut self, client: ClientId, id: BufferId, offset: u32, data: &[u8]) -> Result<()>;
        fn read(&mut self, client: ClientId, id: BufferId, offset: u32, len: u32) -> Result<Vec<u8>>;
        fn submit(&mut self, client: ClientId, batch: &[CsInstr]) -> Result<u64>;
        fn wait(&mut self, client: ClientId, seq: u64) -> Result<()>;
        fn set_mode(&mut self, client: ClientId, display: u32, mode: DisplayMode) -> Result<()>;
        fn present(&mut self, client: ClientId, id: BufferId) -> Result<()>;
        fn info(&mut self, client: ClientId) -> Result<InfoPage>;
        fn map(&mut self, client: ClientId, id: BufferId) -> Result<u32>;
    }
}

pub struct LegacyDriver {
    machine: Machine,
    cfg: LegacyConfig,
    info: InfoPage,
    pool_base: u32,
    pool: SlabPool,
    vram: RangeAllocator,
    clients: BTreeMap<ClientId, AppId>,
    buffers: BTreeMap<BufferId, KBuffer>,
    next_client: u32,
    next_buffer: u32,
    tail: u32,
    head_seen: u32,
    outstanding: VecDeque<(u64, u32, ClientId)>,
    next_seq: u64,
    completed: u64,
    /// client -> (highest seq discarded by a fault, flags).
    faults: BTreeMap<ClientId, (u64, IrqFlags)>,
}

impl LegacyDriver {
    /// Boots the device and sets up the kernel's own pool, page table and
    /// ring. Boot is not charged to any application.
    pub fn new(cfg: LegacyConfig) -> Result<Self> {
        let mut machine = Machine::new(cfg.machine);
        machine.init_hardware()?;
        let vram = cfg.machine.device.vram_bytes;
        let n = cfg.kernel_pool_pages;
        if n <= FIXED_PAGES {
            return Err(Error::Config(format!("kernel pool must exceed {FIXED_PAGES} pages")));
        }
        let mem = &mut machine.platform.mem;
        let root = mem.alloc_frame(Owner::Core).ok_or(Error::OutOfMemory)? * PAGE_SIZE;
        let frames = mem.alloc_frames(Owner::Core, n).ok_or(Error::OutOfMemory)?;
        for (i, f) in frames.iter().enumerate() {
            iommu::table_map(mem, root, APERTURE_BASE + i as u32 * PAGE_SIZE, *f, true, |m| {
                m.alloc_frame(Owner::Core)
            })
            .map_err(|_| Error::OutOfMemory)?;
            mem.pin(*f);
        }
        machine.mmio_write(regs::MC_SEG_BASE, 0)?;
        machine.mmio_write(regs::MC_SEG_LIMIT, vram)?;
        machine.set_iommu_root(root)?;
        machine.flush_tlb()?;
        machine.mmio_write(RB_BASE, APERTURE_BASE + RING_PAGE * PAGE_SIZE)?;
        machine.mmio_write(RB_SIZE, RING_WORDS)?;
        machine.mmio_write(IH_PAGE_ADDR, APERTURE_BASE + STATUS_PAGE * PAGE_SIZE)?;
        let info = InfoPage {
            version: INFO_VERSION,
            vram_total: vram,
            segment_size: vram,
            displays: default_displays(),
        };
        Ok(Self {
            machine,
            cfg,
            info,
            pool_base: APERTURE_BASE,
            pool: SlabPool::new(n - FIXED_PAGES),
            vram: RangeAllocator::new(vram, DEVICE_ALLOC_ALIGN),
            clients: BTreeMap::new(),
            buffers: BTreeMap::new(),
            next_client: 1,
            next_buffer: 1,
            tail: 0,
            head_seen: 0,
            outstanding: VecDeque::new(),
            next_seq: 1,
            completed: 0,
            faults: BTreeMap::new(),
        })
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    pub fn machine_mut(&mut self) -> &mut Machine {
        &mut self.machine
    }

    pub fn ledger(&self) -> &crate::platform::CostLedger {
        &self.machine.platform.ledger
    }

    /// Device address of a buffer. Kernel-internal: applications only ever
    /// see the id.
    pub fn device_address_of(&self, id: BufferId) -> Option<u32> {
        self.buffers.get(&id).and_then(|b| self.da(b))
    }

    fn da(&self, b: &KBuffer) -> Option<u32> {
        match b.placement {
            Placement::Vram => Some(b.addr),
            Placement::Gtt => Some(self.pool_base + FIXED_PAGES * PAGE_SIZE + b.addr),
            Placement::Sys => None,
        }
    }

    /// Physical byte address of pool offset `off`.
    fn pool_phys(&self, page: u32, off: u32) -> u32 {
        let iaddr = self.pool_base + page * PAGE_SIZE + off;
        iommu::translate_by_walk(&self.machine.platform.mem, self.root(), iaddr, false)
            .expect("kernel pool is fully mapped")
    }

    fn root(&self) -> u32 {
        self.machine.iommu_root()
    }

    fn syscall(&mut self) {
        let l = &mut self.machine.platform.ledger;
        l.crossings += 1;
        l.core_calls += 1;
    }

    fn copy_in(&mut self, bytes: u64) {
        self.machine.platform.ledger.bytes_copied += bytes;
    }

    fn client(&self, client: ClientId) -> Result<()> {
        if self.clients.contains_key(&client) {
            Ok(())
        } else {
            Err(Error::BadHandle)
        }
    }

    fn owned(&self, client: ClientId, id: BufferId) -> Result<KBuffer> {
        self.client(client)?;
        match self.buffers.get(&id) {
            Some(b) if b.owner == client => Ok(b.clone()),
            _ => Err(Error::Perm),
        }
    }

    fn pool_write(&mut self, page: u32, off: u32, data: &[u8]) {
        for (k, chunk) in data.chunks(PAGE_SIZE as usize).enumerate() {
            let start = off + (k as u32) * PAGE_SIZE;
            // Split at page boundaries: pool pages need not be contiguous.
            let mut done = 0usize;
            while done < chunk.len() {
                let o = start + done as u32;
                let in_page = (PAGE_SIZE - o % PAGE_SIZE) as usize;
                let n = in_page.min(chunk.len() - done);
                let pa = self.pool_phys(page, o);
                self.machine.platform.mem.write(pa, &chunk[done..done + n]);
                done += n;
            }
        }
    }

    fn pool_read(&self, page: u32, off: u32, out: &mut [u8]) {
        let mut done = 0usize;
        while done < out.len() {
            let o = off + done as u32;
            let in_page = (PAGE_SIZE - o % PAGE_SIZE) as usize;
            let n = in_page.min(out.len() - done);
            let pa = self.pool_phys(page, o);
            self.machine.platform.mem.read(pa, &mut out[done..done + n]);
            done += n;
        }
    }

    fn status(&self) -> (u64, IrqFlags) {
        let mut b = [0u8; 16];
        self.pool_read(STATUS_PAGE, 0, &mut b);
        let w = |i: u32| u32::from_le_bytes(b[i as usize..i as usize + 4].try_into().unwrap());
        let seq = w(STATUS_SEQ) as u64 | ((w(STATUS_SEQ + 4) as u64) << 32);
        (seq, IrqFlags::from_bits_truncate(w(STATUS_FLAGS)))
    }

    fn refresh(&mut self) {
        let (seq, flags) = self.status();
        self.completed = self.completed.max(seq);
        let faults = flags & IrqFlags::FAULTS;
        if !faults.is_empty() {
            let keep = (flags - IrqFlags::FAULTS).bits();
            self.pool_write(STATUS_PAGE, STATUS_FLAGS, &keep.to_le_bytes());
            for (s, _, c) in self.outstanding.drain(..) {
                if s > self.completed {
                    self.faults.insert(c, (s, faults));
                }
            }
            self.head_seen = self.tail;
        }
        while let Some(&(s, end, _)) = self.outstanding.front() {
            if s > self.completed {
                break;
            }
            self.head_seen = end;
            self.outstanding.pop_front();
        }
    }

    /// Kernel-internal completion check; no crossing.
    fn fence_state(&mut self, client: ClientId, seq: u64) -> Result<bool> {
        if seq <= self.completed {
            return Ok(true);
        }
        self.refresh();
        if seq <= self.completed {
            return Ok(true);
        }
        match self.faults.get(&client) {
            Some(&(s, f)) if seq <= s => Err(Error::DeviceFault(f)),
            _ => Ok(false),
        }
    }

    /// Waits inside the kernel (used when the driver itself needs a batch to
    /// finish, e.g. for device-memory transfers).
    fn wait_internal(&mut self, client: ClientId, seq: u64) -> Result<()> {
        loop {
            if self.fence_state(client, seq)? {
                return Ok(());
            }
            if self.machine.tick(self.cfg.poll_quantum).cycles_used == 0
                && !self.fence_state(client, seq)?
            {
                return Err(Error::Stalled);
            }
        }
    }

    fn ring_free_words(&self) -> u32 {
        let used = (self.tail + RING_BYTES - self.head_seen) % RING_BYTES / 4;
        RING_WORDS - 1 - used
    }

    /// Puts already-validated instructions plus a fence on the ring.
    fn dispatch(&mut self, client: ClientId, instrs: &[Instruction]) -> Result<u64> {
        let seq = self.next_seq;
        let mut words = isa::encode_all(instrs);
        Instruction::Fence { seq, irq: true }.encode(&mut words);
        let n = words.len() as u32;
        if n > RING_WORDS - 1 {
            return Err(Error::BatchTooBig);
        }
        self.refresh();
        while self.ring_free_words() < n {
            let (oldest, _, owner) = *self.outstanding.front().ok_or(Error::Stalled)?;
            // Ring space is reclaimed whether or not that batch faulted.
            let _ = self.wait_internal(owner, oldest);
            self.refresh();
        }
        let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        let first = ((RING_BYTES - self.tail) as usize).min(bytes.len());
        let ring_off = RING_PAGE * PAGE_SIZE;
        self.pool_write(0, ring_off + self.tail, &bytes[..first]);
        if first < bytes.len() {
            self.pool_write(0, ring_off, &bytes[first..]);
        }
        self.tail = (self.tail + 4 * n) % RING_BYTES;
        self.machine.mmio_write(RB_TAIL, self.tail)?;
        self.outstanding.push_back((seq, self.tail, client));
        self.next_seq += 1;
        Ok(seq)
    }

    fn resolve(&self, client: ClientId, r: BufRef, words: u32) -> Result<u32> {
        let b = self.owned(client, r.id)?;
        let da = self.da(&b).ok_or(Error::Inval)?;
        if r.offset % 4 != 0 {
            return Err(Error::Inval);
        }
        let end = r.offset as u64 + 4 * words as u64;
        if end > b.size.div_ceil(4) as u64 * 4 {
            return Err(Error::Range);
        }
        Ok(da + r.offset)
    }

    /// Software validation and address patching of one batch.
    fn validate(&mut self, client: ClientId, batch: &[CsInstr]) -> Result<Vec<Instruction>> {
        self.machine.platform.ledger.instructions_validated += wire_words(batch) as u64;
        batch
            .iter()
            .map(|i| {
                Ok(match *i {
                    CsInstr::Nop => Instruction::Nop,
                    CsInstr::SetReg { reg, value } => {
                        if !regs::is_scratch(reg) {
                            return Err(Error::Inval);
                        }
                        Instruction::SetReg { reg, value }
                    }
                    CsInstr::Compute { op, dst, src1, src2, count } => {
                        let dst_words = if op == ComputeOp::Dot { 1 } else { count };
                        Instruction::Compute {
                            op,
                            dst: self.resolve(client, dst, dst_words)?,
                            src1: self.resolve(client, src1, count)?,
                            src2: self.resolve(client, src2, count)?,
                            count,
                        }
                    }
                    CsInstr::Copy { dst, src, count } => Instruction::Copy {
                        dst: self.resolve(client, dst, count)?,
                        src: self.resolve(client, src, count)?,
                        count,
                    },
                })
            })
            .collect()
    }

    fn vram_transfer(&mut self, client: ClientId, da: u32, data: Option<&[u8]>, len: u32) -> Result<Vec<u8>> {
        if da % 4 != 0 || len % 4 != 0 {
            return Err(Error::Inval);
        }
        let staging = self.pool_base + STAGING_PAGE * PAGE_SIZE;
        let mut out = Vec::new();
        let mut done = 0u32;
        while done < len {
            let n = (len - done).min(PAGE_SIZE);
            let copy = match data {
                Some(d) => {
                    self.pool_write(STAGING_PAGE, 0, &d[done as usize..(done + n) as usize]);
                    Instruction::Copy { dst: da + done, src: staging, count: n / 4 }
                }
                None => Instruction::Copy { dst: staging, src: da + done, count: n / 4 },
            };
            let seq = self.dispatch(client, &[copy])?;
            self.wait_internal(client, seq)?;
            if data.is_none() {
                let mut chunk = vec![0u8; n as usize];
                self.pool_read(STAGING_PAGE, 0, &mut chunk);
                out.extend(chunk);
            }
            done += n;
        }
        Ok(out)
    }

    pub fn entry_points(&self) -> &'static [&'static str] {
        LEGACY_CALLS
    }
}

impl LegacyCalls for LegacyDriver {
    fn open(&mut self, app: AppId) -> Result<ClientId> {
        self.syscall();
        let c = ClientId(self.next_client);
        self.next_client += 1;
        self.clients.insert(c, app);
        Ok(c)
    }

    fn close(&mut self, client: ClientId) -> Result<()> {
        self.syscall();
        self.client(client)?;
        let ids: Vec<BufferId> = self
            .buffers
            .values()
            .filter(|b| b.owner == client)
            .map(|b| b.id)
            .collect();
        for id in ids {
            self.release(id);
        }
        self.clients.remove(&client);
        Ok(())
    }

    fn alloc(&mut self, client: ClientId, size: u32, placement: Placement) -> Result<BufferId> {
        self.syscall();
        self.client(client)?;
        if size == 0 {
            return Err(Error::Inval);
        }
        let addr = match placement {
            Placement::Vram => self.vram.alloc(size).ok_or(Error::OutOfVram)?,
            Placement::Gtt | Placement::Sys => self.pool.alloc(size).ok_or(Error::OutOfPool)?,
        };
        let id = BufferId(self.next_buffer);
        self.next_buffer += 1;
        self.buffers.insert(
            id,
            KBuffer {
                id,
                owner: client,
                placement,
                size,
                addr,
            },
        );
        Ok(id)
    }

    fn free(&mut self, client: ClientId, id: BufferId) -> Result<()> {
        self.syscall();
        self.owned(client, id)?;
        self.release(id);
        Ok(())
    }

    fn write(&mut self, client: ClientId, id: BufferId, offset: u32, data: &[u8]) -> Result<()> {
        self.syscall();
        let b = self.owned(client, id)?;
        if offset as u64 + data.len() as u64 > b.size as u64 {
            return Err(Error::Range);
        }
        self.copy_in(data.len() as u64);
        match b.placement {
            Placement::Vram => {
                self.vram_transfer(client, b.addr + offset, Some(data), data.len() as u32)?;
            }
            _ => self.pool_write(FIXED_PAGES, b.addr + offset, data),
        }
        Ok(())
    }

    fn read(&mut self, client: ClientId, id: BufferId, offset: u32, len: u32) -> Result<Vec<u8>> {
        self.syscall();
        let b = self.owned(client, id)?;
        if offset as u64 + len as u64 > b.size as u64 {
            return Err(Error::Range);
        }
        let out = match b.placement {
            Placement::Vram => self.vram_transfer(client, b.addr + offset, None, len)?,
            _ => {
                let mut out = vec![0u8; len as usize];
                self.pool_read(FIXED_PAGES, b.addr + offset, &mut out);
                out
            }
        };
        self.copy_in(len as u64);
        Ok(out)
    }

    fn submit(&mut self, client: ClientId, batch: &[CsInstr]) -> Result<u64> {
        self.syscall();
        self.client(client)?;
        self.copy_in(4 * wire_words(batch) as u64);
        let patched = self.validate(client, batch)?;
        self.dispatch(client, &patched)
    }

    fn wait(&mut self, client: ClientId, seq: u64) -> Result<()> {
        self.client(client)?;
        loop {
            // Each poll is its own system call.
            self.syscall();
            self.machine.platform.ledger.poll_rounds += 1;
            if self.fence_state(client, seq)? {
                return Ok(());
            }
            if self.machine.tick(self.cfg.poll_quantum).cycles_used == 0
                && !self.fence_state(client, seq)?
            {
                return Err(Error::Stalled);
            }
        }
    }

    fn set_mode(&mut self, client: ClientId, display: u32, mode: DisplayMode) -> Result<()> {
        self.syscall();
        self.client(client)?;
        if !self.info.supports(display, mode) {
            return Err(Error::Inval);
        }
        for (reg, v) in mode_sequence(mode) {
            self.machine.mmio_write(reg, v)?;
        }
        Ok(())
    }

    fn present(&mut self, client: ClientId, id: BufferId) -> Result<()> {
        self.syscall();
        let b = self.owned(client, id)?;
        let da = self.da(&b).ok_or(Error::BadHandle)?;
        self.machine.mmio_write(FB_BASE, da)
    }

    fn info(&mut self, client: ClientId) -> Result<InfoPage> {
        self.syscall();
        self.client(client)?;
        let info = self.info.clone();
        self.copy_in(info.to_bytes().len() as u64);
        Ok(info)
    }

    fn map(&mut self, client: ClientId, _id: BufferId) -> Result<u32> {
        self.syscall();
        self.client(client)?;
        Err(Error::NoSys)
    }
}

impl LegacyDriver {
    fn release(&mut self, id: BufferId) {
        if let Some(b) = self.buffers.remove(&id) {
            match b.placement {
                Placement::Vram => {
                    self.vram.release(b.addr, b.size);
                }
                _ => {
                    self.pool.free(b.addr, b.size);
                }
            }
        }
    }
}
