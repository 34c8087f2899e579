//! The per-application library driver.
//!
//! Everything here runs in the application's own trust domain. The library
//! owns a pool of pages that it maps into its IOMMU table once at launch,
//! writes instructions straight into its own ring, and learns about
//! completion by reading the status page the device updates. The only way
//! it reaches the device is the [`AppPort`] handed in by the caller.
//!
//! Pool layout (page indices, mapped consecutively from the aperture base):
//!
//! | page | use |
//! |------|-----|
//! | 0 | status page |
//! | 1..=4 | ring, 4096 words |
//! | 5 | staging for device-memory transfers |
//! | 6.. | slab-managed buffers |

mod slab;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

pub use slab::{size_class, SlabPool, SIZE_CLASSES};

use crate::devcore::{AppPort, InfoPage, LibId};
use crate::error::{Error, Result};
use crate::iommu::APERTURE_BASE;
use crate::platform::PAGE_SIZE;
use crate::simdev::isa::{self, Instruction};
use crate::simdev::regs::{FB_BASE, IH_PAGE_ADDR, RB_BASE, RB_SIZE, RB_TAIL};
use crate::simdev::{DisplayMode, IrqFlags, STATUS_FLAGS, STATUS_SEQ};

pub const DEFAULT_POOL_PAGES: u32 = 256;
pub const DEFAULT_POLL_QUANTUM: u64 = 4096;

pub const STATUS_PAGE: u32 = 0;
pub const RING_PAGE: u32 = 1;
pub const RING_PAGES: u32 = 4;
pub const STAGING_PAGE: u32 = 5;
pub const FIXED_PAGES: u32 = 6;
pub const RING_WORDS: u32 = RING_PAGES * PAGE_SIZE / 4;

const RING_BYTES: u32 = RING_WORDS * 4;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Vram,
    Gtt,
    Sys,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct BufferHandle(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Backing {
    Vram(u32),
    /// Byte offset into the slab region of the pool.
    Pool(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Buffer {
    pub handle: BufferHandle,
    pub placement: Placement,
    pub size: u32,
    backing: Backing,
}

/// A zero-copy host view of a GTT or SYS buffer: `len` bytes at `vaddr` in
/// the application's address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostView {
    pub vaddr: u32,
    pub len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LibConfig {
    pub pool_pages: u32,
    pub poll_quantum: u64,
}

impl Default for LibConfig {
    fn default() -> Self {
        Self {
            pool_pages: DEFAULT_POOL_PAGES,
            poll_quantum: DEFAULT_POLL_QUANTUM,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LibDriver {
    lib: LibId,
    info: InfoPage,
    cfg: LibConfig,
    pool_vaddr: u32,
    slab: SlabPool,
    buffers: BTreeMap<BufferHandle, Buffer>,
    next_handle: u32,
    ring_ready: bool,
    tail: u32,
    /// Ring offset the device has certainly consumed up to.
    head_seen: u32,
    /// (seq, ring offset just past the batch) for batches not yet retired.
    outstanding: VecDeque<(u64, u32)>,
    next_seq: u64,
    completed: u64,
    faulted_upto: u64,
    last_fault: IrqFlags,
}

impl LibDriver {
    /// Launches the library: registers with the core and maps the whole
    /// pool. Costs `pool_pages + 1` crossings when the pool comes from the
    /// process's launch reservation.
    pub fn init(port: &mut AppPort<'_>, cfg: LibConfig) -> Result<Self> {
        if cfg.pool_pages <= FIXED_PAGES {
            return Err(Error::Config(format!(
                "pool must exceed {FIXED_PAGES} pages, got {}",
                cfg.pool_pages
            )));
        }
        let (lib, info) = port.init_device_lib()?;
        let vaddrs = if port.reserved_pages() >= cfg.pool_pages {
            port.take_reserved(cfg.pool_pages)
        } else {
            port.alloc_pages(cfg.pool_pages)?
        };
        for (i, v) in vaddrs.iter().enumerate() {
            port.iommu_map_page(lib, *v, APERTURE_BASE + i as u32 * PAGE_SIZE)?;
        }
        Ok(Self {
            lib,
            info,
            cfg,
            pool_vaddr: vaddrs[0],
            slab: SlabPool::new(cfg.pool_pages - FIXED_PAGES),
            buffers: BTreeMap::new(),
            next_handle: 1,
            ring_ready: false,
            tail: 0,
            head_seen: 0,
            outstanding: VecDeque::new(),
            next_seq: 1,
            completed: 0,
            faulted_upto: 0,
            last_fault: IrqFlags::empty(),
        })
    }

    pub fn id(&self) -> LibId {
        self.lib
    }

    pub fn info(&self) -> &InfoPage {
        &self.info
    }

    pub fn config(&self) -> &LibConfig {
        &self.cfg
    }

    fn page_vaddr(&self, page: u32) -> u32 {
        self.pool_vaddr + page * PAGE_SIZE
    }

    fn page_da(page: u32) -> u32 {
        APERTURE_BASE + page * PAGE_SIZE
    }

    pub fn status_vaddr(&self) -> u32 {
        self.page_vaddr(STATUS_PAGE)
    }

    fn buffer(&self, h: BufferHandle) -> Result<&Buffer> {
        self.buffers.get(&h).ok_or(Error::BadHandle)
    }

    pub fn buffers(&self) -> impl Iterator<Item = &Buffer> {
        self.buffers.values()
    }

    pub fn slab(&self) -> &SlabPool {
        &self.slab
    }

    /// Device address of a VRAM or GTT buffer.
    pub fn device_address(&self, h: BufferHandle) -> Result<u32> {
        self.backing_da(self.buffer(h)?).ok_or(Error::BadHandle)
    }

    fn allocate(&mut self, port: &mut AppPort<'_>, size: u32, placement: Placement) -> Result<Backing> {
        if size == 0 {
            return Err(Error::Inval);
        }
        match placement {
            Placement::Vram => Ok(Backing::Vram(port.alloc_device_memory(self.lib, size)?)),
            Placement::Gtt | Placement::Sys => {
                self.slab.alloc(size).map(Backing::Pool).ok_or(Error::OutOfPool)
            }
        }
    }

    fn release(&mut self, port: &mut AppPort<'_>, backing: Backing, size: u32) -> Result<()> {
        match backing {
            Backing::Vram(a) => port.release_device_memory(self.lib, a, size),
            Backing::Pool(off) => {
                self.slab.free(off, size);
                Ok(())
            }
        }
    }

    pub fn create_buffer(
        &mut self,
        port: &mut AppPort<'_>,
        size: u32,
        placement: Placement,
    ) -> Result<BufferHandle> {
        let backing = self.allocate(port, size, placement)?;
        let handle = BufferHandle(self.next_handle);
        self.next_handle += 1;
        self.buffers.insert(
            handle,
            Buffer {
                handle,
                placement,
                size,
                backing,
            },
        );
        Ok(handle)
    }

    pub fn destroy_buffer(&mut self, port: &mut AppPort<'_>, h: BufferHandle) -> Result<()> {
        let b = self.buffers.remove(&h).ok_or(Error::BadHandle)?;
        self.release(port, b.backing, b.size)
    }

    /// Host view of a GTT or SYS buffer. VRAM has no host view.
    pub fn map_buffer(&self, h: BufferHandle) -> Result<HostView> {
        let b = self.buffer(h)?;
        match b.backing {
            Backing::Pool(off) => Ok(HostView {
                vaddr: self.page_vaddr(FIXED_PAGES) + off,
                len: b.size,
            }),
            Backing::Vram(_) => Err(Error::BadHandle),
        }
    }

    fn check_range(b: &Buffer, offset: u32, len: usize) -> Result<()> {
        let end = (offset as u64) + len as u64;
        if end > b.size as u64 {
            return Err(Error::Range);
        }
        Ok(())
    }

    pub fn write_buffer(
        &mut self,
        port: &mut AppPort<'_>,
        h: BufferHandle,
        offset: u32,
        data: &[u8],
    ) -> Result<()> {
        let b = self.buffer(h)?.clone();
        Self::check_range(&b, offset, data.len())?;
        match b.backing {
            Backing::Pool(_) => {
                let v = self.map_buffer(h)?.vaddr;
                port.write(v + offset, data)
            }
            Backing::Vram(addr) => self.vram_write(port, addr + offset, data),
        }
    }

    pub fn read_buffer(
        &mut self,
        port: &mut AppPort<'_>,
        h: BufferHandle,
        offset: u32,
        len: u32,
    ) -> Result<Vec<u8>> {
        let b = self.buffer(h)?.clone();
        Self::check_range(&b, offset, len as usize)?;
        match b.backing {
            Backing::Pool(_) => {
                let v = self.map_buffer(h)?.vaddr;
                let mut out = vec![0; len as usize];
                port.read(v + offset, &mut out)?;
                Ok(out)
            }
            Backing::Vram(addr) => self.vram_read(port, addr + offset, len),
        }
    }

    pub fn write_words(
        &mut self,
        port: &mut AppPort<'_>,
        h: BufferHandle,
        word_offset: u32,
        words: &[u32],
    ) -> Result<()> {
        let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        self.write_buffer(port, h, word_offset * 4, &bytes)
    }

    pub fn read_words(
        &mut self,
        port: &mut AppPort<'_>,
        h: BufferHandle,
        word_offset: u32,
        count: u32,
    ) -> Result<Vec<u32>> {
        let bytes = self.read_buffer(port, h, word_offset * 4, count * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn vram_write(&mut self, port: &mut AppPort<'_>, da: u32, data: &[u8]) -> Result<()> {
        if da % 4 != 0 || data.len() % 4 != 0 {
            return Err(Error::Inval);
        }
        let staging_v = self.page_vaddr(STAGING_PAGE);
        for (k, chunk) in data.chunks(PAGE_SIZE as usize).enumerate() {
            port.write(staging_v, chunk)?;
            let seq = self.submit(
                port,
                &[Instruction::Copy {
                    dst: da + k as u32 * PAGE_SIZE,
                    src: Self::page_da(STAGING_PAGE),
                    count: chunk.len() as u32 / 4,
                }],
            )?;
            self.wait_fence(port, seq)?;
        }
        Ok(())
    }

    fn vram_read(&mut self, port: &mut AppPort<'_>, da: u32, len: u32) -> Result<Vec<u8>> {
        if da % 4 != 0 || len % 4 != 0 {
            return Err(Error::Inval);
        }
        let staging_v = self.page_vaddr(STAGING_PAGE);
        let mut out = vec![0u8; len as usize];
        for (k, chunk) in out.chunks_mut(PAGE_SIZE as usize).enumerate() {
            let seq = self.submit(
                port,
                &[Instruction::Copy {
                    dst: Self::page_da(STAGING_PAGE),
                    src: da + k as u32 * PAGE_SIZE,
                    count: chunk.len() as u32 / 4,
                }],
            )?;
            self.wait_fence(port, seq)?;
            port.read(staging_v, chunk)?;
        }
        Ok(out)
    }

    /// Changes a buffer's placement, preserving contents. On failure the
    /// source buffer is left as it was.
    pub fn move_buffer(
        &mut self,
        port: &mut AppPort<'_>,
        h: BufferHandle,
        to: Placement,
    ) -> Result<()> {
        let old = self.buffer(h)?.clone();
        if old.placement == to {
            return Ok(());
        }
        let moved = Buffer {
            placement: to,
            backing: self.allocate(port, old.size, to)?,
            ..old.clone()
        };
        match self.copy_contents(port, &old, &moved) {
            Ok(()) => {
                self.buffers.insert(h, moved);
                self.release(port, old.backing, old.size)
            }
            Err(e) => {
                self.release(port, moved.backing, moved.size)?;
                Err(e)
            }
        }
    }

    fn backing_da(&self, b: &Buffer) -> Option<u32> {
        match (b.placement, b.backing) {
            (Placement::Vram, Backing::Vram(a)) => Some(a),
            (Placement::Gtt, Backing::Pool(off)) => Some(Self::page_da(FIXED_PAGES) + off),
            _ => None,
        }
    }

    fn copy_contents(&mut self, port: &mut AppPort<'_>, src: &Buffer, dst: &Buffer) -> Result<()> {
        let words = src.size.div_ceil(4);
        if let (Some(s), Some(d)) = (self.backing_da(src), self.backing_da(dst)) {
            let seq = self.submit(port, &[Instruction::Copy { dst: d, src: s, count: words }])?;
            return self.wait_fence(port, seq);
        }
        let mut data = match src.backing {
            Backing::Vram(a) => self.vram_read(port, a, words * 4)?,
            Backing::Pool(off) => {
                let mut out = vec![0; src.size as usize];
                port.read(self.page_vaddr(FIXED_PAGES) + off, &mut out)?;
                out
            }
        };
        match dst.backing {
            Backing::Vram(a) => {
                data.resize((words * 4) as usize, 0);
                self.vram_write(port, a, &data)
            }
            Backing::Pool(off) => {
                port.write(self.page_vaddr(FIXED_PAGES) + off, &data[..src.size as usize])
            }
        }
    }

    fn ensure_ring(&mut self, port: &mut AppPort<'_>) -> Result<()> {
        if !self.ring_ready {
            port.access_register(self.lib, RB_BASE, Self::page_da(RING_PAGE), true)?;
            port.access_register(self.lib, RB_SIZE, RING_WORDS, true)?;
            port.access_register(self.lib, IH_PAGE_ADDR, Self::page_da(STATUS_PAGE), true)?;
            self.ring_ready = true;
        }
        Ok(())
    }

    fn ring_free_words(&self) -> u32 {
        let used = (self.tail + RING_BYTES - self.head_seen) % RING_BYTES / 4;
        RING_WORDS - 1 - used
    }

    /// Writes `instrs` plus a trailing fence into the ring and triggers
    /// them with a single register write. Returns the fence sequence.
    pub fn submit(&mut self, port: &mut AppPort<'_>, instrs: &[Instruction]) -> Result<u64> {
        let seq = self.next_seq;
        let mut words = isa::encode_all(instrs);
        Instruction::Fence { seq, irq: true }.encode(&mut words);
        let n = words.len() as u32;
        if n > RING_WORDS - 1 {
            return Err(Error::BatchTooBig);
        }
        self.ensure_ring(port)?;
        self.refresh(port)?;
        while self.ring_free_words() < n {
            let (oldest, _) = *self.outstanding.front().ok_or(Error::Stalled)?;
            self.wait_fence(port, oldest)?;
        }
        let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        let first = ((RING_BYTES - self.tail) as usize).min(bytes.len());
        let ring_v = self.page_vaddr(RING_PAGE);
        port.write(ring_v + self.tail, &bytes[..first])?;
        if first < bytes.len() {
            port.write(ring_v, &bytes[first..])?;
        }
        self.tail = (self.tail + 4 * n) % RING_BYTES;
        port.access_register(self.lib, RB_TAIL, self.tail, true)?;
        self.outstanding.push_back((seq, self.tail));
        self.next_seq += 1;
        Ok(seq)
    }

    /// Reads the status page and retires completed batches. Fault flags are
    /// consumed here: every batch in flight when the device halted is
    /// marked as faulted.
    fn refresh(&mut self, port: &mut AppPort<'_>) -> Result<()> {
        let sv = self.status_vaddr();
        let lo = port.read_u32(sv + STATUS_SEQ)? as u64;
        let hi = port.read_u32(sv + STATUS_SEQ + 4)? as u64;
        self.completed = self.completed.max(lo | (hi << 32));
        let flags = IrqFlags::from_bits_truncate(port.read_u32(sv + STATUS_FLAGS)?);
        let faults = flags & IrqFlags::FAULTS;
        if !faults.is_empty() {
            port.write_u32(sv + STATUS_FLAGS, (flags - IrqFlags::FAULTS).bits())?;
            self.faulted_upto = self.next_seq - 1;
            self.last_fault = faults;
            self.outstanding.clear();
            self.head_seen = self.tail;
        }
        while let Some(&(s, end)) = self.outstanding.front() {
            if s > self.completed {
                break;
            }
            self.head_seen = end;
            self.outstanding.pop_front();
        }
        Ok(())
    }

    /// Non-blocking completion check.
    pub fn poll_fence(&mut self, port: &mut AppPort<'_>, seq: u64) -> Result<bool> {
        if seq <= self.completed {
            return Ok(true);
        }
        self.refresh(port)?;
        if seq <= self.completed {
            Ok(true)
        } else if seq <= self.faulted_upto {
            Err(Error::DeviceFault(self.last_fault))
        } else {
            Ok(false)
        }
    }

    /// Polls the status page, letting the device run between polls. No
    /// crossings on this path.
    pub fn wait_fence(&mut self, port: &mut AppPort<'_>, seq: u64) -> Result<()> {
        loop {
            if self.poll_fence(port, seq)? {
                return Ok(());
            }
            port.record_poll_round();
            if port.advance(self.cfg.poll_quantum) == 0 {
                return if self.poll_fence(port, seq)? {
                    Ok(())
                } else {
                    Err(Error::Stalled)
                };
            }
        }
    }

    pub fn last_submitted(&self) -> u64 {
        self.next_seq - 1
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    /// Points scanout at a VRAM or GTT buffer.
    pub fn present(&mut self, port: &mut AppPort<'_>, h: BufferHandle) -> Result<()> {
        let da = self.device_address(h)?;
        port.access_register(self.lib, FB_BASE, da, true)?;
        Ok(())
    }

    pub fn set_mode(&mut self, port: &mut AppPort<'_>, display: u32, mode: DisplayMode) -> Result<()> {
        port.set_mode(self.lib, display, mode)
    }
}

#[cfg(test)]
mod tests;
