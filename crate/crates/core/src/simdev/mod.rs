//! Bit-exact simulated accelerator.
//!
//! The device owns its register file, device memory (VRAM), built-in IOMMU,
//! write-back cache and command processor. System memory and the system
//! IOMMU belong to the platform and are lent to the device per call through
//! [`HostBus`].
//!
//! Device address map:
//!
//! * `[0x0000_0000, 0x1000_0000)`: VRAM window, relocated by
//!   `MC_SEG_BASE` and bounded by `MC_SEG_LIMIT`.
//! * `[0x8000_0000, 0xC000_0000)`: system aperture, translated by the
//!   built-in IOMMU when `IOMMU_ENABLE = 1`, otherwise by the system IOMMU.
//! * anything else faults with `MC_FAULT`.

mod cache;
mod display;
pub mod isa;
pub mod regs;

use std::hash::Hasher;

use bitflags::bitflags;

pub use cache::{PhysLoc, WriteBackCache, DEFAULT_CACHE_WORDS};
pub use display::{digest_words, mode_sequence, DisplayMode, Frame};
pub use isa::{ComputeOp, Instruction};

use crate::error::{Error, Result};
use crate::iommu::{in_aperture, Iommu, DEFAULT_TLB_ENTRIES};
use crate::platform::{SystemMemory, PAGE_SIZE};
use regs::*;

pub const VRAM_WINDOW_END: u32 = 0x1000_0000;
pub const DEFAULT_VRAM_BYTES: u32 = 16 << 20;

/// Status page layout (byte offsets from `IH_PAGE_ADDR`).
pub const STATUS_SEQ: u32 = 0;
pub const STATUS_IRQ_COUNT: u32 = 8;
pub const STATUS_FLAGS: u32 = 12;

/// Firmware words must sum (wrapping) to this value.
pub const FW_CHECKSUM: u32 = 0x600D_F00D;
const FW_MAX_WORDS: u32 = 4096;

bitflags! {
    /// Interrupt / pending-flag bits as laid out in the status page.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct IrqFlags: u32 {
        const FENCE = 1 << 0;
        const CMD_FAULT = 1 << 1;
        const IOMMU_FAULT = 1 << 2;
        const MC_FAULT = 1 << 3;
    }
}

impl IrqFlags {
    pub const FAULTS: IrqFlags = IrqFlags::CMD_FAULT
        .union(IrqFlags::IOMMU_FAULT)
        .union(IrqFlags::MC_FAULT);
}

/// A deterministic firmware blob whose words checksum to [`FW_CHECKSUM`].
pub fn firmware_image() -> Vec<u32> {
    let mut words: Vec<u32> = (0..63u32)
        .map(|i| i.wrapping_mul(0x9E37_79B9).rotate_left(i % 32))
        .collect();
    let sum = words.iter().fold(0u32, |a, w| a.wrapping_add(*w));
    words.push(FW_CHECKSUM.wrapping_sub(sum));
    words
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceConfig {
    pub vram_bytes: u32,
    pub tlb_entries: usize,
    pub cache_words: usize,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            vram_bytes: DEFAULT_VRAM_BYTES,
            tlb_entries: DEFAULT_TLB_ENTRIES,
            cache_words: DEFAULT_CACHE_WORDS,
        }
    }
}

/// Host resources the device reaches through the system aperture.
pub struct HostBus<'a> {
    pub mem: &'a mut SystemMemory,
    pub system_iommu: &'a mut Iommu,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecReport {
    pub cycles_used: u64,
    pub interrupts_raised: Vec<IrqFlags>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeviceCounters {
    pub tlb_flushes: u64,
    pub cache_flushes: u64,
    pub instructions: u64,
    pub faults: u64,
    /// Interrupts whose status-page update could not be translated.
    pub lost_interrupts: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct InFlight {
    instr: Instruction,
    len_bytes: u32,
    remaining: u64,
}

#[derive(Debug, Clone)]
pub struct Scanout {
    pub frame: Frame,
    pub fault: Option<IrqFlags>,
}

#[derive(Debug, Clone)]
pub struct DeviceState {
    cfg: DeviceConfig,
    regs: [u32; REGISTER_MAP.len()],
    vram: Vec<u8>,
    iommu: Iommu,
    cache: WriteBackCache,
    inflight: Option<InFlight>,
    fw_words: Vec<u32>,
    last_fence_seq: u64,
    pending_irqs: Vec<IrqFlags>,
    pub counters: DeviceCounters,
    last_fault: Option<IrqFlags>,
}

impl DeviceState {
    pub fn new(cfg: DeviceConfig) -> Self {
        Self {
            cfg,
            regs: [0; REGISTER_MAP.len()],
            vram: vec![0; cfg.vram_bytes as usize],
            iommu: Iommu::new(cfg.tlb_entries),
            cache: WriteBackCache::new(cfg.cache_words),
            inflight: None,
            fw_words: Vec::new(),
            last_fence_seq: 0,
            pending_irqs: Vec::new(),
            counters: DeviceCounters::default(),
            last_fault: None,
        }
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.cfg
    }

    fn reg(&self, offset: u32) -> u32 {
        self.regs[index_of(offset).expect("register in map")]
    }

    fn set_reg(&mut self, offset: u32, value: u32) {
        self.regs[index_of(offset).expect("register in map")] = value;
    }

    pub fn mmio_read(&self, offset: u32) -> Result<u32> {
        let i = index_of(offset).ok_or(Error::RegFault(offset))?;
        Ok(self.regs[i])
    }

    pub fn mmio_write(&mut self, bus: &mut HostBus<'_>, offset: u32, value: u32) -> Result<()> {
        index_of(offset).ok_or(Error::RegFault(offset))?;
        match offset {
            RB_SIZE => {
                let ok = value == 0 || (value.is_power_of_two() && (16..=1 << 20).contains(&value));
                if !ok {
                    return Err(Error::RegFault(offset));
                }
                self.set_reg(RB_SIZE, value);
            }
            RB_TAIL => self.write_tail(bus, value),
            CP_RESET => {
                if value != 0 {
                    self.cp_reset();
                }
            }
            TLB_FLUSH => {
                if value != 0 {
                    self.iommu.flush();
                    self.counters.tlb_flushes += 1;
                }
            }
            CACHE_FLUSH => {
                if value != 0 {
                    self.drain_cache(bus.mem);
                    self.counters.cache_flushes += 1;
                }
            }
            IOMMU_ROOT => {
                self.set_reg(IOMMU_ROOT, value);
                self.iommu.set_root(value);
            }
            FW_ADDR => self.set_reg(FW_ADDR, value.min(FW_MAX_WORDS)),
            FW_DATA => {
                let idx = self.reg(FW_ADDR);
                if idx >= FW_MAX_WORDS {
                    return Err(Error::RegFault(offset));
                }
                if self.fw_words.len() <= idx as usize {
                    self.fw_words.resize(idx as usize + 1, 0);
                }
                self.fw_words[idx as usize] = value;
                self.set_reg(FW_ADDR, idx + 1);
            }
            FW_CTRL => {
                let state = match value {
                    FW_CMD_LOAD => {
                        let sum = self.fw_words.iter().fold(0u32, |a, w| a.wrapping_add(*w));
                        if !self.fw_words.is_empty() && sum == FW_CHECKSUM {
                            FW_STATE_READY
                        } else {
                            FW_STATE_BAD
                        }
                    }
                    _ => {
                        self.fw_words.clear();
                        FW_STATE_IDLE
                    }
                };
                self.set_reg(FW_CTRL, state);
            }
            _ => self.set_reg(offset, value),
        }
        Ok(())
    }

    fn ring_bytes(&self) -> u32 {
        self.reg(RB_SIZE) * 4
    }

    fn firmware_ready(&self) -> bool {
        self.reg(FW_CTRL) == FW_STATE_READY
    }

    fn write_tail(&mut self, bus: &mut HostBus<'_>, tail: u32) {
        let head = self.reg(RB_HEAD);
        if tail == head && self.inflight.is_none() {
            self.set_reg(RB_TAIL, tail);
            return;
        }
        let size = self.ring_bytes();
        if !self.firmware_ready() || size == 0 || tail >= size || tail % 4 != 0 {
            // Nothing is fetched; the trigger is rejected.
            self.set_reg(RB_TAIL, head);
            self.fault(bus, IrqFlags::CMD_FAULT);
            return;
        }
        self.set_reg(RB_TAIL, tail);
    }

    fn cp_reset(&mut self) {
        self.set_reg(RB_HEAD, 0);
        self.set_reg(RB_TAIL, 0);
        self.inflight = None;
        self.last_fence_seq = 0;
    }

    /// True while the command processor has fetched or unfetched work.
    pub fn busy(&self) -> bool {
        self.inflight.is_some() || self.reg(RB_HEAD) != self.reg(RB_TAIL)
    }

    pub fn iommu(&self) -> &Iommu {
        &self.iommu
    }

    pub fn cache(&self) -> &WriteBackCache {
        &self.cache
    }

    pub fn last_fault(&self) -> Option<IrqFlags> {
        self.last_fault
    }

    pub fn vram(&self) -> &[u8] {
        &self.vram
    }

    /// Interrupts raised outside `step` (by register writes) and not yet
    /// reported.
    pub fn take_interrupts(&mut self) -> Vec<IrqFlags> {
        std::mem::take(&mut self.pending_irqs)
    }

    /// Translates a device address for one word access.
    pub fn decode_address(
        &mut self,
        bus: &mut HostBus<'_>,
        da: u32,
        is_write: bool,
    ) -> std::result::Result<PhysLoc, IrqFlags> {
        if da % 4 != 0 {
            return Err(IrqFlags::MC_FAULT);
        }
        if da < VRAM_WINDOW_END {
            let loc = self.reg(MC_SEG_BASE) as u64 + da as u64;
            if loc >= self.reg(MC_SEG_LIMIT) as u64 || loc + 4 > self.vram.len() as u64 {
                return Err(IrqFlags::MC_FAULT);
            }
            return Ok(PhysLoc::Vram(loc as u32));
        }
        if in_aperture(da) {
            let r = if self.reg(IOMMU_ENABLE) != 0 {
                self.iommu.translate(bus.mem, da, is_write)
            } else {
                bus.system_iommu.translate(bus.mem, da, is_write)
            };
            return r.map(PhysLoc::Sys).map_err(|_| IrqFlags::IOMMU_FAULT);
        }
        Err(IrqFlags::MC_FAULT)
    }

    /// Translates `count` consecutive words starting at `da`. Aperture pages
    /// are translated once per page.
    fn decode_range(
        &mut self,
        bus: &mut HostBus<'_>,
        da: u32,
        count: u32,
        is_write: bool,
    ) -> std::result::Result<Vec<PhysLoc>, IrqFlags> {
        let mut out = Vec::with_capacity(count as usize);
        let mut page_cache: Option<(u32, u32)> = None;
        for i in 0..count {
            let a = (i as u64)
                .checked_mul(4)
                .and_then(|off| (da as u64).checked_add(off))
                .filter(|a| *a <= u32::MAX as u64)
                .ok_or(IrqFlags::MC_FAULT)? as u32;
            if in_aperture(a) && a % 4 == 0 {
                let page = a & !(PAGE_SIZE - 1);
                if let Some((p, base)) = page_cache {
                    if p == page {
                        out.push(PhysLoc::Sys(base + (a - page)));
                        continue;
                    }
                }
                let loc = self.decode_address(bus, a, is_write)?;
                if let PhysLoc::Sys(phys) = loc {
                    page_cache = Some((page, phys - (a - page)));
                }
                out.push(loc);
            } else {
                out.push(self.decode_address(bus, a, is_write)?);
            }
        }
        Ok(out)
    }

    fn backing_read(&self, mem: &SystemMemory, loc: PhysLoc) -> u32 {
        match loc {
            PhysLoc::Vram(o) => {
                let o = o as usize;
                u32::from_le_bytes(self.vram[o..o + 4].try_into().unwrap())
            }
            PhysLoc::Sys(a) => mem.read_u32(a),
        }
    }

    fn backing_write(&mut self, mem: &mut SystemMemory, loc: PhysLoc, value: u32) {
        match loc {
            PhysLoc::Vram(o) => {
                let o = o as usize;
                self.vram[o..o + 4].copy_from_slice(&value.to_le_bytes());
            }
            PhysLoc::Sys(a) => mem.write_u32(a, value),
        }
    }

    fn read_word(&self, mem: &SystemMemory, loc: PhysLoc) -> u32 {
        self.cache
            .get(loc)
            .unwrap_or_else(|| self.backing_read(mem, loc))
    }

    fn write_word(&mut self, mem: &mut SystemMemory, loc: PhysLoc, value: u32) {
        if let Some((old, v)) = self.cache.put(loc, value) {
            self.backing_write(mem, old, v);
        }
    }

    fn drain_cache(&mut self, mem: &mut SystemMemory) {
        for (loc, v) in self.cache.drain() {
            self.backing_write(mem, loc, v);
        }
    }

    /// Runs the command processor for at most `budget` cycles.
    pub fn step(&mut self, bus: &mut HostBus<'_>, budget: u64) -> ExecReport {
        let mut report = ExecReport {
            cycles_used: 0,
            interrupts_raised: self.take_interrupts(),
        };
        let mut left = budget;
        while left > 0 {
            if self.inflight.is_none() {
                if !self.busy() {
                    break;
                }
                match self.fetch(bus) {
                    Ok(f) => self.inflight = Some(f),
                    Err(kind) => {
                        left -= 1;
                        report.cycles_used += 1;
                        self.fault(bus, kind);
                        continue;
                    }
                }
            }
            let f = self.inflight.as_mut().unwrap();
            let take = left.min(f.remaining);
            f.remaining -= take;
            left -= take;
            report.cycles_used += take;
            if f.remaining == 0 {
                let f = self.inflight.take().unwrap();
                let size = self.ring_bytes().max(4);
                self.set_reg(RB_HEAD, (self.reg(RB_HEAD) + f.len_bytes) % size);
                self.counters.instructions += 1;
                if let Err(kind) = self.execute(bus, f.instr) {
                    self.fault(bus, kind);
                }
            }
        }
        report.interrupts_raised.extend(self.take_interrupts());
        report
    }

    fn ring_word(&mut self, bus: &mut HostBus<'_>, byte_off: u32) -> std::result::Result<u32, IrqFlags> {
        let size = self.ring_bytes();
        let da = self.reg(RB_BASE).wrapping_add(byte_off % size);
        let loc = self.decode_address(bus, da, false)?;
        Ok(self.read_word(bus.mem, loc))
    }

    fn fetch(&mut self, bus: &mut HostBus<'_>) -> std::result::Result<InFlight, IrqFlags> {
        let size = self.ring_bytes();
        let head = self.reg(RB_HEAD);
        let tail = self.reg(RB_TAIL);
        if !self.firmware_ready() || size == 0 || head >= size || head % 4 != 0 {
            return Err(IrqFlags::CMD_FAULT);
        }
        let avail = ((tail + size - head) % size / 4) as usize;
        let first = self.ring_word(bus, head)?;
        let len = isa::length_of(first).ok_or(IrqFlags::CMD_FAULT)?;
        if len > avail {
            return Err(IrqFlags::CMD_FAULT);
        }
        let mut words = vec![first];
        for k in 1..len as u32 {
            words.push(self.ring_word(bus, head + 4 * k)?);
        }
        let instr = Instruction::decode(&words).map_err(|_| IrqFlags::CMD_FAULT)?;
        Ok(InFlight {
            instr,
            len_bytes: 4 * len as u32,
            remaining: instr.cycles(),
        })
    }

    fn execute(&mut self, bus: &mut HostBus<'_>, instr: Instruction) -> std::result::Result<(), IrqFlags> {
        match instr {
            Instruction::Nop => Ok(()),
            Instruction::SetReg { reg, value } => {
                if !is_scratch(reg) {
                    return Err(IrqFlags::CMD_FAULT);
                }
                self.set_reg(reg, value);
                Ok(())
            }
            Instruction::Compute {
                op,
                dst,
                src1,
                src2,
                count,
            } => {
                // Translate everything before touching memory so a fault has
                // no partial effect.
                let a = self.decode_range(bus, src1, count, false)?;
                let b = self.decode_range(bus, src2, count, false)?;
                let d_len = if op == ComputeOp::Dot { 1 } else { count };
                let d = self.decode_range(bus, dst, d_len, true)?;
                let av: Vec<u32> = a.iter().map(|l| self.read_word(bus.mem, *l)).collect();
                let bv: Vec<u32> = b.iter().map(|l| self.read_word(bus.mem, *l)).collect();
                let results: Vec<u32> = match op {
                    ComputeOp::Add => av.iter().zip(&bv).map(|(x, y)| x.wrapping_add(*y)).collect(),
                    ComputeOp::Mul => av.iter().zip(&bv).map(|(x, y)| x.wrapping_mul(*y)).collect(),
                    ComputeOp::Dot => vec![av
                        .iter()
                        .zip(&bv)
                        .fold(0u32, |acc, (x, y)| acc.wrapping_add(x.wrapping_mul(*y)))],
                };
                for (loc, v) in d.into_iter().zip(results) {
                    self.write_word(bus.mem, loc, v);
                }
                Ok(())
            }
            Instruction::Copy { dst, src, count } => {
                let s = self.decode_range(bus, src, count, false)?;
                let d = self.decode_range(bus, dst, count, true)?;
                let vals: Vec<u32> = s.iter().map(|l| self.read_word(bus.mem, *l)).collect();
                for (loc, v) in d.into_iter().zip(vals) {
                    self.write_word(bus.mem, loc, v);
                }
                Ok(())
            }
            Instruction::Fence { seq, irq } => {
                self.drain_cache(bus.mem);
                let flag = if irq { IrqFlags::FENCE } else { IrqFlags::empty() };
                self.post_status(bus, flag, Some(seq));
                Ok(())
            }
        }
    }

    /// Halts the current batch and records `kind` on the status page.
    fn fault(&mut self, bus: &mut HostBus<'_>, kind: IrqFlags) {
        self.inflight = None;
        let tail = self.reg(RB_TAIL);
        self.set_reg(RB_HEAD, tail);
        self.counters.faults += 1;
        self.last_fault = Some(kind);
        self.drain_cache(bus.mem);
        self.post_status(bus, kind, None);
    }

    /// Updates the status page through the normal translation path. The
    /// cache is drained by the caller first, so these stores go straight
    /// to memory.
    fn post_status(&mut self, bus: &mut HostBus<'_>, flags: IrqFlags, seq: Option<u64>) {
        let ih = self.reg(IH_PAGE_ADDR);
        let mut locs = [PhysLoc::Vram(0); 4];
        for (k, slot) in locs.iter_mut().enumerate() {
            match ih
                .checked_add(4 * k as u32)
                .ok_or(IrqFlags::MC_FAULT)
                .and_then(|a| self.decode_address(bus, a, true))
            {
                Ok(l) => *slot = l,
                Err(_) => {
                    self.counters.lost_interrupts += 1;
                    return;
                }
            }
        }
        if let Some(seq) = seq {
            let seq = seq.max(self.last_fence_seq);
            self.last_fence_seq = seq;
            self.backing_write(bus.mem, locs[0], seq as u32);
            self.backing_write(bus.mem, locs[1], (seq >> 32) as u32);
        }
        if flags.is_empty() {
            return;
        }
        if self.reg(IRQ_ENABLE) != 0 {
            let count = self.backing_read(bus.mem, locs[2]).wrapping_add(1);
            self.backing_write(bus.mem, locs[2], count);
            self.pending_irqs.push(flags);
        }
        let pending = self.backing_read(bus.mem, locs[3]) | flags.bits();
        self.backing_write(bus.mem, locs[3], pending);
    }

    /// Reads the programmed mode's pixels from `FB_BASE`. Scanout sees only
    /// flushed memory.
    pub fn scanout(&mut self, bus: &mut HostBus<'_>) -> Result<Scanout> {
        let (w, h) = (self.reg(DISP_TIMING_H), self.reg(DISP_TIMING_V));
        if self.reg(DISP_ENABLE) == 0 || w == 0 || h == 0 {
            return Err(Error::Inval);
        }
        let n = w * h;
        match self.decode_range(bus, self.reg(FB_BASE), n, false) {
            Ok(locs) => {
                let pixels = locs.iter().map(|l| self.backing_read(bus.mem, *l)).collect();
                Ok(Scanout {
                    frame: Frame::new(w, h, pixels),
                    fault: None,
                })
            }
            Err(kind) => {
                self.counters.faults += 1;
                self.last_fault = Some(kind);
                self.post_status(bus, kind, None);
                Ok(Scanout {
                    frame: Frame::new(w, h, vec![0; n as usize]),
                    fault: Some(kind),
                })
            }
        }
    }

    /// FNV-1a 64 over registers (offset order), device memory, then command
    /// processor state.
    pub fn digest(&self) -> u64 {
        let mut h = fnv::FnvHasher::default();
        for r in &self.regs {
            h.write(&r.to_le_bytes());
        }
        h.write(&self.vram);
        match self.inflight {
            Some(f) => {
                let mut w = vec![1u32, f.len_bytes];
                f.instr.encode(&mut w);
                w.extend([f.remaining as u32, (f.remaining >> 32) as u32]);
                for x in w {
                    h.write(&x.to_le_bytes());
                }
            }
            None => h.write(&0u32.to_le_bytes()),
        }
        h.write(&self.last_fence_seq.to_le_bytes());
        for w in &self.fw_words {
            h.write(&w.to_le_bytes());
        }
        for (loc, v) in self.cache.entries() {
            let (tag, a) = match loc {
                PhysLoc::Vram(a) => (0u32, a),
                PhysLoc::Sys(a) => (1u32, a),
            };
            for x in [tag, a, v] {
                h.write(&x.to_le_bytes());
            }
        }
        h.finish()
    }
}
