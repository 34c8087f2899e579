//! Two-level I/O page tables and the translation unit shared by the
//! device's built-in IOMMU and the platform's system IOMMU.
//!
//! Tables live in system memory. A table is identified by the physical
//! byte address of its first-level page. Entry format (one 32-bit word):
//!
//! ```text
//!  31                        12 11          2   1   0
//! +----------------------------+-------------+---+---+
//! |   physical frame number    |  reserved   | W | V |
//! +----------------------------+-------------+---+---+
//! ```
//!
//! First-level entries point at second-level pages; only the leaf
//! `WRITABLE` bit is checked on writes.

use std::collections::{HashMap, VecDeque};

use crate::platform::{SystemMemory, PAGE_SIZE};

pub const APERTURE_BASE: u32 = 0x8000_0000;
pub const APERTURE_END: u32 = 0xC000_0000;
pub const DEFAULT_TLB_ENTRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pte(pub u32);

impl Pte {
    pub const VALID: u32 = 1 << 0;
    pub const WRITABLE: u32 = 1 << 1;

    pub fn new(frame: u32, writable: bool) -> Self {
        let mut v = (frame << 12) | Self::VALID;
        if writable {
            v |= Self::WRITABLE;
        }
        Pte(v)
    }

    pub fn valid(self) -> bool {
        self.0 & Self::VALID != 0
    }

    pub fn writable(self) -> bool {
        self.0 & Self::WRITABLE != 0
    }

    pub fn frame(self) -> u32 {
        self.0 >> 12
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IommuFault {
    NoRoot,
    OutOfAperture(u32),
    NotPresent(u32),
    ReadOnly(u32),
}

pub fn in_aperture(iaddr: u32) -> bool {
    (APERTURE_BASE..APERTURE_END).contains(&iaddr)
}

fn indices(iaddr: u32) -> (u32, u32) {
    let off = iaddr - APERTURE_BASE;
    ((off >> 22) & 0x3FF, (off >> 12) & 0x3FF)
}

/// Aperture page number of `iaddr`, used as the TLB tag.
fn page_number(iaddr: u32) -> u32 {
    (iaddr - APERTURE_BASE) >> 12
}

/// Full two-level walk. Returns the leaf entry.
pub fn walk(
    mem: &SystemMemory,
    root: u32,
    iaddr: u32,
    is_write: bool,
) -> Result<Pte, IommuFault> {
    if root == 0 {
        return Err(IommuFault::NoRoot);
    }
    if !in_aperture(iaddr) {
        return Err(IommuFault::OutOfAperture(iaddr));
    }
    let (i1, i2) = indices(iaddr);
    let l1 = Pte(mem.read_u32(root + i1 * 4));
    if !l1.valid() {
        return Err(IommuFault::NotPresent(iaddr));
    }
    let leaf = Pte(mem.read_u32(l1.frame() * PAGE_SIZE + i2 * 4));
    if !leaf.valid() {
        return Err(IommuFault::NotPresent(iaddr));
    }
    if is_write && !leaf.writable() {
        return Err(IommuFault::ReadOnly(iaddr));
    }
    Ok(leaf)
}

/// Physical byte address for `iaddr` by always walking the table.
pub fn translate_by_walk(
    mem: &SystemMemory,
    root: u32,
    iaddr: u32,
    is_write: bool,
) -> Result<u32, IommuFault> {
    walk(mem, root, iaddr, is_write).map(|pte| pte.frame() * PAGE_SIZE + (iaddr & 0xFFF))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableError {
    OutOfAperture,
    Misaligned,
    Exists,
    NoMemory,
}

/// Installs a leaf mapping `iaddr -> frame`. Second-level pages are obtained
/// from `alloc_l2` on demand and must come back zeroed.
pub fn table_map(
    mem: &mut SystemMemory,
    root: u32,
    iaddr: u32,
    frame: u32,
    writable: bool,
    mut alloc_l2: impl FnMut(&mut SystemMemory) -> Option<u32>,
) -> Result<(), TableError> {
    if iaddr % PAGE_SIZE != 0 {
        return Err(TableError::Misaligned);
    }
    if !in_aperture(iaddr) {
        return Err(TableError::OutOfAperture);
    }
    let (i1, i2) = indices(iaddr);
    let l1_addr = root + i1 * 4;
    let mut l1 = Pte(mem.read_u32(l1_addr));
    if !l1.valid() {
        let l2 = alloc_l2(mem).ok_or(TableError::NoMemory)?;
        l1 = Pte::new(l2, true);
        mem.write_u32(l1_addr, l1.0);
    }
    let leaf_addr = l1.frame() * PAGE_SIZE + i2 * 4;
    if Pte(mem.read_u32(leaf_addr)).valid() {
        return Err(TableError::Exists);
    }
    mem.write_u32(leaf_addr, Pte::new(frame, writable).0);
    Ok(())
}

/// Clears the leaf for `iaddr`; returns the frame it pointed at.
pub fn table_unmap(mem: &mut SystemMemory, root: u32, iaddr: u32) -> Option<u32> {
    if !in_aperture(iaddr) {
        return None;
    }
    let (i1, i2) = indices(iaddr);
    let l1 = Pte(mem.read_u32(root + i1 * 4));
    if !l1.valid() {
        return None;
    }
    let leaf_addr = l1.frame() * PAGE_SIZE + i2 * 4;
    let leaf = Pte(mem.read_u32(leaf_addr));
    if !leaf.valid() {
        return None;
    }
    mem.write_u32(leaf_addr, 0);
    Some(leaf.frame())
}

/// Frames of the second-level pages referenced by a root.
pub fn table_l2_frames(mem: &SystemMemory, root: u32) -> Vec<u32> {
    (0..1024)
        .map(|i| Pte(mem.read_u32(root + i * 4)))
        .filter(|e| e.valid())
        .map(|e| e.frame())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct TlbEntry {
    frame: u32,
    writable: bool,
}

/// Bounded FIFO translation cache keyed by aperture page number.
#[derive(Debug, Clone)]
pub struct Tlb {
    capacity: usize,
    entries: HashMap<u32, TlbEntry>,
    order: VecDeque<u32>,
}

impl Tlb {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: HashMap::new(),
            order: VecDeque::new(),
        }
    }

    fn get(&self, page: u32) -> Option<TlbEntry> {
        self.entries.get(&page).copied()
    }

    fn insert(&mut self, page: u32, e: TlbEntry) {
        if self.entries.insert(page, e).is_none() {
            self.order.push_back(page);
            if self.order.len() > self.capacity {
                let victim = self.order.pop_front().unwrap();
                self.entries.remove(&victim);
            }
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.order.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// (page number, frame, writable) in insertion order.
    pub fn entries(&self) -> impl Iterator<Item = (u32, u32, bool)> + '_ {
        self.order.iter().map(|p| {
            let e = self.entries[p];
            (*p, e.frame, e.writable)
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IommuStats {
    pub walks: u64,
    pub hits: u64,
    pub flushes: u64,
}

/// A translation unit: current root plus TLB. Changing the root does not
/// flush the TLB on its own; callers flush explicitly.
#[derive(Debug, Clone)]
pub struct Iommu {
    root: u32,
    tlb: Tlb,
    pub stats: IommuStats,
}

impl Iommu {
    pub fn new(tlb_entries: usize) -> Self {
        Self {
            root: 0,
            tlb: Tlb::new(tlb_entries),
            stats: IommuStats::default(),
        }
    }

    pub fn root(&self) -> u32 {
        self.root
    }

    pub fn set_root(&mut self, root: u32) {
        self.root = root;
    }

    pub fn flush(&mut self) {
        self.tlb.clear();
        self.stats.flushes += 1;
    }

    pub fn tlb(&self) -> &Tlb {
        &self.tlb
    }

    pub fn translate(
        &mut self,
        mem: &SystemMemory,
        iaddr: u32,
        is_write: bool,
    ) -> Result<u32, IommuFault> {
        if !in_aperture(iaddr) {
            return Err(IommuFault::OutOfAperture(iaddr));
        }
        let page = page_number(iaddr);
        if let Some(e) = self.tlb.get(page) {
            self.stats.hits += 1;
            if is_write && !e.writable {
                return Err(IommuFault::ReadOnly(iaddr));
            }
            return Ok(e.frame * PAGE_SIZE + (iaddr & 0xFFF));
        }
        self.stats.walks += 1;
        // Walk as a read so read-only leaves are cached; the write check is
        // applied against the cached permission.
        let leaf = walk(mem, self.root, iaddr, false)?;
        self.tlb.insert(
            page,
            TlbEntry {
                frame: leaf.frame(),
                writable: leaf.writable(),
            },
        );
        if is_write && !leaf.writable() {
            return Err(IommuFault::ReadOnly(iaddr));
        }
        Ok(leaf.frame() * PAGE_SIZE + (iaddr & 0xFFF))
    }
}
