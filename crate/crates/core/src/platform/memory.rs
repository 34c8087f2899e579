use std::collections::BTreeMap;

use serde::Serialize;

pub const PAGE_SIZE: u32 = 4096;
pub const DEFAULT_SYSTEM_PAGES: u32 = 4096;

/// Identifies one application (one process) on the simulated host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct AppId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Free,
    Core,
    App(AppId),
}

/// Page-granular physical memory with owner tags and pin counts.
///
/// Frame 0 is reserved for the core at construction so that a zero physical
/// address can serve as "no table" in IOMMU root registers.
#[derive(Debug, Clone)]
pub struct SystemMemory {
    bytes: Vec<u8>,
    owners: Vec<Owner>,
    pins: Vec<u32>,
    hint: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PageCounts {
    pub free: u32,
    pub core: u32,
    pub apps: BTreeMap<AppId, u32>,
}

impl PageCounts {
    pub fn total(&self) -> u32 {
        self.free + self.core + self.apps.values().sum::<u32>()
    }
}

impl SystemMemory {
    pub fn new(pages: u32) -> Self {
        assert!(pages >= 2, "system memory needs at least two pages");
        let mut owners = vec![Owner::Free; pages as usize];
        owners[0] = Owner::Core;
        Self {
            bytes: vec![0; (pages * PAGE_SIZE) as usize],
            owners,
            pins: vec![0; pages as usize],
            hint: 1,
        }
    }

    pub fn pages(&self) -> u32 {
        self.owners.len() as u32
    }

    pub fn size_bytes(&self) -> u32 {
        self.bytes.len() as u32
    }

    pub fn free_pages(&self) -> u32 {
        self.owners.iter().filter(|o| **o == Owner::Free).count() as u32
    }

    pub fn owner(&self, frame: u32) -> Option<Owner> {
        self.owners.get(frame as usize).copied()
    }

    pub fn pin_count(&self, frame: u32) -> u32 {
        self.pins.get(frame as usize).copied().unwrap_or(0)
    }

    /// Allocates `n` frames for `owner`, all or nothing. Returned frames are
    /// ascending but not necessarily contiguous.
    pub fn alloc_frames(&mut self, owner: Owner, n: u32) -> Option<Vec<u32>> {
        if self.free_pages() < n {
            return None;
        }
        let mut out = Vec::with_capacity(n as usize);
        let len = self.owners.len();
        let mut i = self.hint;
        let mut scanned = 0;
        while out.len() < n as usize && scanned < len {
            if i >= len {
                i = 1;
            }
            if self.owners[i] == Owner::Free {
                self.owners[i] = owner;
                out.push(i as u32);
            }
            i += 1;
            scanned += 1;
        }
        self.hint = i;
        out.sort_unstable();
        for &f in &out {
            self.page_mut(f).fill(0);
        }
        Some(out)
    }

    pub fn alloc_frame(&mut self, owner: Owner) -> Option<u32> {
        self.alloc_frames(owner, 1).map(|v| v[0])
    }

    /// Returns a frame to the free pool. Pinned frames are never reclaimed.
    pub fn free_frame(&mut self, frame: u32) -> bool {
        let i = frame as usize;
        if i == 0 || i >= self.owners.len() || self.pins[i] > 0 {
            return false;
        }
        self.owners[i] = Owner::Free;
        true
    }

    pub fn pin(&mut self, frame: u32) {
        self.pins[frame as usize] += 1;
    }

    pub fn unpin(&mut self, frame: u32) {
        let p = &mut self.pins[frame as usize];
        debug_assert!(*p > 0, "unpin of unpinned frame {frame}");
        *p = p.saturating_sub(1);
    }

    pub fn page(&self, frame: u32) -> &[u8] {
        let start = (frame * PAGE_SIZE) as usize;
        &self.bytes[start..start + PAGE_SIZE as usize]
    }

    pub fn page_mut(&mut self, frame: u32) -> &mut [u8] {
        let start = (frame * PAGE_SIZE) as usize;
        &mut self.bytes[start..start + PAGE_SIZE as usize]
    }

    pub fn read_u32(&self, addr: u32) -> u32 {
        let a = addr as usize;
        u32::from_le_bytes(self.bytes[a..a + 4].try_into().unwrap())
    }

    pub fn write_u32(&mut self, addr: u32, value: u32) {
        let a = addr as usize;
        self.bytes[a..a + 4].copy_from_slice(&value.to_le_bytes());
    }

    pub fn read(&self, addr: u32, buf: &mut [u8]) {
        let a = addr as usize;
        buf.copy_from_slice(&self.bytes[a..a + buf.len()]);
    }

    pub fn write(&mut self, addr: u32, data: &[u8]) {
        let a = addr as usize;
        self.bytes[a..a + data.len()].copy_from_slice(data);
    }

    pub fn counts(&self) -> PageCounts {
        let mut c = PageCounts::default();
        for o in &self.owners {
            match o {
                Owner::Free => c.free += 1,
                Owner::Core => c.core += 1,
                Owner::App(a) => *c.apps.entry(*a).or_default() += 1,
            }
        }
        c
    }

    /// Concatenated contents of every frame owned by `app`, in frame order.
    pub fn app_image(&self, app: AppId) -> Vec<(u32, Vec<u8>)> {
        self.owners
            .iter()
            .enumerate()
            .filter(|(_, o)| **o == Owner::App(app))
            .map(|(f, _)| (f as u32, self.page(f as u32).to_vec()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mapping {
    pub frame: u32,
    pub writable: bool,
}

/// Per-application map from page-aligned virtual address to physical frame.
#[derive(Debug, Clone)]
pub struct AddressSpace {
    pages: BTreeMap<u32, Mapping>,
    next_vaddr: u32,
}

pub const USER_BASE: u32 = 0x1000_0000;

impl Default for AddressSpace {
    fn default() -> Self {
        Self {
            pages: BTreeMap::new(),
            next_vaddr: USER_BASE,
        }
    }
}

impl AddressSpace {
    /// Maps `frames` at consecutive fresh virtual pages and returns the
    /// vaddr of each.
    pub fn map_fresh(&mut self, frames: &[u32], writable: bool) -> Vec<u32> {
        frames
            .iter()
            .map(|&frame| {
                let va = self.next_vaddr;
                self.next_vaddr += PAGE_SIZE;
                self.pages.insert(va, Mapping { frame, writable });
                va
            })
            .collect()
    }

    pub fn lookup(&self, vaddr: u32) -> Option<Mapping> {
        self.pages.get(&(vaddr & !(PAGE_SIZE - 1))).copied()
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, Mapping)> + '_ {
        self.pages.iter().map(|(v, m)| (*v, *m))
    }
}
