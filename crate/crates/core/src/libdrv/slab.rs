use std::collections::{BTreeMap, BTreeSet};

use crate::devcore::RangeAllocator;
use crate::platform::PAGE_SIZE;

/// Object sizes served from slabs. Anything larger takes whole pages.
pub const SIZE_CLASSES: [u32; 7] = [32, 64, 128, 256, 512, 1024, 2048];

pub fn size_class(size: u32) -> Option<u32> {
    SIZE_CLASSES.iter().copied().find(|c| *c >= size)
}

#[derive(Debug, Clone)]
struct Slab {
    class: u32,
    free: BTreeSet<u32>,
}

/// Allocator over a run of pool pages: per-class slabs for small objects,
/// first-fit page runs for the rest. Offsets are bytes from the start of
/// the managed region.
#[derive(Debug, Clone)]
pub struct SlabPool {
    pages: RangeAllocator,
    /// page offset -> slab carved from that page.
    slabs: BTreeMap<u32, Slab>,
    /// class -> pages of that class with at least one free object.
    partial: BTreeMap<u32, BTreeSet<u32>>,
    /// live offset -> requested size.
    live: BTreeMap<u32, u32>,
}

impl SlabPool {
    pub fn new(pages: u32) -> Self {
        Self {
            pages: RangeAllocator::new(pages * PAGE_SIZE, PAGE_SIZE),
            slabs: BTreeMap::new(),
            partial: BTreeMap::new(),
            live: BTreeMap::new(),
        }
    }

    pub fn size_bytes(&self) -> u32 {
        self.pages.size()
    }

    pub fn alloc(&mut self, size: u32) -> Option<u32> {
        if size == 0 {
            return None;
        }
        let off = match size_class(size) {
            Some(class) => self.alloc_object(class)?,
            None => self.pages.alloc(size)?,
        };
        self.live.insert(off, size);
        Some(off)
    }

    fn alloc_object(&mut self, class: u32) -> Option<u32> {
        let page = match self.partial.get(&class).and_then(|s| s.first().copied()) {
            Some(p) => p,
            None => {
                let p = self.pages.alloc(PAGE_SIZE)?;
                let free = (0..PAGE_SIZE / class).map(|i| p + i * class).collect();
                self.slabs.insert(p, Slab { class, free });
                self.partial.entry(class).or_default().insert(p);
                p
            }
        };
        let slab = self.slabs.get_mut(&page).unwrap();
        let off = slab.free.pop_first().unwrap();
        if slab.free.is_empty() {
            self.partial.get_mut(&class).unwrap().remove(&page);
        }
        Some(off)
    }

    /// Frees a live allocation; `(off, size)` must match the original call.
    pub fn free(&mut self, off: u32, size: u32) -> bool {
        if self.live.get(&off) != Some(&size) {
            return false;
        }
        self.live.remove(&off);
        match size_class(size) {
            None => self.pages.release(off, size),
            Some(class) => {
                let page = off / PAGE_SIZE * PAGE_SIZE;
                let slab = self.slabs.get_mut(&page).unwrap();
                slab.free.insert(off);
                let per_page = (PAGE_SIZE / class) as usize;
                if slab.free.len() == per_page {
                    self.slabs.remove(&page);
                    self.partial.get_mut(&class).unwrap().remove(&page);
                    self.pages.release(page, PAGE_SIZE)
                } else {
                    self.partial.entry(class).or_default().insert(page);
                    true
                }
            }
        }
    }

    /// Live allocations as (offset, reserved length).
    pub fn live(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.live.iter().map(|(o, s)| {
            let len = size_class(*s).unwrap_or_else(|| s.div_ceil(PAGE_SIZE) * PAGE_SIZE);
            (*o, len)
        })
    }

    /// Bytes not reserved by any live allocation, including free slab slots.
    pub fn free_bytes(&self) -> u32 {
        let in_slabs: u32 = self.slabs.values().map(|s| s.free.len() as u32 * s.class).sum();
        self.pages.free_bytes() + in_slabs
    }
}
