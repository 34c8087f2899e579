//! Host side of the simulation: physical system memory, per-application
//! address spaces, the system IOMMU and the cost ledger.

mod ledger;
mod memory;

use std::collections::BTreeMap;

pub use ledger::{CostLedger, CostModel};
pub use memory::{
    AddressSpace, AppId, Mapping, Owner, PageCounts, SystemMemory, DEFAULT_SYSTEM_PAGES,
    PAGE_SIZE, USER_BASE,
};

use crate::error::{Error, Result};
use crate::iommu::{Iommu, IommuFault};

#[derive(Debug, Clone)]
pub struct Platform {
    pub mem: SystemMemory,
    pub system_iommu: Iommu,
    pub ledger: CostLedger,
    spaces: BTreeMap<AppId, AddressSpace>,
    reserves: BTreeMap<AppId, Vec<u32>>,
}

impl Platform {
    pub fn new(pages: u32, tlb_entries: usize) -> Self {
        Self {
            mem: SystemMemory::new(pages),
            system_iommu: Iommu::new(tlb_entries),
            ledger: CostLedger::default(),
            spaces: BTreeMap::new(),
            reserves: BTreeMap::new(),
        }
    }

    /// Creates the address space of a new process with `reserve_pages` heap
    /// pages already mapped. Process creation is not charged to the app.
    pub fn create_app(&mut self, app: AppId, reserve_pages: u32) -> Result<()> {
        if self.spaces.contains_key(&app) {
            return Err(Error::Exist);
        }
        let frames = self
            .mem
            .alloc_frames(Owner::App(app), reserve_pages)
            .ok_or(Error::OutOfMemory)?;
        let mut space = AddressSpace::default();
        let vaddrs = space.map_fresh(&frames, true);
        self.spaces.insert(app, space);
        self.reserves.insert(app, vaddrs);
        Ok(())
    }

    pub fn has_app(&self, app: AppId) -> bool {
        self.spaces.contains_key(&app)
    }

    pub fn reserved_pages(&self, app: AppId) -> u32 {
        self.reserves.get(&app).map_or(0, |r| r.len() as u32)
    }

    /// Hands out up to `n` consecutive pages from the app's launch-time
    /// reservation. Pure user-level bookkeeping: no crossing.
    pub fn take_reserved(&mut self, app: AppId, n: u32) -> Vec<u32> {
        let Some(res) = self.reserves.get_mut(&app) else {
            return Vec::new();
        };
        let n = (n as usize).min(res.len());
        res.drain(..n).collect()
    }

    /// mmap-style allocation of `n` fresh pages. Always one crossing, even
    /// when it fails.
    pub fn alloc_pages(&mut self, app: AppId, n: u32) -> Result<Vec<u32>> {
        self.ledger.crossings += 1;
        if n == 0 {
            return Err(Error::Inval);
        }
        let space = self.spaces.get_mut(&app).ok_or(Error::NoEnt)?;
        let frames = self
            .mem
            .alloc_frames(Owner::App(app), n)
            .ok_or(Error::OutOfMemory)?;
        Ok(space.map_fresh(&frames, true))
    }

    /// Maps an existing frame read-only into `app` (used for info pages).
    pub fn map_readonly(&mut self, app: AppId, frame: u32) -> Result<u32> {
        let space = self.spaces.get_mut(&app).ok_or(Error::NoEnt)?;
        Ok(space.map_fresh(&[frame], false)[0])
    }

    pub fn lookup(&self, app: AppId, vaddr: u32) -> Result<Mapping> {
        self.spaces
            .get(&app)
            .and_then(|s| s.lookup(vaddr))
            .ok_or(Error::Fault(vaddr))
    }

    pub fn address_space(&self, app: AppId) -> Option<&AddressSpace> {
        self.spaces.get(&app)
    }

    /// Application load through its own address space. May span pages.
    pub fn user_read(&self, app: AppId, vaddr: u32, buf: &mut [u8]) -> Result<()> {
        let mut done = 0usize;
        while done < buf.len() {
            let va = vaddr + done as u32;
            let m = self.lookup(app, va)?;
            let off = va % PAGE_SIZE;
            let take = ((PAGE_SIZE - off) as usize).min(buf.len() - done);
            self.mem
                .read(m.frame * PAGE_SIZE + off, &mut buf[done..done + take]);
            done += take;
        }
        Ok(())
    }

    /// Application store through its own address space. May span pages.
    pub fn user_write(&mut self, app: AppId, vaddr: u32, data: &[u8]) -> Result<()> {
        // Validate the whole range first so a failing store has no effect.
        let mut va = vaddr & !(PAGE_SIZE - 1);
        let end = vaddr as u64 + data.len() as u64;
        while (va as u64) < end {
            let m = self.lookup(app, va)?;
            if !m.writable {
                return Err(Error::Perm);
            }
            va += PAGE_SIZE;
        }
        let mut done = 0usize;
        while done < data.len() {
            let va = vaddr + done as u32;
            let m = self.lookup(app, va)?;
            let off = va % PAGE_SIZE;
            let take = ((PAGE_SIZE - off) as usize).min(data.len() - done);
            self.mem
                .write(m.frame * PAGE_SIZE + off, &data[done..done + take]);
            done += take;
        }
        Ok(())
    }

    pub fn user_read_u32(&self, app: AppId, vaddr: u32) -> Result<u32> {
        let mut b = [0u8; 4];
        self.user_read(app, vaddr, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn user_write_u32(&mut self, app: AppId, vaddr: u32, value: u32) -> Result<()> {
        self.user_write(app, vaddr, &value.to_le_bytes())
    }

    /// Swaps the system IOMMU to the table rooted at `root` (a physical
    /// address; 0 disables translation). O(1) plus a TLB flush.
    pub fn system_iommu_set_root(&mut self, root: u32) {
        self.system_iommu.set_root(root);
        self.system_iommu.flush();
    }

    pub fn system_iommu_translate(
        &mut self,
        iaddr: u32,
        is_write: bool,
    ) -> std::result::Result<u32, IommuFault> {
        self.system_iommu.translate(&self.mem, iaddr, is_write)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_then_lookup_is_owned_by_app() {
        let mut p = Platform::new(64, 64);
        p.create_app(AppId(1), 0).unwrap();
        let va = p.alloc_pages(AppId(1), 1).unwrap()[0];
        let m = p.lookup(AppId(1), va).unwrap();
        assert_eq!(p.mem.owner(m.frame), Some(Owner::App(AppId(1))));
        assert_eq!(p.ledger.crossings, 1);
    }

    #[test]
    fn exhaustion_still_counts_the_crossing() {
        let mut p = Platform::new(8, 64);
        p.create_app(AppId(1), 0).unwrap();
        assert_eq!(p.alloc_pages(AppId(1), 100), Err(Error::OutOfMemory));
        assert_eq!(p.ledger.crossings, 1);
    }

    #[test]
    fn owner_tags_never_overlap_between_apps() {
        let mut p = Platform::new(64, 64);
        p.create_app(AppId(1), 3).unwrap();
        p.create_app(AppId(2), 2).unwrap();
        let a = p.alloc_pages(AppId(1), 5).unwrap();
        let b = p.alloc_pages(AppId(2), 7).unwrap();
        let fa: Vec<u32> = a.iter().map(|v| p.lookup(AppId(1), *v).unwrap().frame).collect();
        let fb: Vec<u32> = b.iter().map(|v| p.lookup(AppId(2), *v).unwrap().frame).collect();
        // Exhaustive scan of every frame's owner tag.
        for f in 0..p.mem.pages() {
            let owner = p.mem.owner(f).unwrap();
            let in_a = fa.contains(&f);
            let in_b = fb.contains(&f);
            assert!(!(in_a && in_b));
            if in_a {
                assert_eq!(owner, Owner::App(AppId(1)));
            }
            if in_b {
                assert_eq!(owner, Owner::App(AppId(2)));
            }
        }
        let c = p.mem.counts();
        assert_eq!(c.apps[&AppId(1)], 8);
        assert_eq!(c.apps[&AppId(2)], 9);
        assert_eq!(c.total(), 64);
    }

    #[test]
    fn user_access_spans_pages_and_respects_readonly() {
        let mut p = Platform::new(16, 64);
        p.create_app(AppId(1), 2).unwrap();
        let v = p.take_reserved(AppId(1), 2);
        assert_eq!(v[1], v[0] + PAGE_SIZE);
        let data: Vec<u8> = (0..100u8).collect();
        p.user_write(AppId(1), v[0] + PAGE_SIZE - 50, &data).unwrap();
        let mut back = vec![0u8; 100];
        p.user_read(AppId(1), v[0] + PAGE_SIZE - 50, &mut back).unwrap();
        assert_eq!(back, data);
        let ro = p.map_readonly(AppId(1), 0).unwrap();
        assert_eq!(p.user_write_u32(AppId(1), ro, 1), Err(Error::Perm));
        assert_eq!(p.ledger.crossings, 0);
    }
}
