use std::collections::{HashMap, VecDeque};

/// A physical word location reachable by the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhysLoc {
    /// Byte offset into device memory.
    Vram(u32),
    /// Byte address in system memory.
    Sys(u32),
}

pub const DEFAULT_CACHE_WORDS: usize = 1024;

/// Pending device writes not yet visible to the host.
///
/// Writes to a location already pending are coalesced in place. When the
/// buffer is full the oldest entry is written back.
#[derive(Debug, Clone)]
pub struct WriteBackCache {
    capacity: usize,
    pending: HashMap<PhysLoc, u32>,
    order: VecDeque<PhysLoc>,
}

impl WriteBackCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            pending: HashMap::new(),
            order: VecDeque::new(),
        }
    }

    pub fn get(&self, loc: PhysLoc) -> Option<u32> {
        self.pending.get(&loc).copied()
    }

    /// Buffers a write; returns an evicted entry that must be written back.
    pub fn put(&mut self, loc: PhysLoc, value: u32) -> Option<(PhysLoc, u32)> {
        if let Some(v) = self.pending.get_mut(&loc) {
            *v = value;
            return None;
        }
        self.pending.insert(loc, value);
        self.order.push_back(loc);
        if self.order.len() > self.capacity {
            let old = self.order.pop_front().unwrap();
            let v = self.pending.remove(&old).unwrap();
            return Some((old, v));
        }
        None
    }

    /// Removes and returns every pending write, oldest first.
    pub fn drain(&mut self) -> Vec<(PhysLoc, u32)> {
        let out = self
            .order
            .drain(..)
            .map(|l| (l, self.pending[&l]))
            .collect();
        self.pending.clear();
        out
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (PhysLoc, u32)> + '_ {
        self.order.iter().map(|l| (*l, self.pending[l]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coalesces_and_evicts_oldest() {
        let mut c = WriteBackCache::new(2);
        assert_eq!(c.put(PhysLoc::Sys(0), 1), None);
        assert_eq!(c.put(PhysLoc::Sys(0), 2), None);
        assert_eq!(c.put(PhysLoc::Sys(4), 3), None);
        assert_eq!(c.get(PhysLoc::Sys(0)), Some(2));
        assert_eq!(c.put(PhysLoc::Vram(0), 4), Some((PhysLoc::Sys(0), 2)));
        assert_eq!(
            c.drain(),
            vec![(PhysLoc::Sys(4), 3), (PhysLoc::Vram(0), 4)]
        );
        assert!(c.is_empty());
    }
}
