use std::collections::BTreeMap;

/// First-fit allocator over `[0, size)` handing out `align`-aligned ranges.
#[derive(Debug, Clone)]
pub struct RangeAllocator {
    size: u32,
    align: u32,
    /// start -> length of free blocks, coalesced.
    free: BTreeMap<u32, u32>,
    /// start -> (requested size, reserved length).
    live: BTreeMap<u32, (u32, u32)>,
}

fn round_up(v: u32, align: u32) -> Option<u32> {
    v.checked_add(align - 1).map(|x| x / align * align)
}

impl RangeAllocator {
    pub fn new(size: u32, align: u32) -> Self {
        assert!(align.is_power_of_two());
        let size = size / align * align;
        let mut free = BTreeMap::new();
        if size > 0 {
            free.insert(0, size);
        }
        Self {
            size,
            align,
            free,
            live: BTreeMap::new(),
        }
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn alloc(&mut self, size: u32) -> Option<u32> {
        if size == 0 {
            return None;
        }
        let len = round_up(size, self.align)?;
        let (&start, &blk) = self.free.iter().find(|(_, l)| **l >= len)?;
        self.free.remove(&start);
        if blk > len {
            self.free.insert(start + len, blk - len);
        }
        self.live.insert(start, (size, len));
        Some(start)
    }

    /// Releases a live allocation; `(start, size)` must match exactly.
    pub fn release(&mut self, start: u32, size: u32) -> bool {
        match self.live.get(&start) {
            Some(&(req, len)) if req == size => {
                self.live.remove(&start);
                self.insert_free(start, len);
                true
            }
            _ => false,
        }
    }

    fn insert_free(&mut self, mut start: u32, mut len: u32) {
        if let Some((&s, &l)) = self.free.range(..start).next_back() {
            if s + l == start {
                self.free.remove(&s);
                start = s;
                len += l;
            }
        }
        if let Some(&l) = self.free.get(&(start + len)) {
            self.free.remove(&(start + len));
            len += l;
        }
        self.free.insert(start, len);
    }

    pub fn live(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.live.iter().map(|(s, (_, l))| (*s, *l))
    }

    pub fn free_blocks(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.free.iter().map(|(s, l)| (*s, *l))
    }

    pub fn free_bytes(&self) -> u32 {
        self.free.values().sum()
    }
}
