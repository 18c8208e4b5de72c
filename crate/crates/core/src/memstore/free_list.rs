use super::{PageId, StoreError};

/// Ring of page IDs. The free region is the contiguous modular interval
/// `[start, start + free_count)`; allocation consumes from `start`, recycling
/// appends at `end = start + free_count`.
///
/// Cursors are kept as monotone counters so the number of laps is visible;
/// `start()` and `end()` reduce them modulo the capacity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CircularFreeList {
    slots: Vec<PageId>,
    alloc_cursor: u64,
    recycle_cursor: u64,
}

impl CircularFreeList {
    /// All pages free, in ID order.
    pub fn new(capacity: usize) -> Self {
        Self { slots: (0..capacity as u32).map(PageId).collect(), alloc_cursor: 0, recycle_cursor: capacity as u64 }
    }

    pub(crate) fn from_parts(slots: Vec<PageId>, alloc_cursor: u64, recycle_cursor: u64) -> Result<Self, StoreError> {
        if recycle_cursor < alloc_cursor || recycle_cursor - alloc_cursor > slots.len() as u64 {
            return Err(StoreError::Snapshot("free list cursors out of range".into()));
        }
        Ok(Self { slots, alloc_cursor, recycle_cursor })
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn free_count(&self) -> usize {
        (self.recycle_cursor - self.alloc_cursor) as usize
    }

    /// Allocation pointer (slot index).
    pub fn start(&self) -> usize {
        (self.alloc_cursor % self.capacity().max(1) as u64) as usize
    }

    /// Recycling pointer (slot index).
    pub fn end(&self) -> usize {
        (self.recycle_cursor % self.capacity().max(1) as u64) as usize
    }

    /// Total pages ever allocated.
    pub fn alloc_cursor(&self) -> u64 {
        self.alloc_cursor
    }

    /// Capacity plus total pages ever recycled.
    pub fn recycle_cursor(&self) -> u64 {
        self.recycle_cursor
    }

    pub fn slots(&self) -> &[PageId] {
        &self.slots
    }

    pub(crate) fn slots_mut(&mut self) -> &mut [PageId] {
        &mut self.slots
    }

    /// Slot index `offset` positions past the allocation pointer.
    pub fn slot_after_start(&self, offset: usize) -> usize {
        (self.start() + offset) % self.capacity()
    }

    /// Free page IDs in allocation order.
    pub fn free_pages(&self) -> impl Iterator<Item = PageId> + '_ {
        (0..self.free_count()).map(move |i| self.slots[self.slot_after_start(i)])
    }

    pub(crate) fn advance_start(&mut self, n: usize) {
        debug_assert!(n <= self.free_count());
        self.alloc_cursor += n as u64;
    }

    pub(crate) fn advance_end(&mut self, n: usize) {
        self.recycle_cursor += n as u64;
        debug_assert!(self.free_count() <= self.capacity());
    }
}

/// Splits the ring region `[base, base + sum(lens))` into one list of disjoint
/// mutable pieces per length (a piece list has two entries when it wraps).
pub(crate) fn carve_ring<'a>(slots: &'a mut [PageId], base: usize, lens: &[usize]) -> Vec<Vec<&'a mut [PageId]>> {
    let cap = slots.len();
    let total: usize = lens.iter().sum();
    assert!(total <= cap, "ring region larger than the ring");
    let (head, tail) = slots.split_at_mut(base);
    // Linear order of the region: tail first, then wrap into head.
    let first_len = total.min(tail.len());
    let mut seg_a: &mut [PageId] = &mut tail[..first_len];
    let mut seg_b: &mut [PageId] = &mut head[..total - first_len];
    let mut out = Vec::with_capacity(lens.len());
    for &n in lens {
        let mut pieces = Vec::with_capacity(2);
        let from_a = n.min(seg_a.len());
        let (take, rest) = std::mem::take(&mut seg_a).split_at_mut(from_a);
        seg_a = rest;
        if !take.is_empty() {
            pieces.push(take);
        }
        let from_b = n - from_a;
        if from_b > 0 {
            let (take, rest) = std::mem::take(&mut seg_b).split_at_mut(from_b);
            seg_b = rest;
            pieces.push(take);
        }
        out.push(pieces);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointers_and_wrap() {
        let mut fl = CircularFreeList::new(5);
        assert_eq!((fl.start(), fl.end(), fl.free_count()), (0, 0, 5));
        fl.advance_start(4);
        assert_eq!((fl.start(), fl.end(), fl.free_count()), (4, 0, 1));
        fl.advance_end(2);
        assert_eq!((fl.start(), fl.end(), fl.free_count()), (4, 2, 3));
        assert_eq!(fl.alloc_cursor(), 4);
        assert_eq!(fl.recycle_cursor(), 7);
    }

    #[test]
    fn carve_wrapping_region() {
        let mut slots: Vec<PageId> = (0..6).map(PageId).collect();
        let pieces = carve_ring(&mut slots, 4, &[1, 3, 0, 1]);
        let lens: Vec<Vec<usize>> = pieces.iter().map(|p| p.iter().map(|s| s.len()).collect()).collect();
        assert_eq!(lens, vec![vec![1], vec![1, 2], vec![], vec![1]]);
        for (i, ps) in pieces.into_iter().enumerate() {
            for p in ps {
                for s in p.iter_mut() {
                    *s = PageId(100 + i as u32);
                }
            }
        }
        let ids: Vec<u32> = slots.iter().map(|p| p.0).collect();
        assert_eq!(ids, vec![101, 101, 103, 3, 100, 101]);
    }
}
