use crate::policy::Section;

use super::{PageId, StoreError};

/// Fixed-length slot array shared by both precisions of one (request, head):
/// high-precision page IDs fill from the left, low-precision from the right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BidirPageTableEntry {
    slots: Vec<Option<PageId>>,
    left: usize,
    right: usize,
}

impl BidirPageTableEntry {
    pub fn new(len: usize) -> Self {
        Self { slots: vec![None; len], left: 0, right: 0 }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left + self.right == 0
    }

    pub fn left_count(&self) -> usize {
        self.left
    }

    pub fn right_count(&self) -> usize {
        self.right
    }

    pub fn slots(&self) -> &[Option<PageId>] {
        &self.slots
    }

    pub fn append(&mut self, page: PageId, section: Section) -> Result<(), StoreError> {
        if self.left + self.right == self.slots.len() {
            return Err(StoreError::TableOverflow { len: self.slots.len() });
        }
        match section {
            Section::High => {
                self.slots[self.left] = Some(page);
                self.left += 1;
            }
            Section::Low => {
                let idx = self.slots.len() - 1 - self.right;
                self.slots[idx] = Some(page);
                self.right += 1;
            }
        }
        Ok(())
    }

    /// High-precision pages in append order.
    pub fn high_pages(&self) -> impl Iterator<Item = PageId> + '_ {
        self.slots[..self.left].iter().map(|p| p.expect("occupied slot"))
    }

    /// Low-precision pages in append order.
    pub fn low_pages(&self) -> impl Iterator<Item = PageId> + '_ {
        let n = self.slots.len();
        self.slots[n - self.right..].iter().rev().map(|p| p.expect("occupied slot"))
    }

    pub fn section_of(&self, page: PageId) -> Option<Section> {
        if self.high_pages().any(|p| p == page) {
            Some(Section::High)
        } else if self.low_pages().any(|p| p == page) {
            Some(Section::Low)
        } else {
            None
        }
    }

    /// Removes `page` from whichever side holds it, keeping append order.
    pub fn remove(&mut self, page: PageId) -> Option<Section> {
        let section = self.section_of(page)?;
        match section {
            Section::High => {
                let mut kept: Vec<PageId> = self.high_pages().filter(|&p| p != page).collect();
                self.slots[..self.left].fill(None);
                self.left = 0;
                for p in kept.drain(..) {
                    self.append(p, Section::High).expect("shrinking cannot overflow");
                }
            }
            Section::Low => {
                let kept: Vec<PageId> = self.low_pages().filter(|&p| p != page).collect();
                let n = self.slots.len();
                self.slots[n - self.right..].fill(None);
                self.right = 0;
                for p in kept {
                    self.append(p, Section::Low).expect("shrinking cannot overflow");
                }
            }
        }
        Some(section)
    }

    pub fn clear(&mut self) {
        self.slots.fill(None);
        self.left = 0;
        self.right = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memstore::PageGeometry;
    use crate::quant::{Precision, PrecisionPair};

    fn ids(entry: &BidirPageTableEntry) -> Vec<Option<u32>> {
        entry.slots().iter().map(|s| s.map(|p| p.0)).collect()
    }

    #[test]
    fn grows_from_both_ends() {
        let mut e = BidirPageTableEntry::new(4);
        e.append(PageId(1), Section::High).unwrap();
        e.append(PageId(2), Section::High).unwrap();
        e.append(PageId(9), Section::Low).unwrap();
        assert_eq!(ids(&e), vec![Some(1), Some(2), None, Some(9)]);
        e.append(PageId(10), Section::Low).unwrap();
        assert_eq!(e.low_pages().map(|p| p.0).collect::<Vec<_>>(), vec![9, 10]);
        assert!(matches!(e.append(PageId(3), Section::High), Err(StoreError::TableOverflow { .. })));
    }

    #[test]
    fn remove_keeps_order() {
        let mut e = BidirPageTableEntry::new(5);
        for p in [5, 6, 7] {
            e.append(PageId(p), Section::High).unwrap();
        }
        e.append(PageId(8), Section::Low).unwrap();
        assert_eq!(e.remove(PageId(6)), Some(Section::High));
        assert_eq!(e.remove(PageId(8)), Some(Section::Low));
        assert_eq!(e.remove(PageId(42)), None);
        assert_eq!(ids(&e), vec![Some(5), Some(7), None, None, None]);
    }

    /// Dense sections: high holds a tokens, low holds b tokens.
    fn pages_for(g: &PageGeometry, hi: PrecisionPair, lo: PrecisionPair, a: usize, b: usize) -> usize {
        a.div_ceil(g.tokens_per_page(hi)) + b.div_ceil(g.tokens_per_page(lo))
    }

    #[test]
    fn worst_case_all_high_fills_left() {
        for page_bytes in [64usize, 128, 256] {
            for dim in [1usize, 2, 4, 8] {
                let g = PageGeometry::new(page_bytes, dim).unwrap();
                let hi = PrecisionPair::K8V4;
                for max_seq in 1..=64 {
                    let l = g.table_len(max_seq, hi);
                    let mut e = BidirPageTableEntry::new(l);
                    for p in 0..pages_for(&g, hi, PrecisionPair::K4V2, max_seq, 0) {
                        e.append(PageId(p as u32), Section::High).unwrap();
                    }
                    assert_eq!((e.left_count(), e.right_count()), (l, 0));
                }
            }
        }
    }

    #[test]
    fn bidirectional_bound_exhaustive() {
        // With at least one high page's worth of tokens held outside the table
        // (the recent window), dense high/low sections never collide.
        let lows = [PrecisionPair::K4V2, PrecisionPair::new(Precision::INT2, Precision::INT1)];
        for page_bytes in [32usize, 64, 128, 256] {
            for dim in [1usize, 2, 4, 8] {
                let g = PageGeometry::new(page_bytes, dim).unwrap();
                let hi = PrecisionPair::K8V4;
                let t = g.tokens_per_page(hi);
                if t == 0 {
                    continue;
                }
                for lo in lows {
                    for max_seq in 1..=48 {
                        let l = g.table_len(max_seq, hi);
                        for a in 0..=max_seq {
                            for b in 0..=(max_seq - a) {
                                let stored_cap = if t == 1 { max_seq } else { max_seq.saturating_sub(t) };
                                if a + b > stored_cap {
                                    continue;
                                }
                                assert!(pages_for(&g, hi, lo, a, b) <= l, "{page_bytes} {dim} {max_seq} {a} {b}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rounding_can_exceed_without_window_slack() {
        // 2 tokens per high page, 4 per low page, max 8 tokens, all stored in pages:
        // 7 high + 1 low needs 4 + 1 pages but the table has 4 slots.
        assert!(7usize.div_ceil(2) + 1usize.div_ceil(4) > 8usize.div_ceil(2));
    }
}
