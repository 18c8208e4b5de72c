use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::layout::TileConfig;
use crate::policy::Section;
use crate::quant::PrecisionPair;

use super::free_list::carve_ring;
use super::{
    exclusive_scan, BidirPageTableEntry, CircularFreeList, HeadKey, PageFormat, PageGeometry, PageId, StoreError,
    StoredToken, UnifiedPage,
};

/// Bytes per page-ID slot in a page table.
pub const PAGE_ID_BYTES: u64 = 4;

/// Total size of all bidirectional page tables.
pub fn page_table_metadata_bytes(batch: u64, layers: u64, kv_heads: u64, table_len: u64) -> u64 {
    batch * layers * kv_heads * table_len * PAGE_ID_BYTES
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub geometry: PageGeometry,
    pub total_pages: usize,
    pub high: PrecisionPair,
    pub low: PrecisionPair,
    /// Configuration of pages that reserve room for the recent window.
    pub window: PrecisionPair,
    pub max_seq_len: usize,
    pub tiles: TileConfig,
}

impl StoreConfig {
    pub fn new(geometry: PageGeometry, total_pages: usize, max_seq_len: usize) -> Self {
        Self {
            geometry,
            total_pages,
            high: PrecisionPair::K8V4,
            low: PrecisionPair::K4V2,
            window: PrecisionPair::K16V16,
            max_seq_len,
            tiles: TileConfig::for_dim(geometry.dim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageClass {
    High,
    Low,
    Window,
}

impl From<Section> for PageClass {
    fn from(s: Section) -> Self {
        match s {
            Section::High => PageClass::High,
            Section::Low => PageClass::Low,
        }
    }
}

/// Pages held by one (request, layer, head).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadTables {
    pub bidir: BidirPageTableEntry,
    pub window: Vec<PageId>,
}

impl HeadTables {
    pub fn page_count(&self) -> usize {
        self.bidir.left_count() + self.bidir.right_count() + self.window.len()
    }

    pub fn all_pages(&self) -> Vec<PageId> {
        self.bidir.high_pages().chain(self.bidir.low_pages()).chain(self.window.iter().copied()).collect()
    }
}

/// One head's demand for a coordination step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HeadPlan {
    pub key: HeadKey,
    pub alloc_high: usize,
    pub alloc_low: usize,
    pub alloc_window: usize,
    /// Pages to hand back to the free list.
    pub free: Vec<PageId>,
    /// Empty high pages to move to the low side and reconfigure.
    pub relabel_low: Vec<PageId>,
}

impl Default for HeadKey {
    fn default() -> Self {
        HeadKey::new(0, 0, 0)
    }
}

impl HeadPlan {
    pub fn new(key: HeadKey) -> Self {
        Self { key, ..Default::default() }
    }

    fn alloc_total(&self) -> usize {
        self.alloc_high + self.alloc_low + self.alloc_window
    }
}

/// Pages granted to one head by a coordination step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadGrant {
    pub key: HeadKey,
    pub high: Vec<PageId>,
    pub low: Vec<PageId>,
    pub window: Vec<PageId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvStore {
    pub(super) config: StoreConfig,
    pub(super) formats: [PageFormat; 3],
    pub(super) free: CircularFreeList,
    pub(super) pages: Vec<UnifiedPage>,
    pub(super) owner: Vec<Option<HeadKey>>,
    pub(super) tables: BTreeMap<HeadKey, HeadTables>,
    pub(super) live: BTreeSet<u64>,
    pub(super) table_len: usize,
}

impl KvStore {
    pub fn new(config: StoreConfig) -> Result<Self, StoreError> {
        if config.total_pages == 0 || config.total_pages > u32::MAX as usize {
            return Err(StoreError::Geometry("page count out of range".into()));
        }
        if config.max_seq_len == 0 {
            return Err(StoreError::Geometry("max sequence length must be positive".into()));
        }
        let g = &config.geometry;
        let formats = [
            PageFormat::new(g, config.high, config.tiles)?,
            PageFormat::new(g, config.low, config.tiles)?,
            PageFormat::new(g, config.window, config.tiles)?,
        ];
        if formats[1].capacity < formats[0].capacity {
            return Err(StoreError::Geometry(format!(
                "low pages hold {} tokens, fewer than high pages ({})",
                formats[1].capacity, formats[0].capacity
            )));
        }
        let table_len = config.max_seq_len.div_ceil(formats[0].capacity);
        Ok(Self {
            config,
            formats,
            free: CircularFreeList::new(config.total_pages),
            pages: vec![UnifiedPage::default(); config.total_pages],
            owner: vec![None; config.total_pages],
            tables: BTreeMap::new(),
            live: BTreeSet::new(),
            table_len,
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn format(&self, class: PageClass) -> &PageFormat {
        match class {
            PageClass::High => &self.formats[0],
            PageClass::Low => &self.formats[1],
            PageClass::Window => &self.formats[2],
        }
    }

    pub fn tokens_per_page(&self, class: PageClass) -> usize {
        self.format(class).capacity
    }

    pub fn table_len(&self) -> usize {
        self.table_len
    }

    pub fn free_list(&self) -> &CircularFreeList {
        &self.free
    }

    pub fn free_count(&self) -> usize {
        self.free.free_count()
    }

    pub fn total_pages(&self) -> usize {
        self.pages.len()
    }

    pub fn page(&self, id: PageId) -> &UnifiedPage {
        &self.pages[id.0 as usize]
    }

    pub fn owner(&self, id: PageId) -> Option<HeadKey> {
        self.owner[id.0 as usize]
    }

    pub fn tables(&self, key: &HeadKey) -> Option<&HeadTables> {
        self.tables.get(key)
    }

    pub fn heads(&self) -> impl Iterator<Item = (&HeadKey, &HeadTables)> {
        self.tables.iter()
    }

    pub fn is_live(&self, request: u64) -> bool {
        self.live.contains(&request)
    }

    pub fn live_requests(&self) -> impl Iterator<Item = u64> + '_ {
        self.live.iter().copied()
    }

    /// Pages currently held by any head of `request`.
    pub fn request_pages(&self, request: u64) -> usize {
        self.request_heads(request).map(|(_, t)| t.page_count()).sum()
    }

    fn request_heads(&self, request: u64) -> impl Iterator<Item = (&HeadKey, &HeadTables)> {
        self.tables.range(HeadKey::new(request, 0, 0)..=HeadKey::new(request, u32::MAX, u32::MAX))
    }

    /// Runs one coordination step: validates every plan, assigns each head a
    /// disjoint region of the free list via exclusive scans, then applies all
    /// reads, writes and table updates. Either every plan is applied or none.
    pub fn compact(&mut self, mut plans: Vec<HeadPlan>) -> Result<Vec<HeadGrant>, StoreError> {
        plans.sort_by_key(|p| p.key);
        for w in plans.windows(2) {
            if w[0].key == w[1].key {
                return Err(StoreError::DuplicatePlan(w[0].key));
            }
        }
        for p in &plans {
            self.validate_plan(p)?;
        }

        let demands: Vec<usize> = plans.iter().map(HeadPlan::alloc_total).collect();
        let (alloc_offsets, alloc_total) = exclusive_scan(&demands);
        if alloc_total > self.free.free_count() {
            return Err(StoreError::OutOfMemory { needed: alloc_total, available: self.free.free_count() });
        }
        let free_lens: Vec<usize> = plans.iter().map(|p| p.free.len()).collect();
        let (free_offsets, free_total) = exclusive_scan(&free_lens);

        // Allocation: each head reads its own region past the start pointer.
        let granted: Vec<Vec<PageId>> = {
            let free = &self.free;
            plans
                .par_iter()
                .zip(alloc_offsets.par_iter())
                .map(|(p, &off)| (0..p.alloc_total()).map(|i| free.slots()[free.slot_after_start(off + i)]).collect())
                .collect()
        };

        // Recycling: each head writes its own region past the end pointer.
        let end = self.free.end();
        let cap = self.free.capacity();
        let regions = carve_ring(self.free.slots_mut(), end, &free_lens);
        debug_assert!(free_offsets.iter().zip(&free_lens).all(|(&o, &n)| o + n <= free_total));
        regions.into_par_iter().zip(plans.par_iter()).for_each(|(pieces, plan)| {
            let mut ids = plan.free.iter();
            for piece in pieces {
                for slot in piece.iter_mut() {
                    *slot = *ids.next().expect("region sized from the plan");
                }
            }
        });
        debug_assert!(cap > 0);
        self.free.advance_start(alloc_total);
        self.free.advance_end(free_total);

        let grants: Vec<HeadGrant> = plans
            .iter()
            .zip(granted)
            .map(|(p, ids)| {
                let (high, rest) = ids.split_at(p.alloc_high);
                let (low, window) = rest.split_at(p.alloc_low);
                HeadGrant { key: p.key, high: high.to_vec(), low: low.to_vec(), window: window.to_vec() }
            })
            .collect();

        // Page configuration and ownership.
        for (p, g) in plans.iter().zip(&grants) {
            for id in &p.free {
                self.pages[id.0 as usize].reset();
                self.owner[id.0 as usize] = None;
            }
            for id in &p.relabel_low {
                self.pages[id.0 as usize].configure(self.formats[1]);
            }
            for (ids, fmt) in [(&g.high, self.formats[0]), (&g.low, self.formats[1]), (&g.window, self.formats[2])] {
                for id in ids {
                    self.pages[id.0 as usize].configure(fmt);
                    self.owner[id.0 as usize] = Some(p.key);
                }
            }
        }

        // Table updates; entries are disjoint so heads proceed in parallel.
        for p in &plans {
            if !self.tables.contains_key(&p.key) {
                self.tables
                    .insert(p.key, HeadTables { bidir: BidirPageTableEntry::new(self.table_len), window: Vec::new() });
                self.live.insert(p.key.request);
            }
        }
        let plan_keys: HashSet<HeadKey> = plans.iter().map(|p| p.key).collect();
        let entries: Vec<&mut HeadTables> =
            self.tables.iter_mut().filter(|(k, _)| plan_keys.contains(k)).map(|(_, t)| t).collect();
        entries
            .into_par_iter()
            .zip(plans.par_iter().zip(grants.par_iter()))
            .try_for_each(|(t, (p, g))| apply_to_tables(t, p, g))?;
        Ok(grants)
    }

    fn validate_plan(&self, p: &HeadPlan) -> Result<(), StoreError> {
        let tables = self.tables.get(&p.key);
        if tables.is_none() && (!p.free.is_empty() || !p.relabel_low.is_empty()) {
            return Err(StoreError::UnknownHead(p.key));
        }
        let mut seen = HashSet::new();
        for &id in p.free.iter().chain(&p.relabel_low) {
            if id.0 as usize >= self.pages.len() || self.owner[id.0 as usize] != Some(p.key) || !seen.insert(id) {
                return Err(StoreError::NotOwner { page: id, key: p.key });
            }
        }
        let (mut left, mut right) = tables.map_or((0, 0), |t| (t.bidir.left_count(), t.bidir.right_count()));
        if let Some(t) = tables {
            for &id in &p.free {
                match t.bidir.section_of(id) {
                    Some(Section::High) => left -= 1,
                    Some(Section::Low) => right -= 1,
                    None => {}
                }
            }
            for &id in &p.relabel_low {
                if t.bidir.section_of(id) != Some(Section::High) {
                    return Err(StoreError::NotOwner { page: id, key: p.key });
                }
                if self.pages[id.0 as usize].occupancy() > 0 {
                    return Err(StoreError::PageNotEmpty(id));
                }
            }
        }
        left = left - p.relabel_low.len() + p.alloc_high;
        right += p.relabel_low.len() + p.alloc_low;
        if left + right > self.table_len {
            return Err(StoreError::TableOverflow { len: self.table_len });
        }
        Ok(())
    }

    /// Prompt-phase allocation: every head gets enough high pages for all of
    /// its tokens, before the policy has decided anything.
    pub fn conservative_alloc_prompt(&mut self, requests: &[(HeadKey, usize)]) -> Result<Vec<HeadGrant>, StoreError> {
        let per_page = self.tokens_per_page(PageClass::High);
        let plans = requests
            .iter()
            .map(|&(key, len)| HeadPlan { alloc_high: len.div_ceil(per_page), ..HeadPlan::new(key) })
            .collect();
        self.compact(plans)
    }

    /// Generation-phase allocation of at most one page per head.
    pub fn generation_alloc(&mut self, needs: &[(HeadKey, PageClass)]) -> Result<Vec<(HeadKey, PageId)>, StoreError> {
        let plans = needs
            .iter()
            .map(|&(key, class)| {
                let mut p = HeadPlan::new(key);
                match class {
                    PageClass::High => p.alloc_high = 1,
                    PageClass::Low => p.alloc_low = 1,
                    PageClass::Window => p.alloc_window = 1,
                }
                p
            })
            .collect();
        Ok(self
            .compact(plans)?
            .into_iter()
            .map(|g| {
                let id = g.high.into_iter().chain(g.low).chain(g.window).next().expect("one page per grant");
                (g.key, id)
            })
            .collect())
    }

    /// Returns every page of a finished request to the free list.
    pub fn release_request(&mut self, request: u64) -> Result<Vec<PageId>, StoreError> {
        if !self.live.contains(&request) {
            return Err(StoreError::RequestNotLive(request));
        }
        let plans: Vec<HeadPlan> =
            self.request_heads(request).map(|(k, t)| HeadPlan { free: t.all_pages(), ..HeadPlan::new(*k) }).collect();
        let freed: Vec<PageId> = plans.iter().flat_map(|p| p.free.iter().copied()).collect();
        self.compact(plans)?;
        let keys: Vec<HeadKey> = self.request_heads(request).map(|(k, _)| *k).collect();
        for k in keys {
            self.tables.remove(&k);
        }
        self.live.remove(&request);
        Ok(freed)
    }

    /// Frees the pages of `keys` and drops their table entries. Requests left
    /// without heads stop being live.
    pub fn drop_heads(&mut self, keys: &[HeadKey]) -> Result<(), StoreError> {
        let plans: Vec<HeadPlan> = keys
            .iter()
            .filter_map(|k| self.tables.get(k).map(|t| HeadPlan { free: t.all_pages(), ..HeadPlan::new(*k) }))
            .collect();
        self.compact(plans)?;
        for k in keys {
            self.tables.remove(k);
        }
        for k in keys {
            if self.request_heads(k.request).next().is_none() {
                self.live.remove(&k.request);
            }
        }
        Ok(())
    }

    fn check_owner(&self, key: &HeadKey, page: PageId) -> Result<(), StoreError> {
        if self.owner.get(page.0 as usize).copied().flatten() != Some(*key) {
            return Err(StoreError::NotOwner { page, key: *key });
        }
        Ok(())
    }

    pub fn write_token(
        &mut self,
        key: &HeadKey,
        page: PageId,
        slot: usize,
        token: &StoredToken,
    ) -> Result<(), StoreError> {
        self.check_owner(key, page)?;
        let bytes = self.config.geometry.page_bytes;
        self.pages[page.0 as usize].write(slot, token, bytes)
    }

    pub fn read_token(&self, page: PageId, slot: usize) -> Result<StoredToken, StoreError> {
        self.pages[page.0 as usize].read(slot)
    }

    pub fn clear_slot(&mut self, key: &HeadKey, page: PageId, slot: usize) -> Result<(), StoreError> {
        self.check_owner(key, page)?;
        self.pages[page.0 as usize].clear_slot(slot)
    }

    pub fn set_score(&mut self, key: &HeadKey, page: PageId, slot: usize, score: f32) -> Result<(), StoreError> {
        self.check_owner(key, page)?;
        self.pages[page.0 as usize].set_score(slot, score)
    }

    /// Checks permutation conservation, free-region contiguity and table/owner
    /// agreement. Returns a description of the first violation.
    pub fn audit(&self) -> Result<(), String> {
        let n = self.pages.len();
        let mut seen = vec![false; n];
        for id in self.free.free_pages() {
            let i = id.0 as usize;
            if i >= n || seen[i] {
                return Err(format!("free list repeats or overflows at {id:?}"));
            }
            if self.owner[i].is_some() {
                return Err(format!("{id:?} is free but owned"));
            }
            seen[i] = true;
        }
        for (key, t) in &self.tables {
            for id in t.all_pages() {
                let i = id.0 as usize;
                if seen[i] {
                    return Err(format!("{id:?} referenced twice"));
                }
                if self.owner[i] != Some(*key) {
                    return Err(format!("{id:?} in table of {key:?} but owned by {:?}", self.owner[i]));
                }
                seen[i] = true;
            }
            if t.bidir.left_count() + t.bidir.right_count() > t.bidir.len() {
                return Err(format!("table of {key:?} collided"));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(format!("page {i} is neither free nor referenced"));
        }
        Ok(())
    }
}

fn apply_to_tables(t: &mut HeadTables, p: &HeadPlan, g: &HeadGrant) -> Result<(), StoreError> {
    for id in &p.free {
        if t.bidir.remove(*id).is_none() {
            t.window.retain(|w| w != id);
        }
    }
    for id in &p.relabel_low {
        t.bidir.remove(*id);
        t.bidir.append(*id, Section::Low)?;
    }
    for id in &g.high {
        t.bidir.append(*id, Section::High)?;
    }
    for id in &g.low {
        t.bidir.append(*id, Section::Low)?;
    }
    t.window.extend(&g.window);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(pages: usize, max_seq: usize) -> KvStore {
        KvStore::new(StoreConfig::new(PageGeometry::new(256, 8).unwrap(), pages, max_seq)).unwrap()
    }

    fn key(r: u64, h: u32) -> HeadKey {
        HeadKey::new(r, 0, h)
    }

    #[test]
    fn metadata_bytes() {
        assert_eq!(page_table_metadata_bytes(128, 32, 8, 256), 32 * 1024 * 1024);
        assert_eq!(page_table_metadata_bytes(1, 32, 8, 1), 32 * 8 * 4);
        assert_eq!(page_table_metadata_bytes(2, 3, 5, 7), 2 * page_table_metadata_bytes(1, 3, 5, 7));
    }

    #[test]
    fn empty_compaction_is_noop() {
        let mut s = store(16, 64);
        let before = s.clone();
        assert!(s.compact(vec![]).unwrap().is_empty());
        assert_eq!(s, before);
    }

    #[test]
    fn prompt_alloc_takes_prefix_of_free_region() {
        let mut s = store(64, 256);
        let per = s.tokens_per_page(PageClass::High);
        let reqs: Vec<(HeadKey, usize)> = (0..4).map(|h| (key(1, h), per * (h as usize + 1) - 1)).collect();
        let grants = s.conservative_alloc_prompt(&reqs).unwrap();
        let all: Vec<u32> = grants.iter().flat_map(|g| g.high.iter().map(|p| p.0)).collect();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(s.free_list().start(), 10);
        s.audit().unwrap();
        let zero = s.conservative_alloc_prompt(&[(key(2, 0), 0)]).unwrap();
        assert!(zero[0].high.is_empty());
        assert!(s.is_live(2));
    }

    #[test]
    fn oom_leaves_state_untouched() {
        let mut s = store(4, 256);
        let per = s.tokens_per_page(PageClass::High);
        let before = s.clone();
        let err = s.conservative_alloc_prompt(&[(key(0, 0), per * 5)]).unwrap_err();
        assert_eq!(err, StoreError::OutOfMemory { needed: 5, available: 4 });
        assert_eq!(s, before);
    }

    #[test]
    fn ownership_and_duplicates() {
        let mut s = store(8, 256);
        let per = s.tokens_per_page(PageClass::High);
        let g = s.conservative_alloc_prompt(&[(key(0, 0), per), (key(0, 1), per)]).unwrap();
        let foreign = g[1].high[0];
        let bad = HeadPlan { free: vec![foreign], ..HeadPlan::new(key(0, 0)) };
        assert!(matches!(s.compact(vec![bad]), Err(StoreError::NotOwner { .. })));
        let dup = vec![HeadPlan::new(key(0, 0)), HeadPlan::new(key(0, 0))];
        assert!(matches!(s.compact(dup), Err(StoreError::DuplicatePlan(_))));
    }

    #[test]
    fn generation_alloc_counts() {
        let mut s = store(32, 256);
        let keys: Vec<HeadKey> = (0..8).map(|h| key(0, h)).collect();
        s.conservative_alloc_prompt(&keys.iter().map(|k| (*k, 0)).collect::<Vec<_>>()).unwrap();
        assert!(s.generation_alloc(&[]).unwrap().is_empty());
        let before = s.free_count();
        let got = s
            .generation_alloc(&[(keys[1], PageClass::High), (keys[4], PageClass::Low), (keys[6], PageClass::Window)])
            .unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(s.free_count(), before - 3);
        assert_eq!(s.tables(&keys[4]).unwrap().bidir.right_count(), 1);
        assert_eq!(s.tables(&keys[6]).unwrap().window.len(), 1);
        s.audit().unwrap();
    }

    #[test]
    fn release_lifecycle() {
        let mut s = store(32, 256);
        let per = s.tokens_per_page(PageClass::High);
        s.conservative_alloc_prompt(&[(key(3, 0), per * 2), (key(3, 1), per)]).unwrap();
        let before = s.free_count();
        let freed = s.release_request(3).unwrap();
        assert_eq!(freed.len(), 3);
        assert_eq!(s.free_count(), before + 3);
        assert_eq!(s.release_request(3), Err(StoreError::RequestNotLive(3)));
        assert_eq!(s.release_request(99), Err(StoreError::RequestNotLive(99)));
        s.conservative_alloc_prompt(&[(key(4, 0), 0)]).unwrap();
        assert!(s.release_request(4).unwrap().is_empty());
        s.audit().unwrap();
    }

    #[test]
    fn relabel_requires_empty_high_page() {
        let mut s = store(8, 256);
        let per = s.tokens_per_page(PageClass::High);
        let g = s.conservative_alloc_prompt(&[(key(0, 0), per * 3)]).unwrap();
        let last = g[0].high[2];
        let plan = HeadPlan { relabel_low: vec![last], ..HeadPlan::new(key(0, 0)) };
        s.compact(vec![plan]).unwrap();
        let t = s.tables(&key(0, 0)).unwrap();
        assert_eq!(t.bidir.low_pages().collect::<Vec<_>>(), vec![last]);
        assert_eq!(s.page(last).capacity(), s.tokens_per_page(PageClass::Low));
    }
}
