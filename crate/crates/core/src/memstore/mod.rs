//! Paged KV store with prefix-sum coordinated allocation and recycling.
//!
//! Memory is a pool of fixed-size [`UnifiedPage`]s. Free page IDs live in a
//! [`CircularFreeList`] whose free region is always one contiguous modular
//! interval, so a batch of per-head demands can be turned into disjoint
//! regions with one exclusive scan. Each (request, layer, head) owns a
//! [`BidirPageTableEntry`] for its high and low precision pages plus a short
//! list of window pages.

mod free_list;
mod geometry;
mod page;
mod scan;
mod snapshot;
mod store;
mod table;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use free_list::CircularFreeList;
pub use geometry::{PageFormat, PageGeometry};
pub use page::{StoredToken, UnifiedPage};
pub use scan::{exclusive_scan, prefix_sum_exclusive};
pub use snapshot::SNAPSHOT_VERSION;
pub use store::{page_table_metadata_bytes, HeadGrant, HeadPlan, HeadTables, KvStore, PageClass, StoreConfig};
pub use table::BidirPageTableEntry;

use crate::layout::LayoutError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PageId(pub u32);

/// Owner of one page table entry. Ordering is request-major, then layer, then head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadKey {
    pub request: u64,
    pub layer: u32,
    pub head: u32,
}

impl HeadKey {
    pub fn new(request: u64, layer: u32, head: u32) -> Self {
        Self { request, layer, head }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("out of memory: need {needed} pages, {available} free")]
    OutOfMemory { needed: usize, available: usize },
    #[error("page {page:?} is not owned by {key:?}")]
    NotOwner { page: PageId, key: HeadKey },
    #[error("more than one plan for {0:?}")]
    DuplicatePlan(HeadKey),
    #[error("page table entry of length {len} would overflow")]
    TableOverflow { len: usize },
    #[error("request {0} is not live")]
    RequestNotLive(u64),
    #[error("head {0:?} has no page table")]
    UnknownHead(HeadKey),
    #[error("negative demand {value} at index {index}")]
    NegativeDemand { index: usize, value: i64 },
    #[error("page is not configured")]
    PageNotConfigured,
    #[error("slot {slot} outside page capacity {capacity}")]
    BadSlot { slot: usize, capacity: usize },
    #[error("slot {slot} is empty")]
    EmptySlot { slot: usize },
    #[error("token precision does not match the page configuration")]
    PrecisionMismatch,
    #[error("window pages carry no token payload")]
    PassthroughPage,
    #[error("quantization metadata does not fit half precision")]
    MetadataOverflow,
    #[error("page {0:?} still holds tokens")]
    PageNotEmpty(PageId),
    #[error("bad geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("snapshot: {0}")]
    Snapshot(String),
}
