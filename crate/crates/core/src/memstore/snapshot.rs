//! Binary snapshot of a [`KvStore`]: every integer little-endian, configuration
//! carried as a length-prefixed JSON blob.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use crate::policy::Section;

use super::store::{HeadTables, KvStore, StoreConfig};
use super::{BidirPageTableEntry, CircularFreeList, HeadKey, PageId, StoreError};

pub const SNAPSHOT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"KVMXSNAP";

fn io_err(e: std::io::Error) -> StoreError {
    StoreError::Snapshot(e.to_string())
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<(), StoreError> {
        self.0.write_all(b).map_err(io_err)
    }
    fn u8(&mut self, v: u8) -> Result<(), StoreError> {
        self.bytes(&[v])
    }
    fn u32(&mut self, v: u32) -> Result<(), StoreError> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<(), StoreError> {
        self.bytes(&v.to_le_bytes())
    }
    fn blob(&mut self, b: &[u8]) -> Result<(), StoreError> {
        self.u64(b.len() as u64)?;
        self.bytes(b)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn exact<const N: usize>(&mut self) -> Result<[u8; N], StoreError> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(io_err)?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8, StoreError> {
        Ok(self.exact::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.exact()?))
    }
    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.exact()?))
    }
    fn len(&mut self, limit: usize) -> Result<usize, StoreError> {
        let n = self.u64()?;
        if n > limit as u64 {
            return Err(StoreError::Snapshot(format!("length {n} exceeds {limit}")));
        }
        Ok(n as usize)
    }
    fn blob(&mut self, limit: usize) -> Result<Vec<u8>, StoreError> {
        let n = self.len(limit)?;
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b).map_err(io_err)?;
        Ok(b)
    }
}

fn class_tag(store: &KvStore, i: usize) -> u8 {
    match store.pages[i].format() {
        None => 0,
        Some(f) => 1 + store.formats.iter().position(|g| g == f).expect("page format comes from the store") as u8,
    }
}

impl KvStore {
    pub fn write_snapshot<W: Write>(&self, out: W) -> Result<(), StoreError> {
        let mut w = Writer(out);
        w.bytes(MAGIC)?;
        w.u32(SNAPSHOT_VERSION)?;
        let config = serde_json::to_vec(&self.config).map_err(|e| StoreError::Snapshot(e.to_string()))?;
        w.blob(&config)?;
        w.u64(self.free.alloc_cursor())?;
        w.u64(self.free.recycle_cursor())?;
        for id in self.free.slots() {
            w.u32(id.0)?;
        }
        w.u64(self.live.len() as u64)?;
        for r in &self.live {
            w.u64(*r)?;
        }
        w.u64(self.tables.len() as u64)?;
        for (k, t) in &self.tables {
            w.u64(k.request)?;
            w.u32(k.layer)?;
            w.u32(k.head)?;
            let high: Vec<PageId> = t.bidir.high_pages().collect();
            let low: Vec<PageId> = t.bidir.low_pages().collect();
            for list in [&high, &low, &t.window] {
                w.u64(list.len() as u64)?;
                for id in list.iter() {
                    w.u32(id.0)?;
                }
            }
        }
        for (i, page) in self.pages.iter().enumerate() {
            w.u8(class_tag(self, i))?;
            let occ: Vec<u8> = (0..page.capacity()).map(|s| page.is_occupied(s) as u8).collect();
            w.blob(&occ)?;
            w.blob(page.data())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(input: R) -> Result<Self, StoreError> {
        let mut r = Reader(input);
        if &r.exact::<8>()? != MAGIC {
            return Err(StoreError::Snapshot("bad magic".into()));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(StoreError::Snapshot(format!("unsupported version {version}")));
        }
        let config: StoreConfig =
            serde_json::from_slice(&r.blob(1 << 16)?).map_err(|e| StoreError::Snapshot(e.to_string()))?;
        let mut store = KvStore::new(config)?;
        let n = config.total_pages;
        let alloc = r.u64()?;
        let recycle = r.u64()?;
        let mut slots = Vec::with_capacity(n);
        for _ in 0..n {
            slots.push(PageId(r.u32()?));
        }
        store.free = CircularFreeList::from_parts(slots, alloc, recycle)?;
        let mut live = BTreeSet::new();
        for _ in 0..r.len(n.max(1) << 20)? {
            live.insert(r.u64()?);
        }
        store.live = live;
        let mut tables = BTreeMap::new();
        let mut owner = vec![None; n];
        for _ in 0..r.len(n.max(1) << 20)? {
            let key = HeadKey::new(r.u64()?, r.u32()?, r.u32()?);
            let mut bidir = BidirPageTableEntry::new(store.table_len);
            let mut lists: [Vec<PageId>; 3] = Default::default();
            for list in lists.iter_mut() {
                for _ in 0..r.len(n)? {
                    let id = r.u32()?;
                    if id as usize >= n {
                        return Err(StoreError::Snapshot(format!("page {id} out of range")));
                    }
                    owner[id as usize] = Some(key);
                    list.push(PageId(id));
                }
            }
            let [high, low, window] = lists;
            for id in high {
                bidir.append(id, Section::High)?;
            }
            for id in low {
                bidir.append(id, Section::Low)?;
            }
            tables.insert(key, HeadTables { bidir, window });
        }
        store.tables = tables;
        store.owner = owner;
        let page_bytes = config.geometry.page_bytes;
        for i in 0..n {
            let tag = r.u8()?;
            let format = match tag {
                0 => None,
                1..=3 => Some(store.formats[tag as usize - 1]),
                _ => return Err(StoreError::Snapshot(format!("bad page tag {tag}"))),
            };
            let occ = r.blob(page_bytes * 8)?;
            let data = r.blob(page_bytes)?;
            if occ.len() != format.map_or(0, |f| f.capacity) || (!data.is_empty() && data.len() != page_bytes) {
                return Err(StoreError::Snapshot(format!("page {i} is malformed")));
            }
            store.pages[i].restore(format, occ.iter().map(|&b| b != 0).collect(), data);
        }
        store.audit().map_err(StoreError::Snapshot)?;
        Ok(store)
    }
}
