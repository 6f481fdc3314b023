//! In-memory staging of committed entries and adapt-time snapshots.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{crc32, AppId, Rank, StorageLevel};

/// Memory budget shared by every agent on one node.
#[derive(Debug)]
pub struct NodeBudget {
    capacity: u64,
    used: AtomicU64,
}

impl NodeBudget {
    pub fn new(capacity: u64) -> Arc<Self> {
        Arc::new(Self {
            capacity,
            used: AtomicU64::new(0),
        })
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    pub fn try_reserve(&self, n: u64) -> bool {
        self.used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |u| {
                (u + n <= self.capacity).then_some(u + n)
            })
            .is_ok()
    }

    pub fn release(&self, n: u64) {
        let prev = self.used.fetch_sub(n, Ordering::SeqCst);
        debug_assert!(prev >= n, "budget released more than reserved");
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntryKey {
    pub app: AppId,
    pub version: u64,
    pub rank: Rank,
    pub region: String,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub epoch: u32,
    pub len: u64,
    pub crc: u32,
    pub level: StorageLevel,
    data: Option<Arc<Vec<u8>>>,
}

impl Entry {
    pub fn data(&self) -> Option<&Arc<Vec<u8>>> {
        self.data.as_ref()
    }
}

/// Committed entries. `bytes_staged` always equals the summed length of the
/// entries whose level keeps them in memory.
#[derive(Debug, Default)]
pub struct StagingStore {
    entries: BTreeMap<EntryKey, Entry>,
    bytes_staged: u64,
}

impl StagingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes_staged(&self) -> u64 {
        self.bytes_staged
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores an entry, replacing any previous one under the same key.
    /// Returns the number of in-memory bytes the replaced entry held.
    pub fn insert(&mut self, key: EntryKey, epoch: u32, data: Arc<Vec<u8>>, crc: u32) -> Result<u64> {
        if crc32(&data) != crc {
            return Err(Error::CorruptState(format!(
                "refusing to stage {key:?}: checksum mismatch"
            )));
        }
        let len = data.len() as u64;
        let entry = Entry {
            epoch,
            len,
            crc,
            level: StorageLevel::Memory,
            data: Some(data),
        };
        let replaced = self.entries.insert(key, entry).map_or(0, |old| old.memory_bytes());
        self.bytes_staged = self.bytes_staged - replaced + len;
        self.debug_check();
        Ok(replaced)
    }

    pub fn get(&self, key: &EntryKey) -> Option<&Entry> {
        self.entries.get(key)
    }

    /// In-memory bytes of an entry after verifying them against the checksum
    /// recorded at commit time.
    pub fn read(&self, key: &EntryKey) -> Result<Option<(Arc<Vec<u8>>, u32)>> {
        let Some(entry) = self.entries.get(key) else {
            return Ok(None);
        };
        let Some(data) = entry.data.clone() else {
            return Ok(None);
        };
        if crc32(&data) != entry.crc {
            return Err(Error::CorruptState(format!(
                "staged entry {key:?} fails its checksum"
            )));
        }
        Ok(Some((data, entry.crc)))
    }

    pub fn mark_flushed(&mut self, key: &EntryKey) {
        if let Some(e) = self.entries.get_mut(key) {
            if e.level == StorageLevel::Memory {
                e.level = StorageLevel::Both;
            }
        }
    }

    /// Drops the memory copy of an entry that is already on the PFS tier.
    /// Returns the bytes freed.
    pub fn purge(&mut self, key: &EntryKey) -> Result<u64> {
        let Some(e) = self.entries.get_mut(key) else {
            return Ok(0);
        };
        match e.level {
            StorageLevel::Both => {
                e.level = StorageLevel::Pfs;
                e.data = None;
                let len = e.len;
                self.bytes_staged -= len;
                self.debug_check();
                Ok(len)
            }
            StorageLevel::Pfs => Ok(0),
            StorageLevel::Memory => Err(Error::invalid(format!(
                "entry {key:?} is only in memory and cannot be purged"
            ))),
        }
    }

    /// Removes an entry outright (retention drop or completed migration).
    /// Returns the bytes freed.
    pub fn remove(&mut self, key: &EntryKey) -> u64 {
        let freed = self.entries.remove(key).map_or(0, |e| e.memory_bytes());
        self.bytes_staged -= freed;
        self.debug_check();
        freed
    }

    pub fn keys(&self) -> Vec<EntryKey> {
        self.entries.keys().cloned().collect()
    }

    pub fn version_keys(&self, app: AppId, version: u64) -> Vec<EntryKey> {
        self.entries
            .keys()
            .filter(|k| k.app == app && k.version == version)
            .cloned()
            .collect()
    }

    /// Recomputes the accounting from scratch.
    pub fn check_accounting(&self) -> Result<()> {
        let sum: u64 = self.entries.values().map(Entry::memory_bytes).sum();
        if sum != self.bytes_staged {
            return Err(Error::CorruptState(format!(
                "bytes_staged {} but entries hold {sum}",
                self.bytes_staged
            )));
        }
        Ok(())
    }

    fn debug_check(&self) {
        debug_assert!(self.check_accounting().is_ok(), "staging accounting drifted");
    }
}

impl Entry {
    fn memory_bytes(&self) -> u64 {
        if self.level.in_memory() {
            self.len
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SnapshotKey {
    pub app: AppId,
    pub epoch: u32,
    pub rank: Rank,
    pub region: String,
}

/// Region contents pushed by surviving ranks when an adaptation starts.
#[derive(Debug, Default)]
pub struct SnapshotStore {
    snaps: BTreeMap<SnapshotKey, (Arc<Vec<u8>>, u32)>,
    bytes: u64,
}

impl SnapshotStore {
    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn insert(&mut self, key: SnapshotKey, data: Arc<Vec<u8>>, crc: u32) -> u64 {
        self.bytes += data.len() as u64;
        let replaced = self.snaps.insert(key, (data, crc)).map_or(0, |(d, _)| d.len() as u64);
        self.bytes -= replaced;
        replaced
    }

    pub fn get(&self, key: &SnapshotKey) -> Option<(Arc<Vec<u8>>, u32)> {
        self.snaps.get(key).cloned()
    }

    /// Drops every snapshot of `app` with epoch at most `through`.
    pub fn drop_through(&mut self, app: AppId, through: u32) -> u64 {
        let doomed: Vec<SnapshotKey> = self
            .snaps
            .keys()
            .filter(|k| k.app == app && k.epoch <= through)
            .cloned()
            .collect();
        let mut freed = 0;
        for k in doomed {
            if let Some((d, _)) = self.snaps.remove(&k) {
                freed += d.len() as u64;
            }
        }
        self.bytes -= freed;
        freed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(version: u64, rank: Rank) -> EntryKey {
        EntryKey {
            app: AppId(1),
            version,
            rank,
            region: "data".into(),
        }
    }

    fn blob(n: usize, fill: u8) -> (Arc<Vec<u8>>, u32) {
        let v = vec![fill; n];
        let c = crc32(&v);
        (Arc::new(v), c)
    }

    #[test]
    fn insert_read_and_overwrite() {
        let mut s = StagingStore::new();
        let (d, c) = blob(100, 1);
        assert_eq!(s.insert(key(1, 0), 0, d.clone(), c).unwrap(), 0);
        assert_eq!(s.bytes_staged(), 100);
        let (d2, c2) = blob(40, 2);
        assert_eq!(s.insert(key(1, 0), 0, d2, c2).unwrap(), 100);
        assert_eq!(s.bytes_staged(), 40);
        assert_eq!(s.read(&key(1, 0)).unwrap().unwrap().1, c2);
        assert!(s.read(&key(9, 0)).unwrap().is_none());
    }

    #[test]
    fn wrong_checksum_is_refused() {
        let mut s = StagingStore::new();
        let (d, c) = blob(10, 1);
        assert!(s.insert(key(1, 0), 0, d, c ^ 1).is_err());
        assert!(s.is_empty());
    }

    #[test]
    fn purge_follows_durability_ladder() {
        let mut s = StagingStore::new();
        let (d, c) = blob(64, 3);
        s.insert(key(1, 0), 0, d, c).unwrap();
        assert!(s.purge(&key(1, 0)).is_err());
        s.mark_flushed(&key(1, 0));
        assert_eq!(s.get(&key(1, 0)).unwrap().level, StorageLevel::Both);
        assert_eq!(s.purge(&key(1, 0)).unwrap(), 64);
        assert_eq!(s.bytes_staged(), 0);
        assert_eq!(s.get(&key(1, 0)).unwrap().level, StorageLevel::Pfs);
        assert!(s.read(&key(1, 0)).unwrap().is_none());
        assert_eq!(s.remove(&key(1, 0)), 0);
    }

    #[test]
    fn budget_refuses_overcommit() {
        let b = NodeBudget::new(100);
        assert!(b.try_reserve(60));
        assert!(!b.try_reserve(41));
        assert!(b.try_reserve(40));
        b.release(100);
        assert_eq!(b.used(), 0);
    }

    #[test]
    fn snapshots_drop_by_epoch() {
        let mut s = SnapshotStore::default();
        for epoch in 0..3 {
            let (d, c) = blob(10, epoch as u8);
            s.insert(
                SnapshotKey {
                    app: AppId(1),
                    epoch,
                    rank: 0,
                    region: "r".into(),
                },
                d,
                c,
            );
        }
        assert_eq!(s.bytes(), 30);
        assert_eq!(s.drop_through(AppId(1), 1), 20);
        assert_eq!(s.bytes(), 10);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(u64, Rank, usize),
        Flush(u64, Rank),
        Purge(u64, Rank),
        Remove(u64, Rank),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u64..4, 0u32..3, 0usize..300).prop_map(|(v, r, n)| Op::Insert(v, r, n)),
            (0u64..4, 0u32..3).prop_map(|(v, r)| Op::Flush(v, r)),
            (0u64..4, 0u32..3).prop_map(|(v, r)| Op::Purge(v, r)),
            (0u64..4, 0u32..3).prop_map(|(v, r)| Op::Remove(v, r)),
        ]
    }

    proptest! {
        #[test]
        fn accounting_tracks_every_mutation(ops in prop::collection::vec(op(), 1..60)) {
            let mut s = StagingStore::new();
            for op in ops {
                match op {
                    Op::Insert(v, r, n) => {
                        let (d, c) = blob(n, v as u8);
                        s.insert(key(v, r), 0, d, c).unwrap();
                    }
                    Op::Flush(v, r) => s.mark_flushed(&key(v, r)),
                    Op::Purge(v, r) => { let _ = s.purge(&key(v, r)); }
                    Op::Remove(v, r) => { s.remove(&key(v, r)); }
                }
                prop_assert!(s.check_accounting().is_ok());
            }
        }
    }
}
