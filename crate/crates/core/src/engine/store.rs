use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::model::StorageKey;

/// 16-byte unsigned slot value.
pub type Value = u128;

const SHARDS: usize = 256;

/// Read access to some version of the slot map. Absent slots read as zero.
pub trait StateRead {
    fn read(&self, key: &StorageKey) -> Value;
}

#[derive(Default)]
struct Shard {
    map: Arc<HashMap<StorageKey, Value>>,
    dirty: Vec<StorageKey>,
}

/// In-memory slot store, sharded by key so disjoint slots can be read and
/// written concurrently. Shard maps are copy-on-write: a [`Snapshot`] holds
/// the current shard maps and a later write copies only the shard it
/// touches while that snapshot is alive.
pub struct StateStore {
    shards: Vec<Mutex<Shard>>,
    version: AtomicU64,
}

impl Default for StateStore {
    fn default() -> Self {
        StateStore {
            shards: (0..SHARDS).map(|_| Mutex::new(Shard::default())).collect(),
            version: AtomicU64::new(0),
        }
    }
}

impl std::fmt::Debug for StateStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StateStore")
            .field("slots", &self.len())
            .field("version", &self.version())
            .finish()
    }
}

#[inline]
fn shard_of(key: &StorageKey) -> usize {
    // keys are hash outputs; the low byte is uniform enough
    key.0[7] as usize % SHARDS
}

impl StateStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store holding `slots`, with an empty dirty set.
    pub fn from_slots(slots: impl IntoIterator<Item = (StorageKey, Value)>) -> Self {
        let mut maps: Vec<HashMap<StorageKey, Value>> = vec![HashMap::new(); SHARDS];
        for (k, v) in slots {
            maps[shard_of(&k)].insert(k, v);
        }
        StateStore {
            shards: maps
                .into_iter()
                .map(|m| {
                    Mutex::new(Shard {
                        map: Arc::new(m),
                        dirty: Vec::new(),
                    })
                })
                .collect(),
            version: AtomicU64::new(0),
        }
    }

    pub fn get(&self, key: &StorageKey) -> Value {
        let shard = self.shards[shard_of(key)].lock().unwrap();
        shard.map.get(key).copied().unwrap_or(0)
    }

    /// Apply a batch of writes and bump the version once.
    pub fn apply(&self, writes: &[(StorageKey, Value)]) {
        if writes.is_empty() {
            return;
        }
        for (k, v) in writes {
            let mut shard = self.shards[shard_of(k)].lock().unwrap();
            let shard = &mut *shard;
            Arc::make_mut(&mut shard.map).insert(*k, *v);
            shard.dirty.push(*k);
        }
        self.version.fetch_add(1, Ordering::Relaxed);
    }

    pub fn version(&self) -> u64 {
        self.version.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.shards
            .iter()
            .map(|s| s.lock().unwrap().map.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Read-only view of the current version.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            shards: self
                .shards
                .iter()
                .map(|s| Arc::clone(&s.lock().unwrap().map))
                .collect(),
            version: self.version(),
        }
    }

    /// All slots sorted by key.
    pub fn sorted_slots(&self) -> Vec<(StorageKey, Value)> {
        let mut all: Vec<_> = self
            .shards
            .iter()
            .flat_map(|s| {
                let s = s.lock().unwrap();
                s.map.iter().map(|(k, v)| (*k, *v)).collect::<Vec<_>>()
            })
            .collect();
        all.sort_unstable_by_key(|(k, _)| *k);
        all
    }

    /// Keys written since the last call, sorted and deduplicated.
    pub fn take_dirty(&self) -> Vec<StorageKey> {
        let mut keys: Vec<StorageKey> = self
            .shards
            .iter()
            .flat_map(|s| std::mem::take(&mut s.lock().unwrap().dirty))
            .collect();
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    pub fn has_dirty(&self) -> bool {
        self.shards
            .iter()
            .any(|s| !s.lock().unwrap().dirty.is_empty())
    }
}

impl StateRead for StateStore {
    fn read(&self, key: &StorageKey) -> Value {
        self.get(key)
    }
}

/// Frozen view of the store at one version. Reads never observe writes
/// applied to the store after the snapshot was taken.
#[derive(Clone)]
pub struct Snapshot {
    shards: Vec<Arc<HashMap<StorageKey, Value>>>,
    version: u64,
}

impl Snapshot {
    pub fn version(&self) -> u64 {
        self.version
    }
}

impl StateRead for Snapshot {
    fn read(&self, key: &StorageKey) -> Value {
        self.shards[shard_of(key)].get(key).copied().unwrap_or(0)
    }
}

impl StateRead for std::collections::BTreeMap<StorageKey, Value> {
    fn read(&self, key: &StorageKey) -> Value {
        self.get(key).copied().unwrap_or(0)
    }
}

pub const SNAPSHOT_RECORD_LEN: usize = 8 + 16;

/// Write `(key ‖ value)` records sorted by key; values little-endian.
pub fn export_snapshot(store: &StateStore, mut w: impl Write) -> io::Result<()> {
    for (k, v) in store.sorted_slots() {
        w.write_all(&k.0)?;
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn import_snapshot(mut r: impl Read) -> io::Result<StateStore> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() % SNAPSHOT_RECORD_LEN != 0 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!(
                "snapshot length {} is not a multiple of {SNAPSHOT_RECORD_LEN}",
                buf.len()
            ),
        ));
    }
    let mut slots = Vec::with_capacity(buf.len() / SNAPSHOT_RECORD_LEN);
    for rec in buf.chunks_exact(SNAPSHOT_RECORD_LEN) {
        let key = StorageKey(rec[..8].try_into().unwrap());
        let value = Value::from_le_bytes(rec[8..].try_into().unwrap());
        if let Some((prev, _)) = slots.last() {
            if *prev >= key {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    "snapshot keys not strictly sorted",
                ));
            }
        }
        slots.push((key, value));
    }
    Ok(StateStore::from_slots(slots))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(v: u64) -> StorageKey {
        StorageKey::from_u64(v)
    }

    #[test]
    fn snapshot_is_isolated_from_later_writes() {
        let store = StateStore::from_slots([(k(1), 10), (k(2), 20)]);
        let snap = store.snapshot();
        store.apply(&[(k(1), 99), (k(3), 7)]);
        assert_eq!(snap.read(&k(1)), 10);
        assert_eq!(snap.read(&k(3)), 0);
        assert_eq!(store.get(&k(1)), 99);
        assert_eq!(snap.version() + 1, store.version());
    }

    #[test]
    fn dirty_keys_are_drained() {
        let store = StateStore::from_slots([(k(1), 1)]);
        assert!(!store.has_dirty());
        store.apply(&[(k(5), 1), (k(1), 2), (k(5), 3)]);
        assert_eq!(store.take_dirty(), vec![k(1), k(5)]);
        assert!(store.take_dirty().is_empty());
    }

    #[test]
    fn snapshot_file_round_trip() {
        let store = StateStore::from_slots((0..100u64).map(|i| (k(i * 7919), i as u128 * 3)));
        let mut bytes = Vec::new();
        export_snapshot(&store, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 100 * SNAPSHOT_RECORD_LEN);
        let back = import_snapshot(&bytes[..]).unwrap();
        assert_eq!(back.sorted_slots(), store.sorted_slots());
    }

    #[test]
    fn snapshot_import_rejects_bad_input() {
        assert!(import_snapshot(&[0u8; 23][..]).is_err());
        let mut bytes = Vec::new();
        for key in [k(2), k(1)] {
            bytes.extend_from_slice(&key.0);
            bytes.extend_from_slice(&0u128.to_le_bytes());
        }
        assert!(import_snapshot(&bytes[..]).is_err());
    }
}
