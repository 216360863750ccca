//! Binary Merkle commitment over the slot map.
//!
//! Leaves are the slots sorted by key, `leaf = H(0x00 ‖ key ‖ value_le)`.
//! Interior nodes are `H(0x01 ‖ left ‖ right)`; an unpaired last node is
//! carried up to the next level unchanged. The root of a single leaf is that
//! leaf's hash and the empty map commits to [`EMPTY_ROOT`].

use std::collections::HashMap;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::store::{StateStore, Value};
use crate::model::StorageKey;

pub type Root = [u8; 32];

pub const EMPTY_ROOT: Root = [0u8; 32];

/// Below this many dirty nodes a level is rehashed on the calling thread.
const PAR_THRESHOLD: usize = 512;

pub fn leaf_hash(key: &StorageKey, value: Value) -> Root {
    let mut h = Sha256::new();
    h.update([0x00]);
    h.update(key.0);
    h.update(value.to_le_bytes());
    h.finalize().into()
}

pub fn node_hash(left: &Root, right: &Root) -> Root {
    let mut h = Sha256::new();
    h.update([0x01]);
    h.update(left);
    h.update(right);
    h.finalize().into()
}

fn parent_level(level: &[Root]) -> Vec<Root> {
    level
        .chunks(2)
        .map(|pair| match pair {
            [l, r] => node_hash(l, r),
            [single] => *single,
            _ => unreachable!(),
        })
        .collect()
}

/// Root of `slots`, which must be sorted by key with no duplicates.
pub fn merkle_root(slots: &[(StorageKey, Value)]) -> Root {
    if slots.is_empty() {
        return EMPTY_ROOT;
    }
    debug_assert!(slots.windows(2).all(|w| w[0].0 < w[1].0));
    let mut level: Vec<Root> = slots.iter().map(|(k, v)| leaf_hash(k, *v)).collect();
    while level.len() > 1 {
        level = parent_level(&level);
    }
    level[0]
}

/// Full-recompute root of the whole store.
pub fn store_root(store: &StateStore) -> Root {
    merkle_root(&store.sorted_slots())
}

/// Merkle tree kept in memory so that changing `d` of `n` existing slots
/// costs `O(d log n)` hashes. Inserting a new key rebuilds the tree. The
/// root is always bit-identical to [`merkle_root`] of the same map.
#[derive(Clone, Debug, Default)]
pub struct IncrementalMerkle {
    keys: Vec<StorageKey>,
    values: Vec<Value>,
    position: HashMap<StorageKey, usize>,
    /// `levels[0]` are the leaves, the last level holds the root.
    levels: Vec<Vec<Root>>,
}

impl IncrementalMerkle {
    pub fn build(slots: &[(StorageKey, Value)]) -> Self {
        let mut t = IncrementalMerkle {
            keys: slots.iter().map(|(k, _)| *k).collect(),
            values: slots.iter().map(|(_, v)| *v).collect(),
            ..Default::default()
        };
        t.rebuild();
        t
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn root(&self) -> Root {
        self.levels
            .last()
            .and_then(|l| l.first())
            .copied()
            .unwrap_or(EMPTY_ROOT)
    }

    fn rebuild(&mut self) {
        self.position = self.keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        self.levels.clear();
        if self.keys.is_empty() {
            return;
        }
        let leaves: Vec<Root> = self
            .keys
            .par_iter()
            .zip(self.values.par_iter())
            .map(|(k, v)| leaf_hash(k, *v))
            .collect();
        self.levels.push(leaves);
        while self.levels.last().unwrap().len() > 1 {
            let next = parent_level(self.levels.last().unwrap());
            self.levels.push(next);
        }
    }

    /// Set the given slots to new values (inserting unknown keys).
    pub fn update(&mut self, changes: &[(StorageKey, Value)]) {
        if changes.is_empty() {
            return;
        }
        let mut fresh = Vec::new();
        let mut touched = Vec::with_capacity(changes.len());
        for (k, v) in changes {
            match self.position.get(k) {
                Some(&i) => {
                    self.values[i] = *v;
                    touched.push(i);
                }
                None => fresh.push((*k, *v)),
            }
        }
        if !fresh.is_empty() {
            let mut merged: Vec<(StorageKey, Value)> = self
                .keys
                .iter()
                .copied()
                .zip(self.values.iter().copied())
                .collect();
            merged.extend(fresh);
            merged.sort_by_key(|(k, _)| *k);
            merged.dedup_by(|later, earlier| {
                if later.0 == earlier.0 {
                    earlier.1 = later.1;
                    true
                } else {
                    false
                }
            });
            self.keys = merged.iter().map(|(k, _)| *k).collect();
            self.values = merged.iter().map(|(_, v)| *v).collect();
            self.rebuild();
            return;
        }

        touched.sort_unstable();
        touched.dedup();
        let hashes = par_map(&touched, |&i| leaf_hash(&self.keys[i], self.values[i]));
        for (&i, h) in touched.iter().zip(hashes) {
            self.levels[0][i] = h;
        }
        for depth in 1..self.levels.len() {
            let mut parents: Vec<usize> = touched.iter().map(|i| i / 2).collect();
            parents.dedup();
            let below = &self.levels[depth - 1];
            let hashes = par_map(&parents, |&p| match below.get(2 * p + 1) {
                Some(r) => node_hash(&below[2 * p], r),
                None => below[2 * p],
            });
            for (&p, h) in parents.iter().zip(hashes) {
                self.levels[depth][p] = h;
            }
            touched = parents;
        }
    }
}

fn par_map<F>(idx: &[usize], f: F) -> Vec<Root>
where
    F: Fn(&usize) -> Root + Sync + Send,
{
    if idx.len() < PAR_THRESHOLD {
        idx.iter().map(f).collect()
    } else {
        idx.par_iter().map(f).collect()
    }
}

/// How block formation commits state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CommitMode {
    #[default]
    FullRecompute,
    Incremental,
}

/// Commitment over a [`StateStore`], in either mode.
#[derive(Debug)]
pub struct Commitment {
    mode: CommitMode,
    tree: Option<IncrementalMerkle>,
}

impl Commitment {
    pub fn new(mode: CommitMode) -> Self {
        Commitment { mode, tree: None }
    }

    pub fn mode(&self) -> CommitMode {
        self.mode
    }

    /// Root of the store's current state. Drains the store's dirty set.
    pub fn commit(&mut self, store: &StateStore) -> Root {
        match self.mode {
            CommitMode::FullRecompute => {
                store.take_dirty();
                store_root(store)
            }
            CommitMode::Incremental => match &mut self.tree {
                None => {
                    store.take_dirty();
                    let tree = IncrementalMerkle::build(&store.sorted_slots());
                    let root = tree.root();
                    self.tree = Some(tree);
                    root
                }
                Some(tree) => {
                    let changes: Vec<_> = store
                        .take_dirty()
                        .into_iter()
                        .map(|k| (k, store.get(&k)))
                        .collect();
                    tree.update(&changes);
                    tree.root()
                }
            },
        }
    }
}
