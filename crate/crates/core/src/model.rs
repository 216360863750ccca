//! Shared domain types and the exact conflict predicate.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Opaque 8-byte identifier of one state slot.
///
/// Ordering is lexicographic on the bytes, which is the same as numeric
/// ordering of the big-endian `u64` view.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct StorageKey(pub [u8; 8]);

impl StorageKey {
    pub const fn from_u64(v: u64) -> Self {
        StorageKey(v.to_be_bytes())
    }

    #[inline]
    pub const fn as_u64(&self) -> u64 {
        u64::from_be_bytes(self.0)
    }
}

impl fmt::Debug for StorageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StorageKey({})", hex::encode(self.0))
    }
}

/// 6-byte account address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct AccountId(pub [u8; 6]);

impl AccountId {
    pub const MAX_INDEX: u64 = (1 << 48) - 1;

    /// Address whose big-endian value is `index`. Sorting addresses
    /// lexicographically sorts them by index.
    pub fn from_index(index: u64) -> Self {
        debug_assert!(index <= Self::MAX_INDEX);
        let b = index.to_be_bytes();
        AccountId([b[2], b[3], b[4], b[5], b[6], b[7]])
    }

    pub fn index(&self) -> u64 {
        let a = self.0;
        u64::from_be_bytes([0, 0, a[0], a[1], a[2], a[3], a[4], a[5]])
    }
}

impl fmt::Debug for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AccountId({})", hex::encode(self.0))
    }
}

/// Position of a transaction in mempool arrival order.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default, Serialize, Deserialize,
)]
pub struct TxnId(pub u64);

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

/// Deduplicated read and write key sets of one transaction.
///
/// Both sets are kept as sorted vectors; transfers touch two or three keys
/// so a merge walk beats hashing.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Default, Serialize, Deserialize)]
pub struct RwSet {
    reads: Vec<StorageKey>,
    writes: Vec<StorageKey>,
}

impl RwSet {
    pub fn new(
        reads: impl IntoIterator<Item = StorageKey>,
        writes: impl IntoIterator<Item = StorageKey>,
    ) -> Self {
        RwSet {
            reads: sorted_unique(reads),
            writes: sorted_unique(writes),
        }
    }

    pub fn reads(&self) -> &[StorageKey] {
        &self.reads
    }

    pub fn writes(&self) -> &[StorageKey] {
        &self.writes
    }

    pub fn is_empty(&self) -> bool {
        self.reads.is_empty() && self.writes.is_empty()
    }

    pub fn reads_key(&self, key: &StorageKey) -> bool {
        self.reads.binary_search(key).is_ok()
    }

    pub fn writes_key(&self, key: &StorageKey) -> bool {
        self.writes.binary_search(key).is_ok()
    }

    /// Sorted union of reads and writes.
    pub fn keys(&self) -> Vec<StorageKey> {
        let mut all = Vec::with_capacity(self.reads.len() + self.writes.len());
        all.extend_from_slice(&self.reads);
        all.extend_from_slice(&self.writes);
        all.sort_unstable();
        all.dedup();
        all
    }

    /// Every key together with whether this set writes it. A key that is
    /// both read and written counts as a write.
    pub fn accesses(&self) -> impl Iterator<Item = (StorageKey, AccessKind)> + '_ {
        let reads_only = self
            .reads
            .iter()
            .filter(|k| !self.writes_key(k))
            .map(|k| (*k, AccessKind::Read));
        self.writes
            .iter()
            .map(|k| (*k, AccessKind::Write))
            .chain(reads_only)
    }

    /// `self ⊆ other` componentwise.
    pub fn is_subset_of(&self, other: &RwSet) -> bool {
        is_subset(&self.reads, &other.reads) && is_subset(&self.writes, &other.writes)
    }

    pub fn conflicts(&self, other: &RwSet) -> bool {
        conflicts(self, other)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

fn sorted_unique(keys: impl IntoIterator<Item = StorageKey>) -> Vec<StorageKey> {
    let mut v: Vec<StorageKey> = keys.into_iter().collect();
    v.sort_unstable();
    v.dedup();
    v
}

pub(crate) fn intersects(a: &[StorageKey], b: &[StorageKey]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

fn is_subset(small: &[StorageKey], big: &[StorageKey]) -> bool {
    small.iter().all(|k| big.binary_search(k).is_ok())
}

/// Exact conflict predicate: some key is written by one side and read or
/// written by the other. Read-read overlap alone is not a conflict.
pub fn conflicts(a: &RwSet, b: &RwSet) -> bool {
    intersects(&a.writes, &b.writes)
        || intersects(&a.writes, &b.reads)
        || intersects(&a.reads, &b.writes)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum TransferKind {
    Native,
    Erc20,
}

/// A value transfer. Native transfers move the base balance; ERC20
/// transfers move balances of one implicit token contract.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct TransferOp {
    pub kind: TransferKind,
    pub sender: AccountId,
    pub receiver: AccountId,
    pub amount: u128,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Transaction {
    pub id: TxnId,
    pub op: TransferOp,
    /// Predicted access set; `None` until analysis or an access list fills it.
    pub approx_rw: Option<RwSet>,
    /// Test hook: number of upcoming executions that touch one key outside
    /// the honest access set. The honest VM never diverges on its own.
    pub inject_divergence: u8,
}

impl Transaction {
    pub fn new(id: TxnId, op: TransferOp) -> Self {
        Transaction {
            id,
            op,
            approx_rw: None,
            inject_divergence: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k(v: u64) -> StorageKey {
        StorageKey::from_u64(v)
    }

    #[test]
    fn read_read_is_not_a_conflict() {
        let a = RwSet::new([k(1)], []);
        let b = RwSet::new([k(1)], []);
        assert!(!conflicts(&a, &b));
    }

    #[test]
    fn write_read_overlap_conflicts() {
        let a = RwSet::new([], [k(1)]);
        let b = RwSet::new([k(1)], []);
        assert!(conflicts(&a, &b));
    }

    #[test]
    fn disjoint_sets_do_not_conflict() {
        let a = RwSet::new([k(1)], [k(2)]);
        let b = RwSet::new([k(3)], [k(4)]);
        assert!(!conflicts(&a, &b));
    }

    #[test]
    fn sets_are_deduplicated_and_sorted() {
        let s = RwSet::new([k(3), k(1), k(3)], [k(2), k(2)]);
        assert_eq!(s.reads(), &[k(1), k(3)]);
        assert_eq!(s.writes(), &[k(2)]);
        assert_eq!(s.keys(), vec![k(1), k(2), k(3)]);
    }

    #[test]
    fn key_order_is_lexicographic() {
        assert!(StorageKey([0, 0, 0, 0, 0, 0, 1, 0]) > StorageKey([0, 0, 0, 0, 0, 0, 0, 255]));
        assert!(k(256) > k(255));
    }

    #[test]
    fn account_index_round_trip() {
        for i in [0, 1, 255, 1 << 20, AccountId::MAX_INDEX] {
            assert_eq!(AccountId::from_index(i).index(), i);
        }
        assert!(AccountId::from_index(2) > AccountId::from_index(1));
    }

    fn rwset() -> impl Strategy<Value = RwSet> {
        (
            proptest::collection::vec(0u64..12, 0..4),
            proptest::collection::vec(0u64..12, 0..4),
        )
            .prop_map(|(r, w)| RwSet::new(r.into_iter().map(k), w.into_iter().map(k)))
    }

    fn brute_conflict(a: &RwSet, b: &RwSet) -> bool {
        a.keys().iter().any(|key| {
            let in_b = b.reads_key(key) || b.writes_key(key);
            in_b && (a.writes_key(key) || b.writes_key(key))
        })
    }

    proptest! {
        #[test]
        fn conflicts_is_symmetric(a in rwset(), b in rwset()) {
            prop_assert_eq!(conflicts(&a, &b), conflicts(&b, &a));
        }

        #[test]
        fn self_conflict_iff_writes(a in rwset()) {
            prop_assert_eq!(conflicts(&a, &a), !a.writes().is_empty());
        }

        #[test]
        fn conflicts_matches_per_key_definition(a in rwset(), b in rwset()) {
            prop_assert_eq!(conflicts(&a, &b), brute_conflict(&a, &b));
        }
    }
}
