//! Greedy single-pass frame packing.
//!
//! Each transaction goes to the lowest-index frame it is admissible to. If
//! no active frame admits it, the largest frame (lowest index on ties) is
//! finalized and emitted, and the transaction starts that slot afresh. At
//! end of input every non-empty slot is flushed in ascending slot order.

use num_rational::Ratio;
use thiserror::Error;

use crate::bloom::{BloomParams, ExactFramePool, FrameIndex, FramePool, PoolError, MAX_FRAMES};
use crate::model::{Transaction, TxnId};

/// A group of mutually non-conflicting transactions in stream order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub seq: u64,
    pub txns: Vec<Transaction>,
}

impl Frame {
    pub fn len(&self) -> usize {
        self.txns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.txns.is_empty()
    }

    pub fn ids(&self) -> Vec<TxnId> {
        self.txns.iter().map(|t| t.id).collect()
    }

    /// Split into `[0, at)` (kept in `self`) and `[at, len)` (returned).
    /// Both halves keep the same sequence number.
    pub fn split_off(&mut self, at: usize) -> Frame {
        Frame {
            seq: self.seq,
            txns: self.txns.split_off(at),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FramerConfig {
    /// Eject a frame once it holds this many transactions.
    pub max_frame_txns: Option<usize>,
    /// Eject a frame this many processed transactions after it was opened.
    pub max_frame_age: Option<u64>,
    pub frames: usize,
    pub bloom: BloomParams,
}

impl Default for FramerConfig {
    fn default() -> Self {
        FramerConfig {
            max_frame_txns: None,
            max_frame_age: None,
            frames: MAX_FRAMES,
            bloom: BloomParams::default(),
        }
    }
}

impl FramerConfig {
    pub fn validate(&self) -> Result<(), FramerError> {
        if self.max_frame_txns == Some(0) {
            return Err(FramerError::Config("max_frame_txns must be >= 1".into()));
        }
        if self.max_frame_age == Some(0) {
            return Err(FramerError::Config("max_frame_age must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FramerError {
    #[error("transaction {0} has no read/write annotation")]
    MissingRwSet(TxnId),
    #[error("framer configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// Streaming packer over any [`FrameIndex`].
pub struct Framer<I> {
    pool: I,
    cfg: FramerConfig,
    held: Vec<Vec<Transaction>>,
    opened_at: Vec<Option<u64>>,
    tick: u64,
    next_seq: u64,
}

impl Framer<FramePool> {
    pub fn bloom(cfg: FramerConfig) -> Result<Self, FramerError> {
        let pool = FramePool::new(cfg.frames, cfg.bloom)?;
        Framer::with_pool(pool, cfg)
    }
}

impl Framer<ExactFramePool> {
    pub fn exact(cfg: FramerConfig) -> Result<Self, FramerError> {
        let pool = ExactFramePool::new(cfg.frames)?;
        Framer::with_pool(pool, cfg)
    }
}

impl<I: FrameIndex> Framer<I> {
    pub fn with_pool(pool: I, cfg: FramerConfig) -> Result<Self, FramerError> {
        cfg.validate()?;
        let n = pool.frames();
        Ok(Framer {
            pool,
            cfg,
            held: vec![Vec::new(); n],
            opened_at: vec![None; n],
            tick: 0,
            next_seq: 0,
        })
    }

    /// Continue frame numbering from `seq`.
    pub fn starting_at(mut self, seq: u64) -> Self {
        self.next_seq = seq;
        self
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn pool(&self) -> &I {
        &self.pool
    }

    /// Place one transaction, returning any frames finalized along the way.
    pub fn push(&mut self, txn: Transaction) -> Result<Vec<Frame>, FramerError> {
        let mut out = Vec::new();
        self.tick += 1;
        if let Some(age) = self.cfg.max_frame_age {
            for slot in 0..self.held.len() {
                if matches!(self.opened_at[slot], Some(t) if self.tick - t >= age) {
                    out.push(self.finalize(slot)?);
                }
            }
        }

        let rw = txn
            .approx_rw
            .as_ref()
            .ok_or(FramerError::MissingRwSet(txn.id))?;
        if self.pool.is_oversized(rw) {
            out.push(self.emit(vec![txn]));
            return Ok(out);
        }

        let mask = self.pool.admissible_mask(rw);
        let slot = if mask != 0 {
            mask.trailing_zeros() as usize
        } else {
            let slot = self.largest_active();
            out.push(self.finalize(slot)?);
            slot
        };
        self.pool.merge_into_frame(slot, txn.id, rw)?;
        self.held[slot].push(txn);
        self.opened_at[slot].get_or_insert(self.tick);

        if matches!(self.cfg.max_frame_txns, Some(cap) if self.held[slot].len() >= cap) {
            out.push(self.finalize(slot)?);
        }
        Ok(out)
    }

    /// Flush all non-empty slots in ascending index order.
    pub fn finish(&mut self) -> Result<Vec<Frame>, FramerError> {
        let mut out = Vec::new();
        for slot in 0..self.held.len() {
            if !self.held[slot].is_empty() {
                out.push(self.finalize(slot)?);
            }
        }
        Ok(out)
    }

    fn largest_active(&self) -> usize {
        let active = self.pool.active_mask();
        // max_by returns the last maximum, so ties compare reversed on index
        (0..self.held.len())
            .filter(|&i| active & (1 << i) != 0)
            .max_by(|&a, &b| self.held[a].len().cmp(&self.held[b].len()).then(b.cmp(&a)))
            .expect("pool has at least one active frame")
    }

    fn finalize(&mut self, slot: usize) -> Result<Frame, FramerError> {
        let ids = self.pool.reset_frame(slot)?;
        let txns = std::mem::take(&mut self.held[slot]);
        debug_assert!(ids.iter().eq(txns.iter().map(|t| &t.id)));
        self.opened_at[slot] = None;
        Ok(self.emit(txns))
    }

    fn emit(&mut self, txns: Vec<Transaction>) -> Frame {
        let seq = self.next_seq;
        self.next_seq += 1;
        Frame { seq, txns }
    }
}

fn pack_with<I: FrameIndex>(
    mut framer: Framer<I>,
    txns: impl IntoIterator<Item = Transaction>,
) -> Result<Vec<Frame>, FramerError> {
    let mut frames = Vec::new();
    for t in txns {
        frames.extend(framer.push(t)?);
    }
    frames.extend(framer.finish()?);
    Ok(frames)
}

/// Pack an annotated stream with Bloom-filter admissibility.
pub fn pack_stream(
    txns: impl IntoIterator<Item = Transaction>,
    cfg: &FramerConfig,
) -> Result<Vec<Frame>, FramerError> {
    pack_with(Framer::bloom(cfg.clone())?, txns)
}

/// Pack with exact-set admissibility; the no-false-positive reference.
pub fn pack_stream_exact(
    txns: impl IntoIterator<Item = Transaction>,
    cfg: &FramerConfig,
) -> Result<Vec<Frame>, FramerError> {
    pack_with(Framer::exact(cfg.clone())?, txns)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FramerMetrics {
    pub txn_count: u64,
    pub frame_count: u64,
}

impl FramerMetrics {
    pub fn add(&mut self, other: FramerMetrics) {
        self.txn_count += other.txn_count;
        self.frame_count += other.frame_count;
    }

    /// Transactions per frame: a lower bound on the stream's TLP.
    pub fn mean_frame_size(&self) -> Ratio<u64> {
        if self.frame_count == 0 {
            Ratio::from_integer(0)
        } else {
            Ratio::new(self.txn_count, self.frame_count)
        }
    }

    pub fn mean_frame_size_f64(&self) -> f64 {
        ratio_f64(self.mean_frame_size())
    }
}

pub fn framer_metrics(frames: &[Frame]) -> FramerMetrics {
    FramerMetrics {
        txn_count: frames.iter().map(|f| f.len() as u64).sum(),
        frame_count: frames.len() as u64,
    }
}

pub(crate) fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{conflicts, AccountId, RwSet, StorageKey, TransferKind, TransferOp};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k(v: u64) -> StorageKey {
        StorageKey::from_u64(v)
    }

    fn txn(id: u64, rw: RwSet) -> Transaction {
        let op = TransferOp {
            kind: TransferKind::Native,
            sender: AccountId::from_index(0),
            receiver: AccountId::from_index(1),
            amount: 0,
        };
        let mut t = Transaction::new(TxnId(id), op);
        t.approx_rw = Some(rw);
        t
    }

    fn ids(frames: &[Frame]) -> Vec<Vec<u64>> {
        frames
            .iter()
            .map(|f| f.txns.iter().map(|t| t.id.0).collect())
            .collect()
    }

    #[test]
    fn disjoint_txns_share_slot_zero() {
        let stream = (0..3).map(|i| txn(i, RwSet::new([k(10 * i)], [k(10 * i + 1)])));
        let frames = pack_stream(stream, &FramerConfig::default()).unwrap();
        assert_eq!(ids(&frames), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn all_conflicting_with_two_slots_traces_the_greedy_rule() {
        let cfg = FramerConfig {
            frames: 2,
            ..FramerConfig::default()
        };
        let stream = (1..=3).map(|i| txn(i, RwSet::new([], [k(1)])));
        let frames = pack_stream(stream, &cfg).unwrap();
        assert_eq!(ids(&frames), vec![vec![1], vec![3], vec![2]]);
        assert_eq!(
            frames.iter().map(|f| f.seq).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn largest_frame_is_evicted() {
        let cfg = FramerConfig {
            frames: 2,
            ..FramerConfig::default()
        };
        let stream = vec![
            txn(0, RwSet::new([], [k(1)])),
            txn(1, RwSet::new([], [k(1), k(5)])),
            txn(2, RwSet::new([], [k(6)])),
            txn(3, RwSet::new([], [k(6)])),
            txn(4, RwSet::new([k(1), k(6)], [])),
        ];
        // T2 -> slot0, T3 conflicts with slot0 (k6) -> slot1; T4 reads k1,k6:
        // conflicts with both; slot0 {T0,T2} and slot1 {T1,T3} tie -> slot0 evicted.
        let frames = pack_stream(stream, &cfg).unwrap();
        assert_eq!(ids(&frames), vec![vec![0, 2], vec![4], vec![1, 3]]);
    }

    #[test]
    fn missing_annotation_is_an_error() {
        let mut t = txn(9, RwSet::default());
        t.approx_rw = None;
        assert_eq!(
            pack_stream([t], &FramerConfig::default()),
            Err(FramerError::MissingRwSet(TxnId(9)))
        );
    }

    #[test]
    fn oversized_txn_gets_its_own_frame() {
        let cfg = FramerConfig {
            bloom: BloomParams {
                bits: 256,
                hashes: 4,
            },
            ..FramerConfig::default()
        };
        let stream = vec![
            txn(0, RwSet::new([k(1)], [])),
            txn(1, RwSet::new((100..200).map(k), [])),
            txn(2, RwSet::new([k(2)], [])),
        ];
        let frames = pack_stream(stream, &cfg).unwrap();
        assert_eq!(ids(&frames), vec![vec![1], vec![0, 2]]);
    }

    #[test]
    fn txn_cap_ejects_full_frames() {
        let cfg = FramerConfig {
            max_frame_txns: Some(2),
            ..FramerConfig::default()
        };
        let stream = (0..5).map(|i| txn(i, RwSet::new([], [k(i)])));
        let frames = pack_stream(stream, &cfg).unwrap();
        assert_eq!(ids(&frames), vec![vec![0, 1], vec![2, 3], vec![4]]);
    }

    #[test]
    fn age_cap_ejects_old_frames() {
        let cfg = FramerConfig {
            max_frame_age: Some(3),
            ..FramerConfig::default()
        };
        let stream = (0..7).map(|i| txn(i, RwSet::new([], [k(i)])));
        let frames = pack_stream(stream, &cfg).unwrap();
        assert_eq!(ids(&frames), vec![vec![0, 1, 2], vec![3, 4, 5], vec![6]]);
    }

    #[test]
    fn zero_caps_are_rejected() {
        let cfg = FramerConfig {
            max_frame_txns: Some(0),
            ..FramerConfig::default()
        };
        assert!(matches!(pack_stream([], &cfg), Err(FramerError::Config(_))));
    }

    #[test]
    fn metrics_report_mean_frame_size() {
        let frames: Vec<Frame> = (0..4)
            .map(|s| Frame {
                seq: s,
                txns: vec![
                    txn(2 * s, RwSet::default()),
                    txn(2 * s + 1, RwSet::default()),
                ],
            })
            .collect();
        let m = framer_metrics(&frames);
        assert_eq!(m.mean_frame_size(), Ratio::from_integer(2));
        let one = framer_metrics(&[Frame {
            seq: 0,
            txns: vec![txn(0, RwSet::default())],
        }]);
        assert_eq!(one.mean_frame_size_f64(), 1.0);
        assert_eq!(framer_metrics(&[]), FramerMetrics::default());
        assert_eq!(
            framer_metrics(&[]).mean_frame_size(),
            Ratio::from_integer(0)
        );
    }

    #[test]
    fn uniform_keys_pack_into_large_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let stream: Vec<_> = (0..10_000)
            .map(|i| {
                let a = k(rng.random_range(0..1 << 20));
                let b = k(rng.random_range(0..1 << 20));
                txn(i, RwSet::new([a, b], [a, b]))
            })
            .collect();
        let frames = pack_stream(stream, &FramerConfig::default()).unwrap();
        let m = framer_metrics(&frames);
        assert!(
            m.mean_frame_size_f64() >= 100.0,
            "{}",
            m.mean_frame_size_f64()
        );
    }

    fn stream() -> impl Strategy<Value = Vec<Transaction>> {
        proptest::collection::vec(
            (
                proptest::collection::vec(0u64..40, 0..3),
                proptest::collection::vec(0u64..40, 0..3),
            ),
            0..150,
        )
        .prop_map(|sets| {
            sets.into_iter()
                .enumerate()
                .map(|(i, (r, w))| {
                    txn(
                        i as u64,
                        RwSet::new(r.into_iter().map(k), w.into_iter().map(k)),
                    )
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn frames_are_conflict_free_ordered_and_complete(s in stream(), n in 1usize..6) {
            let cfg = FramerConfig { frames: n, bloom: BloomParams { bits: 128, hashes: 3 }, ..FramerConfig::default() };
            let frames = pack_stream(s.clone(), &cfg).unwrap();
            let mut seen: Vec<u64> = Vec::new();
            for f in &frames {
                prop_assert!(!f.is_empty());
                for (i, a) in f.txns.iter().enumerate() {
                    for b in &f.txns[i + 1..] {
                        prop_assert!(a.id < b.id);
                        prop_assert!(!conflicts(a.approx_rw.as_ref().unwrap(), b.approx_rw.as_ref().unwrap()));
                    }
                }
                seen.extend(f.txns.iter().map(|t| t.id.0));
            }
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..s.len() as u64).collect::<Vec<_>>());
        }
    }
}
