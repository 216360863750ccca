//! Per-frame read/write Bloom filters and word-wide admissibility tests.
//!
//! [`FramePool`] keeps the filters of all frames bit-transposed: for every
//! filter bit position there is one `u64` whose bit `i` is that position in
//! frame `i`'s filter. Testing a key against all frames at once is then an
//! AND over its `k` probe words, and the admissible-frame bitmap falls out
//! of a handful of word operations independent of the frame count. At the
//! default 64 frames x 2048 bits the two filter banks take exactly 32 KiB.

use std::collections::HashSet;

use thiserror::Error;

use crate::model::{RwSet, StorageKey, TxnId};

pub const DEFAULT_BLOOM_BITS: usize = 2048;
pub const DEFAULT_BLOOM_HASHES: u32 = 4;
/// One frame per bit of the admissibility bitmap.
pub const MAX_FRAMES: usize = u64::BITS as usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BloomParams {
    /// Filter size in bits; a power of two.
    pub bits: usize,
    /// Probes per key.
    pub hashes: u32,
}

impl Default for BloomParams {
    fn default() -> Self {
        BloomParams {
            bits: DEFAULT_BLOOM_BITS,
            hashes: DEFAULT_BLOOM_HASHES,
        }
    }
}

impl BloomParams {
    pub fn validate(&self) -> Result<(), PoolError> {
        if !self.bits.is_power_of_two() || self.bits < 64 {
            return Err(PoolError::BadParams(format!(
                "filter size {} is not a power of two >= 64",
                self.bits
            )));
        }
        if self.hashes == 0 {
            return Err(PoolError::BadParams("hash count must be >= 1".into()));
        }
        Ok(())
    }

    /// Probe positions of `key`: double hashing `h1 + j*h2 mod m`.
    #[inline]
    pub fn probes(&self, key: &StorageKey) -> impl Iterator<Item = usize> {
        let raw = key.as_u64();
        let h1 = splitmix64(raw);
        // odd step so probes cycle through the whole power-of-two table
        let h2 = splitmix64(raw ^ 0xA076_1D64_78BD_642F) | 1;
        let mask = (self.bits - 1) as u64;
        (0..self.hashes as u64).map(move |j| (h1.wrapping_add(j.wrapping_mul(h2)) & mask) as usize)
    }

    /// Analytic false-positive rate after `n` distinct insertions.
    pub fn expected_fp_rate(&self, n: usize) -> f64 {
        let k = self.hashes as f64;
        (1.0 - (-k * n as f64 / self.bits as f64).exp()).powf(k)
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A single fixed-size Bloom filter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BloomFilter {
    params: BloomParams,
    words: Vec<u64>,
}

impl BloomFilter {
    pub fn new(params: BloomParams) -> Self {
        BloomFilter {
            params,
            words: vec![0; params.bits / 64],
        }
    }

    pub fn params(&self) -> BloomParams {
        self.params
    }

    pub fn insert(&mut self, key: &StorageKey) {
        for p in self.params.probes(key) {
            self.words[p / 64] |= 1 << (p % 64);
        }
    }

    pub fn maybe_contains(&self, key: &StorageKey) -> bool {
        self.params
            .probes(key)
            .all(|p| self.words[p / 64] & (1 << (p % 64)) != 0)
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|w| *w == 0)
    }

    pub fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    fn set_bit(&mut self, pos: usize) {
        self.words[pos / 64] |= 1 << (pos % 64);
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("frame slot {0} is not active")]
    InactiveSlot(usize),
    #[error("frame slot {slot} out of range for a pool of {frames} frames")]
    SlotOutOfRange { slot: usize, frames: usize },
    #[error("invalid pool parameters: {0}")]
    BadParams(String),
}

/// Frame storage the packer can drive. Implemented by the Bloom pool and
/// by an exact-set pool used as a reference.
pub trait FrameIndex {
    fn frames(&self) -> usize;
    fn active_mask(&self) -> u64;
    /// Bit `i` set iff slot `i` is active and `rw` is admissible there.
    fn admissible_mask(&self, rw: &RwSet) -> u64;
    fn merge_into_frame(&mut self, slot: usize, id: TxnId, rw: &RwSet) -> Result<(), PoolError>;
    fn reset_frame(&mut self, slot: usize) -> Result<Vec<TxnId>, PoolError>;
    fn txn_ids(&self, slot: usize) -> &[TxnId];

    fn txn_count(&self, slot: usize) -> usize {
        self.txn_ids(slot).len()
    }

    /// Whether `rw` alone is too large to share a frame.
    fn is_oversized(&self, _rw: &RwSet) -> bool {
        false
    }
}

fn frame_mask(frames: usize) -> u64 {
    if frames == MAX_FRAMES {
        u64::MAX
    } else {
        (1u64 << frames) - 1
    }
}

fn check_frames(frames: usize) -> Result<(), PoolError> {
    if frames == 0 || frames > MAX_FRAMES {
        return Err(PoolError::BadParams(format!(
            "frame count {frames} not in 1..={MAX_FRAMES}"
        )));
    }
    Ok(())
}

/// Pool of per-frame aggregate read/write Bloom filters.
#[derive(Clone, Debug)]
pub struct FramePool {
    params: BloomParams,
    frames: usize,
    /// `read_bank[p]` bit `i`: bit `p` of frame `i`'s aggregate read filter.
    read_bank: Vec<u64>,
    write_bank: Vec<u64>,
    txn_ids: Vec<Vec<TxnId>>,
    active: u64,
}

impl FramePool {
    /// A pool with every slot active and empty.
    pub fn new(frames: usize, params: BloomParams) -> Result<Self, PoolError> {
        check_frames(frames)?;
        params.validate()?;
        Ok(FramePool {
            params,
            frames,
            read_bank: vec![0; params.bits],
            write_bank: vec![0; params.bits],
            txn_ids: vec![Vec::new(); frames],
            active: frame_mask(frames),
        })
    }

    pub fn params(&self) -> BloomParams {
        self.params
    }

    /// Logical filter storage: frames x 2 filters x m bits.
    pub fn filter_bytes(&self) -> usize {
        self.frames * 2 * self.params.bits / 8
    }

    /// Bytes actually allocated for both filter banks.
    pub fn bank_bytes(&self) -> usize {
        (self.read_bank.len() + self.write_bank.len()) * std::mem::size_of::<u64>()
    }

    pub fn deactivate(&mut self, slot: usize) -> Result<Vec<TxnId>, PoolError> {
        let ids = self.reset_frame(slot)?;
        self.active &= !(1 << slot);
        Ok(ids)
    }

    pub fn activate(&mut self, slot: usize) -> Result<(), PoolError> {
        self.check_slot(slot)?;
        self.active |= 1 << slot;
        Ok(())
    }

    /// Per-slot admissibility, evaluated bit by bit without the bitmap path.
    pub fn admissible(&self, rw: &RwSet, slot: usize) -> Result<bool, PoolError> {
        self.check_active(slot)?;
        let hit = |bank: &[u64], key: &StorageKey| {
            self.params.probes(key).all(|p| (bank[p] >> slot) & 1 == 1)
        };
        let read_clash = rw.reads().iter().any(|k| hit(&self.write_bank, k));
        let write_clash = rw
            .writes()
            .iter()
            .any(|k| hit(&self.read_bank, k) || hit(&self.write_bank, k));
        Ok(!read_clash && !write_clash)
    }

    /// Frames whose filter in `bank` may contain `key`.
    #[inline]
    fn containing(&self, bank: &[u64], key: &StorageKey) -> u64 {
        self.params
            .probes(key)
            .fold(u64::MAX, |acc, p| acc & bank[p])
    }

    pub fn read_filter(&self, slot: usize) -> Result<BloomFilter, PoolError> {
        self.check_slot(slot)?;
        Ok(self.extract(&self.read_bank, slot))
    }

    pub fn write_filter(&self, slot: usize) -> Result<BloomFilter, PoolError> {
        self.check_slot(slot)?;
        Ok(self.extract(&self.write_bank, slot))
    }

    fn extract(&self, bank: &[u64], slot: usize) -> BloomFilter {
        let mut f = BloomFilter::new(self.params);
        for (p, w) in bank.iter().enumerate() {
            if (w >> slot) & 1 == 1 {
                f.set_bit(p);
            }
        }
        f
    }

    fn check_slot(&self, slot: usize) -> Result<(), PoolError> {
        if slot >= self.frames {
            return Err(PoolError::SlotOutOfRange {
                slot,
                frames: self.frames,
            });
        }
        Ok(())
    }

    fn check_active(&self, slot: usize) -> Result<(), PoolError> {
        self.check_slot(slot)?;
        if self.active & (1 << slot) == 0 {
            return Err(PoolError::InactiveSlot(slot));
        }
        Ok(())
    }
}

impl FrameIndex for FramePool {
    fn frames(&self) -> usize {
        self.frames
    }

    fn active_mask(&self) -> u64 {
        self.active
    }

    fn admissible_mask(&self, rw: &RwSet) -> u64 {
        let mut clash = 0u64;
        for k in rw.reads() {
            clash |= self.containing(&self.write_bank, k);
        }
        for k in rw.writes() {
            clash |= self.containing(&self.read_bank, k) | self.containing(&self.write_bank, k);
        }
        self.active & !clash
    }

    fn merge_into_frame(&mut self, slot: usize, id: TxnId, rw: &RwSet) -> Result<(), PoolError> {
        self.check_active(slot)?;
        let bit = 1u64 << slot;
        for k in rw.reads() {
            for p in self.params.probes(k) {
                self.read_bank[p] |= bit;
            }
        }
        for k in rw.writes() {
            for p in self.params.probes(k) {
                self.write_bank[p] |= bit;
            }
        }
        self.txn_ids[slot].push(id);
        Ok(())
    }

    fn reset_frame(&mut self, slot: usize) -> Result<Vec<TxnId>, PoolError> {
        self.check_active(slot)?;
        let keep = !(1u64 << slot);
        for w in self.read_bank.iter_mut().chain(self.write_bank.iter_mut()) {
            *w &= keep;
        }
        Ok(std::mem::take(&mut self.txn_ids[slot]))
    }

    fn txn_ids(&self, slot: usize) -> &[TxnId] {
        &self.txn_ids[slot]
    }

    fn is_oversized(&self, rw: &RwSet) -> bool {
        rw.keys().len() * self.params.hashes as usize > self.params.bits / 2
    }
}

/// Frame pool tracking exact aggregate key sets. Same packing contract as
/// [`FramePool`] with no false positives; used to measure what the Bloom
/// approximation costs and as the shadow in property tests.
#[derive(Clone, Debug)]
pub struct ExactFramePool {
    frames: usize,
    reads: Vec<HashSet<StorageKey>>,
    writes: Vec<HashSet<StorageKey>>,
    txn_ids: Vec<Vec<TxnId>>,
    active: u64,
}

impl ExactFramePool {
    pub fn new(frames: usize) -> Result<Self, PoolError> {
        check_frames(frames)?;
        Ok(ExactFramePool {
            frames,
            reads: vec![HashSet::new(); frames],
            writes: vec![HashSet::new(); frames],
            txn_ids: vec![Vec::new(); frames],
            active: frame_mask(frames),
        })
    }

    /// Exact form of the admissibility condition against slot `slot`.
    pub fn admissible(&self, rw: &RwSet, slot: usize) -> bool {
        let (ar, aw) = (&self.reads[slot], &self.writes[slot]);
        !rw.reads().iter().any(|k| aw.contains(k))
            && !rw.writes().iter().any(|k| ar.contains(k) || aw.contains(k))
    }

    fn check_active(&self, slot: usize) -> Result<(), PoolError> {
        if slot >= self.frames {
            return Err(PoolError::SlotOutOfRange {
                slot,
                frames: self.frames,
            });
        }
        if self.active & (1 << slot) == 0 {
            return Err(PoolError::InactiveSlot(slot));
        }
        Ok(())
    }
}

impl FrameIndex for ExactFramePool {
    fn frames(&self) -> usize {
        self.frames
    }

    fn active_mask(&self) -> u64 {
        self.active
    }

    fn admissible_mask(&self, rw: &RwSet) -> u64 {
        (0..self.frames)
            .filter(|&i| self.active & (1 << i) != 0 && self.admissible(rw, i))
            .fold(0, |m, i| m | (1 << i))
    }

    fn merge_into_frame(&mut self, slot: usize, id: TxnId, rw: &RwSet) -> Result<(), PoolError> {
        self.check_active(slot)?;
        self.reads[slot].extend(rw.reads().iter().copied());
        self.writes[slot].extend(rw.writes().iter().copied());
        self.txn_ids[slot].push(id);
        Ok(())
    }

    fn reset_frame(&mut self, slot: usize) -> Result<Vec<TxnId>, PoolError> {
        self.check_active(slot)?;
        self.reads[slot].clear();
        self.writes[slot].clear();
        Ok(std::mem::take(&mut self.txn_ids[slot]))
    }

    fn txn_ids(&self, slot: usize) -> &[TxnId] {
        &self.txn_ids[slot]
    }
}
