//! Seeded transfer workloads with a hot address range, and the packed
//! 24-byte record / workload file formats.
//!
//! Addresses are the 48-bit big-endian encodings of `0..total_accounts`, so
//! the lexicographically first `gamma` addresses are indices `0..gamma`.
//! A sender is drawn from that hot range with probability `alpha` and from
//! the remaining (cold) addresses otherwise; receivers are always cold.

use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{bal, tok, Value};
use crate::model::{AccountId, StorageKey, Transaction, TransferKind, TransferOp, TxnId};

pub const RECORD_LEN: usize = 24;
/// Transfer amounts are drawn from `1..=MAX_AMOUNT`.
pub const MAX_AMOUNT: u128 = 1_000;
const AMOUNT_BYTES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: TransferKind,
    pub total_accounts: u64,
    /// Size of the hot address range.
    pub gamma: u64,
    /// Probability that a sender is hot.
    pub alpha: f64,
    pub txn_count: u64,
    pub seed: u64,
    /// Transactions analyzed against one snapshot.
    pub batch_size: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            kind: TransferKind::Native,
            total_accounts: 1 << 20,
            gamma: 1000,
            alpha: 0.0,
            txn_count: 100_000,
            seed: 0,
            batch_size: 10_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    Spec(String),
    #[error("record must be {RECORD_LEN} bytes, got {0}")]
    RecordLength(usize),
    #[error("record has unknown transfer kind tag {0}")]
    UnknownKind(u8),
    #[error("amount {0} does not fit the {AMOUNT_BYTES}-byte record field")]
    AmountTooLarge(u128),
    #[error("not a workload file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::Spec(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} not in [0, 1]", self.alpha));
        }
        if self.gamma > self.total_accounts {
            return bad(format!(
                "gamma {} exceeds {} accounts",
                self.gamma, self.total_accounts
            ));
        }
        if self.total_accounts > AccountId::MAX_INDEX + 1 {
            return bad(format!(
                "{} accounts do not fit 6-byte addresses",
                self.total_accounts
            ));
        }
        if self.total_accounts - self.gamma < 2 {
            return bad("need at least two non-hot accounts".into());
        }
        if self.alpha > 0.0 && self.gamma == 0 {
            return bad("alpha > 0 needs a non-empty hot set".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        Ok(())
    }

    /// Starting balance of every account; large enough that no sequence of
    /// `txn_count` transfers can drain one.
    pub fn initial_balance(&self) -> Value {
        (self.txn_count.max(1) as u128) * MAX_AMOUNT
    }
}

/// Funded genesis state: every account gets the initial native balance,
/// and for ERC20 workloads the same token balance.
pub fn genesis(spec: &WorkloadSpec) -> Vec<(StorageKey, Value)> {
    let v = spec.initial_balance();
    let mut slots = Vec::with_capacity(spec.total_accounts as usize * 2);
    for i in 0..spec.total_accounts {
        let a = AccountId::from_index(i);
        slots.push((bal(&a), v));
        if spec.kind == TransferKind::Erc20 {
            slots.push((tok(&a), v));
        }
    }
    slots
}

pub fn generate(spec: &WorkloadSpec) -> Result<Vec<Transaction>, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (gamma, n) = (spec.gamma, spec.total_accounts);
    let txns = (0..spec.txn_count)
        .map(|i| {
            let sender = if gamma > 0 && rng.random_bool(spec.alpha) {
                rng.random_range(0..gamma)
            } else {
                rng.random_range(gamma..n)
            };
            let receiver = loop {
                let r = rng.random_range(gamma..n);
                if r != sender {
                    break r;
                }
            };
            let op = TransferOp {
                kind: spec.kind,
                sender: AccountId::from_index(sender),
                receiver: AccountId::from_index(receiver),
                amount: rng.random_range(1..=MAX_AMOUNT),
            };
            Transaction::new(TxnId(i), op)
        })
        .collect();
    Ok(txns)
}

/// `sender(6) ‖ receiver(6) ‖ amount(10, LE) ‖ kind(1) ‖ reserved(1)`.
pub fn encode_record(op: &TransferOp) -> Result<[u8; RECORD_LEN], WorkloadError> {
    if op.amount >> (8 * AMOUNT_BYTES) != 0 {
        return Err(WorkloadError::AmountTooLarge(op.amount));
    }
    let mut rec = [0u8; RECORD_LEN];
    rec[0..6].copy_from_slice(&op.sender.0);
    rec[6..12].copy_from_slice(&op.receiver.0);
    rec[12..22].copy_from_slice(&op.amount.to_le_bytes()[..AMOUNT_BYTES]);
    rec[22] = match op.kind {
        TransferKind::Native => 0,
        TransferKind::Erc20 => 1,
    };
    Ok(rec)
}

pub fn decode_record(bytes: &[u8]) -> Result<TransferOp, WorkloadError> {
    if bytes.len() != RECORD_LEN {
        return Err(WorkloadError::RecordLength(bytes.len()));
    }
    let kind = match bytes[22] {
        0 => TransferKind::Native,
        1 => TransferKind::Erc20,
        t => return Err(WorkloadError::UnknownKind(t)),
    };
    let mut amount = [0u8; 16];
    amount[..AMOUNT_BYTES].copy_from_slice(&bytes[12..22]);
    Ok(TransferOp {
        kind,
        sender: AccountId(bytes[0..6].try_into().unwrap()),
        receiver: AccountId(bytes[6..12].try_into().unwrap()),
        amount: u128::from_le_bytes(amount),
    })
}

const FILE_MAGIC: &[u8; 8] = b"AOFWKLD\0";
const FILE_VERSION: u32 = 1;

/// Write a workload file: magic, version, the spec fields (little-endian),
/// a record count, then packed records in id order.
pub fn write_workload(
    mut w: impl Write,
    spec: &WorkloadSpec,
    txns: &[Transaction],
) -> Result<(), WorkloadError> {
    w.write_all(FILE_MAGIC)?;
    w.write_all(&FILE_VERSION.to_le_bytes())?;
    w.write_all(&[match spec.kind {
        TransferKind::Native => 0,
        TransferKind::Erc20 => 1,
    }])?;
    for v in [
        spec.total_accounts,
        spec.gamma,
        spec.alpha.to_bits(),
        spec.txn_count,
        spec.seed,
        spec.batch_size,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(txns.len() as u64).to_le_bytes())?;
    for t in txns {
        w.write_all(&encode_record(&t.op)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a workload file; transaction ids are record positions.
pub fn read_workload(mut r: impl Read) -> Result<(WorkloadSpec, Vec<Transaction>), WorkloadError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FILE_MAGIC {
        return Err(WorkloadError::Format("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FILE_VERSION {
        return Err(WorkloadError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let kind = match kind[0] {
        0 => TransferKind::Native,
        1 => TransferKind::Erc20,
        t => return Err(WorkloadError::UnknownKind(t)),
    };
    let mut fields = [0u64; 7];
    for f in fields.iter_mut() {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        *f = u64::from_le_bytes(b8);
    }
    let [total_accounts, gamma, alpha_bits, txn_count, seed, batch_size, count] = fields;
    let spec = WorkloadSpec {
        kind,
        total_accounts,
        gamma,
        alpha: f64::from_bits(alpha_bits),
        txn_count,
        seed,
        batch_size,
    };
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() as u64 != count * RECORD_LEN as u64 {
        return Err(WorkloadError::Format(format!(
            "expected {count} records, found {} bytes",
            body.len()
        )));
    }
    let txns = body
        .chunks_exact(RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| decode_record(rec).map(|op| Transaction::new(TxnId(i as u64), op)))
        .collect::<Result<_, _>>()?;
    Ok((spec, txns))
}
