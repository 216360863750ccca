//! Deterministic mock transfer VM.
//!
//! [`interpret`] runs a transfer against any [`StateRead`] and returns the
//! keys it touched plus its buffered writes. Simulation (analysis against a
//! snapshot) and execution share this one interpreter; only what the caller
//! does with the write buffer differs.

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::store::{StateRead, StateStore, Value};
use crate::model::{AccountId, RwSet, StorageKey, Transaction, TransferKind, TxnId};

const NATIVE_TAG: &[u8] = b"native";
const ERC20_TAG: &[u8] = b"erc20";
const DIVERGE_TAG: &[u8] = b"diverge";

fn tagged_key(tag: &[u8], body: &[u8]) -> StorageKey {
    let mut h = Sha256::new();
    h.update(tag);
    h.update(body);
    let digest = h.finalize();
    StorageKey(digest[..8].try_into().unwrap())
}

/// Native balance slot of `account`.
pub fn bal(account: &AccountId) -> StorageKey {
    tagged_key(NATIVE_TAG, &account.0)
}

/// Token balance slot of `account` in the implicit ERC20 contract.
pub fn tok(account: &AccountId) -> StorageKey {
    tagged_key(ERC20_TAG, &account.0)
}

/// Slot an injected-divergence execution reads in addition to its honest set.
pub fn divergence_key(id: TxnId) -> StorageKey {
    tagged_key(DIVERGE_TAG, &id.0.to_be_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecStatus {
    Ok,
    InsufficientFunds,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Execution {
    pub status: ExecStatus,
    pub actual_rw: RwSet,
    pub writes: Vec<(StorageKey, Value)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sink {
    Persist,
    Discard,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("malformed transaction {id}: {reason}")]
    Malformed { id: TxnId, reason: &'static str },
    #[error("transaction {0} overflows a receiver balance")]
    Overflow(TxnId),
}

pub fn check_well_formed(txn: &Transaction) -> Result<(), ExecError> {
    if txn.op.sender == txn.op.receiver {
        return Err(ExecError::Malformed {
            id: txn.id,
            reason: "sender equals receiver",
        });
    }
    Ok(())
}

/// Run `txn` against `state` without mutating anything. With `diverge` the
/// run also reads [`divergence_key`], standing in for a data-dependent
/// access the analysis could not predict.
pub fn interpret(
    txn: &Transaction,
    state: &impl StateRead,
    diverge: bool,
) -> Result<Execution, ExecError> {
    check_well_formed(txn)?;
    let op = &txn.op;
    let mut reads = Vec::with_capacity(4);
    if diverge {
        let extra = divergence_key(txn.id);
        state.read(&extra);
        reads.push(extra);
    }

    let (from, to, gas) = match op.kind {
        TransferKind::Native => (bal(&op.sender), bal(&op.receiver), None),
        TransferKind::Erc20 => (tok(&op.sender), tok(&op.receiver), Some(bal(&op.sender))),
    };
    let from_v = state.read(&from);
    let to_v = state.read(&to);
    reads.extend([from, to]);
    let mut writes = Vec::with_capacity(3);
    if let Some(g) = gas {
        // sender pays zero fee: its base balance is read and written back
        let g_v = state.read(&g);
        reads.push(g);
        writes.push((g, g_v));
    }

    let status = if from_v >= op.amount {
        let credited = to_v
            .checked_add(op.amount)
            .ok_or(ExecError::Overflow(txn.id))?;
        writes.push((from, from_v - op.amount));
        writes.push((to, credited));
        ExecStatus::Ok
    } else {
        writes.push((from, from_v));
        writes.push((to, to_v));
        ExecStatus::InsufficientFunds
    };

    Ok(Execution {
        status,
        actual_rw: RwSet::new(reads, writes.iter().map(|(k, _)| *k)),
        writes,
    })
}

/// Execute against the live store; `Persist` applies the writes.
pub fn execute(txn: &Transaction, store: &StateStore, sink: Sink) -> Result<Execution, ExecError> {
    let exec = interpret(txn, store, false)?;
    if sink == Sink::Persist {
        store.apply(&exec.writes);
    }
    Ok(exec)
}

/// The access set an honest execution of `txn` has, independent of state.
pub fn honest_rw(txn: &Transaction) -> RwSet {
    let op = &txn.op;
    let keys = match op.kind {
        TransferKind::Native => vec![bal(&op.sender), bal(&op.receiver)],
        TransferKind::Erc20 => vec![bal(&op.sender), tok(&op.sender), tok(&op.receiver)],
    };
    RwSet::new(keys.clone(), keys)
}
