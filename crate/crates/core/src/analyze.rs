//! Read/write-set annotation by simulation against a frozen snapshot.

use std::thread;

use thiserror::Error;

use crate::engine::{interpret, ExecError, Snapshot};
use crate::model::{RwSet, Transaction, TxnId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalyzeError {
    #[error(transparent)]
    Malformed(#[from] ExecError),
    #[error("transaction {0}: declared access list is empty")]
    EmptyAccessList(TxnId),
}

/// Access set `txn` would have if executed on `view`. Writes are discarded.
pub fn analyze(txn: &Transaction, view: &Snapshot) -> Result<RwSet, AnalyzeError> {
    Ok(interpret(txn, view, false)?.actual_rw)
}

#[derive(Debug, Default)]
pub struct BatchAnalysis {
    /// Well-formed transactions with `approx_rw` filled in, input order.
    pub annotated: Vec<Transaction>,
    pub rejected: Vec<(TxnId, AnalyzeError)>,
}

/// Annotate a batch on up to `parallelism` threads. Every transaction sees
/// the same snapshot, so results do not depend on the thread count.
pub fn analyze_batch(txns: Vec<Transaction>, view: &Snapshot, parallelism: usize) -> BatchAnalysis {
    let workers = parallelism.max(1).min(txns.len().max(1));
    let results: Vec<Result<RwSet, AnalyzeError>> = if workers == 1 {
        txns.iter().map(|t| analyze(t, view)).collect()
    } else {
        let chunk = txns.len().div_ceil(workers);
        thread::scope(|s| {
            let handles: Vec<_> = txns
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || part.iter().map(|t| analyze(t, view)).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("analysis worker panicked"))
                .collect()
        })
    };

    let mut out = BatchAnalysis::default();
    for (mut txn, res) in txns.into_iter().zip(results) {
        match res {
            Ok(rw) => {
                txn.approx_rw = Some(rw);
                out.annotated.push(txn);
            }
            Err(e) => out.rejected.push((txn.id, e)),
        }
    }
    out
}

/// Annotate from a declared access list instead of simulating.
pub fn bypass_with_access_list(
    mut txn: Transaction,
    declared: RwSet,
) -> Result<Transaction, AnalyzeError> {
    if declared.is_empty() {
        return Err(AnalyzeError::EmptyAccessList(txn.id));
    }
    txn.approx_rw = Some(declared);
    Ok(txn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{bal, execute, honest_rw, store_root, tok, Sink, StateStore};
    use crate::model::{AccountId, TransferKind, TransferOp};

    fn acct(i: u64) -> AccountId {
        AccountId::from_index(i)
    }

    fn transfer(id: u64, kind: TransferKind, from: u64, to: u64, amount: u128) -> Transaction {
        Transaction::new(
            TxnId(id),
            TransferOp {
                kind,
                sender: acct(from),
                receiver: acct(to),
                amount,
            },
        )
    }

    fn funded() -> StateStore {
        StateStore::from_slots((0..16).flat_map(|i| [(bal(&acct(i)), 1000), (tok(&acct(i)), 1000)]))
    }

    #[test]
    fn native_annotation_is_sender_and_receiver_balance() {
        let store = funded();
        let rw = analyze(
            &transfer(0, TransferKind::Native, 1, 2, 3),
            &store.snapshot(),
        )
        .unwrap();
        let keys = [bal(&acct(1)), bal(&acct(2))];
        assert_eq!(rw, RwSet::new(keys, keys));
    }

    #[test]
    fn erc20_annotation_has_three_slots() {
        let store = funded();
        let rw = analyze(
            &transfer(0, TransferKind::Erc20, 1, 2, 3),
            &store.snapshot(),
        )
        .unwrap();
        let keys = [bal(&acct(1)), tok(&acct(1)), tok(&acct(2))];
        assert_eq!(rw, RwSet::new(keys, keys));
    }

    #[test]
    fn analysis_is_deterministic_and_pure() {
        let store = funded();
        let root = store_root(&store);
        let snap = store.snapshot();
        let t = transfer(0, TransferKind::Native, 1, 2, 3);
        assert_eq!(analyze(&t, &snap).unwrap(), analyze(&t, &snap).unwrap());
        let batch: Vec<_> = (0..50)
            .map(|i| transfer(i, TransferKind::Erc20, i % 7, 8 + i % 5, 10))
            .collect();
        analyze_batch(batch, &snap, 4);
        assert_eq!(store_root(&store), root);
    }

    #[test]
    fn batch_results_do_not_depend_on_parallelism() {
        let store = funded();
        let snap = store.snapshot();
        let batch: Vec<_> = (0..101)
            .map(|i| {
                transfer(
                    i,
                    if i % 2 == 0 {
                        TransferKind::Native
                    } else {
                        TransferKind::Erc20
                    },
                    i % 9,
                    9 + i % 6,
                    1,
                )
            })
            .collect();
        let one = analyze_batch(batch.clone(), &snap, 1);
        let eight = analyze_batch(batch.clone(), &snap, 8);
        assert_eq!(one.annotated, eight.annotated);
        let single = analyze_batch(batch[..1].to_vec(), &snap, 8);
        assert_eq!(
            single.annotated[0].approx_rw,
            Some(analyze(&batch[0], &snap).unwrap())
        );
    }

    #[test]
    fn same_key_writers_both_see_the_snapshot() {
        let store = funded();
        let snap = store.snapshot();
        let a = transfer(0, TransferKind::Native, 1, 2, 600);
        let b = transfer(1, TransferKind::Native, 1, 3, 600);
        let out = analyze_batch(vec![a.clone(), b.clone()], &snap, 2);
        // executing a first would make b fail; analysis must not see that
        let exec_a = execute(&a, &store, Sink::Discard).unwrap();
        let exec_b = execute(&b, &store, Sink::Discard).unwrap();
        assert_eq!(out.annotated[0].approx_rw.as_ref(), Some(&exec_a.actual_rw));
        assert_eq!(out.annotated[1].approx_rw.as_ref(), Some(&exec_b.actual_rw));
    }

    #[test]
    fn malformed_txns_are_rejected_but_others_annotated() {
        let store = funded();
        let out = analyze_batch(
            vec![
                transfer(0, TransferKind::Native, 1, 1, 0),
                transfer(1, TransferKind::Native, 1, 2, 0),
            ],
            &store.snapshot(),
            2,
        );
        assert_eq!(out.annotated.len(), 1);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].0, TxnId(0));
    }

    #[test]
    fn bypass_uses_declared_sets() {
        let k = crate::model::StorageKey::from_u64(1);
        let declared = RwSet::new([k], [k]);
        let t =
            bypass_with_access_list(transfer(0, TransferKind::Native, 1, 2, 0), declared.clone())
                .unwrap();
        assert_eq!(t.approx_rw, Some(declared));
        assert_eq!(
            bypass_with_access_list(transfer(5, TransferKind::Native, 1, 2, 0), RwSet::default()),
            Err(AnalyzeError::EmptyAccessList(TxnId(5)))
        );
    }

    #[test]
    fn honest_declaration_frames_like_simulation() {
        use crate::framer::{pack_stream, FramerConfig};
        let store = funded();
        let batch: Vec<_> = (0..60)
            .map(|i| transfer(i, TransferKind::Native, i % 5, 5 + i % 11, 1))
            .collect();
        let simulated = analyze_batch(batch.clone(), &store.snapshot(), 3).annotated;
        let declared: Vec<_> = batch
            .into_iter()
            .map(|t| {
                let rw = honest_rw(&t);
                bypass_with_access_list(t, rw).unwrap()
            })
            .collect();
        let cfg = FramerConfig {
            frames: 4,
            ..FramerConfig::default()
        };
        assert_eq!(
            pack_stream(simulated, &cfg).unwrap(),
            pack_stream(declared, &cfg).unwrap()
        );
    }
}
