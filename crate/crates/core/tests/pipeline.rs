//! Cross-module checks: stages wired by hand against the oracles.

use std::collections::HashMap;

use aof_core::analyze::{analyze_batch, bypass_with_access_list};
use aof_core::engine::{
    bal, export_snapshot, honest_rw, import_snapshot, store_root, tok, StateStore, Value,
};
use aof_core::framer::{pack_stream, FramerConfig};
use aof_core::oracle::{check_schedule, exact_precedence_graph, exact_tlp, serial_execute};
use aof_core::pipeline::{run_pipeline, RunConfig};
use aof_core::scheduler::{measured_tlp, DivergenceMode, Scheduler, SchedulerConfig, VmExecutor};
use aof_core::trace::{ScheduleTrace, TraceStatus};
use aof_core::workload::{generate, genesis, WorkloadSpec};
use aof_core::{AccountId, RwSet, StorageKey, Transaction, TransferKind, TxnId};
use proptest::prelude::*;

fn small_spec(kind: TransferKind, alpha: f64, gamma: u64, txns: u64, seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        kind,
        total_accounts: 1 << 10,
        gamma,
        alpha,
        txn_count: txns,
        seed,
        batch_size: 250,
    }
}

/// Frame, schedule and execute `txns` (already annotated) in one go.
fn schedule_all(
    txns: Vec<Transaction>,
    store: &StateStore,
    workers: usize,
    mode: DivergenceMode,
) -> aof_core::scheduler::ExecutionReport {
    let frames = pack_stream(txns, &FramerConfig::default()).unwrap();
    let mut s = Scheduler::new(SchedulerConfig {
        workers,
        shards: 0,
        mode,
    });
    s.ingest_frames(frames).unwrap();
    s.run(store, &VmExecutor)
}

fn kept_root(txns: &[Transaction], kept: &[TxnId], initial: Vec<(StorageKey, Value)>) -> [u8; 32] {
    let by_id: HashMap<_, _> = txns.iter().map(|t| (t.id, t)).collect();
    serial_execute(kept.iter().map(|id| by_id[id]), initial).root
}

#[test]
fn dishonest_declaration_is_dropped_by_the_scheduler() {
    let spec = small_spec(TransferKind::Native, 0.0, 10, 300, 1);
    let store = StateStore::from_slots(genesis(&spec));
    let txns: Vec<_> = generate(&spec)
        .unwrap()
        .into_iter()
        .map(|t| {
            let mut declared = honest_rw(&t);
            if t.id == TxnId(42) {
                // omits the receiver
                let k = [bal(&t.op.sender)];
                declared = RwSet::new(k, k);
            }
            bypass_with_access_list(t, declared).unwrap()
        })
        .collect();
    let report = schedule_all(txns.clone(), &store, 4, DivergenceMode::Strict);
    assert_eq!(
        report.dropped.iter().map(|t| t.id).collect::<Vec<_>>(),
        [TxnId(42)]
    );
    assert_eq!(
        store_root(&store),
        kept_root(&txns, &report.kept, genesis(&spec))
    );
    check_schedule(&ScheduleTrace {
        entries: report.entries,
    })
    .unwrap();
}

#[test]
fn subset_safe_keeps_over_declared_txns_and_stays_serializable() {
    let spec = small_spec(TransferKind::Erc20, 0.5, 10, 400, 2);
    let store = StateStore::from_slots(genesis(&spec));
    let spare = tok(&AccountId::from_index(5));
    let txns: Vec<_> = generate(&spec)
        .unwrap()
        .into_iter()
        .map(|t| {
            let mut declared = honest_rw(&t);
            if t.id.0 % 5 == 0 {
                // reserve one extra slot the transfer never touches
                let keys: Vec<_> = declared.keys().into_iter().chain([spare]).collect();
                declared = RwSet::new(keys.clone(), keys);
            }
            bypass_with_access_list(t, declared).unwrap()
        })
        .collect();

    let strict_store = StateStore::from_slots(genesis(&spec));
    let strict = schedule_all(txns.clone(), &strict_store, 3, DivergenceMode::Strict);
    let over_declared = txns
        .iter()
        .filter(|t| t.id.0 % 5 == 0 && !honest_rw(t).reads_key(&spare))
        .count();
    assert_eq!(strict.dropped.len(), over_declared);

    let subset = schedule_all(txns.clone(), &store, 3, DivergenceMode::SubsetSafe);
    assert!(subset.dropped.is_empty());
    assert_eq!(
        store_root(&store),
        kept_root(&txns, &subset.kept, genesis(&spec))
    );
    check_schedule(&ScheduleTrace {
        entries: subset.entries,
    })
    .unwrap();
}

#[test]
fn balances_are_conserved_across_blocks() {
    let spec = small_spec(TransferKind::Erc20, 0.9, 10, 2_000, 3);
    let txns = generate(&spec).unwrap();
    let out = run_pipeline(
        &RunConfig {
            block_interval: 400,
            workers: 4,
            ..RunConfig::default()
        },
        &spec,
        txns.clone(),
    )
    .unwrap();
    assert!(out
        .trace
        .entries
        .iter()
        .all(|e| e.status == TraceStatus::Ok));
    let by_id: HashMap<_, _> = txns.iter().map(|t| (t.id, t)).collect();
    let total = |state: &std::collections::BTreeMap<StorageKey, Value>,
                 key: fn(&AccountId) -> StorageKey|
     -> Value {
        (0..spec.total_accounts)
            .map(|i| state[&key(&AccountId::from_index(i))])
            .sum()
    };
    let initial = serial_execute([], genesis(&spec)).state;
    let mut order = Vec::new();
    for b in &out.blocks {
        order.extend(b.txn_ids.iter().map(|id| by_id[id]));
        let state = serial_execute(order.iter().copied(), genesis(&spec)).state;
        assert_eq!(total(&state, bal), total(&initial, bal));
        assert_eq!(total(&state, tok), total(&initial, tok));
    }
}

#[test]
fn disjoint_stream_saturates_workers_and_chain_is_serial() {
    let accounts = |i: u64| {
        (
            AccountId::from_index(2 * i),
            AccountId::from_index(2 * i + 1),
        )
    };
    let mk = |id: u64, (s, r): (AccountId, AccountId)| {
        let mut t = Transaction::new(
            TxnId(id),
            aof_core::TransferOp {
                kind: TransferKind::Native,
                sender: s,
                receiver: r,
                amount: 1,
            },
        );
        t.approx_rw = Some(honest_rw(&t));
        t
    };
    let store = StateStore::from_slots((0..400).map(|i| (bal(&AccountId::from_index(i)), 1_000)));
    let disjoint: Vec<_> = (0..100).map(|i| mk(i, accounts(i))).collect();
    let r = schedule_all(disjoint, &store, 8, DivergenceMode::Strict);
    assert_eq!(measured_tlp(&r), 100.into());

    let chain: Vec<_> = (0..100).map(|i| mk(100 + i, accounts(0))).collect();
    let store = StateStore::from_slots((0..400).map(|i| (bal(&AccountId::from_index(i)), 1_000)));
    let r = schedule_all(chain, &store, 8, DivergenceMode::Strict);
    assert_eq!(measured_tlp(&r), 1.into());
    assert_eq!(store.get(&bal(&AccountId::from_index(0))), 900);
}

#[test]
fn analysis_matches_execution_on_the_same_snapshot() {
    let spec = small_spec(TransferKind::Erc20, 0.5, 10, 500, 4);
    let store = StateStore::from_slots(genesis(&spec));
    let annotated = analyze_batch(generate(&spec).unwrap(), &store.snapshot(), 4).annotated;
    for t in &annotated {
        let exec = aof_core::engine::execute(t, &store, aof_core::engine::Sink::Discard).unwrap();
        assert_eq!(Some(&exec.actual_rw), t.approx_rw.as_ref());
    }
}

#[test]
fn snapshot_fixture_round_trip() {
    let spec = small_spec(TransferKind::Erc20, 0.0, 10, 10, 5);
    let store = StateStore::from_slots(genesis(&spec));
    let mut buf = Vec::new();
    export_snapshot(&store, &mut buf).unwrap();
    let back = import_snapshot(&buf[..]).unwrap();
    assert_eq!(store_root(&back), store_root(&store));
    assert_eq!(back.sorted_slots(), store.sorted_slots());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_runs_are_serializable_and_sandwiched(
        erc in any::<bool>(),
        alpha in prop::sample::select(vec![0.0, 0.3, 0.7, 0.95, 1.0]),
        gamma in 1u64..50,
        txns in 1u64..1_500,
        seed in any::<u64>(),
        workers in 1usize..6,
        frames in prop::sample::select(vec![1usize, 2, 7, 64]),
        interval in 1u64..900,
        inject in prop::sample::select(vec![0.0, 0.05]),
    ) {
        let kind = if erc { TransferKind::Erc20 } else { TransferKind::Native };
        let spec = small_spec(kind, alpha, gamma, txns, seed);
        let cfg = RunConfig {
            workers,
            analyze_workers: workers,
            block_interval: interval,
            inject_divergence: inject,
            framer: FramerConfig { frames, ..FramerConfig::default() },
            ..RunConfig::default()
        };
        let txn_list = generate(&spec).unwrap();
        let out = run_pipeline(&cfg, &spec, txn_list.clone()).unwrap();
        let m = &out.metrics;

        prop_assert_eq!(m.kept_count, txns);
        prop_assert_eq!(out.blocks.last().unwrap().state_root, kept_root(&txn_list, &out.kept_order(), genesis(&spec)));
        prop_assert!(check_schedule(&out.trace).is_ok());

        let rws: Vec<RwSet> = out.trace.entries.iter().map(|e| e.actual_rw.clone()).collect();
        let exact = exact_tlp(&exact_precedence_graph(&rws).unwrap());
        prop_assert!(m.mean_frame_size_ratio() <= m.measured_tlp_ratio());
        prop_assert!(m.measured_tlp_ratio() <= exact);
        prop_assert!(out.frames.iter().all(|f| f.windows(2).all(|w| w[0] < w[1])));
        prop_assert!(out.blocks.iter().all(|b| b.txn_ids.len() as u64 <= interval));
    }
}
