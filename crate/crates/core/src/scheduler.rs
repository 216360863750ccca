//! Per-slot precedence chains and ancestors-complete dispatch.
//!
//! Every storage slot keeps the live suffix of its access chain: the latest
//! writer and the readers that came after it. A new writer waits on that
//! writer and on all of those readers; a new reader waits on the writer
//! only. Older entries are pruned as soon as a newer writer covers them,
//! since the newer writer already orders everything before it.
//!
//! Frames are ingested in sequence order. Transactions of one frame never
//! conflict on their predicted sets, so they never gain edges to each other.
//! [`Scheduler::run`] then executes everything ingested so far on a worker
//! pool, dispatching each transaction once all of its ancestors completed,
//! and returns at a quiescent barrier.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::thread;

use crossbeam_channel::{unbounded, Receiver, Sender};
use num_rational::Ratio;
use thiserror::Error;

use crate::engine::{interpret, ExecError, ExecStatus, Execution, StateStore};
use crate::framer::Frame;
use crate::model::{AccessKind, RwSet, StorageKey, Transaction, TxnId};
use crate::trace::{TraceEntry, TraceStatus};

pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DivergenceMode {
    /// Keep only if the actual set equals the prediction.
    #[default]
    Strict,
    /// Keep if the actual accesses stay inside what was reserved.
    SubsetSafe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Drop,
}

pub fn validate_rwset(approx: &RwSet, actual: &RwSet, mode: DivergenceMode) -> Verdict {
    let keep = match mode {
        DivergenceMode::Strict => approx == actual,
        DivergenceMode::SubsetSafe => {
            actual
                .reads()
                .iter()
                .all(|k| approx.reads_key(k) || approx.writes_key(k))
                && actual.writes().iter().all(|k| approx.writes_key(k))
        }
    };
    if keep {
        Verdict::Keep
    } else {
        Verdict::Drop
    }
}

/// One access in a slot chain. `pos` is the transaction's position in the
/// scheduled stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChainEntry {
    pub pos: u64,
    pub id: TxnId,
    pub kind: AccessKind,
}

/// Live suffix of one slot's access chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotDag {
    pub slot: StorageKey,
    last_writer: Option<ChainEntry>,
    readers: Vec<ChainEntry>,
}

impl SlotDag {
    fn new(slot: StorageKey) -> Self {
        SlotDag {
            slot,
            last_writer: None,
            readers: Vec::new(),
        }
    }

    /// Append an access and return the positions it must wait on.
    fn append(&mut self, entry: ChainEntry, deps: &mut Vec<u64>) {
        if let Some(last) = self.chain_tail() {
            debug_assert!(last.pos < entry.pos, "slot chain must follow stream order");
        }
        deps.extend(self.last_writer.map(|w| w.pos));
        match entry.kind {
            AccessKind::Write => {
                deps.extend(self.readers.iter().map(|r| r.pos));
                self.readers.clear();
                self.last_writer = Some(entry);
            }
            AccessKind::Read => self.readers.push(entry),
        }
    }

    fn chain_tail(&self) -> Option<ChainEntry> {
        self.readers.last().copied().or(self.last_writer)
    }

    /// Unpruned entries in stream order.
    pub fn chain(&self) -> Vec<ChainEntry> {
        self.last_writer
            .iter()
            .chain(self.readers.iter())
            .copied()
            .collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("frame {got} arrived after frame {last}")]
    OutOfOrderFrame { last: u64, got: u64 },
    #[error("transaction {0} has no read/write annotation")]
    MissingRwSet(TxnId),
}

/// Runs one transaction for the scheduler.
pub trait Executor: Sync {
    fn execute(&self, txn: &Transaction, store: &StateStore) -> Result<Execution, ExecError>;
}

/// The transfer VM. Honors the injected-divergence test hook.
#[derive(Clone, Copy, Debug, Default)]
pub struct VmExecutor;

impl Executor for VmExecutor {
    fn execute(&self, txn: &Transaction, store: &StateStore) -> Result<Execution, ExecError> {
        interpret(txn, store, txn.inject_divergence > 0)
    }
}

/// Skips execution: reports the predicted set as actual and writes nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct EchoExecutor;

impl Executor for EchoExecutor {
    fn execute(&self, txn: &Transaction, _store: &StateStore) -> Result<Execution, ExecError> {
        Ok(Execution {
            status: ExecStatus::Ok,
            actual_rw: txn.approx_rw.clone().unwrap_or_default(),
            writes: Vec::new(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SchedulerConfig {
    pub workers: usize,
    /// DAG builder shards; 0 means one per worker.
    pub shards: usize,
    pub mode: DivergenceMode,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            workers: 1,
            shards: 0,
            mode: DivergenceMode::Strict,
        }
    }
}

/// Dispatch bookkeeping for the transactions ingested since the last run.
#[derive(Debug, Default)]
pub struct DispatchState {
    txns: Vec<Transaction>,
    frame_seq: Vec<u64>,
    pending: Vec<u32>,
    successors: Vec<Vec<u32>>,
}

impl DispatchState {
    pub fn len(&self) -> usize {
        self.txns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.txns.is_empty()
    }

    /// Ids whose ancestors are all complete, in stream order.
    pub fn ready(&self) -> Vec<TxnId> {
        self.pending
            .iter()
            .zip(&self.txns)
            .filter(|(p, _)| **p == 0)
            .map(|(_, t)| t.id)
            .collect()
    }

    pub fn pending_count(&self, id: TxnId) -> Option<u32> {
        self.txns
            .iter()
            .position(|t| t.id == id)
            .map(|i| self.pending[i])
    }

    /// Direct dispatch edges `(ancestor, descendant)` among pending txns.
    pub fn edges(&self) -> Vec<(TxnId, TxnId)> {
        self.successors
            .iter()
            .enumerate()
            .flat_map(|(i, succ)| {
                succ.iter()
                    .map(move |&s| (self.txns[i].id, self.txns[s as usize].id))
            })
            .collect()
    }

    /// Frame-sequence pairs of every edge, for checking intra-frame independence.
    pub fn edge_frames(&self) -> Vec<(u64, u64)> {
        self.successors
            .iter()
            .enumerate()
            .flat_map(|(i, succ)| {
                succ.iter()
                    .map(move |&s| (self.frame_seq[i], self.frame_seq[s as usize]))
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExecutionReport {
    /// Stream order.
    pub entries: Vec<TraceEntry>,
    /// Kept transactions in stream order.
    pub kept: Vec<TxnId>,
    pub dropped: Vec<Transaction>,
    pub executed: u64,
    /// Longest chain of enforced dependencies, in transactions.
    pub critical_path: u64,
}

impl ExecutionReport {
    pub fn absorb(&mut self, other: ExecutionReport) {
        self.entries.extend(other.entries);
        self.kept.extend(other.kept);
        self.dropped.extend(other.dropped);
        self.executed += other.executed;
        self.critical_path = self.critical_path.max(other.critical_path);
    }
}

/// Executed transactions per step of the enforced critical path.
pub fn measured_tlp(report: &ExecutionReport) -> Ratio<u64> {
    if report.executed == 0 || report.critical_path == 0 {
        Ratio::from_integer(0)
    } else {
        Ratio::new(report.executed, report.critical_path)
    }
}

pub struct Scheduler {
    cfg: SchedulerConfig,
    shards: Vec<HashMap<StorageKey, SlotDag>>,
    /// Dependency depth by stream position, kept across runs.
    depth: Vec<u32>,
    /// Stream position of the first transaction in `ds`.
    base: u64,
    last_frame: Option<u64>,
    ds: DispatchState,
    clock: AtomicU64,
    max_depth: u32,
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig) -> Self {
        let workers = cfg.workers.max(1);
        let shards = if cfg.shards == 0 { workers } else { cfg.shards };
        Scheduler {
            cfg: SchedulerConfig {
                workers,
                shards,
                ..cfg
            },
            shards: vec![HashMap::new(); shards],
            depth: Vec::new(),
            base: 0,
            last_frame: None,
            ds: DispatchState::default(),
            clock: AtomicU64::new(0),
            max_depth: 0,
        }
    }

    pub fn config(&self) -> SchedulerConfig {
        self.cfg
    }

    pub fn dispatch_state(&self) -> &DispatchState {
        &self.ds
    }

    pub fn slot_dag(&self, slot: &StorageKey) -> Option<&SlotDag> {
        self.shards[self.shard_of(slot)].get(slot)
    }

    /// Longest dependency chain over everything ingested so far.
    pub fn critical_path(&self) -> u64 {
        self.max_depth as u64
    }

    fn shard_of(&self, key: &StorageKey) -> usize {
        (key.as_u64() % self.shards.len() as u64) as usize
    }

    pub fn ingest_frame(&mut self, frame: Frame) -> Result<(), SchedulerError> {
        self.ingest_frames(vec![frame])
    }

    /// Ingest frames in sequence order. A frame may arrive in several
    /// consecutive pieces carrying the same sequence number.
    pub fn ingest_frames(&mut self, frames: Vec<Frame>) -> Result<(), SchedulerError> {
        let mut last = self.last_frame;
        for f in &frames {
            if let Some(l) = last {
                if f.seq < l {
                    return Err(SchedulerError::OutOfOrderFrame {
                        last: l,
                        got: f.seq,
                    });
                }
            }
            last = Some(f.seq);
            if let Some(t) = f.txns.iter().find(|t| t.approx_rw.is_none()) {
                return Err(SchedulerError::MissingRwSet(t.id));
            }
        }
        self.last_frame = last;

        let first = self.ds.txns.len();
        for f in frames {
            let seq = f.seq;
            for t in f.txns {
                self.ds.txns.push(t);
                self.ds.frame_seq.push(seq);
            }
        }
        let first_pos = self.base + first as u64;
        let deps = build_edges(&mut self.shards, &self.ds.txns[first..], first_pos);

        for (offset, mut d) in deps.into_iter().enumerate() {
            d.sort_unstable();
            d.dedup();
            let local = first + offset;
            let pos = first_pos + offset as u64;
            debug_assert!(d.iter().all(|&p| p < pos));
            let depth = 1 + d.iter().map(|&p| self.depth[p as usize]).max().unwrap_or(0);
            self.depth.push(depth);
            self.max_depth = self.max_depth.max(depth);
            let mut pending = 0;
            for p in d {
                if p >= self.base {
                    self.ds.successors[(p - self.base) as usize].push(local as u32);
                    pending += 1;
                }
            }
            self.ds.pending.push(pending);
            self.ds.successors.push(Vec::new());
        }
        Ok(())
    }

    /// Execute everything ingested since the last run and return at a
    /// barrier with no transaction in flight.
    pub fn run(&mut self, store: &StateStore, executor: &dyn Executor) -> ExecutionReport {
        let ds = std::mem::take(&mut self.ds);
        let n = ds.txns.len();
        let outcomes: Vec<OnceLock<TraceEntry>> = (0..n).map(|_| OnceLock::new()).collect();
        if n > 0 {
            let pending: Vec<AtomicU32> = ds.pending.iter().map(|&p| AtomicU32::new(p)).collect();
            let (tx, rx) = unbounded();
            for (i, p) in ds.pending.iter().enumerate() {
                if *p == 0 {
                    tx.send(Some(i as u32)).unwrap();
                }
            }
            let shared = RunShared {
                txns: &ds.txns,
                successors: &ds.successors,
                pending: &pending,
                outcomes: &outcomes,
                remaining: AtomicUsize::new(n),
                clock: &self.clock,
                store,
                executor,
                mode: self.cfg.mode,
                workers: self.cfg.workers,
            };
            if self.cfg.workers == 1 {
                shared.work(&tx, &rx);
            } else {
                thread::scope(|s| {
                    for _ in 0..self.cfg.workers {
                        let (tx, rx) = (tx.clone(), rx.clone());
                        let shared = &shared;
                        s.spawn(move || shared.work(&tx, &rx));
                    }
                });
            }
        }

        let mut report = ExecutionReport {
            executed: n as u64,
            critical_path: self.max_depth as u64,
            ..Default::default()
        };
        for (txn, cell) in ds.txns.into_iter().zip(outcomes) {
            let entry = cell.into_inner().expect("every ingested transaction runs");
            if entry.status.is_kept() {
                report.kept.push(txn.id);
            } else {
                report.dropped.push(txn);
            }
            report.entries.push(entry);
        }
        self.base += n as u64;
        report
    }
}

/// Per-transaction dependency positions, one shard per slot subset.
fn build_edges(
    shards: &mut [HashMap<StorageKey, SlotDag>],
    txns: &[Transaction],
    first_pos: u64,
) -> Vec<Vec<u64>> {
    let nshards = shards.len();
    let shard_edges = |shard_idx: usize, map: &mut HashMap<StorageKey, SlotDag>| {
        let mut edges: Vec<(u32, u64)> = Vec::new();
        let mut deps = Vec::new();
        for (i, t) in txns.iter().enumerate() {
            let rw = t.approx_rw.as_ref().expect("checked at ingest");
            for (key, kind) in rw.accesses() {
                if (key.as_u64() % nshards as u64) as usize != shard_idx {
                    continue;
                }
                let entry = ChainEntry {
                    pos: first_pos + i as u64,
                    id: t.id,
                    kind,
                };
                deps.clear();
                map.entry(key)
                    .or_insert_with(|| SlotDag::new(key))
                    .append(entry, &mut deps);
                edges.extend(deps.iter().map(|&d| (i as u32, d)));
            }
        }
        edges
    };

    let per_shard: Vec<Vec<(u32, u64)>> = if nshards == 1 || txns.len() < 256 {
        shards
            .iter_mut()
            .enumerate()
            .map(|(i, m)| shard_edges(i, m))
            .collect()
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = shards
                .iter_mut()
                .enumerate()
                .map(|(i, m)| {
                    let f = &shard_edges;
                    s.spawn(move || f(i, m))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("DAG builder panicked"))
                .collect()
        })
    };

    let mut deps = vec![Vec::new(); txns.len()];
    for edges in per_shard {
        for (i, d) in edges {
            deps[i as usize].push(d);
        }
    }
    deps
}

struct RunShared<'a> {
    txns: &'a [Transaction],
    successors: &'a [Vec<u32>],
    pending: &'a [AtomicU32],
    outcomes: &'a [OnceLock<TraceEntry>],
    remaining: AtomicUsize,
    clock: &'a AtomicU64,
    store: &'a StateStore,
    executor: &'a dyn Executor,
    mode: DivergenceMode,
    workers: usize,
}

impl RunShared<'_> {
    fn work(&self, tx: &Sender<Option<u32>>, rx: &Receiver<Option<u32>>) {
        while let Ok(Some(i)) = rx.recv() {
            let i = i as usize;
            let entry = self.execute_one(&self.txns[i]);
            if self.outcomes[i].set(entry).is_err() {
                unreachable!("transaction dispatched twice");
            }
            for &s in &self.successors[i] {
                if self.pending[s as usize].fetch_sub(1, Ordering::AcqRel) == 1 {
                    tx.send(Some(s)).unwrap();
                }
            }
            if self.remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
                for _ in 0..self.workers {
                    tx.send(None).unwrap();
                }
            }
        }
    }

    fn execute_one(&self, txn: &Transaction) -> TraceEntry {
        let approx = txn.approx_rw.as_ref().expect("checked at ingest");
        let start = self.clock.fetch_add(1, Ordering::SeqCst);
        let (status, actual_rw) = match self.executor.execute(txn, self.store) {
            Ok(exec) => match validate_rwset(approx, &exec.actual_rw, self.mode) {
                Verdict::Keep => {
                    self.store.apply(&exec.writes);
                    let status = match exec.status {
                        ExecStatus::Ok => TraceStatus::Ok,
                        ExecStatus::InsufficientFunds => TraceStatus::InsufficientFunds,
                    };
                    (status, exec.actual_rw)
                }
                Verdict::Drop => (TraceStatus::Dropped, exec.actual_rw),
            },
            Err(_) => (TraceStatus::Failed, RwSet::default()),
        };
        let end = self.clock.fetch_add(1, Ordering::SeqCst);
        TraceEntry {
            id: txn.id,
            start,
            end,
            actual_rw,
            status,
        }
    }
}

/// Transactions handed back for re-analysis.
#[derive(Debug, Default)]
pub struct Mempool {
    queue: Vec<Transaction>,
    retries: HashMap<TxnId, u32>,
    discarded: Vec<TxnId>,
    max_retries: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RequeueOutcome {
    Requeued { retry: u32 },
    Discarded,
}

impl Mempool {
    pub fn new(max_retries: u32) -> Self {
        Mempool {
            max_retries,
            ..Default::default()
        }
    }

    /// Return a dropped transaction for a later batch, or discard it once
    /// it has used up its retries.
    pub fn requeue(&mut self, mut txn: Transaction) -> RequeueOutcome {
        let retries = self.retries.entry(txn.id).or_insert(0);
        if *retries >= self.max_retries {
            self.discarded.push(txn.id);
            return RequeueOutcome::Discarded;
        }
        *retries += 1;
        txn.approx_rw = None;
        txn.inject_divergence = txn.inject_divergence.saturating_sub(1);
        let retry = *retries;
        self.queue.push(txn);
        RequeueOutcome::Requeued { retry }
    }

    /// Queued transactions in id order.
    pub fn drain(&mut self) -> Vec<Transaction> {
        let mut out = std::mem::take(&mut self.queue);
        out.sort_by_key(|t| t.id);
        out
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn retries(&self, id: TxnId) -> u32 {
        self.retries.get(&id).copied().unwrap_or(0)
    }

    pub fn discarded(&self) -> &[TxnId] {
        &self.discarded
    }
}

/// Move a report's dropped transactions into `mempool`; returns how many
/// were requeued (the rest were discarded).
pub fn requeue_dropped(report: &mut ExecutionReport, mempool: &mut Mempool) -> usize {
    std::mem::take(&mut report.dropped)
        .into_iter()
        .filter(|t| matches!(mempool.requeue(t.clone()), RequeueOutcome::Requeued { .. }))
        .count()
}
