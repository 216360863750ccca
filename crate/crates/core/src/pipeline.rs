//! End-to-end pipeline: analyze, frame, schedule and seal blocks.
//!
//! Input is consumed in analysis batches. Each batch is annotated against a
//! snapshot taken at batch start (with any requeued transactions in front),
//! packed into frames, and executed in segments. A segment is sized to the
//! remaining capacity of the current block, so that a block is sealed at a
//! quiescent barrier exactly when its kept-transaction count reaches the
//! block interval. Dropped transactions go back to the mempool and are
//! re-analyzed in the next batch.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyze::analyze_batch;
use crate::engine::{Block, BlockError, BlockFormer, CommitMode, StateStore};
use crate::framer::{
    framer_metrics, pack_stream_exact, ratio_f64, Frame, Framer, FramerConfig, FramerError,
    FramerMetrics,
};
use crate::model::{RwSet, Transaction, TxnId};
use crate::oracle::{exact_precedence_graph, exact_tlp, EXACT_GRAPH_CAP};
use crate::scheduler::{
    measured_tlp, requeue_dropped, DivergenceMode, EchoExecutor, ExecutionReport, Executor,
    Mempool, Scheduler, SchedulerConfig, SchedulerError, VmExecutor, DEFAULT_MAX_RETRIES,
};
use crate::trace::ScheduleTrace;
use crate::workload::{generate, genesis, WorkloadError, WorkloadSpec};
use crate::Ratio;

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_BLOCK_INTERVAL: u64 = 10_000;

/// Mixed into the run seed for the divergence-injection stream.
const INJECT_SEED_SALT: u64 = 0x6469_7665_7267_6521;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Scheduler worker threads; also sizes the commitment thread pool.
    pub workers: usize,
    pub analyze_workers: usize,
    /// Kept transactions per block.
    pub block_interval: u64,
    pub framer: FramerConfig,
    pub mode: DivergenceMode,
    pub commit: CommitMode,
    /// Fraction of transactions whose first execution diverges.
    pub inject_divergence: f64,
    pub max_retries: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            workers: 1,
            analyze_workers: 1,
            block_interval: DEFAULT_BLOCK_INTERVAL,
            framer: FramerConfig::default(),
            mode: DivergenceMode::Strict,
            commit: CommitMode::Incremental,
            inject_divergence: 0.0,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.workers == 0 || self.analyze_workers == 0 {
            return bad("worker counts must be >= 1");
        }
        if self.block_interval == 0 {
            return bad("block interval must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.inject_divergence) {
            return bad("divergence injection rate must be in [0, 1]");
        }
        self.framer.validate().map_err(PipelineError::Framer)?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("workload: {0}")]
    Workload(#[from] WorkloadError),
    #[error("framer stage: {0}")]
    Framer(#[from] FramerError),
    #[error("scheduler stage: {0}")]
    Scheduler(#[from] SchedulerError),
    #[error("block formation: {0}")]
    Block(#[from] BlockError),
    #[error("commitment pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub analyze_secs: f64,
    pub frame_secs: f64,
    pub schedule_secs: f64,
    pub commit_secs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Run,
    Ablate,
}

/// Contents of `metrics.json`. Rational metrics are given both as a float
/// and as an exact numerator/denominator pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub mode: RunMode,
    pub workload: WorkloadSpec,
    pub workers: usize,
    pub analyze_workers: usize,
    pub block_interval: u64,
    pub frames_per_pool: usize,
    pub bloom_bits: usize,
    pub bloom_hashes: u32,
    pub divergence_mode: String,
    pub inject_divergence: f64,

    pub input_txns: u64,
    /// Executions, counting every retry.
    pub executed: u64,
    pub kept_count: u64,
    pub drop_count: u64,
    pub requeued_count: u64,
    pub discarded_count: u64,
    pub rejected_count: u64,
    pub injected_count: u64,

    pub frame_count: u64,
    pub mean_frame_size: f64,
    pub mean_frame_size_num: u64,
    pub mean_frame_size_den: u64,
    pub critical_path: u64,
    pub measured_tlp: f64,
    pub measured_tlp_num: u64,
    pub measured_tlp_den: u64,
    /// Only for runs of at most the exact-graph cap of executions.
    pub exact_tlp: Option<f64>,
    pub exact_tlp_num: Option<u64>,
    pub exact_tlp_den: Option<u64>,
    pub exact_mean_frame_size: f64,
    pub fp_tlp_loss_pct: f64,

    pub wall_secs: f64,
    pub tps: f64,
    pub stages: StageTimes,
    pub block_roots: Vec<String>,
}

impl MetricsReport {
    pub fn mean_frame_size_ratio(&self) -> Ratio<u64> {
        ratio_or_zero(self.mean_frame_size_num, self.mean_frame_size_den)
    }

    pub fn measured_tlp_ratio(&self) -> Ratio<u64> {
        ratio_or_zero(self.measured_tlp_num, self.measured_tlp_den)
    }

    pub fn exact_tlp_ratio(&self) -> Option<Ratio<u64>> {
        Some(ratio_or_zero(self.exact_tlp_num?, self.exact_tlp_den?))
    }
}

fn ratio_or_zero(num: u64, den: u64) -> Ratio<u64> {
    if den == 0 {
        Ratio::from_integer(0)
    } else {
        Ratio::new(num, den)
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub metrics: MetricsReport,
    pub blocks: Vec<Block>,
    pub trace: ScheduleTrace,
    /// Ids of every emitted frame, in emission order.
    pub frames: Vec<Vec<TxnId>>,
    pub injected: Vec<TxnId>,
    pub discarded: Vec<TxnId>,
}

impl RunOutput {
    /// Kept transactions in stream order, across all blocks.
    pub fn kept_order(&self) -> Vec<TxnId> {
        self.blocks
            .iter()
            .flat_map(|b| b.txn_ids.iter().copied())
            .collect()
    }
}

/// Generate `spec`'s workload and run it.
pub fn run_spec(cfg: &RunConfig, spec: &WorkloadSpec) -> Result<RunOutput, PipelineError> {
    let txns = generate(spec)?;
    run_pipeline(cfg, spec, txns)
}

/// Full pipeline with the transfer VM.
pub fn run_pipeline(
    cfg: &RunConfig,
    spec: &WorkloadSpec,
    txns: Vec<Transaction>,
) -> Result<RunOutput, PipelineError> {
    Pipeline::new(cfg, spec, RunMode::Run)?.drive(txns, &VmExecutor)
}

/// Framing and scheduling only: the executor echoes predicted sets and
/// writes nothing, and only the framer and scheduler are timed.
pub fn ablate(
    cfg: &RunConfig,
    spec: &WorkloadSpec,
    txns: Vec<Transaction>,
) -> Result<RunOutput, PipelineError> {
    Pipeline::new(cfg, spec, RunMode::Ablate)?.drive(txns, &EchoExecutor)
}

/// Pick the transactions whose first execution diverges.
pub fn inject_divergence(txns: &mut [Transaction], rate: f64, seed: u64) -> Vec<TxnId> {
    if rate <= 0.0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ INJECT_SEED_SALT);
    let mut picked = Vec::new();
    for t in txns {
        if rng.random_bool(rate) {
            t.inject_divergence = 1;
            picked.push(t.id);
        }
    }
    picked
}

struct Pipeline<'a> {
    cfg: &'a RunConfig,
    spec: &'a WorkloadSpec,
    mode: RunMode,
    store: StateStore,
    scheduler: Scheduler,
    former: BlockFormer,
    mempool: Mempool,
    pool: rayon::ThreadPool,
    next_frame: u64,

    blocks: Vec<Block>,
    block_kept: Vec<TxnId>,
    report: ExecutionReport,
    frames: Vec<Vec<TxnId>>,
    framed: FramerMetrics,
    /// Annotated batches, kept for the exact-set shadow framing.
    shadow: Vec<Vec<Transaction>>,
    requeued: u64,
    rejected: u64,
    stages: StageTimes,
}

impl<'a> Pipeline<'a> {
    fn new(
        cfg: &'a RunConfig,
        spec: &'a WorkloadSpec,
        mode: RunMode,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        spec.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()?;
        let store = StateStore::from_slots(genesis(spec));
        let former = pool.install(|| BlockFormer::new(&store, cfg.commit));
        Ok(Pipeline {
            cfg,
            spec,
            mode,
            store,
            scheduler: Scheduler::new(SchedulerConfig {
                workers: cfg.workers,
                shards: 0,
                mode: cfg.mode,
            }),
            former,
            mempool: Mempool::new(cfg.max_retries),
            pool,
            next_frame: 0,
            blocks: Vec::new(),
            block_kept: Vec::new(),
            report: ExecutionReport::default(),
            frames: Vec::new(),
            framed: FramerMetrics::default(),
            shadow: Vec::new(),
            requeued: 0,
            rejected: 0,
            stages: StageTimes::default(),
        })
    }

    fn drive(
        mut self,
        mut txns: Vec<Transaction>,
        executor: &dyn Executor,
    ) -> Result<RunOutput, PipelineError> {
        let input_txns = txns.len() as u64;
        let injected = inject_divergence(&mut txns, self.cfg.inject_divergence, self.spec.seed);
        let batch_size = self.spec.batch_size.max(1) as usize;
        let mut input = txns.into_iter();

        let wall = Instant::now();
        loop {
            let mut batch = self.mempool.drain();
            batch.extend(input.by_ref().take(batch_size));
            if batch.is_empty() {
                break;
            }
            self.process_batch(batch, executor)?;
        }
        if !self.block_kept.is_empty() {
            self.seal_block()?;
        }
        let wall_secs = wall.elapsed().as_secs_f64();

        let metrics = self.metrics(input_txns, injected.len() as u64, wall_secs)?;
        let discarded = self.mempool.discarded().to_vec();
        Ok(RunOutput {
            metrics,
            blocks: self.blocks,
            trace: ScheduleTrace {
                entries: self.report.entries,
            },
            frames: self.frames,
            injected,
            discarded,
        })
    }

    fn process_batch(
        &mut self,
        batch: Vec<Transaction>,
        executor: &dyn Executor,
    ) -> Result<(), PipelineError> {
        let t = Instant::now();
        let analysis = analyze_batch(batch, &self.store.snapshot(), self.cfg.analyze_workers);
        self.stages.analyze_secs += t.elapsed().as_secs_f64();
        self.rejected += analysis.rejected.len() as u64;
        for (id, e) in &analysis.rejected {
            log::warn!("rejected {id}: {e}");
        }
        self.shadow.push(analysis.annotated.clone());

        let t = Instant::now();
        let mut framer = Framer::bloom(self.cfg.framer.clone())?.starting_at(self.next_frame);
        let mut frames = Vec::new();
        for txn in analysis.annotated {
            frames.extend(framer.push(txn)?);
        }
        frames.extend(framer.finish()?);
        self.next_frame = framer.next_seq();
        self.stages.frame_secs += t.elapsed().as_secs_f64();

        self.framed.add(framer_metrics(&frames));
        self.frames.extend(frames.iter().map(Frame::ids));
        log::debug!(
            "batch: {} frames, {} txns",
            frames.len(),
            self.framed.txn_count
        );

        let mut pending = frames.into_iter();
        let mut carry: Option<Frame> = None;
        loop {
            let capacity = (self.cfg.block_interval - self.block_kept.len() as u64) as usize;
            let segment = take_segment(&mut carry, &mut pending, capacity);
            if segment.is_empty() {
                break;
            }
            let t = Instant::now();
            self.scheduler.ingest_frames(segment)?;
            let mut report = self.scheduler.run(&self.store, executor);
            self.stages.schedule_secs += t.elapsed().as_secs_f64();

            self.block_kept.extend(&report.kept);
            self.requeued += requeue_dropped(&mut report, &mut self.mempool) as u64;
            self.report.absorb(report);
            if self.block_kept.len() as u64 >= self.cfg.block_interval {
                self.seal_block()?;
            }
        }
        Ok(())
    }

    fn seal_block(&mut self) -> Result<(), PipelineError> {
        let kept = std::mem::take(&mut self.block_kept);
        if self.mode == RunMode::Ablate {
            // nothing was written; the ablation skips commitment
            self.blocks.push(Block {
                height: self.blocks.len() as u64,
                txn_ids: kept,
                state_root: self.former.last_root(),
                parent_root: self.former.last_root(),
            });
            return Ok(());
        }
        let t = Instant::now();
        let in_flight = self.scheduler.dispatch_state().len();
        let (store, former) = (&self.store, &mut self.former);
        let block = self
            .pool
            .install(|| former.form_block(store, kept, in_flight))?;
        self.stages.commit_secs += t.elapsed().as_secs_f64();
        log::info!(
            "block {} sealed with {} txns",
            block.height,
            block.txn_ids.len()
        );
        self.blocks.push(block);
        Ok(())
    }

    fn metrics(
        &self,
        input_txns: u64,
        injected: u64,
        wall_secs: f64,
    ) -> Result<MetricsReport, PipelineError> {
        let report = &self.report;
        let mean = self.framed.mean_frame_size();
        let tlp = measured_tlp(report);

        let mut exact_frames = FramerMetrics::default();
        for batch in &self.shadow {
            exact_frames.add(framer_metrics(&pack_stream_exact(
                batch.iter().cloned(),
                &self.cfg.framer,
            )?));
        }
        let exact_mean = exact_frames.mean_frame_size_f64();
        let fp_tlp_loss_pct = if exact_mean > 0.0 {
            100.0 * (1.0 - ratio_f64(mean) / exact_mean)
        } else {
            0.0
        };

        let exact = if report.entries.len() <= EXACT_GRAPH_CAP {
            let rws: Vec<RwSet> = report.entries.iter().map(|e| e.actual_rw.clone()).collect();
            exact_precedence_graph(&rws).ok().map(|g| exact_tlp(&g))
        } else {
            None
        };

        let (timed, counted) = match self.mode {
            RunMode::Run => (
                wall_secs,
                self.blocks
                    .iter()
                    .map(|b| b.txn_ids.len() as u64)
                    .sum::<u64>(),
            ),
            RunMode::Ablate => (
                self.stages.frame_secs + self.stages.schedule_secs,
                report.executed,
            ),
        };
        let tps = if timed > 0.0 {
            counted as f64 / timed
        } else {
            0.0
        };
        let fr = &self.cfg.framer;

        Ok(MetricsReport {
            schema_version: METRICS_SCHEMA_VERSION,
            mode: self.mode,
            workload: *self.spec,
            workers: self.cfg.workers,
            analyze_workers: self.cfg.analyze_workers,
            block_interval: self.cfg.block_interval,
            frames_per_pool: fr.frames,
            bloom_bits: fr.bloom.bits,
            bloom_hashes: fr.bloom.hashes,
            divergence_mode: match self.cfg.mode {
                DivergenceMode::Strict => "strict".into(),
                DivergenceMode::SubsetSafe => "subset".into(),
            },
            inject_divergence: self.cfg.inject_divergence,
            input_txns,
            executed: report.executed,
            kept_count: report.kept.len() as u64,
            drop_count: report
                .entries
                .iter()
                .filter(|e| !e.status.is_kept())
                .count() as u64,
            requeued_count: self.requeued,
            discarded_count: self.mempool.discarded().len() as u64,
            rejected_count: self.rejected,
            injected_count: injected,
            frame_count: self.framed.frame_count,
            mean_frame_size: ratio_f64(mean),
            mean_frame_size_num: self.framed.txn_count,
            mean_frame_size_den: self.framed.frame_count,
            critical_path: report.critical_path,
            measured_tlp: ratio_f64(tlp),
            measured_tlp_num: *tlp.numer(),
            measured_tlp_den: *tlp.denom(),
            exact_tlp: exact.map(ratio_f64),
            exact_tlp_num: exact.map(|r| *r.numer()),
            exact_tlp_den: exact.map(|r| *r.denom()),
            exact_mean_frame_size: exact_mean,
            fp_tlp_loss_pct,
            wall_secs: timed,
            tps,
            stages: self.stages,
            block_roots: self
                .blocks
                .iter()
                .map(|b| hex::encode(b.state_root))
                .collect(),
        })
    }
}

/// Frames holding at most `capacity` transactions, splitting the last one
/// if needed; the remainder is carried to the next segment.
fn take_segment(
    carry: &mut Option<Frame>,
    pending: &mut impl Iterator<Item = Frame>,
    capacity: usize,
) -> Vec<Frame> {
    let mut segment = Vec::new();
    let mut room = capacity;
    while room > 0 {
        let Some(mut f) = carry.take().or_else(|| pending.next()) else {
            break;
        };
        if f.len() > room {
            *carry = Some(f.split_off(room));
        }
        room -= f.len();
        segment.push(f);
    }
    segment
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub gamma: u64,
    pub workers: usize,
    pub tps: f64,
    pub tlp: f64,
    pub frames: u64,
    pub error: Option<String>,
}

/// One run per (alpha, gamma, workers) cell; failed cells are recorded
/// and the sweep continues.
pub fn sweep(
    base_cfg: &RunConfig,
    base_spec: &WorkloadSpec,
    alphas: &[f64],
    gammas: &[u64],
    workers: &[usize],
) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &alpha in alphas {
        for &gamma in gammas {
            let spec = WorkloadSpec {
                alpha,
                gamma,
                ..*base_spec
            };
            let txns = generate(&spec);
            for &w in workers {
                let cfg = RunConfig {
                    workers: w,
                    ..base_cfg.clone()
                };
                let result = match &txns {
                    Ok(t) => run_pipeline(&cfg, &spec, t.clone()),
                    Err(e) => Err(PipelineError::Config(e.to_string())),
                };
                let mut row = SweepRow {
                    alpha,
                    gamma,
                    workers: w,
                    tps: 0.0,
                    tlp: 0.0,
                    frames: 0,
                    error: None,
                };
                match result {
                    Ok(out) => {
                        row.tps = out.metrics.tps;
                        row.tlp = out.metrics.measured_tlp;
                        row.frames = out.metrics.frame_count;
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
                rows.push(row);
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{check_schedule, serial_execute};
    use crate::workload::MAX_AMOUNT;
    use crate::TransferKind;
    use std::collections::HashMap;

    fn small(alpha: f64, txns: u64) -> WorkloadSpec {
        WorkloadSpec {
            total_accounts: 1 << 12,
            gamma: 10,
            alpha,
            txn_count: txns,
            seed: 3,
            batch_size: 500,
            ..WorkloadSpec::default()
        }
    }

    fn serial_root(spec: &WorkloadSpec, out: &RunOutput) -> crate::engine::Root {
        let txns = generate(spec).unwrap();
        let by_id: HashMap<_, _> = txns.iter().map(|t| (t.id, t)).collect();
        let order = out.kept_order();
        serial_execute(order.iter().map(|id| by_id[id]), genesis(spec)).root
    }

    #[test]
    fn segments_respect_capacity_and_keep_seq() {
        let f = |seq, n: u64| Frame {
            seq,
            txns: (0..n)
                .map(|i| {
                    Transaction::new(
                        TxnId(seq * 100 + i),
                        generate(&small(0.0, 1)).unwrap()[0].op,
                    )
                })
                .collect(),
        };
        let mut pending = vec![f(0, 3), f(1, 4)].into_iter();
        let mut carry = None;
        let a = take_segment(&mut carry, &mut pending, 5);
        assert_eq!(a.iter().map(Frame::len).collect::<Vec<_>>(), [3, 2]);
        let b = take_segment(&mut carry, &mut pending, 5);
        assert_eq!(
            b.iter().map(|f| (f.seq, f.len())).collect::<Vec<_>>(),
            [(1, 2)]
        );
        assert!(take_segment(&mut carry, &mut pending, 5).is_empty());
    }

    #[test]
    fn blocks_hold_interval_kept_txns() {
        let spec = small(0.5, 2_300);
        let cfg = RunConfig {
            block_interval: 1_000,
            ..RunConfig::default()
        };
        let out = run_spec(&cfg, &spec).unwrap();
        let sizes: Vec<_> = out.blocks.iter().map(|b| b.txn_ids.len()).collect();
        assert_eq!(sizes, [1_000, 1_000, 300]);
        for (h, b) in out.blocks.iter().enumerate() {
            assert_eq!(b.height, h as u64);
            if h > 0 {
                assert_eq!(b.parent_root, out.blocks[h - 1].state_root);
            }
        }
        assert_eq!(
            out.blocks.last().unwrap().state_root,
            serial_root(&spec, &out)
        );
        check_schedule(&out.trace).unwrap();
    }

    #[test]
    fn metric_sandwich_holds() {
        for alpha in [0.0, 0.5, 0.99] {
            let spec = small(alpha, 3_000);
            let m = run_spec(&RunConfig::default(), &spec).unwrap().metrics;
            let exact = m.exact_tlp_ratio().unwrap();
            assert!(m.mean_frame_size_ratio() <= m.measured_tlp_ratio(), "{m:?}");
            assert!(m.measured_tlp_ratio() <= exact, "{m:?}");
        }
    }

    #[test]
    fn injected_divergence_is_dropped_once_then_kept() {
        let spec = small(0.5, 4_000);
        let cfg = RunConfig {
            inject_divergence: 0.02,
            workers: 3,
            block_interval: 700,
            ..RunConfig::default()
        };
        let out = run_spec(&cfg, &spec).unwrap();
        let m = &out.metrics;
        assert!(m.injected_count > 0);
        assert_eq!(m.drop_count, m.injected_count);
        assert_eq!(m.requeued_count, m.injected_count);
        assert_eq!(m.kept_count, 4_000);
        assert_eq!(m.executed, 4_000 + m.injected_count);
        let mut kept = out.kept_order();
        kept.sort();
        assert_eq!(kept, (0..4_000).map(TxnId).collect::<Vec<_>>());
        assert_eq!(
            out.blocks.last().unwrap().state_root,
            serial_root(&spec, &out)
        );
        check_schedule(&out.trace).unwrap();
    }

    #[test]
    fn divergence_past_max_retries_is_discarded() {
        let spec = small(0.0, 200);
        let mut txns = generate(&spec).unwrap();
        txns[7].inject_divergence = 10;
        let cfg = RunConfig {
            max_retries: 2,
            ..RunConfig::default()
        };
        let out = run_pipeline(&cfg, &spec, txns).unwrap();
        assert_eq!(out.discarded, [TxnId(7)]);
        assert_eq!(out.metrics.drop_count, 3);
        assert_eq!(out.metrics.kept_count, 199);
        assert!(!out.kept_order().contains(&TxnId(7)));
        assert_eq!(
            out.blocks.last().unwrap().state_root,
            serial_root(&spec, &out)
        );
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let spec = WorkloadSpec {
            kind: TransferKind::Erc20,
            ..small(0.9, 3_000)
        };
        let run = |w| {
            run_spec(
                &RunConfig {
                    workers: w,
                    analyze_workers: w,
                    block_interval: 800,
                    inject_divergence: 0.01,
                    ..RunConfig::default()
                },
                &spec,
            )
            .unwrap()
        };
        let (a, b) = (run(1), run(6));
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.blocks, b.blocks);
    }

    #[test]
    fn full_and_incremental_commitment_agree() {
        let spec = small(0.5, 2_000);
        let run = |commit| {
            run_spec(
                &RunConfig {
                    commit,
                    block_interval: 300,
                    ..RunConfig::default()
                },
                &spec,
            )
            .unwrap()
            .metrics
            .block_roots
        };
        assert_eq!(run(CommitMode::FullRecompute), run(CommitMode::Incremental));
    }

    #[test]
    fn ablation_frames_like_the_full_run() {
        let spec = small(0.5, 2_000);
        let cfg = RunConfig::default();
        let full = run_spec(&cfg, &spec).unwrap();
        let abl = ablate(&cfg, &spec, generate(&spec).unwrap()).unwrap();
        assert_eq!(full.frames, abl.frames);
        assert_eq!(abl.metrics.drop_count, 0);
        assert_eq!(abl.metrics.mode, RunMode::Ablate);
    }

    #[test]
    fn funds_never_run_out() {
        let spec = small(0.99, 2_000);
        let out = run_spec(&RunConfig::default(), &spec).unwrap();
        assert!(out
            .trace
            .entries
            .iter()
            .all(|e| e.status == crate::trace::TraceStatus::Ok));
        assert!(spec.initial_balance() >= 2_000 * MAX_AMOUNT);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let spec = small(0.0, 10);
        for cfg in [
            RunConfig {
                workers: 0,
                ..RunConfig::default()
            },
            RunConfig {
                block_interval: 0,
                ..RunConfig::default()
            },
            RunConfig {
                inject_divergence: 2.0,
                ..RunConfig::default()
            },
        ] {
            assert!(matches!(
                run_spec(&cfg, &spec),
                Err(PipelineError::Config(_))
            ));
        }
    }
}
