//! Run artifacts on disk and their offline verification.
//!
//! A run directory holds `metrics.json`, `blocks.json`, `trace.bin` and a
//! copy of the input as `workload.bin`. [`verify_dir`] replays the kept
//! transactions serially block by block, checks the recorded schedule and
//! the metric ordering, and writes `verify_report.txt`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::engine::{merkle_root, Block};
use crate::model::{RwSet, Transaction, TxnId};
use crate::oracle::{
    check_schedule, exact_precedence_graph, exact_tlp, serial_execute, EXACT_GRAPH_CAP,
};
use crate::pipeline::{MetricsReport, RunMode, RunOutput, SweepRow};
use crate::trace::ScheduleTrace;
use crate::workload::{genesis, read_workload, write_workload, WorkloadError, WorkloadSpec};

pub const METRICS_FILE: &str = "metrics.json";
pub const BLOCKS_FILE: &str = "blocks.json";
pub const TRACE_FILE: &str = "trace.bin";
pub const WORKLOAD_FILE: &str = "workload.bin";
pub const REPORT_FILE: &str = "verify_report.txt";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("missing artifact {0}")]
    Missing(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Workload {
        path: PathBuf,
        source: WorkloadError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Json {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, ArtifactError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn open(path: &Path) -> Result<BufReader<File>, ArtifactError> {
    if !path.exists() {
        return Err(ArtifactError::Missing(path.to_path_buf()));
    }
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    serde_json::to_writer_pretty(create(path)?, value).map_err(json_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ArtifactError> {
    serde_json::from_reader(open(path)?).map_err(json_err(path))
}

pub fn write_workload_file(
    path: &Path,
    spec: &WorkloadSpec,
    txns: &[Transaction],
) -> Result<(), ArtifactError> {
    write_workload(create(path)?, spec, txns).map_err(|source| ArtifactError::Workload {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_workload_file(path: &Path) -> Result<(WorkloadSpec, Vec<Transaction>), ArtifactError> {
    read_workload(open(path)?).map_err(|source| ArtifactError::Workload {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_trace(path: &Path, trace: &ScheduleTrace) -> Result<(), ArtifactError> {
    trace.write_to(create(path)?).map_err(io_err(path))
}

pub fn read_trace(path: &Path) -> Result<ScheduleTrace, ArtifactError> {
    ScheduleTrace::read_from(open(path)?).map_err(io_err(path))
}

/// Write every artifact of a run into `dir`, creating it if needed.
pub fn write_run(
    dir: &Path,
    out: &RunOutput,
    spec: &WorkloadSpec,
    txns: &[Transaction],
) -> Result<(), ArtifactError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join(METRICS_FILE), &out.metrics)?;
    write_json(&dir.join(BLOCKS_FILE), &out.blocks)?;
    write_trace(&dir.join(TRACE_FILE), &out.trace)?;
    write_workload_file(&dir.join(WORKLOAD_FILE), spec, txns)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), ArtifactError> {
    let mut csv = String::from("alpha,gamma,workers,tps,tlp,frames,error\n");
    for r in rows {
        let err = r.error.as_deref().unwrap_or("").replace(['"', '\n'], " ");
        writeln!(
            csv,
            "{},{},{},{:.1},{:.4},{},\"{}\"",
            r.alpha, r.gamma, r.workers, r.tps, r.tlp, r.frames, err
        )
        .unwrap();
    }
    fs::write(path, csv).map_err(io_err(path))
}

/// One named check and its outcome.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Check {
    pub name: &'static str,
    pub result: Result<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.result.is_ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.result.is_err())
    }

    fn push(&mut self, name: &'static str, result: Result<String, String>) {
        self.checks.push(Check { name, result });
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let (tag, msg) = match &c.result {
                Ok(m) => ("PASS", m),
                Err(m) => ("FAIL", m),
            };
            writeln!(s, "{tag} {}: {msg}", c.name).unwrap();
        }
        writeln!(
            s,
            "{}",
            if self.passed() {
                "verification passed"
            } else {
                "verification FAILED"
            }
        )
        .unwrap();
        s
    }
}

/// Verify in-memory artifacts against the oracles.
pub fn verify(
    spec: &WorkloadSpec,
    txns: &[Transaction],
    blocks: &[Block],
    trace: &ScheduleTrace,
    metrics: &MetricsReport,
) -> VerifyReport {
    let mut report = VerifyReport::default();
    let by_id: HashMap<TxnId, &Transaction> = txns.iter().map(|t| (t.id, t)).collect();

    report.push("block-chain", check_chain(blocks));
    report.push("kept-order", check_kept_order(blocks, trace));
    if metrics.mode == RunMode::Run {
        report.push("serial-replay", replay(spec, &by_id, blocks));
    }
    report.push(
        "schedule",
        check_schedule(trace)
            .map(|()| {
                format!(
                    "{} kept entries conflict-serializable",
                    trace.kept().count()
                )
            })
            .map_err(|e| e.to_string()),
    );
    report.push("tlp-sandwich", check_sandwich(trace, metrics));
    report
}

fn check_chain(blocks: &[Block]) -> Result<String, String> {
    for (i, b) in blocks.iter().enumerate() {
        if b.height != i as u64 {
            return Err(format!("block {i} has height {}", b.height));
        }
        if i > 0 && b.parent_root != blocks[i - 1].state_root {
            return Err(format!(
                "block {}: parent root does not match block {}",
                b.height,
                i - 1
            ));
        }
    }
    Ok(format!("{} blocks linked", blocks.len()))
}

fn check_kept_order(blocks: &[Block], trace: &ScheduleTrace) -> Result<String, String> {
    let in_blocks = blocks.iter().flat_map(|b| b.txn_ids.iter().copied());
    if in_blocks.eq(trace.kept().map(|e| e.id)) {
        Ok("blocks list exactly the kept trace entries".into())
    } else {
        Err("block transaction lists differ from the kept entries of the trace".into())
    }
}

fn replay(
    spec: &WorkloadSpec,
    by_id: &HashMap<TxnId, &Transaction>,
    blocks: &[Block],
) -> Result<String, String> {
    let initial = genesis(spec);
    let genesis_root = merkle_root(&{
        let mut s = initial.clone();
        s.sort_unstable_by_key(|(k, _)| *k);
        s
    });
    if let Some(b) = blocks.first() {
        if b.parent_root != genesis_root {
            return Err(format!(
                "block {}: parent root is not the genesis root",
                b.height
            ));
        }
    }
    let mut state: Vec<_> = initial;
    for b in blocks {
        let txns = b
            .txn_ids
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| format!("block {}: unknown transaction {id}", b.height))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let out = serial_execute(txns, state);
        if out.root != b.state_root {
            return Err(format!(
                "block {}: state root {} differs from serial replay {}",
                b.height,
                hex::encode(b.state_root),
                hex::encode(out.root)
            ));
        }
        state = out.state.into_iter().collect();
    }
    Ok(format!(
        "{} block roots match serial execution",
        blocks.len()
    ))
}

fn check_sandwich(trace: &ScheduleTrace, m: &MetricsReport) -> Result<String, String> {
    let (mean, tlp) = (m.mean_frame_size_ratio(), m.measured_tlp_ratio());
    if mean > tlp {
        return Err(format!("mean frame size {mean} exceeds measured TLP {tlp}"));
    }
    if trace.entries.len() > EXACT_GRAPH_CAP {
        return Ok(format!(
            "{mean} <= {tlp} (exact TLP skipped above {EXACT_GRAPH_CAP} entries)"
        ));
    }
    let rws: Vec<RwSet> = trace.entries.iter().map(|e| e.actual_rw.clone()).collect();
    let graph = exact_precedence_graph(&rws).map_err(|e| e.to_string())?;
    let exact = exact_tlp(&graph);
    if tlp > exact {
        return Err(format!("measured TLP {tlp} exceeds exact TLP {exact}"));
    }
    Ok(format!("{mean} <= {tlp} <= {exact}"))
}

/// Load the artifacts in `dir`, verify them and write the report file.
pub fn verify_dir(dir: &Path) -> Result<VerifyReport, ArtifactError> {
    let metrics: MetricsReport = read_json(&dir.join(METRICS_FILE))?;
    let blocks: Vec<Block> = read_json(&dir.join(BLOCKS_FILE))?;
    let trace = read_trace(&dir.join(TRACE_FILE))?;
    let (spec, txns) = read_workload_file(&dir.join(WORKLOAD_FILE))?;
    let report = verify(&spec, &txns, &blocks, &trace, &metrics);
    let path = dir.join(REPORT_FILE);
    fs::write(&path, report.render()).map_err(io_err(&path))?;
    Ok(report)
}
