//! Independent reference checks: serial execution, the exact precedence
//! graph, stream-order TLP and conflict-serializability of recorded
//! schedules. Single-threaded on purpose. Only the model types, the
//! single-transaction interpreter and the full-recompute Merkle root are
//! shared with the pipeline.

use std::collections::{BTreeMap, HashMap};

use num_rational::Ratio;
use thiserror::Error;

use crate::engine::{interpret, merkle_root, Root, StateRead, Value};
use crate::model::{conflicts, RwSet, StorageKey, Transaction, TxnId};
use crate::trace::ScheduleTrace;

/// Largest instance the quadratic graph operations accept.
pub const EXACT_GRAPH_CAP: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerialOutcome {
    pub state: BTreeMap<StorageKey, Value>,
    pub root: Root,
}

struct SerialState(BTreeMap<StorageKey, Value>);

impl StateRead for SerialState {
    fn read(&self, key: &StorageKey) -> Value {
        self.0.get(key).copied().unwrap_or(0)
    }
}

/// Execute `txns` one by one, in order, on a fresh copy of `initial`.
/// Transactions the interpreter rejects leave the state unchanged.
pub fn serial_execute<'a>(
    txns: impl IntoIterator<Item = &'a Transaction>,
    initial: impl IntoIterator<Item = (StorageKey, Value)>,
) -> SerialOutcome {
    let mut state = SerialState(initial.into_iter().collect());
    for t in txns {
        if let Ok(exec) = interpret(t, &state, false) {
            for (k, v) in exec.writes {
                state.0.insert(k, v);
            }
        }
    }
    let slots: Vec<_> = state.0.iter().map(|(k, v)| (*k, *v)).collect();
    SerialOutcome {
        root: merkle_root(&slots),
        state: state.0,
    }
}

/// Full precedence graph over a stream: edge `j -> i` for every `j < i`
/// whose access sets conflict. Transitive edges are kept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrecedenceGraph {
    /// `preds[i]`: positions `j < i` conflicting with `i`, ascending.
    pub preds: Vec<Vec<u32>>,
}

impl PrecedenceGraph {
    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.preds.iter().map(Vec::len).sum()
    }

    /// Number of nodes on the longest path.
    pub fn longest_path(&self) -> u64 {
        let mut depth = vec![0u64; self.preds.len()];
        for i in 0..self.preds.len() {
            depth[i] = 1 + self.preds[i]
                .iter()
                .map(|&j| depth[j as usize])
                .max()
                .unwrap_or(0);
        }
        depth.into_iter().max().unwrap_or(0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("instance of {0} transactions exceeds the exact-graph cap of {EXACT_GRAPH_CAP}")]
pub struct TooLarge(pub usize);

/// Pairwise scan over the access sets, given in stream order.
pub fn exact_precedence_graph(rws: &[RwSet]) -> Result<PrecedenceGraph, TooLarge> {
    if rws.len() > EXACT_GRAPH_CAP {
        return Err(TooLarge(rws.len()));
    }
    let preds = (0..rws.len())
        .map(|i| {
            (0..i)
                .filter(|&j| conflicts(&rws[j], &rws[i]))
                .map(|j| j as u32)
                .collect()
        })
        .collect();
    Ok(PrecedenceGraph { preds })
}

/// Transactions per step of the longest conflict chain: the most
/// parallelism any schedule respecting stream order can reach.
pub fn exact_tlp(graph: &PrecedenceGraph) -> Ratio<u64> {
    match graph.longest_path() {
        0 => Ratio::from_integer(0),
        l => Ratio::new(graph.len() as u64, l),
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleViolation {
    #[error("transaction {0} has start stamp {1} not before end stamp {2}")]
    BadInterval(TxnId, u64, u64),
    #[error("conflicting transactions {earlier} and {later} overlap or ran out of stream order")]
    Conflict { earlier: TxnId, later: TxnId },
}

/// Every pair of kept, conflicting transactions must have disjoint
/// execution intervals ordered as in the stream.
///
/// Per slot, a later access must start after the end of every earlier
/// conflicting access on that slot; tracking the running maximum end stamp
/// of earlier writers and of all earlier accesses checks exactly that.
pub fn check_schedule(trace: &ScheduleTrace) -> Result<(), ScheduleViolation> {
    #[derive(Default, Clone, Copy)]
    struct SlotState {
        // (end stamp, id) of the latest-ending earlier writer / accessor
        max_write_end: Option<(u64, TxnId)>,
        max_any_end: Option<(u64, TxnId)>,
    }
    fn bump(slot: &mut Option<(u64, TxnId)>, end: u64, id: TxnId) {
        if slot.is_none_or(|(e, _)| end > e) {
            *slot = Some((end, id));
        }
    }

    let mut slots: HashMap<StorageKey, SlotState> = HashMap::new();
    for e in trace.kept() {
        if e.start >= e.end {
            return Err(ScheduleViolation::BadInterval(e.id, e.start, e.end));
        }
        let rw = &e.actual_rw;
        for key in rw.keys() {
            let s = slots.entry(key).or_default();
            let bound = if rw.writes_key(&key) {
                s.max_any_end
            } else {
                s.max_write_end
            };
            if let Some((end, earlier)) = bound {
                if e.start <= end {
                    return Err(ScheduleViolation::Conflict {
                        earlier,
                        later: e.id,
                    });
                }
            }
        }
        for key in rw.keys() {
            let s = slots.get_mut(&key).unwrap();
            bump(&mut s.max_any_end, e.end, e.id);
            if rw.writes_key(&key) {
                bump(&mut s.max_write_end, e.end, e.id);
            }
        }
    }
    Ok(())
}
