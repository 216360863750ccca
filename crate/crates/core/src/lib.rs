//! Ahead-of-formation transaction scheduling.
//!
//! Transactions are annotated with predicted read/write sets
//! ([`analyze`]), packed greedily into conflict-free frames using per-frame
//! Bloom filters ([`bloom`], [`framer`]), dispatched through per-slot
//! precedence chains onto a worker pool ([`scheduler`]), and sealed into
//! blocks with a Merkle state root ([`engine`]). [`oracle`] holds the
//! independent serial and brute-force checks everything is validated
//! against, and [`pipeline`] wires the stages end to end.

pub mod analyze;
pub mod artifacts;
pub mod bloom;
pub mod engine;
pub mod framer;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod scheduler;
pub mod trace;
pub mod workload;

pub use model::{
    conflicts, AccessKind, AccountId, RwSet, StorageKey, Transaction, TransferKind, TransferOp,
    TxnId,
};
pub use num_rational::Ratio;

/// Exact transactions-per-step ratio used for TLP metrics.
pub type Tlp = Ratio<u64>;
