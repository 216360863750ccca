//! Mock transfer VM over an in-memory slot store, block formation, and the
//! Merkle commitment standing in for an authenticated database.

pub mod block;
pub mod merkle;
pub mod store;
pub mod vm;

pub use block::{Block, BlockError, BlockFormer};
pub use merkle::{
    merkle_root, store_root, CommitMode, Commitment, IncrementalMerkle, Root, EMPTY_ROOT,
};
pub use store::{export_snapshot, import_snapshot, Snapshot, StateRead, StateStore, Value};
pub use vm::{bal, execute, honest_rw, interpret, tok, ExecError, ExecStatus, Execution, Sink};
