use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::merkle::{CommitMode, Commitment, Root};
use super::store::StateStore;
use crate::model::TxnId;

/// Block header plus the stream-ordered kept transactions it seals.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub txn_ids: Vec<TxnId>,
    #[serde(with = "hex_root")]
    pub state_root: Root,
    #[serde(with = "hex_root")]
    pub parent_root: Root,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlockError {
    #[error("block formation requires a quiescent store but {0} transactions are in flight")]
    InFlight(usize),
}

/// Seals blocks over a store at quiescent barriers.
#[derive(Debug)]
pub struct BlockFormer {
    commitment: Commitment,
    height: u64,
    last_root: Root,
}

impl BlockFormer {
    /// Starts from the store's current state; the first block's parent is
    /// that state's root.
    pub fn new(store: &StateStore, mode: CommitMode) -> Self {
        let mut commitment = Commitment::new(mode);
        let last_root = commitment.commit(store);
        BlockFormer {
            commitment,
            height: 0,
            last_root,
        }
    }

    pub fn last_root(&self) -> Root {
        self.last_root
    }

    pub fn next_height(&self) -> u64 {
        self.height
    }

    pub fn form_block(
        &mut self,
        store: &StateStore,
        kept: Vec<TxnId>,
        in_flight: usize,
    ) -> Result<Block, BlockError> {
        if in_flight != 0 {
            return Err(BlockError::InFlight(in_flight));
        }
        let state_root = self.commitment.commit(store);
        let block = Block {
            height: self.height,
            txn_ids: kept,
            state_root,
            parent_root: self.last_root,
        };
        self.height += 1;
        self.last_root = state_root;
        Ok(block)
    }
}

pub(crate) mod hex_root {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use super::Root;

    pub fn serialize<S: Serializer>(root: &Root, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(root))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Root, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(D::Error::custom)?;
        bytes
            .try_into()
            .map_err(|_| D::Error::custom("state root must be 32 bytes"))
    }
}
