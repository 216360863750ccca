//! Per-transaction execution records and their binary file format.
//!
//! `trace.bin` layout (all integers little-endian):
//!
//! ```text
//! magic  b"AOFTRACE"   8 bytes
//! version u32          currently 1
//! count   u64
//! count x { id u64, start u64, end u64, status u8,
//!           n_reads u16, n_writes u16, reads [8; n_reads], writes [8; n_writes] }
//! ```

use std::io::{self, Read, Write};

use crate::model::{RwSet, StorageKey, TxnId};

const MAGIC: &[u8; 8] = b"AOFTRACE";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TraceStatus {
    Ok,
    InsufficientFunds,
    /// The executor rejected the transaction; it keeps its position but wrote nothing.
    Failed,
    /// Actual access set diverged from the annotation; writes discarded.
    Dropped,
}

impl TraceStatus {
    pub fn is_kept(self) -> bool {
        !matches!(self, TraceStatus::Dropped)
    }

    fn code(self) -> u8 {
        match self {
            TraceStatus::Ok => 0,
            TraceStatus::InsufficientFunds => 1,
            TraceStatus::Failed => 2,
            TraceStatus::Dropped => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => TraceStatus::Ok,
            1 => TraceStatus::InsufficientFunds,
            2 => TraceStatus::Failed,
            3 => TraceStatus::Dropped,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub id: TxnId,
    /// Logical-clock stamps; `start < end`, one clock for the whole run.
    pub start: u64,
    pub end: u64,
    pub actual_rw: RwSet,
    pub status: TraceStatus,
}

/// Entries in stream (execution-schedule) order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScheduleTrace {
    pub entries: Vec<TraceEntry>,
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

impl ScheduleTrace {
    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&e.id.0.to_le_bytes())?;
            w.write_all(&e.start.to_le_bytes())?;
            w.write_all(&e.end.to_le_bytes())?;
            w.write_all(&[e.status.code()])?;
            let (r, wr) = (e.actual_rw.reads(), e.actual_rw.writes());
            let len16 =
                |n: usize| u16::try_from(n).map_err(|_| invalid("access set too large for trace"));
            w.write_all(&len16(r.len())?.to_le_bytes())?;
            w.write_all(&len16(wr.len())?.to_le_bytes())?;
            for k in r.iter().chain(wr) {
                w.write_all(&k.0)?;
            }
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> io::Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(invalid("not a trace file"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(invalid(format!("unsupported trace version {version}")));
        }
        let count = read_u64(&mut r)?;
        let mut entries = Vec::with_capacity(count.min(1 << 24) as usize);
        for _ in 0..count {
            let id = TxnId(read_u64(&mut r)?);
            let start = read_u64(&mut r)?;
            let end = read_u64(&mut r)?;
            let mut code = [0u8; 1];
            r.read_exact(&mut code)?;
            let status =
                TraceStatus::from_code(code[0]).ok_or_else(|| invalid("bad status code"))?;
            let nr = read_u16(&mut r)? as usize;
            let nw = read_u16(&mut r)? as usize;
            let mut keys = Vec::with_capacity(nr + nw);
            for _ in 0..nr + nw {
                let mut k = [0u8; 8];
                r.read_exact(&mut k)?;
                keys.push(StorageKey(k));
            }
            let writes = keys.split_off(nr);
            entries.push(TraceEntry {
                id,
                start,
                end,
                actual_rw: RwSet::new(keys, writes),
                status,
            });
        }
        Ok(ScheduleTrace { entries })
    }

    /// Kept entries in stream order.
    pub fn kept(&self) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter().filter(|e| e.status.is_kept())
    }
}

fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
