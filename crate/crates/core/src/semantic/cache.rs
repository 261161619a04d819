//! Neighbour-list cache: magic "TBGN", u16 version, u64 list count, u32 k,
//! a context string, then per list a u64 query, u32 length and
//! `(u64 candidate, f64 cosine)` pairs, closed by a CRC32.

use std::path::Path;

use super::NeighborList;
use crate::codec::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const NEIGHBOR_MAGIC: &[u8; 4] = b"TBGN";
const VERSION: u16 = 1;

pub fn write_neighbor_cache(path: &Path, context: &str, k: usize, lists: &[NeighborList]) -> Result<()> {
    let mut w = ByteWriter::new(NEIGHBOR_MAGIC, VERSION);
    w.u64(lists.len() as u64);
    w.u32(k as u32);
    w.str(context);
    for l in lists {
        w.u64(l.query as u64);
        w.u32(l.neighbors.len() as u32);
        for &(c, s) in &l.neighbors {
            w.u64(c as u64);
            w.f64(s);
        }
    }
    write_atomic(path, &w.finish())
}

/// Load lists written under the same `context` and `k`; anything else is a
/// stale cache.
pub fn read_neighbor_cache(path: &Path, context: &str, k: usize) -> Result<Vec<NeighborList>> {
    let data = std::fs::read(path)?;
    let mut r = ByteReader::open(&data, NEIGHBOR_MAGIC, VERSION)?;
    let count = r.u64()?;
    let stored_k = r.u32()? as usize;
    let stored_ctx = r.str()?;
    if stored_ctx != context || stored_k != k {
        return Err(Error::StaleCache(format!(
            "neighbour cache built for k={stored_k} context {stored_ctx}, need k={k} context {context}"
        )));
    }
    let count = r.check_count(count, 12)?;
    let mut lists = Vec::with_capacity(count);
    for _ in 0..count {
        let query = r.u64()? as usize;
        let len = r.u32()? as u64;
        let len = r.check_count(len, 16)?;
        let mut neighbors = Vec::with_capacity(len);
        for _ in 0..len {
            neighbors.push((r.u64()? as usize, r.f64()?));
        }
        lists.push(NeighborList { query, neighbors });
    }
    r.finish()?;
    Ok(lists)
}
