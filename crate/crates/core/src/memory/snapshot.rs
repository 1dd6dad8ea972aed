//! Little-endian binary snapshot of a [`ChunkStore`].
//!
//! ```text
//! header:    b"MKA3" | version u32 | d u32 | h_bits u32 | seed u64 | chunk_count u64
//! per chunk: id u64 | start u64 | end u64 | signature ceil(h_bits/8) bytes
//!            | centroid d × f64 | keys (end-start)×d f64 | values (end-start)×d f64
//! ```
//!
//! Hyperplanes are not stored; they are regenerated from the seed. The
//! retrieval count `R` is a query-time setting and is supplied on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::store::{Chunk, ChunkStore, Signature};
use crate::error::{MkaError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MKA3";
pub const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, x: u32) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, x: u64) -> Result<()> {
    Ok(w.write_all(&x.to_le_bytes())?)
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

impl ChunkStore {
    pub fn write_snapshot(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(&mut w, VERSION)?;
        put_u32(&mut w, self.d() as u32)?;
        put_u32(&mut w, self.h_bits() as u32)?;
        put_u64(&mut w, self.seed())?;
        put_u64(&mut w, self.len() as u64)?;
        for c in self.chunks() {
            put_u64(&mut w, c.id)?;
            put_u64(&mut w, c.range.start)?;
            put_u64(&mut w, c.range.end)?;
            w.write_all(&c.signature.to_bytes())?;
            put_f64s(&mut w, c.centroid.data())?;
            put_f64s(&mut w, c.keys.data())?;
            put_f64s(&mut w, c.values.data())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_snapshot(mut r: impl Read, top_r: usize) -> Result<Self> {
        let mut magic = [0; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MkaError::Snapshot(format!("bad magic {magic:?}")));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(MkaError::Snapshot(format!("unsupported version {version}")));
        }
        let d = get_u32(&mut r)? as usize;
        let h_bits = get_u32(&mut r)? as usize;
        let seed = get_u64(&mut r)?;
        let count = get_u64(&mut r)?;
        let mut chunks = Vec::new();
        let mut last_id = None;
        for _ in 0..count {
            let id = get_u64(&mut r)?;
            if last_id.is_some_and(|prev| id <= prev) {
                return Err(MkaError::Snapshot(format!("chunk id {id} is not increasing")));
            }
            last_id = Some(id);
            let start = get_u64(&mut r)?;
            let end = get_u64(&mut r)?;
            if end <= start {
                return Err(MkaError::Snapshot(format!("empty chunk range {start}..{end}")));
            }
            let rows = (end - start) as usize;
            let mut sig = vec![0; h_bits.div_ceil(8)];
            r.read_exact(&mut sig)?;
            let signature = Signature::from_bytes(&sig, h_bits)?;
            let centroid = Tensor::new(vec![d], get_f64s(&mut r, d)?)?;
            let keys = Tensor::new(vec![rows, d], get_f64s(&mut r, rows * d)?)?;
            let values = Tensor::new(vec![rows, d], get_f64s(&mut r, rows * d)?)?;
            chunks.push(Chunk {
                id,
                range: start..end,
                centroid,
                keys,
                values,
                signature,
            });
        }
        let mut trailing = [0; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(MkaError::Snapshot("trailing bytes after last chunk".into()));
        }
        ChunkStore::from_parts(d, h_bits, top_r, seed, chunks)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_snapshot(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>, top_r: usize) -> Result<Self> {
        Self::read_snapshot(BufReader::new(File::open(path)?), top_r)
    }
}
