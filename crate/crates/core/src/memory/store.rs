//! Long-term chunk store with random-hyperplane hash recall.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MkaError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_HASH_BITS: usize = 64;

/// Sign-of-projection bit vector. Bit `i` is set iff the input has a
/// non-negative dot product with hyperplane `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Signature {
    words: Vec<u64>,
    len: usize,
}

impl Signature {
    fn zeroed(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range for {}-bit signature", self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn hamming(&self, other: &Signature) -> u32 {
        debug_assert_eq!(self.len, other.len);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    pub fn complement(&self) -> Signature {
        let mut out = Signature::zeroed(self.len);
        for i in (0..self.len).filter(|&i| !self.get(i)) {
            out.set(i);
        }
        out
    }

    /// Packed little-endian bytes: bit `i` lives in byte `i / 8` at position `i % 8`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len.div_ceil(8);
        self.words
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(n)
            .collect()
    }

    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(MkaError::Snapshot(format!(
                "{}-bit signature needs {} bytes, got {}",
                len,
                len.div_ceil(8),
                bytes.len()
            )));
        }
        let mut sig = Signature::zeroed(len);
        for (i, &byte) in bytes.iter().enumerate() {
            sig.words[i / 8] |= u64::from(byte) << (8 * (i % 8));
        }
        if len % 64 != 0 {
            let tail = sig.words[len / 64] >> (len % 64);
            if tail != 0 {
                return Err(MkaError::Snapshot("signature padding bits are set".into()));
            }
        }
        Ok(sig)
    }
}

/// A stored historical block of keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub id: u64,
    pub range: Range<u64>,
    pub centroid: Tensor<f64>,
    pub keys: Tensor<f64>,
    pub values: Tensor<f64>,
    pub signature: Signature,
}

impl Chunk {
    pub fn n_rows(&self) -> usize {
        self.keys.dim(0)
    }
}

/// Append-only bank of chunks ranked by Hamming distance between
/// signatures. Hyperplanes are drawn once from the seed and never change.
///
/// Mutation goes through `&mut self`, so shared snapshots (`&ChunkStore`,
/// or an `RwLock` around it) give many concurrent readers or one writer.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkStore {
    d: usize,
    seed: u64,
    top_r: usize,
    hyperplanes: Tensor<f64>,
    chunks: Vec<Chunk>,
    next_id: u64,
}

impl ChunkStore {
    pub fn new(d: usize, h_bits: usize, top_r: usize, seed: u64) -> Result<Self> {
        if d == 0 || h_bits == 0 {
            return Err(MkaError::Store(format!(
                "width ({d}) and hash bits ({h_bits}) must be positive"
            )));
        }
        if h_bits > u32::MAX as usize || d > u32::MAX as usize {
            return Err(MkaError::Store("width or hash bits exceed u32".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hyperplanes =
            Tensor::from_fn(&[h_bits, d], |_| StandardNormal.sample(&mut rng));
        Ok(Self {
            d,
            seed,
            top_r,
            hyperplanes,
            chunks: Vec::new(),
            next_id: 0,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn h_bits(&self) -> usize {
        self.hyperplanes.dim(0)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn top_r(&self) -> usize {
        self.top_r
    }

    pub fn set_top_r(&mut self, top_r: usize) {
        self.top_r = top_r;
    }

    pub fn hyperplanes(&self) -> &Tensor<f64> {
        &self.hyperplanes
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn signature(&self, v: &[f64]) -> Result<Signature> {
        if v.len() != self.d {
            return Err(MkaError::Store(format!(
                "vector width {} does not match store width {}",
                v.len(),
                self.d
            )));
        }
        let mut sig = Signature::zeroed(self.h_bits());
        for i in 0..self.h_bits() {
            let plane = self.hyperplanes.row(i);
            let mut acc = 0.0;
            for (a, b) in plane.iter().zip(v) {
                acc += a * b;
            }
            if acc >= 0.0 {
                sig.set(i);
            }
        }
        Ok(sig)
    }

    /// Appends a chunk and returns its id. The centroid is the column mean of
    /// `keys` and the signature is taken from the centroid.
    pub fn insert_chunk(
        &mut self,
        keys: &Tensor<f64>,
        values: &Tensor<f64>,
        range: Range<u64>,
    ) -> Result<u64> {
        if keys.rank() != 2 || values.rank() != 2 {
            return Err(MkaError::Store("keys and values must be rank-2".into()));
        }
        if keys.dim(1) != self.d || values.dim(1) != self.d {
            return Err(MkaError::Store(format!(
                "chunk widths {}/{} do not match store width {}",
                keys.dim(1),
                values.dim(1),
                self.d
            )));
        }
        let rows = keys.dim(0);
        if rows == 0 || values.dim(0) != rows {
            return Err(MkaError::Store(format!(
                "chunk needs matching non-zero row counts, got {} keys and {} values",
                rows,
                values.dim(0)
            )));
        }
        if range.end < range.start || (range.end - range.start) as usize != rows {
            return Err(MkaError::Store(format!(
                "token range {range:?} does not cover {rows} rows"
            )));
        }
        let mut centroid = vec![0.0; self.d];
        for r in 0..rows {
            for (c, k) in centroid.iter_mut().zip(keys.row(r)) {
                *c += k;
            }
        }
        for c in centroid.iter_mut() {
            *c /= rows as f64;
        }
        let signature = self.signature(&centroid)?;
        let id = self.next_id;
        self.next_id += 1;
        self.chunks.push(Chunk {
            id,
            range,
            centroid: Tensor::new(vec![self.d], centroid)?,
            keys: keys.clone(),
            values: values.clone(),
            signature,
        });
        Ok(id)
    }

    /// Top-`R` chunks by ascending Hamming distance to `signature(q)`, ties
    /// broken by ascending chunk id.
    pub fn retrieve(&self, q: &[f64]) -> Result<Vec<(&Chunk, u32)>> {
        let sig = self.signature(q)?;
        Ok(self.retrieve_by_signature(&sig))
    }

    pub fn retrieve_by_signature(&self, sig: &Signature) -> Vec<(&Chunk, u32)> {
        let mut ranked: Vec<(&Chunk, u32)> = self
            .chunks
            .iter()
            .map(|c| (c, c.signature.hamming(sig)))
            .collect();
        ranked.sort_by_key(|(c, dist)| (*dist, c.id));
        ranked.truncate(self.top_r);
        ranked
    }

    pub(crate) fn from_parts(
        d: usize,
        h_bits: usize,
        top_r: usize,
        seed: u64,
        chunks: Vec<Chunk>,
    ) -> Result<Self> {
        let mut store = Self::new(d, h_bits, top_r, seed)?;
        store.next_id = chunks.iter().map(|c| c.id + 1).max().unwrap_or(0);
        store.chunks = chunks;
        Ok(store)
    }
}
