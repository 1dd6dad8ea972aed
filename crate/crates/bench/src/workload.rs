//! Seeded synthetic inputs.
//!
//! Every entry is drawn uniformly from `[-1, 1)` by a ChaCha8 stream seeded
//! with `seed`, in row-major order. ChaCha8 output is specified bit-for-bit,
//! so the same seed gives the same tensor on every platform.

use mka_core::memory::ChunkStore;
use mka_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{HarnessError, Result};

pub fn synth_workload(seed: u64, batch: usize, seq_len: usize, d_model: usize) -> Result<Tensor<f64>> {
    if batch == 0 || seq_len == 0 || d_model == 0 {
        return Err(HarnessError::Config(format!(
            "workload dims must be positive, got batch {batch}, seq_len {seq_len}, d_model {d_model}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::from_fn(&[batch, seq_len, d_model], |_| rng.random_range(-1.0..1.0)))
}

/// A store of width `d` filled with `n_chunks` chunks of `chunk_len` rows
/// drawn from an independent history stream (never from the workload itself).
pub fn history_store(
    seed: u64,
    d: usize,
    n_chunks: usize,
    chunk_len: usize,
    top_r: usize,
    h_bits: usize,
) -> Result<ChunkStore> {
    let mut store = ChunkStore::new(d, h_bits, top_r, seed)?;
    let history = synth_workload(seed ^ 0x9e37_79b9_7f4a_7c15, 1, n_chunks * chunk_len, d)?;
    for c in 0..n_chunks {
        let rows = history.data()[c * chunk_len * d..(c + 1) * chunk_len * d].to_vec();
        let rows = Tensor::new(vec![chunk_len, d], rows)?;
        let start = (c * chunk_len) as u64;
        store.insert_chunk(&rows, &rows, start..start + chunk_len as u64)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bits() {
        let a = synth_workload(7, 2, 5, 3).unwrap();
        let b = synth_workload(7, 2, 5, 3).unwrap();
        assert_eq!(a.shape(), [2, 5, 3]);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn different_seeds_differ_almost_everywhere() {
        let mut worst = 1.0f64;
        for seed in 0..50u64 {
            let a = synth_workload(seed, 1, 64, 16).unwrap();
            let b = synth_workload(seed + 1000, 1, 64, 16).unwrap();
            let same = a.data().iter().zip(b.data()).filter(|(x, y)| x == y).count();
            worst = worst.min(1.0 - same as f64 / a.len() as f64);
        }
        assert!(worst >= 0.99);
    }

    #[test]
    fn rejects_empty_dims() {
        assert!(synth_workload(1, 0, 4, 4).is_err());
        assert!(synth_workload(1, 1, 4, 0).is_err());
    }

    #[test]
    fn history_store_layout() {
        let s = history_store(3, 8, 5, 4, 2, 64).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.chunks()[4].range, 16..20);
        assert_eq!(s, history_store(3, 8, 5, 4, 2, 64).unwrap());
    }
}
