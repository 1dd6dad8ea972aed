//! The three memory levels seen by every token: L1 local tokens, L2 a causal
//! running summary of the prefix, L3 a representation recalled from the
//! long-term chunk store.

mod snapshot;
mod store;

pub use snapshot::{MAGIC as SNAPSHOT_MAGIC, VERSION as SNAPSHOT_VERSION};
pub use store::{Chunk, ChunkStore, Signature, DEFAULT_HASH_BITS};

use crate::error::{MkaError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How L2 summarizes the prefix `x[1..=t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SummaryMode {
    PrefixMean,
    /// `m[t] = decay·m[t-1] + (1-decay)·x[t]`, with `m[1] = x[1]`.
    Ema { decay: f64 },
}

impl SummaryMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SummaryMode::PrefixMean => Ok(()),
            SummaryMode::Ema { decay } if decay > 0.0 && decay < 1.0 => Ok(()),
            SummaryMode::Ema { decay } => Err(MkaError::Config(format!(
                "ema decay must lie in (0, 1), got {decay}"
            ))),
        }
    }
}

/// Running L2 state per batch row, carried across prefill and decode calls.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryState<T> {
    mode: SummaryMode,
    batch: usize,
    width: usize,
    acc: Vec<T>,
    count: usize,
}

impl<T: Scalar> SummaryState<T> {
    pub fn new(mode: SummaryMode, batch: usize, width: usize) -> Result<Self> {
        mode.validate()?;
        Ok(Self {
            mode,
            batch,
            width,
            acc: vec![T::zero(); batch * width],
            count: 0,
        })
    }

    pub fn mode(&self) -> SummaryMode {
        self.mode
    }

    /// Number of tokens absorbed so far.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Absorbs `x` (`[B×S×D]`) and returns the summaries at each of its
    /// positions.
    pub fn advance(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 3 || x.dim(0) != self.batch || x.dim(2) != self.width {
            return Err(MkaError::shape(
                "summary",
                format!(
                    "expected [{}×S×{}], got {:?}",
                    self.batch,
                    self.width,
                    x.shape()
                ),
            ));
        }
        let (b, s, d) = (x.dim(0), x.dim(1), x.dim(2));
        let mut out = Tensor::zeros(&[b, s, d]);
        for t in 0..s {
            let n = self.count + t + 1;
            for bi in 0..b {
                let acc = &mut self.acc[bi * d..(bi + 1) * d];
                let xt = x.row(bi * s + t);
                let dst = out.row_mut(bi * s + t);
                match self.mode {
                    SummaryMode::PrefixMean => {
                        let count = T::from_usize(n).unwrap();
                        for ((a, &xv), o) in acc.iter_mut().zip(xt).zip(dst.iter_mut()) {
                            *a = *a + xv;
                            *o = *a / count;
                        }
                    }
                    SummaryMode::Ema { decay } => {
                        let keep = T::from_f64_lossy(decay);
                        let take = T::from_f64_lossy(1.0 - decay);
                        for ((a, &xv), o) in acc.iter_mut().zip(xt).zip(dst.iter_mut()) {
                            *a = if n == 1 { xv } else { keep * *a + take * xv };
                            *o = *a;
                        }
                    }
                }
            }
        }
        self.count += s;
        Ok(out)
    }
}

/// Causal summary of a whole sequence starting from an empty prefix.
pub fn causal_summary<T: Scalar>(x: &Tensor<T>, mode: SummaryMode) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(MkaError::shape("summary", format!("expected rank 3, got {:?}", x.shape())));
    }
    SummaryState::new(mode, x.dim(0), x.dim(2))?.advance(x)
}

/// Per-token L3 representation: the mean of the centroids of the top-`R`
/// chunks recalled for that token's query, or zeros if nothing is recalled.
pub fn recall_rows<T: Scalar>(store: &ChunkStore, queries: &Tensor<T>) -> Result<Tensor<T>> {
    let d = queries.last_dim();
    if d != store.d() {
        return Err(MkaError::Store(format!(
            "store width {} does not match query width {}",
            store.d(),
            d
        )));
    }
    let mut out = Tensor::zeros(queries.shape());
    if store.is_empty() || store.top_r() == 0 {
        return Ok(out);
    }
    let mut q = vec![0.0; d];
    let mut mean = vec![0.0; d];
    for r in 0..queries.n_rows() {
        for (dst, src) in q.iter_mut().zip(queries.row(r)) {
            *dst = src.to_f64_lossless();
        }
        let hits = store.retrieve(&q)?;
        mean.iter_mut().for_each(|m| *m = 0.0);
        for (chunk, _) in &hits {
            for (m, c) in mean.iter_mut().zip(chunk.centroid.data()) {
                *m += c;
            }
        }
        let n = hits.len() as f64;
        for (o, m) in out.row_mut(r).iter_mut().zip(&mean) {
            *o = T::from_f64_lossy(m / n);
        }
    }
    Ok(out)
}

/// `m1`, `m2`, `m3` for one sequence batch, all `[B×S×D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLevels<T> {
    pub m1: Tensor<T>,
    pub m2: Tensor<T>,
    pub m3: Tensor<T>,
}

impl<T: Scalar> MemoryLevels<T> {
    pub fn get(&self, level: usize) -> &Tensor<T> {
        match level {
            0 => &self.m1,
            1 => &self.m2,
            2 => &self.m3,
            _ => panic!("memory level {level} out of range"),
        }
    }
}

/// Builds the memory levels for `x`. `queries` selects what L3 recalls and
/// is required whenever a store is given.
pub fn build_levels<T: Scalar>(
    x: &Tensor<T>,
    mode: SummaryMode,
    store: Option<&ChunkStore>,
    queries: Option<&Tensor<T>>,
) -> Result<MemoryLevels<T>> {
    if x.rank() != 3 {
        return Err(MkaError::shape("build_levels", format!("expected [B×S×D], got {:?}", x.shape())));
    }
    let mut state = SummaryState::new(mode, x.dim(0), x.dim(2))?;
    build_levels_with(x, &mut state, store, queries)
}

pub(crate) fn build_levels_with<T: Scalar>(
    x: &Tensor<T>,
    state: &mut SummaryState<T>,
    store: Option<&ChunkStore>,
    queries: Option<&Tensor<T>>,
) -> Result<MemoryLevels<T>> {
    if !x.is_finite() {
        return Err(MkaError::NonFinite { op: "build_levels" });
    }
    let m2 = state.advance(x)?;
    let m3 = match store {
        None => Tensor::zeros(x.shape()),
        Some(store) => {
            if store.d() != x.dim(2) {
                return Err(MkaError::Store(format!(
                    "store width {} does not match model width {}",
                    store.d(),
                    x.dim(2)
                )));
            }
            let queries = queries.ok_or_else(|| {
                MkaError::Config("a chunk store was given without retrieval queries".into())
            })?;
            if queries.shape() != x.shape() {
                return Err(MkaError::shape(
                    "build_levels",
                    format!("queries {:?} vs tokens {:?}", queries.shape(), x.shape()),
                ));
            }
            recall_rows(store, queries)?
        }
    };
    Ok(MemoryLevels {
        m1: x.clone(),
        m2,
        m3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(values: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, values.len(), 1], values.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn prefix_mean_running_means() {
        let levels = build_levels(&seq(&[1.0, 3.0, 5.0]), SummaryMode::PrefixMean, None, None).unwrap();
        assert_eq!(levels.m2.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(levels.m1.data(), &[1.0, 3.0, 5.0]);
        assert!(levels.m3.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ema_recurrence() {
        let m2 = causal_summary(&seq(&[1.0, 3.0]), SummaryMode::Ema { decay: 0.5 }).unwrap();
        assert_eq!(m2.data(), &[1.0, 2.0]);

        let xs = [0.5, -1.0, 2.0, 4.0];
        let m2 = causal_summary(&seq(&xs), SummaryMode::Ema { decay: 0.9 }).unwrap();
        let mut m = xs[0];
        let mut expected = vec![m];
        for &x in &xs[1..] {
            m = 0.9 * m + 0.1 * x;
            expected.push(m);
        }
        for (a, b) in m2.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ema_decay_validated() {
        assert!(SummaryMode::Ema { decay: 1.0 }.validate().is_err());
        assert!(SummaryMode::Ema { decay: 0.0 }.validate().is_err());
        assert!(causal_summary(&seq(&[1.0]), SummaryMode::Ema { decay: -0.5 }).is_err());
    }

    #[test]
    fn prefix_mean_matches_brute_force() {
        let x = random(&[2, 17, 5], 3);
        let m2 = causal_summary(&x, SummaryMode::PrefixMean).unwrap();
        for b in 0..2 {
            for t in 0..17 {
                for k in 0..5 {
                    let mean: f64 = (0..=t)
                        .map(|u| x.data()[(b * 17 + u) * 5 + k])
                        .sum::<f64>()
                        / (t + 1) as f64;
                    let got = m2.data()[(b * 17 + t) * 5 + k];
                    assert!((got - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn summary_is_causal() {
        let x = random(&[2, 12, 4], 8);
        for mode in [SummaryMode::PrefixMean, SummaryMode::Ema { decay: 0.7 }] {
            let base = causal_summary(&x, mode).unwrap();
            for t in 0..12 {
                let mut y = x.clone();
                for b in 0..2 {
                    for u in t + 1..12 {
                        y.row_mut(b * 12 + u).iter_mut().for_each(|v| *v = 1e3);
                    }
                }
                let other = causal_summary(&y, mode).unwrap();
                for b in 0..2 {
                    for u in 0..=t {
                        assert_eq!(base.row(b * 12 + u), other.row(b * 12 + u));
                    }
                }
            }
        }
    }

    #[test]
    fn split_prefill_matches_one_shot() {
        let x = random(&[1, 9, 3], 1);
        let whole = causal_summary(&x, SummaryMode::PrefixMean).unwrap();
        let mut state = SummaryState::new(SummaryMode::PrefixMean, 1, 3).unwrap();
        let head = Tensor::new(vec![1, 4, 3], x.data()[..12].to_vec()).unwrap();
        let tail = Tensor::new(vec![1, 5, 3], x.data()[12..].to_vec()).unwrap();
        let mut parts = state.advance(&head).unwrap().into_data();
        parts.extend(state.advance(&tail).unwrap().into_data());
        assert_eq!(parts, whole.data());
        assert_eq!(state.count(), 9);
    }

    #[test]
    fn recall_mean_of_centroids() {
        let mut store = ChunkStore::new(2, 64, 2, 0).unwrap();
        let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        store.insert_chunk(&a, &a, 0..1).unwrap();
        store.insert_chunk(&b, &b, 1..2).unwrap();
        let q = Tensor::new(vec![1, 1, 2], vec![0.3, 0.2]).unwrap();
        let levels = build_levels(&q, SummaryMode::PrefixMean, Some(&store), Some(&q)).unwrap();
        assert_eq!(levels.m3.data(), &[0.5, 0.5]);
    }

    #[test]
    fn empty_store_gives_zero_l3() {
        let store = ChunkStore::new(3, 64, 4, 0).unwrap();
        let x = random(&[1, 4, 3], 2);
        let levels = build_levels(&x, SummaryMode::PrefixMean, Some(&store), Some(&x)).unwrap();
        assert!(levels.m3.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn store_width_must_match() {
        let store = ChunkStore::new(5, 64, 4, 0).unwrap();
        let x = random(&[1, 4, 3], 2);
        assert!(build_levels(&x, SummaryMode::PrefixMean, Some(&store), Some(&x)).is_err());
        let store = ChunkStore::new(3, 64, 4, 0).unwrap();
        assert!(build_levels(&x, SummaryMode::PrefixMean, Some(&store), None).is_err());
    }
}
