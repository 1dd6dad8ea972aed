//! Blockwise MKA: causal attention evaluated tile by tile with a running
//! (max, normalizer, accumulator) per query row, plus optional chunk recall.
//!
//! Query block `i` visits key blocks `j ≤ i` (only a trailing window of them
//! in local mode); the diagonal block is masked causally. Whenever a block
//! raises the running max, earlier contributions are rescaled by
//! `exp(μ_old - μ_new)`. In global mode each query row also recalls the
//! top-`R` chunks from a [`ChunkStore`] and folds their keys/values into the
//! same accumulators, unweighted, before normalization.

use rayon::prelude::*;

use super::mixture::OnlineSoftmaxState;
use super::MkaModel;
use crate::error::{MkaError, Result};
use crate::memory::{Chunk, ChunkStore};
use crate::scalar::Scalar;
use crate::tensor::{dot, linear, merge_heads, split_heads, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockMode {
    /// Each query block sees itself and the `window - 1` blocks before it.
    Local { window: usize },
    /// All earlier blocks, plus chunk recall when a store is supplied.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockPlan {
    pub block: usize,
    pub tau: f64,
    pub mode: BlockMode,
    /// Allow a sequence length that is not a multiple of `block`; the tail
    /// block is then shorter, which is the same as right-padding with masked
    /// tokens.
    pub pad: bool,
}

impl BlockPlan {
    pub fn new(block: usize, d_head: usize) -> Self {
        Self {
            block,
            tau: 1.0 / (d_head as f64).sqrt(),
            mode: BlockMode::Global,
            pad: false,
        }
    }

    pub fn with_mode(mut self, mode: BlockMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_padding(mut self, pad: bool) -> Self {
        self.pad = pad;
        self
    }

    pub fn n_blocks(&self, n: usize) -> usize {
        n.div_ceil(self.block)
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.block == 0 {
            return Err(MkaError::Config("block size must be positive".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(MkaError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if let BlockMode::Local { window: 0 } = self.mode {
            return Err(MkaError::Config("local window must cover at least one block".into()));
        }
        if n % self.block != 0 && !self.pad {
            return Err(MkaError::Config(format!(
                "sequence length {n} is not a multiple of block size {} and padding is off",
                self.block
            )));
        }
        Ok(())
    }

    fn first_block(&self, i: usize) -> usize {
        match self.mode {
            BlockMode::Local { window } => (i + 1).saturating_sub(window),
            BlockMode::Global => 0,
        }
    }
}

/// Blockwise attention of `q: [N×d]` over `k: [N×d]`, `v: [N×dv]`.
pub fn block_mka<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    plan: &BlockPlan,
    store: Option<&ChunkStore>,
) -> Result<Tensor<T>> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(MkaError::shape("block_mka", "q, k, v must be rank-2"));
    }
    let (n, d, dv) = (q.dim(0), q.dim(1), v.dim(1));
    if k.dim(0) != n || v.dim(0) != n || k.dim(1) != d {
        return Err(MkaError::shape(
            "block_mka",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    plan.validate(n)?;
    if let Some(store) = store {
        if plan.mode != BlockMode::Global {
            return Err(MkaError::Config("chunk recall requires global mode".into()));
        }
        if store.d() != d || store.d() != dv {
            return Err(MkaError::Store(format!(
                "store width {} does not match key width {d} / value width {dv}",
                store.d()
            )));
        }
    }
    let store = store.filter(|s| !s.is_empty() && s.top_r() > 0);

    let b = plan.block;
    let tau = T::from_f64_lossy(plan.tau);
    let recall_rows = store.map_or(0, |s| {
        s.top_r() * s.chunks().iter().map(Chunk::n_rows).max().unwrap_or(0)
    });
    let scratch_len = b.max(recall_rows);
    let mut out = Tensor::zeros(&[n, dv]);
    if n == 0 {
        return Ok(out);
    }
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    let results: Vec<Result<()>> = out
        .data_mut()
        .par_chunks_mut(b * dv)
        .enumerate()
        .map(|(i, out_block)| {
            let mut state = OnlineSoftmaxState::new(dv);
            let mut scores = vec![T::zero(); scratch_len];
            let mut scratch = vec![T::zero(); scratch_len];
            let mut recalled_v: Vec<T> = Vec::with_capacity(recall_rows * dv);
            let mut q64 = vec![0.0; d];
            let q_start = i * b;
            let q_len = (n - q_start).min(b);
            for r in 0..q_len {
                let row = q_start + r;
                let qi = &qd[row * d..(row + 1) * d];
                state.reset();
                for j in plan.first_block(i)..=i {
                    let k_start = j * b;
                    let k_len = if j == i { r + 1 } else { b };
                    for (c, s) in scores[..k_len].iter_mut().enumerate() {
                        let key = k_start + c;
                        *s = tau * dot(qi, &kd[key * d..(key + 1) * d]);
                    }
                    state.update(
                        &scores[..k_len],
                        &vd[k_start * dv..(k_start + k_len) * dv],
                        T::one(),
                        &mut scratch,
                    );
                }
                if let Some(store) = store {
                    for (dst, &src) in q64.iter_mut().zip(qi) {
                        *dst = src.to_f64_lossless();
                    }
                    let hits = store.retrieve(&q64)?;
                    recalled_v.clear();
                    let mut m = 0;
                    for (chunk, _) in &hits {
                        for c in 0..chunk.n_rows() {
                            scores[m] = T::from_f64_lossy(plan.tau * dot(&q64, chunk.keys.row(c)));
                            recalled_v.extend(chunk.values.row(c).iter().map(|&x| T::from_f64_lossy(x)));
                            m += 1;
                        }
                    }
                    state.update(&scores[..m], &recalled_v, T::one(), &mut scratch);
                }
                state.finish_into(&mut out_block[r * dv..(r + 1) * dv], row)?;
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<()>>()?;
    Ok(out)
}

/// Full layer around [`block_mka`]: projections, per-head blockwise
/// attention over the token keys/values, output projection. The store, if
/// any, is shared by all heads and must have width `d_h`.
pub fn block_mka_forward<T: Scalar>(
    model: &MkaModel<T>,
    x: &Tensor<T>,
    plan: &BlockPlan,
    store: Option<&ChunkStore>,
) -> Result<Tensor<T>> {
    model.check_input(x, "block_mka_forward")?;
    let dims = model.config.dims;
    let p = &model.proj;
    let (b, s) = (x.dim(0), x.dim(1));
    let (h, dh) = (dims.n_heads, dims.d_head());
    let q = split_heads(&linear(x, &p.w_q)?, dims)?;
    let k = split_heads(&linear(x, &p.w_k)?, dims)?;
    let v = split_heads(&linear(x, &p.w_v)?, dims)?;
    let mut heads = Vec::with_capacity(q.len());
    let slice = |t: &Tensor<T>, bh: usize| {
        Tensor::new(vec![s, dh], t.data()[bh * s * dh..(bh + 1) * s * dh].to_vec())
    };
    for bh in 0..b * h {
        let o = block_mka(&slice(&q, bh)?, &slice(&k, bh)?, &slice(&v, bh)?, plan, store)?;
        heads.extend_from_slice(o.data());
    }
    let a = Tensor::new(vec![b, h, s, dh], heads)?;
    linear(&merge_heads(&a, dims)?, &p.w_o)
}
