//! Route-fused MKA: the memory levels are blended per token by `λ` before a
//! single K/V projection, and the fused keys/values are what gets cached.

use super::attention::{multi_head_attention, Mask};
use super::{active_tiers, MkaModel};
use crate::error::{MkaError, Result};
use crate::memory::{build_levels_with, ChunkStore, SummaryState};
use crate::routing::{gate, N_LEVELS};
use crate::scalar::Scalar;
use crate::tensor::{concat_seq, linear, merge_heads, split_heads, Tensor};

/// Fused keys/values `[B×H×T_past×d_h]` plus the running L2 summary, so a
/// decode step sees the same summary a full recompute would.
///
/// Append-only: every call returns a new cache and leaves its input intact.
/// Each past token keeps the fusion computed with its own `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedKvCache<T> {
    k: Tensor<T>,
    v: Tensor<T>,
    summary: SummaryState<T>,
}

impl<T: Scalar> FusedKvCache<T> {
    pub fn empty(model: &MkaModel<T>, batch: usize) -> Result<Self> {
        let dims = model.config.dims;
        let shape = [batch, dims.n_heads, 0, dims.d_head()];
        Ok(Self {
            k: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            summary: SummaryState::new(model.config.summary, batch, dims.d_model)?,
        })
    }

    pub fn t_past(&self) -> usize {
        self.k.dim(2)
    }

    pub fn k(&self) -> &Tensor<T> {
        &self.k
    }

    pub fn v(&self) -> &Tensor<T> {
        &self.v
    }

    pub fn summary(&self) -> &SummaryState<T> {
        &self.summary
    }

    fn check(&self, model: &MkaModel<T>, batch: usize) -> Result<()> {
        let dims = model.config.dims;
        let want = [batch, dims.n_heads, self.t_past(), dims.d_head()];
        if self.k.shape() != want || self.v.shape() != want {
            return Err(MkaError::Cache(format!(
                "cache k {:?} / v {:?} incompatible with batch {batch}, {} heads of width {}",
                self.k.shape(),
                self.v.shape(),
                dims.n_heads,
                dims.d_head()
            )));
        }
        if self.summary.mode() != model.config.summary || self.summary.count() != self.t_past() {
            return Err(MkaError::Cache(
                "cache summary state does not match the model or the cached length".into(),
            ));
        }
        Ok(())
    }
}

/// Runs the route-fused layer over `x`, continuing from `cache` if given.
pub fn fastmka_forward<T: Scalar>(
    model: &MkaModel<T>,
    x: &Tensor<T>,
    store: Option<&ChunkStore>,
    cache: Option<&FusedKvCache<T>>,
) -> Result<(Tensor<T>, FusedKvCache<T>)> {
    model.check_input(x, "fastmka_forward")?;
    let dims = model.config.dims;
    let p = &model.proj;
    let batch = x.dim(0);
    let empty;
    let cache = match cache {
        Some(c) => {
            c.check(model, batch)?;
            c
        }
        None => {
            empty = FusedKvCache::empty(model, batch)?;
            &empty
        }
    };

    let q = linear(x, &p.w_q)?;
    let mut summary = cache.summary.clone();
    let levels = build_levels_with(x, &mut summary, store, Some(&q))?;
    let tiers = active_tiers(model.config.tiers, store)?;
    let lambda = gate(&q, &model.gate, model.config.policy)?.restrict(tiers);

    let mut fused = Tensor::zeros(x.shape());
    for r in 0..fused.n_rows() {
        let w = lambda.at(r);
        let dst = fused.row_mut(r);
        for level in (0..N_LEVELS).filter(|&l| tiers.contains(l)) {
            for (f, &m) in dst.iter_mut().zip(levels.get(level).row(r)) {
                *f = *f + w[level] * m;
            }
        }
    }

    let k = split_heads(&linear(&fused, &p.w_k)?, dims)?;
    let v = split_heads(&linear(&fused, &p.w_v)?, dims)?;
    let k_tot = concat_seq(&cache.k, &k)?;
    let v_tot = concat_seq(&cache.v, &v)?;
    let a = multi_head_attention(
        &split_heads(&q, dims)?,
        &k_tot,
        &v_tot,
        Mask::Causal {
            offset: cache.t_past(),
        },
        model.scale(),
    )?;
    let out = linear(&merge_heads(&a, dims)?, &p.w_o)?;
    Ok((
        out,
        FusedKvCache {
            k: k_tot,
            v: v_tot,
            summary,
        },
    ))
}

/// One autoregressive step: `x_t` is `[B×1×D]`.
pub fn fastmka_decode_step<T: Scalar>(
    model: &MkaModel<T>,
    cache: &FusedKvCache<T>,
    x_t: &Tensor<T>,
    store: Option<&ChunkStore>,
) -> Result<(Tensor<T>, FusedKvCache<T>)> {
    if x_t.rank() != 3 || x_t.dim(1) != 1 {
        return Err(MkaError::shape(
            "fastmka_decode_step",
            format!("expected one token [B×1×D], got {:?}", x_t.shape()),
        ));
    }
    fastmka_forward(model, x_t, store, Some(cache))
}
