//! Symbolic MKA: one causal attention per memory level, then a `λ`-weighted
//! sum of the per-level outputs.

use super::attention::{multi_head_attention, Mask};
use super::{active_tiers, MkaModel};
use crate::error::{MkaError, Result};
use crate::memory::{build_levels, ChunkStore};
use crate::routing::{gate, N_LEVELS};
use crate::scalar::Scalar;
use crate::tensor::{concat_seq, linear, merge_heads, split_heads, Tensor};

/// Raw L1 keys/values, `[B×H×T×d_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> KvCache<T> {
    pub fn t_past(&self) -> usize {
        self.k.dim(2)
    }
}

/// Returns the layer output and the L1 cache (previous cache, if any, with
/// this call's L1 keys/values appended).
///
/// Every level is masked causally over positions: query `t` sees `m_ℓ[1..=t]`.
/// For L3 this keeps rows recalled by later queries out of reach.
pub fn symbolic_mka_forward<T: Scalar>(
    model: &MkaModel<T>,
    x: &Tensor<T>,
    store: Option<&ChunkStore>,
    cache: Option<&KvCache<T>>,
) -> Result<(Tensor<T>, KvCache<T>)> {
    model.check_input(x, "symbolic_mka_forward")?;
    let dims = model.config.dims;
    let p = &model.proj;
    let (b, s) = (x.dim(0), x.dim(1));
    let (h, dh) = (dims.n_heads, dims.d_head());

    let q = linear(x, &p.w_q)?;
    let qh = split_heads(&q, dims)?;
    let levels = build_levels(x, model.config.summary, store, Some(&q))?;
    let tiers = active_tiers(model.config.tiers, store)?;
    let lambda = gate(&q, &model.gate, model.config.policy)?.restrict(tiers);

    let k1 = split_heads(&linear(&levels.m1, &p.w_k)?, dims)?;
    let v1 = split_heads(&linear(&levels.m1, &p.w_v)?, dims)?;

    let mut mixed = Tensor::zeros(&[b, h, s, dh]);
    for level in 0..N_LEVELS {
        if !tiers.contains(level) {
            continue;
        }
        let a = if level == 0 {
            multi_head_attention(&qh, &k1, &v1, Mask::Causal { offset: 0 }, model.scale())?
        } else {
            let m = levels.get(level);
            let k = split_heads(&linear(m, &p.w_k)?, dims)?;
            let v = split_heads(&linear(m, &p.w_v)?, dims)?;
            multi_head_attention(&qh, &k, &v, Mask::Causal { offset: 0 }, model.scale())?
        };
        for bi in 0..b {
            for hi in 0..h {
                for t in 0..s {
                    let w = lambda.at(bi * s + t)[level];
                    let row = (bi * h + hi) * s + t;
                    for (o, &ai) in mixed.row_mut(row).iter_mut().zip(a.row(row)) {
                        *o = *o + w * ai;
                    }
                }
            }
        }
    }
    let out = linear(&merge_heads(&mixed, dims)?, &p.w_o)?;

    let cache = match cache {
        None => KvCache { k: k1, v: v1 },
        Some(prev) => {
            if prev.k.shape()[..2] != [b, h] || prev.k.dim(3) != dh {
                return Err(MkaError::Cache(format!(
                    "cache {:?} does not fit input batch {b} with {h} heads of width {dh}",
                    prev.k.shape()
                )));
            }
            KvCache {
                k: concat_seq(&prev.k, &k1)?,
                v: concat_seq(&prev.v, &v1)?,
            }
        }
    };
    Ok((out, cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::{reference_causal_mha, MkaConfig};
    use crate::memory::{causal_summary, recall_rows, SummaryMode};
    use crate::routing::{GateParams, RoutingPolicy};
    use crate::tensor::ModelDims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn model(d: usize, h: usize, logits: [f64; 3], policy: RoutingPolicy) -> MkaModel<f64> {
        let mut config = MkaConfig::new(ModelDims::new(d, h).unwrap());
        config.policy = policy;
        let mut m = MkaModel::random(config, 17);
        m.gate = GateParams::constant(d, logits);
        m
    }

    /// Dense single-level causal attention assembled from scratch.
    fn level_attention(m: &MkaModel<f64>, x: &Tensor<f64>, mem: &Tensor<f64>) -> Tensor<f64> {
        let dims = m.config.dims;
        let q = split_heads(&linear(x, &m.proj.w_q).unwrap(), dims).unwrap();
        let k = split_heads(&linear(mem, &m.proj.w_k).unwrap(), dims).unwrap();
        let v = split_heads(&linear(mem, &m.proj.w_v).unwrap(), dims).unwrap();
        let a = multi_head_attention(&q, &k, &v, Mask::Causal { offset: 0 }, m.scale()).unwrap();
        merge_heads(&a, dims).unwrap()
    }

    #[test]
    fn l1_only_collapses_to_mha() {
        let m = model(8, 2, [1.0, 0.0, 0.0], RoutingPolicy::HardTopK(1));
        let x = random(&[2, 6, 8], 1);
        let (o, cache) = symbolic_mka_forward(&m, &x, None, None).unwrap();
        let r = reference_causal_mha(&x, &m.proj, m.config.dims).unwrap();
        assert_eq!(o, r);
        assert_eq!(cache.t_past(), 6);
    }

    #[test]
    fn l2_only_single_token_is_value_path() {
        let m = model(4, 2, [0.0, 1.0, 0.0], RoutingPolicy::HardTopK(1));
        let x = random(&[1, 1, 4], 2);
        let (o, _) = symbolic_mka_forward(&m, &x, None, None).unwrap();
        let m2 = causal_summary(&x, SummaryMode::PrefixMean).unwrap();
        let expected = linear(&linear(&m2, &m.proj.w_v).unwrap(), &m.proj.w_o).unwrap();
        assert!(o.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn uniform_mix_matches_three_dense_attentions() {
        let m = model(8, 2, [0.0; 3], RoutingPolicy::FixedUniform);
        let x = random(&[1, 7, 8], 3);
        let mut store = ChunkStore::new(8, 64, 2, 9).unwrap();
        for c in 0..3u64 {
            let rows = random(&[4, 8], 20 + c);
            store.insert_chunk(&rows, &rows, c * 4..c * 4 + 4).unwrap();
        }
        let (o, _) = symbolic_mka_forward(&m, &x, Some(&store), None).unwrap();

        let q = linear(&x, &m.proj.w_q).unwrap();
        let m2 = causal_summary(&x, SummaryMode::PrefixMean).unwrap();
        let m3 = recall_rows(&store, &q).unwrap();
        let parts = [
            level_attention(&m, &x, &x),
            level_attention(&m, &x, &m2),
            level_attention(&m, &x, &m3),
        ];
        let mixed = Tensor::from_fn(x.shape(), |i| parts.iter().map(|p| p.data()[i] / 3.0).sum());
        let expected = linear(&mixed, &m.proj.w_o).unwrap();
        assert!(o.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn no_store_mixes_two_levels() {
        let m = model(8, 2, [0.0; 3], RoutingPolicy::FixedUniform);
        let x = random(&[1, 5, 8], 6);
        let (o, _) = symbolic_mka_forward(&m, &x, None, None).unwrap();
        let m2 = causal_summary(&x, SummaryMode::PrefixMean).unwrap();
        let parts = [level_attention(&m, &x, &x), level_attention(&m, &x, &m2)];
        let mixed = Tensor::from_fn(x.shape(), |i| parts.iter().map(|p| p.data()[i] / 2.0).sum());
        let expected = linear(&mixed, &m.proj.w_o).unwrap();
        assert!(o.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn cache_appends_l1_only() {
        let m = model(4, 2, [0.0; 3], RoutingPolicy::LearnedSoft);
        let x = random(&[1, 3, 4], 4);
        let (_, c1) = symbolic_mka_forward(&m, &x, None, None).unwrap();
        let y = random(&[1, 2, 4], 5);
        let (_, c2) = symbolic_mka_forward(&m, &y, None, Some(&c1)).unwrap();
        assert_eq!(c2.t_past(), 5);
        let k_y = split_heads(&linear(&y, &m.proj.w_k).unwrap(), m.config.dims).unwrap();
        assert_eq!(c2.k, concat_seq(&c1.k, &k_y).unwrap());
    }
}
