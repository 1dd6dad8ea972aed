use super::attention::{multi_head_attention, Mask};
use super::ProjectionSet;
use crate::error::{MkaError, Result};
use crate::scalar::Scalar;
use crate::tensor::{linear, merge_heads, split_heads, ModelDims, Tensor};

/// Causal multi-head attention with scale `1/√d_h`.
pub fn reference_causal_mha<T: Scalar>(
    x: &Tensor<T>,
    proj: &ProjectionSet<T>,
    dims: ModelDims,
) -> Result<Tensor<T>> {
    reference_causal_mha_scaled(x, proj, dims, 1.0 / (dims.d_head() as f64).sqrt())
}

pub fn reference_causal_mha_scaled<T: Scalar>(
    x: &Tensor<T>,
    proj: &ProjectionSet<T>,
    dims: ModelDims,
    tau: f64,
) -> Result<Tensor<T>> {
    if x.rank() != 3 || x.dim(2) != dims.d_model || proj.d_model() != dims.d_model {
        return Err(MkaError::shape(
            "reference_causal_mha",
            format!(
                "input {:?} with projections of width {} and d_model {}",
                x.shape(),
                proj.d_model(),
                dims.d_model
            ),
        ));
    }
    let q = split_heads(&linear(x, &proj.w_q)?, dims)?;
    let k = split_heads(&linear(x, &proj.w_k)?, dims)?;
    let v = split_heads(&linear(x, &proj.w_v)?, dims)?;
    let a = multi_head_attention(&q, &k, &v, Mask::Causal { offset: 0 }, T::from_f64_lossy(tau))?;
    linear(&merge_heads(&a, dims)?, &proj.w_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Explicit per-head O(S²) loops.
    fn naive(x: &Tensor<f64>, p: &ProjectionSet<f64>, dims: ModelDims) -> Vec<f64> {
        let (b, s, d) = (x.dim(0), x.dim(1), x.dim(2));
        let dh = dims.d_head();
        let proj = |w: &Tensor<f64>, bi: usize, t: usize, c: usize| -> f64 {
            (0..d).map(|i| x.data()[(bi * s + t) * d + i] * w.data()[i * d + c]).sum()
        };
        let mut merged = vec![0.0; b * s * d];
        for bi in 0..b {
            for h in 0..dims.n_heads {
                for t in 0..s {
                    let scores: Vec<f64> = (0..=t)
                        .map(|u| {
                            (0..dh)
                                .map(|c| proj(&p.w_q, bi, t, h * dh + c) * proj(&p.w_k, bi, u, h * dh + c))
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for c in 0..dh {
                        merged[(bi * s + t) * d + h * dh + c] = (0..=t)
                            .map(|u| (scores[u] - m).exp() / z * proj(&p.w_v, bi, u, h * dh + c))
                            .sum();
                    }
                }
            }
        }
        let mut out = vec![0.0; b * s * d];
        for r in 0..b * s {
            for c in 0..d {
                out[r * d + c] = (0..d).map(|i| merged[r * d + i] * p.w_o.data()[i * d + c]).sum();
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops() {
        let dims = ModelDims::new(8, 2).unwrap();
        let p = ProjectionSet::random(8, 3);
        let x = random(&[1, 5, 8], 4);
        let out = reference_causal_mha(&x, &p, dims).unwrap();
        for (a, b) in out.data().iter().zip(naive(&x, &p, dims)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_is_value_path() {
        let dims = ModelDims::new(6, 3).unwrap();
        let p = ProjectionSet::random(6, 1);
        let x = random(&[2, 1, 6], 2);
        let out = reference_causal_mha(&x, &p, dims).unwrap();
        let expected = linear(&linear(&x, &p.w_v).unwrap(), &p.w_o).unwrap();
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn causal_prefix_is_untouched() {
        let dims = ModelDims::new(8, 4).unwrap();
        let p = ProjectionSet::random(8, 5);
        let x = random(&[1, 7, 8], 6);
        let base = reference_causal_mha(&x, &p, dims).unwrap();
        for t in 0..6 {
            let mut y = x.clone();
            y.row_mut(t + 1).iter_mut().for_each(|v| *v += 3.0);
            let other = reference_causal_mha(&y, &p, dims).unwrap();
            for u in 0..=t {
                assert_eq!(base.row(u), other.row(u));
            }
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let dims = ModelDims::new(8, 2).unwrap();
        let p = ProjectionSet::random(8, 3);
        assert!(reference_causal_mha(&random(&[1, 2, 6], 1), &p, dims).is_err());
    }
}
