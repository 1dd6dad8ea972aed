//! Dense multi-head softmax attention over `[B×H×S×d]` tensors.

use rayon::prelude::*;

use crate::error::{MkaError, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, Tensor};

/// Which keys a query row may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    /// Query `i` sees keys `0..=offset + i`; `offset` is the number of cached
    /// keys that precede the current queries.
    Causal { offset: usize },
    /// Every query sees every key.
    Full,
}

impl Mask {
    #[inline]
    pub fn visible(&self, query: usize, n_keys: usize) -> usize {
        match *self {
            Mask::Causal { offset } => (offset + query + 1).min(n_keys),
            Mask::Full => n_keys,
        }
    }
}

/// Softmax attention of one query row over the first `visible` keys.
/// `scratch` must hold at least `visible` elements.
#[inline]
pub(crate) fn attend_row<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    visible: usize,
    scale: T,
    scratch: &mut [T],
    out: &mut [T],
) {
    let d = q.len();
    let dv = out.len();
    let scores = &mut scratch[..visible];
    let mut max = T::neg_infinity();
    for (j, s) in scores.iter_mut().enumerate() {
        *s = scale * dot(q, &keys[j * d..(j + 1) * d]);
        max = max.max(*s);
    }
    let mut sum = T::zero();
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum = sum + *s;
    }
    out.iter_mut().for_each(|o| *o = T::zero());
    for (j, &e) in scores.iter().enumerate() {
        let p = e / sum;
        for (o, &v) in out.iter_mut().zip(&values[j * dv..(j + 1) * dv]) {
            *o = *o + p * v;
        }
    }
}

/// `softmax(scale · q kᵀ) v` per batch and head.
///
/// `q: [B×H×Sq×d]`, `k: [B×H×Sk×d]`, `v: [B×H×Sk×dv]` → `[B×H×Sq×dv]`.
/// Rows are computed independently (and in parallel); each row's arithmetic
/// is sequential, so the result does not depend on thread count.
pub fn multi_head_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Mask,
    scale: T,
) -> Result<Tensor<T>> {
    if q.rank() != 4 || k.rank() != 4 || v.rank() != 4 {
        return Err(MkaError::shape("attention", "operands must be [B×H×S×d]"));
    }
    let (b, h, sq, d) = (q.dim(0), q.dim(1), q.dim(2), q.dim(3));
    let (sk, dv) = (k.dim(2), v.dim(3));
    if k.dim(0) != b || k.dim(1) != h || k.dim(3) != d || v.shape()[..3] != k.shape()[..3] {
        return Err(MkaError::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if sq > 0 && mask.visible(0, sk) == 0 {
        return Err(MkaError::shape("attention", "a query row sees no keys"));
    }
    let mut out = Tensor::zeros(&[b, h, sq, dv]);
    if sq == 0 || dv == 0 {
        return Ok(out);
    }
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    out.data_mut()
        .par_chunks_mut(dv)
        .enumerate()
        .for_each_init(
            || vec![T::zero(); sk],
            |scratch, (row, o)| {
                let bh = row / sq;
                let i = row % sq;
                let keys = &kd[bh * sk * d..(bh + 1) * sk * d];
                let values = &vd[bh * sk * dv..(bh + 1) * sk * dv];
                let qi = &qd[row * d..(row + 1) * d];
                attend_row(qi, keys, values, mask.visible(i, sk), scale, scratch, o);
            },
        );
    Ok(out)
}

/// Explicit attention probabilities `[Sq×Sk]` for one head; masked entries
/// are zero.
pub fn attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    mask: Mask,
    scale: T,
) -> Result<Tensor<T>> {
    if q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1) {
        return Err(MkaError::shape(
            "attention_weights",
            format!("q {:?}, k {:?}", q.shape(), k.shape()),
        ));
    }
    let (sq, sk) = (q.dim(0), k.dim(0));
    let mut p = Tensor::zeros(&[sq, sk]);
    for i in 0..sq {
        let visible = mask.visible(i, sk);
        let row = &mut p.row_mut(i)[..visible];
        for (j, s) in row.iter_mut().enumerate() {
            *s = scale * dot(q.row(i), k.row(j));
        }
        crate::tensor::softmax_in_place(row);
    }
    Ok(p)
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

    #[test]
    fn rows_of_weights_sum_to_one() {
        let q = random(&[6, 4], 1);
        let k = random(&[9, 4], 2);
        for mask in [Mask::Full, Mask::Causal { offset: 3 }] {
            let p = attention_weights(&q, &k, mask, 0.5).unwrap();
            for i in 0..6 {
                let row = p.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[mask.visible(i, 9)..].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn matches_explicit_weights() {
        let q = random(&[1, 1, 5, 3], 3);
        let k = random(&[1, 1, 7, 3], 4);
        let v = random(&[1, 1, 7, 2], 5);
        let mask = Mask::Causal { offset: 2 };
        let out = multi_head_attention(&q, &k, &v, mask, 0.7).unwrap();
        let p = attention_weights(
            &q.clone().reshape(&[5, 3]).unwrap(),
            &k.clone().reshape(&[7, 3]).unwrap(),
            mask,
            0.7,
        )
        .unwrap();
        for i in 0..5 {
            for c in 0..2 {
                let expected: f64 = (0..7).map(|j| p.row(i)[j] * v.data()[j * 2 + c]).sum();
                assert!((out.data()[i * 2 + c] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = random(&[1, 2, 1, 3], 6);
        let k = random(&[1, 2, 1, 3], 7);
        let v = random(&[1, 2, 1, 4], 8);
        let out = multi_head_attention(&q, &k, &v, Mask::Causal { offset: 0 }, 1.0).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn rejects_mismatched_heads() {
        let q = random(&[1, 2, 3, 4], 1);
        let k = random(&[1, 1, 3, 4], 2);
        assert!(multi_head_attention(&q, &k, &k, Mask::Full, 1.0).is_err());
    }
}
