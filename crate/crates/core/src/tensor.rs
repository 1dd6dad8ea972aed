//! Dense row-major tensors and the kernels the engines are built from.
//!
//! Storage is a flat `Vec` plus an explicit shape; there are no strides or
//! views. Every reduction accumulates left to right in index order, so a
//! given computation is bit-reproducible on one machine.

use crate::error::{MkaError, Result};
use crate::scalar::{Precision, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a shape and row-major data.
    ///
    /// Zero extents are allowed; they represent empty key sets and empty
    /// caches.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != data.len() {
            return Err(MkaError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds a tensor from double-precision data, rounding if `T` is `f32`.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            data.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Width of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor rank is at least 1")
    }

    /// Number of rows when viewed as `[prod(leading) × last]`.
    pub fn n_rows(&self) -> usize {
        let w = self.last_dim();
        if w == 0 {
            self.shape[..self.rank() - 1].iter().product()
        } else {
            self.data.len() / w
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.last_dim();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64_lossy(x.to_f64_lossless()))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossless()).collect()
    }

    /// Largest elementwise absolute difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(MkaError::shape(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossless() - b.to_f64_lossless()).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.to_f64_lossless().abs())
            .fold(0.0, f64::max)
    }
}

/// Model width split into heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_heads: usize,
}

impl ModelDims {
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        if d_model == 0 || n_heads == 0 {
            return Err(MkaError::Dims(format!(
                "d_model={d_model}, n_heads={n_heads} must be positive"
            )));
        }
        if d_model % n_heads != 0 {
            return Err(MkaError::Dims(format!(
                "d_model={d_model} is not divisible by n_heads={n_heads}"
            )));
        }
        Ok(Self { d_model, n_heads })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

fn ensure_finite<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(MkaError::NonFinite { op })
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// `c[m×n] = a[m×k] · b[k×n]` on raw slices. Each output element accumulates
/// over `k` in ascending order, so a row's result does not depend on `m`.
pub(crate) fn matmul_slices<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij = *c_ij + a_ip * b_pj;
            }
        }
    }
    c
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(MkaError::shape(
            "matmul",
            format!("expected rank-2 operands, got {:?} and {:?}", a.shape, b.shape),
        ));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(MkaError::shape(
            "matmul",
            format!("[{m}×{k}] · [{k2}×{n}]: inner extents differ"),
        ));
    }
    ensure_finite(a, "matmul")?;
    ensure_finite(b, "matmul")?;
    Ok(Tensor {
        shape: vec![m, n],
        data: matmul_slices(&a.data, &b.data, m, k, n),
    })
}

/// Applies a `[k×n]` weight to the last axis of `x`: `[..., k] → [..., n]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 || x.last_dim() != w.shape[0] {
        return Err(MkaError::shape(
            "linear",
            format!("input {:?} against weight {:?}", x.shape, w.shape),
        ));
    }
    let (k, n) = (w.shape[0], w.shape[1]);
    let m = x.n_rows();
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor {
        shape,
        data: matmul_slices(&x.data, &w.data, m, k, n),
    })
}

/// In-place stable softmax of one row. Returns the row maximum.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
    max
}

/// Softmax along the last axis using max subtraction.
pub fn softmax_rows<T: Scalar>(s: &Tensor<T>) -> Result<Tensor<T>> {
    if s.data.iter().any(|x| x.is_nan()) {
        return Err(MkaError::NonFinite { op: "softmax_rows" });
    }
    let mut out = s.clone();
    let w = out.last_dim();
    if w > 0 {
        for row in out.data.chunks_mut(w) {
            softmax_in_place(row);
        }
    }
    Ok(out)
}

/// Elementwise `exp(s - mu)`.
pub fn shifted_exp<T: Scalar>(s: &Tensor<T>, mu: T) -> Tensor<T> {
    s.map(|x| (x - mu).exp())
}

/// `[B×S×D] → [B×H×S×d_h]`.
pub fn split_heads<T: Scalar>(x: &Tensor<T>, dims: ModelDims) -> Result<Tensor<T>> {
    if x.rank() != 3 || x.shape[2] != dims.d_model {
        return Err(MkaError::shape(
            "split_heads",
            format!("expected [B×S×{}], got {:?}", dims.d_model, x.shape),
        ));
    }
    let (b, s, d) = (x.shape[0], x.shape[1], x.shape[2]);
    let (h, dh) = (dims.n_heads, dims.d_head());
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for hi in 0..h {
            for t in 0..s {
                let base = (bi * s + t) * d + hi * dh;
                out.extend_from_slice(&x.data[base..base + dh]);
            }
        }
    }
    Ok(Tensor {
        shape: vec![b, h, s, dh],
        data: out,
    })
}

/// `[B×H×S×d_h] → [B×S×D]`, the inverse of [`split_heads`].
pub fn merge_heads<T: Scalar>(x: &Tensor<T>, dims: ModelDims) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.shape[1] != dims.n_heads || x.shape[3] != dims.d_head() {
        return Err(MkaError::shape(
            "merge_heads",
            format!(
                "expected [B×{}×S×{}], got {:?}",
                dims.n_heads,
                dims.d_head(),
                x.shape
            ),
        ));
    }
    let (b, h, s, dh) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let d = h * dh;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for hi in 0..h {
            for t in 0..s {
                let src = ((bi * h + hi) * s + t) * dh;
                let dst = (bi * s + t) * d + hi * dh;
                out[dst..dst + dh].copy_from_slice(&x.data[src..src + dh]);
            }
        }
    }
    Ok(Tensor {
        shape: vec![b, s, d],
        data: out,
    })
}

/// Concatenates two `[B×H×T×d]` tensors along the sequence axis.
pub(crate) fn concat_seq<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 4
        || b.rank() != 4
        || a.shape[0] != b.shape[0]
        || a.shape[1] != b.shape[1]
        || a.shape[3] != b.shape[3]
    {
        return Err(MkaError::shape(
            "concat_seq",
            format!("{:?} and {:?}", a.shape, b.shape),
        ));
    }
    let (bs, h, ta, d) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
    let tb = b.shape[2];
    let mut out = Vec::with_capacity(a.len() + b.len());
    for bh in 0..bs * h {
        out.extend_from_slice(&a.data[bh * ta * d..(bh + 1) * ta * d]);
        out.extend_from_slice(&b.data[bh * tb * d..(bh + 1) * tb * d]);
    }
    Ok(Tensor {
        shape: vec![bs, h, ta + tb, d],
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let i2 = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let m = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&i2, &m).unwrap(), m);
    }

    #[test]
    fn projector_selects_first_row() {
        let p = t2(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let m = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&p, &m).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_7x5x3() {
        let a = random(&[7, 5], 11);
        let b = random(&[5, 3], 12);
        let c = matmul(&a, &b).unwrap();
        let oracle = triple_loop(&a, &b);
        for (x, y) in c.data().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = random(&[2, 3], 1);
        let b = random(&[2, 3], 2);
        let err = matmul(&a, &b).unwrap_err();
        assert!(err.to_string().contains("[2×3] · [2×3]"), "{err}");
    }

    #[test]
    fn softmax_small_rows() {
        let s = t2(1, 2, &[0.0, 0.0]);
        assert_eq!(softmax_rows(&s).unwrap().data(), &[0.5, 0.5]);

        for x in [-1e300, -3.5, 0.0, 42.0, 1e300] {
            let s = t2(1, 1, &[x]);
            assert_eq!(softmax_rows(&s).unwrap().data(), &[1.0]);
        }

        let e2 = 2.0f64.exp();
        let s = t2(1, 2, &[2.0, 0.0]);
        let p = softmax_rows(&s).unwrap();
        assert!((p.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / (e2 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        let s = t2(1, 2, &[0.0, f64::NAN]);
        assert!(matches!(
            softmax_rows(&s),
            Err(MkaError::NonFinite { .. })
        ));
    }

    #[test]
    fn shifted_exp_cases() {
        let mu = 3.25;
        let out = shifted_exp(&Tensor::new(vec![2], vec![mu, mu - 1.0]).unwrap(), mu);
        assert_eq!(out.data()[0], 1.0);
        assert!((out.data()[1] - (-1.0f64).exp()).abs() < 1e-16);

        let out = shifted_exp(&Tensor::new(vec![1], vec![0.0f64]).unwrap(), 0.0);
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn shifted_exp_single_precision_boundary() {
        let s = Tensor::new(vec![2], vec![80.0f32, 79.0]).unwrap();
        let out = shifted_exp(&s, 80.0);
        assert!(out.is_finite());
        assert_eq!(out.data()[0], 1.0);
        // exp overflows f32 only past ln(f32::MAX) ≈ 88.72; exp(80) ≈ 5.5e34 is
        // still representable.
        assert!(80.0f32.exp().is_finite());
        assert!(89.0f32.exp().is_infinite());
        let out = shifted_exp(&Tensor::new(vec![2], vec![89.0f32, 88.0]).unwrap(), 89.0);
        assert!(out.is_finite());
    }

    #[test]
    fn split_heads_layout() {
        let dims = ModelDims::new(4, 2).unwrap();
        let x = Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let h = split_heads(&x, dims).unwrap();
        assert_eq!(h.shape(), &[1, 2, 1, 2]);
        assert_eq!(h.data(), &[1.0, 2.0, 3.0, 4.0]);

        let x = random(&[2, 3, 8], 5);
        let dims = ModelDims::new(8, 4).unwrap();
        let back = merge_heads(&split_heads(&x, dims).unwrap(), dims).unwrap();
        assert_eq!(back, x);

        let one = ModelDims::new(8, 1).unwrap();
        let h = split_heads(&x, one).unwrap();
        assert_eq!(h.shape(), &[2, 1, 3, 8]);
        assert_eq!(h.data(), x.data());
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(ModelDims::new(10, 4).is_err());
        assert!(ModelDims::new(0, 1).is_err());
    }

    #[test]
    fn concat_keeps_prefix() {
        let a = random(&[2, 3, 4, 5], 1);
        let b = random(&[2, 3, 1, 5], 2);
        let c = concat_seq(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5, 5]);
        for bh in 0..6 {
            assert_eq!(
                &c.data()[bh * 25..bh * 25 + 20],
                &a.data()[bh * 20..(bh + 1) * 20]
            );
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..6,
            data in proptest::collection::vec(-500.0f64..500.0, 1..64),
        ) {
            let cols = data.len().div_ceil(rows).max(1);
            let mut data = data;
            data.resize(rows * cols, 0.0);
            let p = softmax_rows(&t2(rows, cols, &data)).unwrap();
            for r in 0..rows {
                let row = p.row(r);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one_single(data in proptest::collection::vec(-80.0f32..80.0, 1..40)) {
            let s = Tensor::new(vec![1, data.len()], data).unwrap();
            let sum: f32 = softmax_rows(&s).unwrap().data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }

        #[test]
        fn softmax_shift_invariant(
            data in proptest::collection::vec(-50.0f64..50.0, 1..32),
            c in -1000.0f64..1000.0,
        ) {
            let n = data.len();
            let a = softmax_rows(&t2(1, n, &data)).unwrap();
            let shifted: Vec<f64> = data.iter().map(|x| x + c).collect();
            let b = softmax_rows(&t2(1, n, &shifted)).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
        }

        #[test]
        fn matmul_agrees_with_oracle(m in 1usize..=32, k in 1usize..=32, n in 1usize..=32, seed in any::<u64>()) {
            let a = random(&[m, k], seed);
            let b = random(&[k, n], seed ^ 0x9e37);
            let c = matmul(&a, &b).unwrap();
            let oracle = triple_loop(&a, &b);
            for (x, y) in c.data().iter().zip(&oracle) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn heads_round_trip(b in 1usize..3, s in 1usize..5, h in 1usize..4, dh in 1usize..4, seed in any::<u64>()) {
            let dims = ModelDims::new(h * dh, h).unwrap();
            let x = random(&[b, s, h * dh], seed);
            let back = merge_heads(&split_heads(&x, dims).unwrap(), dims).unwrap();
            prop_assert_eq!(back, x);
        }
    }
}
