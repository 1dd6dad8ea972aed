//! Gated mixture of exponentiated scores:
//!
//! ```text
//! Attn(q) = Σ_ℓ λ_ℓ Σ_j exp(q·k_ℓj) v_ℓj  /  Σ_ℓ λ_ℓ Σ_j exp(q·k_ℓj)
//! ```
//!
//! Normalization happens once, after mixing, which is what lets the levels
//! be folded in one at a time. Scores are raw dot products; callers that
//! want a temperature scale `q` first.

use crate::error::{MkaError, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, Tensor};

/// One memory level: `keys: [n×d]`, `values: [n×dv]`. `n` may be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Level<T> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
}

impl<T: Scalar> Level<T> {
    pub fn new(keys: Tensor<T>, values: Tensor<T>) -> Result<Self> {
        if keys.rank() != 2 || values.rank() != 2 || keys.dim(0) != values.dim(0) {
            return Err(MkaError::shape(
                "level",
                format!("keys {:?} and values {:?}", keys.shape(), values.shape()),
            ));
        }
        Ok(Self { keys, values })
    }

    pub fn empty(d: usize, dv: usize) -> Self {
        Self {
            keys: Tensor::zeros(&[0, d]),
            values: Tensor::zeros(&[0, dv]),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Level weights `λ`: one simplex vector for all rows, or one per query row.
#[derive(Debug, Clone, PartialEq)]
pub enum LevelWeights<T> {
    Shared(Vec<T>),
    PerRow(Tensor<T>),
}

impl<T: Scalar> LevelWeights<T> {
    pub fn row(&self, i: usize) -> &[T] {
        match self {
            LevelWeights::Shared(w) => w,
            LevelWeights::PerRow(t) => t.row(i),
        }
    }

    fn n_levels(&self) -> usize {
        match self {
            LevelWeights::Shared(w) => w.len(),
            LevelWeights::PerRow(t) => t.last_dim(),
        }
    }
}

pub(crate) struct Dims {
    pub s: usize,
    pub dv: usize,
}

pub(crate) fn validate<T: Scalar>(
    q: &Tensor<T>,
    levels: &[Level<T>],
    lambda: &LevelWeights<T>,
) -> Result<Dims> {
    if q.rank() != 2 {
        return Err(MkaError::shape("gated_mixture", format!("q must be [S×d], got {:?}", q.shape())));
    }
    let (s, d) = (q.dim(0), q.dim(1));
    let dv = levels
        .first()
        .map(|l| l.values.dim(1))
        .ok_or_else(|| MkaError::Config("gated mixture needs at least one level".into()))?;
    for (i, l) in levels.iter().enumerate() {
        if l.keys.dim(1) != d || l.values.dim(1) != dv || l.keys.dim(0) != l.values.dim(0) {
            return Err(MkaError::shape(
                "gated_mixture",
                format!(
                    "level {i}: keys {:?}, values {:?} against q width {d}, value width {dv}",
                    l.keys.shape(),
                    l.values.shape()
                ),
            ));
        }
    }
    if lambda.n_levels() != levels.len() {
        return Err(MkaError::shape(
            "gated_mixture",
            format!("{} weights for {} levels", lambda.n_levels(), levels.len()),
        ));
    }
    if let LevelWeights::PerRow(t) = lambda {
        if t.rank() != 2 || t.dim(0) != s {
            return Err(MkaError::shape(
                "gated_mixture",
                format!("per-row weights {:?} for {s} queries", t.shape()),
            ));
        }
    }
    let rows = match lambda {
        LevelWeights::Shared(_) => 1,
        LevelWeights::PerRow(_) => s,
    };
    for r in 0..rows {
        let w = lambda.row(r);
        let sum: f64 = w.iter().map(|x| x.to_f64_lossless()).sum();
        if w.iter().any(|x| !x.is_finite() || *x < T::zero()) || (sum - 1.0).abs() > 1e-6 {
            return Err(MkaError::NotSimplex {
                row: r,
                detail: format!("{w:?}"),
            });
        }
    }
    for i in 0..s {
        let w = lambda.row(i);
        if !levels.iter().zip(w).any(|(l, &wl)| wl > T::zero() && !l.is_empty()) {
            return Err(MkaError::DegenerateDenominator { row: i });
        }
    }
    Ok(Dims { s, dv })
}

/// Materializes the full `λ`-weighted exponentiated score map over all
/// levels' keys, then divides its value product by its row sums.
pub fn gated_mixture_direct<T: Scalar>(
    q: &Tensor<T>,
    levels: &[Level<T>],
    lambda: &LevelWeights<T>,
) -> Result<Tensor<T>> {
    let Dims { s, dv } = validate(q, levels, lambda)?;
    let total: usize = levels.iter().map(Level::len).sum();
    let mut map = vec![T::zero(); s * total];
    for i in 0..s {
        let w = lambda.row(i);
        let mut col = 0;
        for (l, &wl) in levels.iter().zip(w) {
            for j in 0..l.len() {
                map[i * total + col] = wl * dot(q.row(i), l.keys.row(j)).exp();
                col += 1;
            }
        }
    }
    let mut out = Tensor::zeros(&[s, dv]);
    for i in 0..s {
        let row = &map[i * total..(i + 1) * total];
        let den: T = row.iter().copied().sum();
        if den == T::zero() {
            return Err(MkaError::DegenerateDenominator { row: i });
        }
        let o = out.row_mut(i);
        let mut col = 0;
        for l in levels {
            for j in 0..l.len() {
                for (oc, &v) in o.iter_mut().zip(l.values.row(j)) {
                    *oc = *oc + row[col] * v;
                }
                col += 1;
            }
        }
        o.iter_mut().for_each(|x| *x = *x / den);
    }
    Ok(out)
}

/// Folds the levels in one at a time without any shift:
/// `α ← α + λ_ℓ exp(QK_ℓᵀ)V_ℓ`, `z ← z + λ_ℓ Σ exp(QK_ℓᵀ)`, output `α / z`.
///
/// Overflows once a score exceeds the exponent range of `T`; the result is
/// then non-finite rather than an error.
pub fn gated_mixture_recursive<T: Scalar>(
    q: &Tensor<T>,
    levels: &[Level<T>],
    lambda: &LevelWeights<T>,
) -> Result<Tensor<T>> {
    let Dims { s, dv } = validate(q, levels, lambda)?;
    let mut out = Tensor::zeros(&[s, dv]);
    let mut level_acc = vec![T::zero(); dv];
    for i in 0..s {
        let w = lambda.row(i);
        let mut alpha = vec![T::zero(); dv];
        let mut z = T::zero();
        for (l, &wl) in levels.iter().zip(w) {
            level_acc.iter_mut().for_each(|x| *x = T::zero());
            let mut level_z = T::zero();
            for j in 0..l.len() {
                let e = dot(q.row(i), l.keys.row(j)).exp();
                level_z = level_z + e;
                for (a, &v) in level_acc.iter_mut().zip(l.values.row(j)) {
                    *a = *a + e * v;
                }
            }
            z = z + wl * level_z;
            for (a, &la) in alpha.iter_mut().zip(&level_acc) {
                *a = *a + wl * la;
            }
        }
        if z == T::zero() {
            return Err(MkaError::DegenerateDenominator { row: i });
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&alpha) {
            *o = *a / z;
        }
    }
    Ok(out)
}

/// Running state of a max-shifted scan for one query row.
///
/// Invariant: `acc / z` equals the normalized output over everything folded
/// in so far, and `acc`, `z` are expressed relative to `exp(mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineSoftmaxState<T> {
    pub mu: T,
    pub z: T,
    pub acc: Vec<T>,
}

impl<T: Scalar> OnlineSoftmaxState<T> {
    pub fn new(dv: usize) -> Self {
        Self {
            mu: T::neg_infinity(),
            z: T::zero(),
            acc: vec![T::zero(); dv],
        }
    }

    pub fn reset(&mut self) {
        self.mu = T::neg_infinity();
        self.z = T::zero();
        self.acc.iter_mut().for_each(|a| *a = T::zero());
    }

    /// Folds in one group of keys with scores `scores`, value rows `values`
    /// (`scores.len() × dv`, row-major) and weight `weight`.
    ///
    /// `scratch` receives the shifted exponentials and must be at least
    /// `scores.len()` long.
    pub fn update(&mut self, scores: &[T], values: &[T], weight: T, scratch: &mut [T]) {
        let dv = self.acc.len();
        debug_assert_eq!(values.len(), scores.len() * dv);
        let block_max = scores.iter().copied().fold(T::neg_infinity(), T::max);
        let mu_new = self.mu.max(block_max);
        if mu_new == T::neg_infinity() {
            return;
        }
        let rescale = (self.mu - mu_new).exp();
        let e = &mut scratch[..scores.len()];
        let mut group_z = T::zero();
        for (ej, &s) in e.iter_mut().zip(scores) {
            *ej = (s - mu_new).exp();
            group_z = group_z + *ej;
        }
        for (c, a) in self.acc.iter_mut().enumerate() {
            let mut group_a = T::zero();
            for (j, &ej) in e.iter().enumerate() {
                group_a = group_a + ej * values[j * dv + c];
            }
            *a = *a * rescale + weight * group_a;
        }
        self.z = self.z * rescale + weight * group_z;
        self.mu = mu_new;
    }

    /// Writes `acc / z` into `out`. Fails if nothing with positive weight was
    /// folded in.
    pub fn finish_into(&self, out: &mut [T], row: usize) -> Result<()> {
        if !(self.z > T::zero()) {
            return Err(MkaError::DegenerateDenominator { row });
        }
        for (o, &a) in out.iter_mut().zip(&self.acc) {
            *o = a / self.z;
        }
        Ok(())
    }
}

/// Max-shifted level scan: each level's exponentials are taken relative to
/// the running maximum and prior accumulators are rescaled by
/// `exp(μ_old - μ_new)` whenever the maximum grows.
pub fn gated_mixture_stable<T: Scalar>(
    q: &Tensor<T>,
    levels: &[Level<T>],
    lambda: &LevelWeights<T>,
) -> Result<Tensor<T>> {
    let Dims { s, dv } = validate(q, levels, lambda)?;
    let max_keys = levels.iter().map(Level::len).max().unwrap_or(0);
    let mut scores = vec![T::zero(); max_keys];
    let mut scratch = vec![T::zero(); max_keys];
    let mut state = OnlineSoftmaxState::new(dv);
    let mut out = Tensor::zeros(&[s, dv]);
    for i in 0..s {
        state.reset();
        let w = lambda.row(i);
        for (l, &wl) in levels.iter().zip(w) {
            let n = l.len();
            for (j, sc) in scores[..n].iter_mut().enumerate() {
                *sc = dot(q.row(i), l.keys.row(j));
            }
            state.update(&scores[..n], l.values.data(), wl, &mut scratch);
        }
        state.finish_into(out.row_mut(i), i)?;
    }
    Ok(out)
}
