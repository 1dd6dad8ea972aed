//! Per-token routing weights over the three memory levels.
//!
//! The gate is a single affine map `D → 3` followed by a softmax. Two fixed
//! policies (uniform, hard top-k) and a tier mask exist for ablations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MkaError, Result};
use crate::scalar::Scalar;
use crate::tensor::{linear, softmax_in_place, Tensor};

pub const N_LEVELS: usize = 3;

/// Gate weights `w: [D×3]` and bias `b: [3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> GateParams<T> {
    pub fn new(w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        if w.rank() != 2 || w.dim(1) != N_LEVELS || b.shape() != [N_LEVELS] {
            return Err(MkaError::shape(
                "gate params",
                format!("w {:?} and b {:?} (want [D×3] and [3])", w.shape(), b.shape()),
            ));
        }
        if !w.is_finite() || !b.is_finite() {
            return Err(MkaError::NonFinite { op: "gate params" });
        }
        Ok(Self { w, b })
    }

    pub fn zeros(d_model: usize) -> Self {
        Self {
            w: Tensor::zeros(&[d_model, N_LEVELS]),
            b: Tensor::zeros(&[N_LEVELS]),
        }
    }

    /// Weights uniform on `[-0.02, 0.02]`, zero bias.
    pub fn init(d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w: Tensor::from_fn(&[d_model, N_LEVELS], |_| {
                T::from_f64_lossy(rng.random_range(-0.02..=0.02))
            }),
            b: Tensor::zeros(&[N_LEVELS]),
        }
    }

    /// Zero weights with the given bias, so every token gets the same logits.
    pub fn constant(d_model: usize, logits: [f64; N_LEVELS]) -> Self {
        Self {
            w: Tensor::zeros(&[d_model, N_LEVELS]),
            b: Tensor::from_fn(&[N_LEVELS], |i| T::from_f64_lossy(logits[i])),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w.dim(0)
    }

    /// Affine logits `qW + b` for every token.
    pub fn logits(&self, q: &Tensor<T>) -> Result<Tensor<T>> {
        let mut z = linear(q, &self.w)?;
        let b = self.b.data();
        for r in 0..z.n_rows() {
            for (zi, &bi) in z.row_mut(r).iter_mut().zip(b) {
                *zi = *zi + bi;
            }
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingPolicy {
    LearnedSoft,
    FixedUniform,
    /// Softmax over the `k` largest logits, exact zeros elsewhere. Ties go to
    /// the lower level index.
    HardTopK(usize),
}

impl RoutingPolicy {
    pub fn hard_topk(k: usize) -> Result<Self> {
        if k == 1 || k == 2 {
            Ok(RoutingPolicy::HardTopK(k))
        } else {
            Err(MkaError::Config(format!("hard top-k needs k in {{1, 2}}, got {k}")))
        }
    }

    pub fn name(&self) -> String {
        match self {
            RoutingPolicy::LearnedSoft => "learned_soft".into(),
            RoutingPolicy::FixedUniform => "fixed_uniform".into(),
            RoutingPolicy::HardTopK(k) => format!("hard_top{k}"),
        }
    }
}

/// Subset of memory levels kept by an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TierSet([bool; N_LEVELS]);

impl TierSet {
    pub const ALL: TierSet = TierSet([true; N_LEVELS]);

    pub fn new(l1: bool, l2: bool, l3: bool) -> Result<Self> {
        if !(l1 || l2 || l3) {
            return Err(MkaError::Config("tier ablation must keep at least one level".into()));
        }
        Ok(TierSet([l1, l2, l3]))
    }

    pub fn contains(&self, level: usize) -> bool {
        self.0[level]
    }

    pub fn is_all(&self) -> bool {
        self.0.iter().all(|&k| k)
    }
}

impl Default for TierSet {
    fn default() -> Self {
        TierSet::ALL
    }
}

/// `λ`, shaped `[B×S×3]`; every row lies on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingWeights<T> {
    pub lambda: Tensor<T>,
}

impl<T: Scalar> RoutingWeights<T> {
    pub fn at(&self, token: usize) -> &[T] {
        self.lambda.row(token)
    }

    /// Zeroes the levels outside `tiers` and renormalizes each row over the
    /// kept levels. Rows whose kept mass is zero fall back to uniform over
    /// the kept levels.
    pub fn restrict(mut self, tiers: TierSet) -> Self {
        if tiers.is_all() {
            return self;
        }
        let kept = (0..N_LEVELS).filter(|&l| tiers.contains(l)).count();
        for r in 0..self.lambda.n_rows() {
            let row = self.lambda.row_mut(r);
            let mut mass = T::zero();
            for (l, w) in row.iter_mut().enumerate() {
                if tiers.contains(l) {
                    mass = mass + *w;
                } else {
                    *w = T::zero();
                }
            }
            for (l, w) in row.iter_mut().enumerate() {
                if !tiers.contains(l) {
                    continue;
                }
                *w = if mass > T::zero() {
                    *w / mass
                } else {
                    T::one() / T::from_usize(kept).unwrap()
                };
            }
        }
        self
    }
}

/// Indices of the `k` largest entries, larger first, ties to the lower index.
fn top_k(logits: &[impl PartialOrd + Copy], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Routing weights for every token of `q` (`[B×S×D]` or `[N×D]`).
pub fn gate<T: Scalar>(
    q: &Tensor<T>,
    params: &GateParams<T>,
    policy: RoutingPolicy,
) -> Result<RoutingWeights<T>> {
    if q.last_dim() != params.d_model() {
        return Err(MkaError::shape(
            "gate",
            format!("query width {} vs gate width {}", q.last_dim(), params.d_model()),
        ));
    }
    let mut shape = q.shape().to_vec();
    *shape.last_mut().unwrap() = N_LEVELS;
    let lambda = match policy {
        RoutingPolicy::FixedUniform => {
            Tensor::from_fn(&shape, |_| T::one() / T::from_usize(N_LEVELS).unwrap())
        }
        RoutingPolicy::LearnedSoft => {
            let mut z = params.logits(q)?;
            for r in 0..z.n_rows() {
                softmax_in_place(z.row_mut(r));
            }
            z
        }
        RoutingPolicy::HardTopK(k) => {
            if !(1..=2).contains(&k) {
                return Err(MkaError::Config(format!("hard top-k needs k in {{1, 2}}, got {k}")));
            }
            let mut z = params.logits(q)?;
            for r in 0..z.n_rows() {
                let row = z.row_mut(r);
                let keep = top_k(row, k);
                let mut picked: Vec<T> = keep.iter().map(|&i| row[i]).collect();
                softmax_in_place(&mut picked);
                row.iter_mut().for_each(|w| *w = T::zero());
                for (&i, &w) in keep.iter().zip(&picked) {
                    row[i] = w;
                }
            }
            z
        }
    };
    Ok(RoutingWeights { lambda })
}

/// Gradients of `⟨upstream, λ⟩` under the learned soft gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateGrads<T> {
    pub dq: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

/// Vector-Jacobian product of `softmax(qW + b)` with `upstream`.
pub fn gate_backward<T: Scalar>(
    q: &Tensor<T>,
    params: &GateParams<T>,
    policy: RoutingPolicy,
    upstream: &Tensor<T>,
) -> Result<GateGrads<T>> {
    if policy != RoutingPolicy::LearnedSoft {
        return Err(MkaError::NotDifferentiable(policy.name()));
    }
    let lambda = gate(q, params, policy)?.lambda;
    if upstream.shape() != lambda.shape() {
        return Err(MkaError::shape(
            "gate_backward",
            format!("upstream {:?} vs routing {:?}", upstream.shape(), lambda.shape()),
        ));
    }
    let d = params.d_model();
    // dz = λ ⊙ (u - ⟨u, λ⟩)
    let mut dz = Tensor::zeros(lambda.shape());
    for r in 0..lambda.n_rows() {
        let l = lambda.row(r);
        let u = upstream.row(r);
        let inner: T = l.iter().zip(u).map(|(&a, &b)| a * b).sum();
        for ((g, &li), &ui) in dz.row_mut(r).iter_mut().zip(l).zip(u) {
            *g = li * (ui - inner);
        }
    }
    let mut dq = Tensor::zeros(q.shape());
    let mut dw = Tensor::zeros(&[d, N_LEVELS]);
    let mut db = Tensor::zeros(&[N_LEVELS]);
    for r in 0..q.n_rows() {
        let g = dz.row(r);
        let qr = q.row(r);
        for (i, dqi) in dq.row_mut(r).iter_mut().enumerate() {
            let wi = params.w.row(i);
            *dqi = wi.iter().zip(g).map(|(&a, &b)| a * b).sum();
        }
        for (i, &qi) in qr.iter().enumerate() {
            for (dwij, &gj) in dw.row_mut(i).iter_mut().zip(g) {
                *dwij = *dwij + qi * gj;
            }
        }
        for (dbj, &gj) in db.data_mut().iter_mut().zip(g) {
            *dbj = *dbj + gj;
        }
    }
    Ok(GateGrads { dq, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn assert_simplex(l: &Tensor<f64>) {
        for r in 0..l.n_rows() {
            let row = l.row(r);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gate_is_uniform() {
        let q = random(&[2, 5, 4], 1);
        let lam = gate(&q, &GateParams::zeros(4), RoutingPolicy::LearnedSoft).unwrap();
        for &w in lam.lambda.data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_logits() {
        let q = random(&[1, 1, 3], 2);
        let params = GateParams::constant(3, [2f64.ln(), 0.0, 0.0]);
        let lam = gate(&q, &params, RoutingPolicy::LearnedSoft).unwrap();
        let expected = [0.5, 0.25, 0.25];
        for (a, b) in lam.lambda.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hard_top1_is_one_hot() {
        let q = random(&[1, 1, 2], 3);
        let params = GateParams::constant(2, [0.1, 0.9, 0.3]);
        let lam = gate(&q, &params, RoutingPolicy::hard_topk(1).unwrap()).unwrap();
        assert_eq!(lam.lambda.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn hard_topk_ties_go_low() {
        let q = random(&[1, 1, 2], 3);
        let params = GateParams::constant(2, [0.5, 0.5, 0.5]);
        let one = gate(&q, &params, RoutingPolicy::HardTopK(1)).unwrap();
        assert_eq!(one.lambda.data(), &[1.0, 0.0, 0.0]);
        let two = gate(&q, &params, RoutingPolicy::HardTopK(2)).unwrap();
        assert_eq!(two.lambda.data(), &[0.5, 0.5, 0.0]);
        assert!(RoutingPolicy::hard_topk(3).is_err());
        assert!(gate(&q, &params, RoutingPolicy::HardTopK(0)).is_err());
    }

    #[test]
    fn fixed_uniform_ignores_queries() {
        let params = GateParams::init(4, 9);
        let a = gate(&random(&[1, 6, 4], 1), &params, RoutingPolicy::FixedUniform).unwrap();
        let b = gate(&random(&[1, 6, 4], 2), &params, RoutingPolicy::FixedUniform).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tier_restriction() {
        let q = random(&[1, 4, 3], 5);
        let params = GateParams::init(3, 1);
        let lam = gate(&q, &params, RoutingPolicy::LearnedSoft).unwrap();
        let l1 = lam.clone().restrict(TierSet::new(true, false, false).unwrap());
        for r in 0..4 {
            assert_eq!(l1.at(r), &[1.0, 0.0, 0.0]);
        }
        let l13 = lam.restrict(TierSet::new(true, false, true).unwrap());
        assert_simplex(&l13.lambda);
        assert!(l13.lambda.data().chunks(3).all(|r| r[1] == 0.0));
        assert!(TierSet::new(false, false, false).is_err());
    }

    #[test]
    fn init_is_small_and_seeded() {
        let a: GateParams<f64> = GateParams::init(16, 4);
        assert_eq!(a, GateParams::init(16, 4));
        assert!(a.w.data().iter().all(|w| w.abs() <= 0.02));
        assert!(a.b.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn backward_zero_upstream() {
        let q = random(&[1, 3, 4], 1);
        let params = GateParams::init(4, 2);
        let g = gate_backward(&q, &params, RoutingPolicy::LearnedSoft, &Tensor::zeros(&[1, 3, 3])).unwrap();
        assert!(g.dq.data().iter().chain(g.dw.data()).chain(g.db.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn backward_rejects_fixed_policies() {
        let q = random(&[1, 1, 2], 1);
        let u = random(&[1, 1, 3], 2);
        for p in [RoutingPolicy::FixedUniform, RoutingPolicy::HardTopK(1)] {
            assert!(matches!(
                gate_backward(&q, &GateParams::zeros(2), p, &u),
                Err(MkaError::NotDifferentiable(_))
            ));
        }
    }

    #[test]
    fn backward_scalar_case_by_hand() {
        // D = 1: z_j = w_j q + b_j, λ = softmax(z), J_jk = λ_j(δ_jk - λ_k).
        let (q0, w, b) = (0.7, [0.3, -1.1, 0.4], [0.2, 0.0, -0.5]);
        let u = [1.5, -0.5, 2.0];
        let z: Vec<f64> = (0..3).map(|j| w[j] * q0 + b[j]).collect();
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        let lam: Vec<f64> = e.iter().map(|v| v / s).collect();
        let mut dz = [0.0; 3];
        for k in 0..3 {
            for j in 0..3 {
                let jac = lam[j] * (if j == k { 1.0 } else { 0.0 } - lam[k]);
                dz[k] += u[j] * jac;
            }
        }
        let dq: f64 = (0..3).map(|k| dz[k] * w[k]).sum();

        let params = GateParams::new(
            Tensor::new(vec![1, 3], w.to_vec()).unwrap(),
            Tensor::new(vec![3], b.to_vec()).unwrap(),
        )
        .unwrap();
        let q = Tensor::new(vec![1, 1], vec![q0]).unwrap();
        let up = Tensor::new(vec![1, 3], u.to_vec()).unwrap();
        let g = gate_backward(&q, &params, RoutingPolicy::LearnedSoft, &up).unwrap();
        assert!((g.dq.data()[0] - dq).abs() < 1e-14);
        for k in 0..3 {
            assert!((g.db.data()[k] - dz[k]).abs() < 1e-14);
            assert!((g.dw.data()[k] - dz[k] * q0).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_shift_invariant() {
        let q = random(&[1, 4, 3], 6);
        let params = GateParams::init(3, 3);
        let mut shifted = params.clone();
        shifted.b.data_mut().iter_mut().for_each(|b| *b += 5.0);
        let u = random(&[1, 4, 3], 7);
        let a = gate_backward(&q, &params, RoutingPolicy::LearnedSoft, &u).unwrap();
        let b = gate_backward(&q, &shifted, RoutingPolicy::LearnedSoft, &u).unwrap();
        assert!(a.dq.max_abs_diff(&b.dq).unwrap() < 1e-14);
        assert!(a.dw.max_abs_diff(&b.dw).unwrap() < 1e-14);
        assert!(a.db.max_abs_diff(&b.db).unwrap() < 1e-14);
        let la = gate(&q, &params, RoutingPolicy::LearnedSoft).unwrap();
        let lb = gate(&q, &shifted, RoutingPolicy::LearnedSoft).unwrap();
        assert!(la.lambda.max_abs_diff(&lb.lambda).unwrap() < 1e-15);
    }

    proptest! {
        #[test]
        fn every_policy_lands_on_simplex(seed in any::<u64>(), scale in 0.0f64..50.0) {
            let q = random(&[2, 4, 5], seed);
            let mut params = GateParams::init(5, seed ^ 1);
            params.w.data_mut().iter_mut().for_each(|w| *w *= scale * 50.0);
            for p in [RoutingPolicy::LearnedSoft, RoutingPolicy::FixedUniform, RoutingPolicy::HardTopK(1), RoutingPolicy::HardTopK(2)] {
                assert_simplex(&gate(&q, &params, p).unwrap().lambda);
            }
            let two = gate(&q, &params, RoutingPolicy::HardTopK(2)).unwrap();
            for r in 0..two.lambda.n_rows() {
                prop_assert_eq!(two.at(r).iter().filter(|&&w| w == 0.0).count(), 1);
            }
        }

        #[test]
        fn argmax_unchanged_by_logit_shift(seed in any::<u64>(), c in -20.0f64..20.0) {
            let q = random(&[1, 6, 4], seed);
            let params = GateParams::init(4, seed ^ 3);
            let mut shifted = params.clone();
            shifted.b.data_mut().iter_mut().for_each(|b| *b += c);
            let a = gate(&q, &params, RoutingPolicy::LearnedSoft).unwrap();
            let b = gate(&q, &shifted, RoutingPolicy::LearnedSoft).unwrap();
            for r in 0..6 {
                prop_assert_eq!(top_k(a.at(r), 1), top_k(b.at(r), 1));
            }
        }
    }
}
