//! Analytic gradients of the gated mixture and a central finite-difference
//! oracle to check them (and the routing gate's backward pass) against.

use rayon::prelude::*;

use crate::engines::mixture::validate;
use crate::engines::{gated_mixture_stable, Level, LevelWeights};
use crate::error::{MkaError, Result};
use crate::tensor::{dot, softmax_rows, Tensor};

/// Worst disagreement between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub n_params: usize,
    pub step: f64,
}

impl GradReport {
    /// Relative error per coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.
    pub fn compare(analytic: &[f64], numeric: &[f64], step: f64) -> Result<Self> {
        if analytic.len() != numeric.len() {
            return Err(MkaError::shape(
                "grad_report",
                format!("{} analytic vs {} numeric entries", analytic.len(), numeric.len()),
            ));
        }
        let mut report = Self {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            n_params: analytic.len(),
            step,
        };
        for (&a, &n) in analytic.iter().zip(numeric) {
            let abs = (a - n).abs();
            if !abs.is_finite() {
                return Err(MkaError::FiniteDifference(format!("non-finite gradient pair {a} / {n}")));
            }
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(abs / a.abs().max(n.abs()).max(1e-8));
        }
        Ok(report)
    }

    /// Folds another report in, keeping the worst errors.
    pub fn merge(self, other: Self) -> Self {
        Self {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            n_params: self.n_params + other.n_params,
            step: self.step,
        }
    }
}

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every
/// coordinate. Coordinates run in parallel; each result only depends on its
/// own two evaluations, so the output is deterministic.
///
/// Fails with the list of coordinates whose evaluations were non-finite.
pub fn fd_gradient<F>(f: F, x0: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(MkaError::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let grads: Vec<Option<f64>> = (0..x0.len())
        .into_par_iter()
        .map(|i| {
            let mut x = x0.to_vec();
            x[i] = x0[i] + h;
            let up = f(&x);
            x[i] = x0[i] - h;
            let down = f(&x);
            let g = (up - down) / (2.0 * h);
            g.is_finite().then_some(g)
        })
        .collect();
    let bad: Vec<usize> = grads
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.is_none().then_some(i))
        .collect();
    if !bad.is_empty() {
        return Err(MkaError::FiniteDifference(format!(
            "non-finite evaluations at coordinates {bad:?}"
        )));
    }
    Ok(grads.into_iter().flatten().collect())
}

/// Gradients of `⟨upstream, Attn(q)⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureGrads {
    /// `[S×d]`
    pub dq: Tensor<f64>,
    /// `[S×L]`
    pub dlogits: Tensor<f64>,
    /// One `[n_ℓ×dv]` per level.
    pub dvalues: Vec<Tensor<f64>>,
}

/// `λ = softmax(lambda_logits)` row by row, `[S×L]`.
pub fn routing_weights(lambda_logits: &Tensor<f64>) -> Result<Tensor<f64>> {
    softmax_rows(lambda_logits)
}

/// `⟨upstream, Attn(q)⟩` through the stable scan, with `λ = softmax(logits)`.
pub fn mixture_loss(
    q: &Tensor<f64>,
    levels: &[Level<f64>],
    lambda_logits: &Tensor<f64>,
    upstream: &Tensor<f64>,
) -> Result<f64> {
    let out = gated_mixture_stable(q, levels, &LevelWeights::PerRow(routing_weights(lambda_logits)?))?;
    if out.shape() != upstream.shape() {
        return Err(MkaError::shape(
            "mixture_loss",
            format!("upstream {:?} vs output {:?}", upstream.shape(), out.shape()),
        ));
    }
    Ok(dot(out.data(), upstream.data()))
}

/// Analytic gradients wrt `q`, the routing logits and every level's values.
pub fn grad_gated_mixture(
    q: &Tensor<f64>,
    levels: &[Level<f64>],
    lambda_logits: &Tensor<f64>,
    upstream: &Tensor<f64>,
) -> Result<MixtureGrads> {
    let lambda = routing_weights(lambda_logits)?;
    let (dq, dlambda, dvalues) = grad_wrt_weights(q, levels, &lambda, upstream)?;
    let mut dlogits = Tensor::zeros(lambda.shape());
    for r in 0..lambda.n_rows() {
        let (w, g) = (lambda.row(r), dlambda.row(r));
        let inner = dot(w, g);
        for (l, d) in dlogits.row_mut(r).iter_mut().enumerate() {
            *d = w[l] * (g[l] - inner);
        }
    }
    Ok(MixtureGrads { dq, dlogits, dvalues })
}

/// Same pass with `λ` given directly (per row, `[S×L]`); the second tensor
/// holds `∂loss/∂λ`.
pub fn grad_wrt_weights(
    q: &Tensor<f64>,
    levels: &[Level<f64>],
    lambda: &Tensor<f64>,
    upstream: &Tensor<f64>,
) -> Result<(Tensor<f64>, Tensor<f64>, Vec<Tensor<f64>>)> {
    let weights = LevelWeights::PerRow(lambda.clone());
    let dims = validate(q, levels, &weights)?;
    if upstream.shape() != [dims.s, dims.dv] {
        return Err(MkaError::shape(
            "grad_gated_mixture",
            format!("upstream {:?} vs output [{}×{}]", upstream.shape(), dims.s, dims.dv),
        ));
    }
    let out = gated_mixture_stable(q, levels, &weights)?;
    let mut dq = Tensor::zeros(q.shape());
    let mut dlambda = Tensor::zeros(lambda.shape());
    let mut dvalues: Vec<Tensor<f64>> = levels.iter().map(|l| Tensor::zeros(l.values.shape())).collect();

    for i in 0..dims.s {
        let qi = q.row(i);
        let u = upstream.row(i);
        let w = lambda.row(i);
        let u_out = dot(u, out.row(i));
        // Scores shifted by the row max over levels that carry weight; the
        // shift cancels between numerator and denominator.
        let mut mu = f64::NEG_INFINITY;
        for (l, level) in levels.iter().enumerate() {
            if w[l] > 0.0 {
                for j in 0..level.len() {
                    mu = mu.max(dot(qi, level.keys.row(j)));
                }
            }
        }
        let mut z = 0.0;
        for (l, level) in levels.iter().enumerate() {
            for j in 0..level.len() {
                z += w[l] * (dot(qi, level.keys.row(j)) - mu).exp();
            }
        }
        if !(z > 0.0) {
            return Err(MkaError::DegenerateDenominator { row: i });
        }
        for (l, level) in levels.iter().enumerate() {
            let mut dl = 0.0;
            for j in 0..level.len() {
                let e = (dot(qi, level.keys.row(j)) - mu).exp();
                let g = (dot(u, level.values.row(j)) - u_out) / z;
                dl += e * g;
                let ds = w[l] * e * g;
                for (dqk, &k) in dq.row_mut(i).iter_mut().zip(level.keys.row(j)) {
                    *dqk += ds * k;
                }
                let p = w[l] * e / z;
                for (dv, &ui) in dvalues[l].row_mut(j).iter_mut().zip(u) {
                    *dv += p * ui;
                }
            }
            dlambda.row_mut(i)[l] = dl;
        }
    }
    Ok((dq, dlambda, dvalues))
}
