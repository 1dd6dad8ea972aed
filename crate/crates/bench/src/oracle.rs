//! Loop-by-loop reference computations, written independently of the
//! engines they check. Everything is `f64`.

use mka_core::engines::ProjectionSet;
use mka_core::{ModelDims, Tensor};

fn proj(x: &Tensor<f64>, w: &Tensor<f64>, row: usize, col: usize) -> f64 {
    let d = x.last_dim();
    (0..d).map(|i| x.data()[row * d + i] * w.data()[i * w.dim(1) + col]).sum()
}

/// Causal multi-head attention; query `t` sees keys `t+1-window ..= t`.
pub fn windowed_mha(x: &Tensor<f64>, p: &ProjectionSet<f64>, dims: ModelDims, tau: f64, window: usize) -> Tensor<f64> {
    let (b, s, d) = (x.dim(0), x.dim(1), x.dim(2));
    let dh = dims.d_head();
    let mut q = vec![0.0; b * s * d];
    let mut k = vec![0.0; b * s * d];
    let mut v = vec![0.0; b * s * d];
    for r in 0..b * s {
        for c in 0..d {
            q[r * d + c] = proj(x, &p.w_q, r, c);
            k[r * d + c] = proj(x, &p.w_k, r, c);
            v[r * d + c] = proj(x, &p.w_v, r, c);
        }
    }
    let mut merged = vec![0.0; b * s * d];
    for bi in 0..b {
        for h in 0..dims.n_heads {
            for t in 0..s {
                let lo = (t + 1).saturating_sub(window);
                let qr = (bi * s + t) * d + h * dh;
                let scores: Vec<f64> = (lo..=t)
                    .map(|j| {
                        let kr = (bi * s + j) * d + h * dh;
                        tau * (0..dh).map(|c| q[qr + c] * k[kr + c]).sum::<f64>()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    merged[qr + c] = (lo..=t)
                        .zip(&e)
                        .map(|(j, ej)| ej / z * v[(bi * s + j) * d + h * dh + c])
                        .sum();
                }
            }
        }
    }
    let merged = Tensor::new(vec![b, s, d], merged).expect("shape matches data");
    Tensor::from_fn(&[b, s, d], |i| proj(&merged, &p.w_o, i / d, i % d))
}

pub fn causal_mha(x: &Tensor<f64>, p: &ProjectionSet<f64>, dims: ModelDims) -> Tensor<f64> {
    windowed_mha(x, p, dims, 1.0 / (dims.d_head() as f64).sqrt(), usize::MAX)
}

/// `Σ_ℓ λ_ℓ Σ_j exp(q·k) v / Σ_ℓ λ_ℓ Σ_j exp(q·k)` for one query, shifted by
/// the largest score so it stays finite.
pub fn gated_mixture_row(q: &[f64], levels: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)], lambda: &[f64]) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut mu = f64::NEG_INFINITY;
    for (keys, _) in levels {
        for k in keys {
            mu = mu.max(dot(q, k));
        }
    }
    let dv = levels.iter().find_map(|(_, v)| v.first().map(Vec::len)).unwrap_or(0);
    let mut num = vec![0.0; dv];
    let mut den = 0.0;
    for ((keys, values), &w) in levels.iter().zip(lambda) {
        for (k, v) in keys.iter().zip(values) {
            let e = w * (dot(q, k) - mu).exp();
            den += e;
            for (n, x) in num.iter_mut().zip(v) {
                *n += e * x;
            }
        }
    }
    num.into_iter().map(|n| n / den).collect()
}

/// Running means `m_t = mean(x_1..x_t)` summed from scratch at every `t`.
pub fn prefix_means(x: &Tensor<f64>) -> Tensor<f64> {
    let (b, s, d) = (x.dim(0), x.dim(1), x.dim(2));
    Tensor::from_fn(&[b, s, d], |i| {
        let (bi, t, c) = (i / (s * d), (i / d) % s, i % d);
        (0..=t).map(|j| x.data()[(bi * s + j) * d + c]).sum::<f64>() / (t + 1) as f64
    })
}

/// Index of the candidate with the largest cosine to `q`.
pub fn nearest_by_cosine(q: &[f64], candidates: &[Vec<f64>]) -> usize {
    let cos = |a: &[f64]| {
        let dot: f64 = a.iter().zip(q).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * q.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    (0..candidates.len())
        .max_by(|&a, &b| cos(&candidates[a]).total_cmp(&cos(&candidates[b])).then(b.cmp(&a)))
        .expect("at least one candidate")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_mixture_returns_its_value() {
        let levels = vec![(vec![vec![1.0, 2.0]], vec![vec![3.0, -4.0]]), (vec![], vec![])];
        let out = gated_mixture_row(&[0.5, 0.5], &levels, &[0.4, 0.6]);
        assert!((out[0] - 3.0).abs() < 1e-15 && (out[1] + 4.0).abs() < 1e-15);
    }

    #[test]
    fn two_equal_scores_average() {
        let levels = vec![
            (vec![vec![1.0]], vec![vec![2.0]]),
            (vec![vec![1.0]], vec![vec![4.0]]),
        ];
        let out = gated_mixture_row(&[1.0], &levels, &[0.25, 0.75]);
        assert!((out[0] - 3.5).abs() < 1e-15);
    }

    #[test]
    fn prefix_means_by_hand() {
        let x = Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 6.0]).unwrap();
        assert_eq!(prefix_means(&x).data(), &[1.0, 1.5, 3.0]);
    }

    #[test]
    fn nearest_prefers_direction_over_length() {
        let c = vec![vec![10.0, 1.0], vec![0.1, 0.0], vec![0.0, 5.0]];
        assert_eq!(nearest_by_cosine(&[1.0, 0.0], &c), 1);
    }
}
