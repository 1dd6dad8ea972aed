#![allow(dead_code)]

use mka_core::engines::ProjectionSet;
use mka_core::{ModelDims, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn at(x: &Tensor<f64>, idx: &[usize]) -> f64 {
    let mut flat = 0;
    for (i, &n) in idx.iter().zip(x.shape()) {
        flat = flat * n + i;
    }
    x.data()[flat]
}

fn project(x: &Tensor<f64>, w: &Tensor<f64>, b: usize, t: usize, col: usize) -> f64 {
    (0..x.dim(2)).map(|i| at(x, &[b, t, i]) * at(w, &[i, col])).sum()
}

/// Causal multi-head attention written out loop by loop.
pub fn naive_causal_mha(x: &Tensor<f64>, p: &ProjectionSet<f64>, dims: ModelDims) -> Tensor<f64> {
    naive_windowed_mha(x, p, dims, usize::MAX)
}

/// Same, but query `t` only sees keys `t+1-window ..= t`.
pub fn naive_windowed_mha(x: &Tensor<f64>, p: &ProjectionSet<f64>, dims: ModelDims, window: usize) -> Tensor<f64> {
    let (b, s, d) = (x.dim(0), x.dim(1), x.dim(2));
    let dh = dims.d_head();
    let tau = 1.0 / (dh as f64).sqrt();
    let mut merged = vec![0.0; b * s * d];
    for bi in 0..b {
        for h in 0..dims.n_heads {
            let cols = h * dh..(h + 1) * dh;
            for t in 0..s {
                let lo = (t + 1).saturating_sub(window);
                let q: Vec<f64> = cols.clone().map(|c| project(x, &p.w_q, bi, t, c)).collect();
                let scores: Vec<f64> = (lo..=t)
                    .map(|j| {
                        let k: f64 = cols
                            .clone()
                            .zip(&q)
                            .map(|(c, qc)| qc * project(x, &p.w_k, bi, j, c))
                            .sum();
                        tau * k
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    merged[(bi * s + t) * d + c] =
                        (lo..=t).zip(&e).map(|(j, ej)| ej / z * project(x, &p.w_v, bi, j, c)).sum();
                }
            }
        }
    }
    let merged = Tensor::new(vec![b, s, d], merged).unwrap();
    Tensor::from_fn(&[b, s, d], |i| {
        let (row, col) = (i / d, i % d);
        (0..d).map(|k| merged.data()[row * d + k] * at(&p.w_o, &[k, col])).sum()
    })
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
