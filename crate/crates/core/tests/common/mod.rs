//! Test-side oracles and fixtures. Nothing here calls into the crate's
//! numerics; the oracles work on plain `f64` slices in `[B, S, H, D]` order.

#![allow(dead_code)]

use grag::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(lo..hi))).unwrap()
}

pub fn idx(shape: [usize; 4], b: usize, s: usize, h: usize, d: usize) -> usize {
    ((b * shape[1] + s) * shape[2] + h) * shape[3] + d
}

/// Triple-loop `softmax(Q K^T / sqrt(D)) V` per (batch, head).
pub fn naive_attention(q: &[f64], k: &[f64], v: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let [bs, s, h, d] = shape;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    for b in 0..bs {
        for hh in 0..h {
            for i in 0..s {
                let logits: Vec<f64> = (0..s)
                    .map(|j| {
                        (0..d)
                            .map(|x| q[idx(shape, b, i, hh, x)] * k[idx(shape, b, j, hh, x)])
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for x in 0..d {
                    out[idx(shape, b, i, hh, x)] =
                        (0..s).map(|j| e[j] / z * v[idx(shape, b, j, hh, x)]).sum();
                }
            }
        }
    }
    out
}

/// Pairwise rotation with angle `pos * base^(-2i/D)`.
pub fn naive_rope(x: &[f64], shape: [usize; 4], positions: &[i64], base: f64) -> Vec<f64> {
    let [bs, s, h, d] = shape;
    let mut out = x.to_vec();
    for b in 0..bs {
        for t in 0..s {
            for hh in 0..h {
                for i in 0..d / 2 {
                    let theta = positions[t] as f64 * base.powf(-2.0 * i as f64 / d as f64);
                    let (a, c) = (
                        x[idx(shape, b, t, hh, 2 * i)],
                        x[idx(shape, b, t, hh, 2 * i + 1)],
                    );
                    out[idx(shape, b, t, hh, 2 * i)] = a * theta.cos() - c * theta.sin();
                    out[idx(shape, b, t, hh, 2 * i + 1)] = a * theta.sin() + c * theta.cos();
                }
            }
        }
    }
    out
}

/// Straight-line key reweighting over token range `[start, end)`.
pub fn naive_grag(
    k: &[f64],
    shape: [usize; 4],
    start: usize,
    end: usize,
    lambda: f64,
    delta: f64,
) -> Vec<f64> {
    let [bs, _, h, d] = shape;
    let mut out = k.to_vec();
    for b in 0..bs {
        for hh in 0..h {
            for x in 0..d {
                let mean = (start..end)
                    .map(|t| k[idx(shape, b, t, hh, x)])
                    .sum::<f64>()
                    / (end - start) as f64;
                for t in start..end {
                    let i = idx(shape, b, t, hh, x);
                    out[i] = lambda * mean + delta * (k[i] - mean);
                }
            }
        }
    }
    out
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|x| x.as_f64()).collect()
}
