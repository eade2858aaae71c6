use rayon::prelude::*;

use super::layout::SegmentLayout;
use crate::error::{GragError, Result};
use crate::numerics::{softmax_row, Tensor};
use crate::scalar::Scalar;

/// Logit scale `1 / sqrt(head_dim)`.
pub fn attention_scale<T: Scalar>(head_dim: usize) -> T {
    T::one() / T::lit(head_dim as f64).sqrt()
}

/// Copies head `h` of batch `b` out of a `[B, S, H, D]` tensor as `S x D`.
pub(crate) fn gather_head<T: Scalar>(x: &Tensor<T>, b: usize, h: usize) -> Vec<T> {
    let [_, s, heads, d] = x.bshd().expect("caller checked rank");
    let mut out = Vec::with_capacity(s * d);
    for t in 0..s {
        let off = ((b * s + t) * heads + h) * d;
        out.extend_from_slice(&x.data()[off..off + d]);
    }
    out
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Attention probabilities of `q_rows` (`R x D`) against `keys` (`S x D`),
/// row-major `R x S`.
fn head_probs<T: Scalar>(q_rows: &[T], keys: &[T], d: usize, scale: T) -> Vec<T> {
    let s = keys.len() / d;
    let mut probs = Vec::with_capacity(q_rows.len() / d * s);
    for q in q_rows.chunks_exact(d) {
        let start = probs.len();
        probs.extend(keys.chunks_exact(d).map(|k| dot(q, k) * scale));
        softmax_row(&mut probs[start..]);
    }
    probs
}

/// Attention output of one head: `softmax(q k^T * scale) v`, row-major `R x D`.
fn attend_head<T: Scalar>(qh: &[T], kh: &[T], vh: &[T], d: usize, scale: T) -> Vec<T> {
    let s = kh.len() / d;
    let mut out = vec![T::zero(); qh.len()];
    let mut row = vec![T::zero(); s];
    for (i, qi) in qh.chunks_exact(d).enumerate() {
        for (r, kj) in row.iter_mut().zip(kh.chunks_exact(d)) {
            *r = dot(qi, kj) * scale;
        }
        softmax_row(&mut row);
        let o = &mut out[i * d..(i + 1) * d];
        for (&p, vj) in row.iter().zip(vh.chunks_exact(d)) {
            for (acc, &x) in o.iter_mut().zip(vj) {
                *acc += p * x;
            }
        }
    }
    out
}

fn check_qkv<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: Option<&Tensor<T>>,
    layout: &SegmentLayout,
) -> Result<[usize; 4]> {
    let dims = q.bshd()?;
    if k.shape() != q.shape() || v.is_some_and(|v| v.shape() != q.shape()) {
        return Err(GragError::shape(format!(
            "Q, K, V shapes differ: {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.map(|v| v.shape())
        )));
    }
    layout.check_len(dims[1])?;
    Ok(dims)
}

/// `Softmax(Q K^T / sqrt(D)) V` per head over the concatenated sequence.
///
/// All of `q`, `k`, `v` are `[B, S, H, D]` with `S = layout.total()`; the
/// result has the same shape. Heads run in parallel, each with a fixed
/// reduction order, so the output is deterministic.
pub fn joint_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &SegmentLayout,
) -> Result<Tensor<T>> {
    let [b, s, h, d] = check_qkv(q, k, Some(v), layout)?;
    let scale = attention_scale::<T>(d);
    let per_head: Vec<Vec<T>> = (0..b * h)
        .into_par_iter()
        .map(|bh| {
            let (bi, hi) = (bh / h, bh % h);
            let qh = gather_head(q, bi, hi);
            let kh = gather_head(k, bi, hi);
            let vh = gather_head(v, bi, hi);
            attend_head(&qh, &kh, &vh, d, scale)
        })
        .collect();
    let mut data = vec![T::zero(); b * s * h * d];
    for (bh, head) in per_head.iter().enumerate() {
        let (bi, hi) = (bh / h, bh % h);
        for t in 0..s {
            let off = ((bi * s + t) * h + hi) * d;
            data[off..off + d].copy_from_slice(&head[t * d..(t + 1) * d]);
        }
    }
    Ok(Tensor::from_parts(vec![b, s, h, d], data))
}

/// Full joint attention map, `[B, H, S, S]`.
pub fn joint_attention_probs<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    layout: &SegmentLayout,
) -> Result<Tensor<T>> {
    let [b, s, h, d] = check_qkv(q, k, None, layout)?;
    let scale = attention_scale::<T>(d);
    let mut data = Vec::with_capacity(b * h * s * s);
    for bi in 0..b {
        for hi in 0..h {
            data.extend(head_probs(
                &gather_head(q, bi, hi),
                &gather_head(k, bi, hi),
                d,
                scale,
            ));
        }
    }
    Ok(Tensor::from_parts(vec![b, h, s, s], data))
}

/// Edit-query rows of the joint attention map, `[B, H, N_img, S]`.
///
/// Each row is computed from its three segment partial sums: the
/// exponentiated logits over text, edit and source keys are summed
/// separately and their total is the normaliser.
pub fn edit_attention_probs<T: Scalar>(
    q_edit: &Tensor<T>,
    k: &Tensor<T>,
    layout: &SegmentLayout,
) -> Result<Tensor<T>> {
    let [b, n_q, h, d] = q_edit.bshd()?;
    let [kb, s, kh, kd] = k.bshd()?;
    if n_q != layout.n_img() {
        return Err(GragError::shape(format!(
            "edit queries hold {n_q} tokens, layout expects {}",
            layout.n_img()
        )));
    }
    if (kb, kh, kd) != (b, h, d) {
        return Err(GragError::shape(format!(
            "edit queries {:?} incompatible with keys {:?}",
            q_edit.shape(),
            k.shape()
        )));
    }
    layout.check_len(s)?;
    let scale = attention_scale::<T>(d);
    let ranges = [layout.text(), layout.edit(), layout.source()];
    let mut data = Vec::with_capacity(b * h * n_q * s);
    let mut row = vec![T::zero(); s];
    for bi in 0..b {
        for hi in 0..h {
            let qh = gather_head(q_edit, bi, hi);
            let khd = gather_head(k, bi, hi);
            for qi in qh.chunks_exact(d) {
                for (r, kj) in row.iter_mut().zip(khd.chunks_exact(d)) {
                    *r = dot(qi, kj) * scale;
                }
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                }
                let denom: T = ranges
                    .iter()
                    .map(|rg| row[rg.clone()].iter().copied().sum::<T>())
                    .sum();
                data.extend(row.iter().map(|&e| e / denom));
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, h, n_q, s], data))
}
