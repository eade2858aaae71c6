use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{GragError, Result};
use crate::scalar::Scalar;

/// Reduction applied along one axis by [`reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceKind {
    L2Norm,
    Mean,
    /// Population standard deviation (divisor `N`).
    Std,
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Softmax over the last axis, with max-subtraction per row.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.is_empty() {
        return Err(GragError::shape("softmax of an empty tensor"));
    }
    let width = *x.shape().last().expect("rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(width) {
        softmax_row(row);
    }
    Ok(out)
}

/// Matrix product contracting the last axis of `a` with the second-to-last
/// of `b`.
///
/// Both operands of rank 2 give a plain `[m, k] x [k, n]` product. A rank-2
/// `b` is shared across all leading (batch) axes of `a`; otherwise the
/// leading axes of both operands must be identical.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(GragError::shape(format!(
            "matmul needs rank >= 2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ar, br) = (a.rank(), b.rank());
    let (m, k) = (a.dim(ar - 2), a.dim(ar - 1));
    let (kb, n) = (b.dim(br - 2), b.dim(br - 1));
    if k != kb {
        return Err(GragError::shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch_a = &a.shape()[..ar - 2];
    let shared_b = br == 2;
    if !shared_b && batch_a != &b.shape()[..br - 2] {
        return Err(GragError::shape(format!(
            "matmul batch dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batches: usize = batch_a.iter().product();
    let mut out = vec![T::zero(); batches * m * n];
    for bi in 0..batches {
        let a_mat = &a.data()[bi * m * k..(bi + 1) * m * k];
        let b_off = if shared_b { 0 } else { bi * k * n };
        let b_mat = &b.data()[b_off..b_off + k * n];
        let o_mat = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let o_row = &mut o_mat[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a_mat[i * k + p];
                let b_row = &b_mat[p * n..(p + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
    let mut shape = batch_a.to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out))
}

/// Reduces `x` along `axis`; the output drops that axis.
///
/// Reducing the only axis of a rank-1 tensor yields shape `[1]`.
pub fn reduce<T: Scalar>(x: &Tensor<T>, axis: usize, kind: ReduceKind) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(GragError::shape(format!(
            "axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let (outer, len, inner) = x.split_at_axis(axis);
    let n = T::lit(len as f64);
    let data = x.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let at = |s: usize| data[(o * len + s) * inner + i];
            let v = match kind {
                ReduceKind::L2Norm => (0..len).map(|s| at(s) * at(s)).sum::<T>().sqrt(),
                ReduceKind::Mean => (0..len).map(at).sum::<T>() / n,
                ReduceKind::Std => {
                    let mean = (0..len).map(at).sum::<T>() / n;
                    let var = (0..len)
                        .map(|s| {
                            let d = at(s) - mean;
                            d * d
                        })
                        .sum::<T>()
                        / n;
                    var.sqrt()
                }
            };
            out.push(v);
        }
    }
    let mut shape: Vec<usize> = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Half-open slice `[start, end)` along `axis`.
pub fn slice_axis<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    end: usize,
) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(GragError::shape(format!(
            "axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let (outer, len, inner) = x.split_at_axis(axis);
    if start >= end || end > len {
        return Err(GragError::shape(format!(
            "slice [{start}, {end}) is invalid for axis {axis} of length {len}"
        )));
    }
    let width = end - start;
    let mut out = Vec::with_capacity(outer * width * inner);
    for o in 0..outer {
        let base = (o * len + start) * inner;
        out.extend_from_slice(&x.data()[base..base + width * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = width;
    Ok(Tensor::from_parts(shape, out))
}

/// Concatenates tensors along `axis`; every other extent must agree.
pub fn concat_axis<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| GragError::shape("concat of zero tensors"))?;
    if axis >= first.rank() {
        return Err(GragError::shape(format!(
            "axis {axis} out of range for rank {}",
            first.rank()
        )));
    }
    for p in parts {
        let compatible = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(GragError::shape(format!(
                "cannot concat {:?} with {:?} along axis {axis}",
                p.shape(),
                first.shape()
            )));
        }
    }
    let (outer, _, inner) = first.split_at_axis(axis);
    let total: usize = parts.iter().map(|p| p.dim(axis)).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.dim(axis) * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

/// Token-range slice of a `[B, S, ...]` tensor.
pub fn slice_seq<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(GragError::shape(format!(
            "slice_seq needs a [B, S, ...] tensor, got {:?}",
            x.shape()
        )));
    }
    slice_axis(x, 1, start, end)
}

/// Token-wise concatenation of `[B, S_i, ...]` tensors.
pub fn concat_seq<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.iter().any(|p| p.rank() < 2) {
        return Err(GragError::shape("concat_seq needs [B, S, ...] tensors"));
    }
    concat_axis(parts, 1)
}
