use serde::{Deserialize, Serialize};

use super::{segment_dims, SegmentLabel};
use crate::error::{GragError, Result};
use crate::numerics::{reduce, ReduceKind, Tensor};
use crate::scalar::Scalar;

/// Where a statistic came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MapMeta {
    pub label: SegmentLabel,
    pub layer: usize,
    pub step: usize,
}

/// `E[h, d]`: L2 norm of one segment over its token axis, shape `[H, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormMap<T> {
    pub values: Tensor<T>,
    pub meta: MapMeta,
}

impl<T: Scalar> NormMap<T> {
    pub fn heads(&self) -> usize {
        self.values.dim(0)
    }

    pub fn head_dim(&self) -> usize {
        self.values.dim(1)
    }
}

fn as_nhd<T: Scalar>(segment: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, d] = segment_dims(segment)?;
    if n == 0 {
        return Err(GragError::shape("empty segment"));
    }
    segment.reshape([n, h, d])
}

pub fn norm_map<T: Scalar>(segment: &Tensor<T>, meta: MapMeta) -> Result<NormMap<T>> {
    let seg = as_nhd(segment)?;
    Ok(NormMap {
        values: reduce(&seg, 0, ReduceKind::L2Norm)?,
        meta,
    })
}

/// Per-head token mean and population std of every dimension, plus the
/// magnitude of each head's mean vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStats<T> {
    /// `[H, D]`
    pub mean: Tensor<T>,
    /// `[H, D]`
    pub std: Tensor<T>,
    /// `||mean[h]||_2` per head.
    pub mean_magnitude: Vec<T>,
}

pub fn head_stats<T: Scalar>(segment: &Tensor<T>) -> Result<HeadStats<T>> {
    let seg = as_nhd(segment)?;
    let mean = reduce(&seg, 0, ReduceKind::Mean)?;
    let std = reduce(&seg, 0, ReduceKind::Std)?;
    let d = mean.dim(1);
    let mean_magnitude = mean
        .data()
        .chunks(d)
        .map(|row| row.iter().map(|&x| x * x).sum::<T>().sqrt())
        .collect();
    Ok(HeadStats {
        mean,
        std,
        mean_magnitude,
    })
}
