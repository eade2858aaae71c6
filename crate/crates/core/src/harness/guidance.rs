use crate::attention::SegmentLayout;
use crate::error::{GragError, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Classifier-free guidance: `uncond + s * (cond - uncond)`.
///
/// `s = 1` returns `cond` and `s = 0` returns `uncond` exactly.
pub fn cfg_combine<T: Scalar>(uncond: &Tensor<T>, cond: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    uncond.require_same_shape(cond)?;
    if s == 1.0 {
        return Ok(cond.clone());
    }
    if s == 0.0 {
        return Ok(uncond.clone());
    }
    let s = T::lit(s);
    uncond.zip_with(cond, |u, c| u + s * (c - u))
}

/// Sums of one attention row over the text, edit and source segments.
pub fn segment_attention_mass<T: Scalar>(row: &[T], layout: &SegmentLayout) -> Result<[T; 3]> {
    if row.len() != layout.total() {
        return Err(GragError::shape(format!(
            "attention row has {} entries, layout has {} tokens",
            row.len(),
            layout.total()
        )));
    }
    let sum = |r: std::ops::Range<usize>| row[r].iter().copied().sum::<T>();
    Ok([sum(layout.text()), sum(layout.edit()), sum(layout.source())])
}
