//! Embedding statistics for captured queries and keys: per-(head, dim) norm
//! maps, per-head mean/std summaries, bias/delta decomposition, the
//! bias-factored softmax and cross-run similarity of norm maps.
//!
//! Analysis works on one batch element at a time; segments are
//! `[N, H, D]` tensors (see [`extract_segment`]).

mod decomposition;
mod similarity;
mod stats;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{Segment, SegmentLayout};
use crate::error::{GragError, Result};
use crate::numerics::{slice_axis, Tensor};
use crate::scalar::Scalar;

pub use decomposition::{
    decompose_bias, softmax_via_decomposition, BiasDecomposition, DecomposedKeys, FactoredRow,
    SegmentSoftmaxTerms,
};
pub use similarity::{
    cross_run_similarity, frequency_bands, BandSummary, FrequencyBand, SimilarityMatrix,
};
pub use stats::{head_stats, norm_map, HeadStats, MapMeta, NormMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Projection {
    Q,
    K,
}

/// Query or key embeddings of one segment, e.g. `k_source`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SegmentLabel {
    pub projection: Projection,
    pub segment: Segment,
}

impl SegmentLabel {
    pub const ALL: [SegmentLabel; 6] = [
        SegmentLabel::new(Projection::Q, Segment::Text),
        SegmentLabel::new(Projection::Q, Segment::Edit),
        SegmentLabel::new(Projection::Q, Segment::Source),
        SegmentLabel::new(Projection::K, Segment::Text),
        SegmentLabel::new(Projection::K, Segment::Edit),
        SegmentLabel::new(Projection::K, Segment::Source),
    ];

    pub const fn new(projection: Projection, segment: Segment) -> Self {
        Self {
            projection,
            segment,
        }
    }
}

impl fmt::Display for SegmentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.projection {
            Projection::Q => "q",
            Projection::K => "k",
        };
        write!(f, "{p}_{}", self.segment.name())
    }
}

impl FromStr for SegmentLabel {
    type Err = GragError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (p, seg) = lower
            .split_once('_')
            .ok_or_else(|| GragError::config(format!("bad segment label {s:?}")))?;
        let projection = match p {
            "q" => Projection::Q,
            "k" => Projection::K,
            _ => return Err(GragError::config(format!("bad segment label {s:?}"))),
        };
        let segment = match seg {
            "text" | "txt" => Segment::Text,
            "edit" => Segment::Edit,
            "source" | "src" => Segment::Source,
            _ => return Err(GragError::config(format!("bad segment label {s:?}"))),
        };
        Ok(Self::new(projection, segment))
    }
}

impl TryFrom<String> for SegmentLabel {
    type Error = GragError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SegmentLabel> for String {
    fn from(l: SegmentLabel) -> Self {
        l.to_string()
    }
}

/// Tokens of one segment of batch element `batch`, as `[N, H, D]`.
pub fn extract_segment<T: Scalar>(
    x: &Tensor<T>,
    layout: &SegmentLayout,
    segment: Segment,
    batch: usize,
) -> Result<Tensor<T>> {
    let [b, s, h, d] = x.bshd()?;
    layout.check_len(s)?;
    if batch >= b {
        return Err(GragError::shape(format!(
            "batch index {batch} out of range for batch size {b}"
        )));
    }
    let one = slice_axis(x, 0, batch, batch + 1)?;
    let range = layout.range(segment);
    slice_axis(&one, 1, range.start, range.end)?.into_reshaped([range.len(), h, d])
}

/// Accepts `[N, H, D]` or `[1, N, H, D]` and returns `(N, H, D)`.
pub(crate) fn segment_dims<T: Scalar>(segment: &Tensor<T>) -> Result<[usize; 3]> {
    match segment.shape() {
        &[n, h, d] | &[1, n, h, d] => Ok([n, h, d]),
        other => Err(GragError::shape(format!(
            "expected a [N, H, D] segment, got shape {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_parse_and_print() {
        for l in SegmentLabel::ALL {
            assert_eq!(l.to_string().parse::<SegmentLabel>().unwrap(), l);
        }
        assert_eq!(
            "k_src".parse::<SegmentLabel>().unwrap(),
            SegmentLabel::new(Projection::K, Segment::Source)
        );
        assert!("v_edit".parse::<SegmentLabel>().is_err());
        assert!("qedit".parse::<SegmentLabel>().is_err());
    }

    #[test]
    fn extract_segment_shapes() {
        let layout = SegmentLayout::new(2, 3).unwrap();
        let x = Tensor::<f32>::from_fn([1, 8, 2, 2], |i| i as f32).unwrap();
        let src = extract_segment(&x, &layout, Segment::Source, 0).unwrap();
        assert_eq!(src.shape(), &[3, 2, 2]);
        assert_eq!(src.data()[0], 20.0);
        assert!(extract_segment(&x, &layout, Segment::Text, 1).is_err());
    }
}
