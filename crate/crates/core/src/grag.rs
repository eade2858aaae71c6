//! Group relative attention guidance.
//!
//! A contiguous group of (already position-rotated) keys is split into its
//! mean, the group bias, and each token's deviation from that mean. The two
//! parts are rescaled independently:
//!
//! ```text
//! k_hat = lambda * k_bias + delta * (k - k_bias)
//! ```
//!
//! `lambda` scales how strongly the group as a whole is attended, `delta`
//! scales how sharply attention discriminates between tokens inside it.
//! Queries and values are never modified.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{apply_rope, joint_attention, RopeConfig, SegmentLayout};
use crate::error::{GragError, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Which tokens form the guidance group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSelector {
    /// The source (conditioning) image segment.
    #[default]
    SourceTokens,
    /// The instruction text segment.
    TextTokens,
    /// Any caller-chosen half-open range.
    ExplicitRange,
}

impl GroupSelector {
    /// Token range picked by a preset, `None` for [`GroupSelector::ExplicitRange`].
    pub fn preset_range(self, layout: &SegmentLayout) -> Option<Range<usize>> {
        match self {
            GroupSelector::SourceTokens => Some(layout.source()),
            GroupSelector::TextTokens => Some(layout.text()),
            GroupSelector::ExplicitRange => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GragConfig {
    pub i_start: usize,
    pub i_end: usize,
    pub lambda: f64,
    pub delta: f64,
    /// Layers that receive guidance; empty means every layer.
    #[serde(default)]
    pub target_layers: BTreeSet<usize>,
    #[serde(default)]
    pub group_selector: GroupSelector,
}

impl GragConfig {
    /// Explicit token range `[i_start, i_end)`.
    pub fn new(i_start: usize, i_end: usize, lambda: f64, delta: f64) -> Result<Self> {
        let cfg = Self {
            i_start,
            i_end,
            lambda,
            delta,
            target_layers: BTreeSet::new(),
            group_selector: GroupSelector::ExplicitRange,
        };
        cfg.validate_scales()?;
        if i_start >= i_end {
            return Err(GragError::Range {
                start: i_start,
                end: i_end,
                len: i_end,
            });
        }
        Ok(cfg)
    }

    /// Group resolved from a preset selector against `layout`.
    pub fn for_selector(
        selector: GroupSelector,
        layout: &SegmentLayout,
        lambda: f64,
        delta: f64,
    ) -> Result<Self> {
        let range = selector.preset_range(layout).ok_or_else(|| {
            GragError::config("explicit_range needs i_start/i_end; use GragConfig::new")
        })?;
        let mut cfg = Self::new(range.start, range.end, lambda, delta)?;
        cfg.group_selector = selector;
        Ok(cfg)
    }

    /// Settings of the reference diffusers integration: image-token range
    /// `[4096, 8192)` (the source half of a 2 x 4096 image sequence),
    /// `lambda = 1.0`, `delta = 1.05`.
    pub fn reference_default() -> Self {
        Self {
            i_start: 4096,
            i_end: 8192,
            lambda: 1.0,
            delta: 1.05,
            target_layers: BTreeSet::new(),
            group_selector: GroupSelector::ExplicitRange,
        }
    }

    pub fn with_target_layers(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.target_layers = layers.into_iter().collect();
        self
    }

    pub fn range(&self) -> Range<usize> {
        self.i_start..self.i_end
    }

    pub fn group_len(&self) -> usize {
        self.i_end.saturating_sub(self.i_start)
    }

    pub fn is_identity(&self) -> bool {
        self.lambda == 1.0 && self.delta == 1.0
    }

    pub fn applies_to_layer(&self, layer: usize) -> bool {
        self.target_layers.is_empty() || self.target_layers.contains(&layer)
    }

    pub fn validate_scales(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(GragError::config(format!(
                "lambda must be a finite positive number, got {}",
                self.lambda
            )));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(GragError::config(format!(
                "delta must be a finite non-negative number, got {}",
                self.delta
            )));
        }
        Ok(())
    }

    /// Checks the scales and that the group fits a sequence of `seq_len` tokens.
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        self.validate_scales()?;
        if self.i_start >= self.i_end || self.i_end > seq_len {
            return Err(GragError::Range {
                start: self.i_start,
                end: self.i_end,
                len: seq_len,
            });
        }
        Ok(())
    }
}

/// Token-axis mean of `[B, N, H, D]` keys, shape `[B, 1, H, D]`.
///
/// Tokens are accumulated in index order.
pub fn group_bias<T: Scalar>(keys: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, n, h, d] = keys.bshd()?;
    Ok(Tensor::from_parts(vec![b, 1, h, d], bias_over(keys, 0..n)))
}

/// Per-batch mean over `tokens` of a `[B, S, H, D]` tensor, flat `B x H x D`.
fn bias_over<T: Scalar>(keys: &Tensor<T>, tokens: Range<usize>) -> Vec<T> {
    let [b, s, h, d] = keys.bshd().expect("caller checked rank");
    let width = h * d;
    let inv = T::one() / T::lit(tokens.len() as f64);
    let mut out = vec![T::zero(); b * width];
    for bi in 0..b {
        let acc = &mut out[bi * width..(bi + 1) * width];
        for t in tokens.clone() {
            let off = (bi * s + t) * width;
            for (a, &x) in acc.iter_mut().zip(&keys.data()[off..off + width]) {
                *a += x;
            }
        }
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    out
}

/// Rescales the configured key group of `[B, S, H, D]` keys.
///
/// `lambda = delta = 1` returns the keys bitwise unchanged, and tokens
/// outside `[i_start, i_end)` are always copied verbatim.
pub fn apply_grag<T: Scalar>(keys: &Tensor<T>, cfg: &GragConfig) -> Result<Tensor<T>> {
    let [b, s, h, d] = keys.bshd()?;
    cfg.validate(s)?;
    if cfg.is_identity() {
        return Ok(keys.clone());
    }
    let width = h * d;
    let bias = bias_over(keys, cfg.range());
    let lambda = T::lit(cfg.lambda);
    let delta = T::lit(cfg.delta);
    let mut out = keys.clone();
    let data = out.data_mut();
    for bi in 0..b {
        let kb = &bias[bi * width..(bi + 1) * width];
        for t in cfg.range() {
            let off = (bi * s + t) * width;
            for (x, &m) in data[off..off + width].iter_mut().zip(kb) {
                *x = lambda * m + delta * (*x - m);
            }
        }
    }
    Ok(out)
}

/// Rotated queries and rotated-then-guided keys, ready for attention.
pub fn guided_query_keys<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    layout: &SegmentLayout,
    rope: &RopeConfig,
    cfg: Option<&GragConfig>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let positions = layout.positions(rope);
    let q_rot = apply_rope(q, &positions, rope)?;
    let k_rot = apply_rope(k, &positions, rope)?;
    let k_guided = match cfg {
        Some(cfg) => apply_grag(&k_rot, cfg)?,
        None => k_rot,
    };
    Ok((q_rot, k_guided))
}

/// Guided attention forward pass: RoPE on Q and K, GRAG on the rotated K,
/// then joint attention.
pub fn grag_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &SegmentLayout,
    rope: &RopeConfig,
    cfg: &GragConfig,
) -> Result<Tensor<T>> {
    let (q_rot, k_guided) = guided_query_keys(q, k, layout, rope, Some(cfg))?;
    joint_attention(&q_rot, &k_guided, v, layout)
}
