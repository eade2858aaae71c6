use serde::{Deserialize, Serialize};

use crate::error::{GragError, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Position assignment for source-image tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourcePositions {
    /// Source tokens reuse the edit segment's positions.
    #[default]
    SharedWithEdit,
    /// Source tokens continue after the edit segment.
    Sequential,
}

/// One-dimensional rotary embedding over a flat token index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    #[serde(default = "default_base")]
    pub base: f64,
    pub head_dim: usize,
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// When false, text tokens sit at position 0 (no rotation).
    #[serde(default = "default_true")]
    pub rotate_text: bool,
    #[serde(default)]
    pub source_positions: SourcePositions,
}

fn default_base() -> f64 {
    DEFAULT_ROPE_BASE
}

fn default_true() -> bool {
    true
}

impl RopeConfig {
    pub fn new(head_dim: usize) -> Self {
        Self {
            base: DEFAULT_ROPE_BASE,
            head_dim,
            enabled: true,
            rotate_text: true,
            source_positions: SourcePositions::SharedWithEdit,
        }
    }

    pub fn disabled(head_dim: usize) -> Self {
        Self {
            enabled: false,
            ..Self::new(head_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(GragError::shape(format!(
                "RoPE head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if !(self.base > 1.0) || !self.base.is_finite() {
            return Err(GragError::config(format!(
                "RoPE base must be a finite value > 1, got {}",
                self.base
            )));
        }
        Ok(())
    }

    /// Angular frequency of each rotated pair, `base^(-2i/D)`.
    pub fn pair_frequencies(&self) -> Vec<f64> {
        let d = self.head_dim as f64;
        (0..self.head_dim / 2)
            .map(|i| self.base.powf(-2.0 * i as f64 / d))
            .collect()
    }
}

/// Frequency of the pair that dimension `d` belongs to: `base^(-2 floor(d/2) / D)`.
pub fn dim_frequency(d: usize, cfg: &RopeConfig) -> Result<f64> {
    cfg.validate()?;
    if d >= cfg.head_dim {
        return Err(GragError::shape(format!(
            "dimension {d} out of range for head_dim {}",
            cfg.head_dim
        )));
    }
    let pair = (d / 2) as f64;
    Ok(cfg.base.powf(-2.0 * pair / cfg.head_dim as f64))
}

/// Rotates each consecutive pair `(x[2i], x[2i+1])` of every `[B, S, H, D]`
/// token by `position * base^(-2i/D)`.
///
/// A disabled config returns the input unchanged.
pub fn apply_rope<T: Scalar>(
    x: &Tensor<T>,
    positions: &[i64],
    cfg: &RopeConfig,
) -> Result<Tensor<T>> {
    let [b, s, h, d] = x.bshd()?;
    if d % 2 != 0 {
        return Err(GragError::shape(format!(
            "RoPE needs an even head dim, got {d}"
        )));
    }
    if !cfg.enabled {
        return Ok(x.clone());
    }
    cfg.validate()?;
    if d != cfg.head_dim {
        return Err(GragError::shape(format!(
            "tensor head dim {d} does not match RoPE head_dim {}",
            cfg.head_dim
        )));
    }
    if positions.len() != s {
        return Err(GragError::shape(format!(
            "{} positions supplied for a sequence of {s} tokens",
            positions.len()
        )));
    }
    let freqs = cfg.pair_frequencies();
    // cos/sin table per token, computed in f64
    let table: Vec<(T, T)> = positions
        .iter()
        .flat_map(|&p| {
            freqs.iter().map(move |&f| {
                let angle = p as f64 * f;
                (T::lit(angle.cos()), T::lit(angle.sin()))
            })
        })
        .collect();
    let half = d / 2;
    let mut out = x.clone();
    for (row_idx, token) in out.data_mut().chunks_mut(d).enumerate() {
        let seq = (row_idx / h) % s;
        let rot = &table[seq * half..(seq + 1) * half];
        for (pair, &(c, sn)) in token.chunks_mut(2).zip(rot) {
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * c - x1 * sn;
            pair[1] = x0 * sn + x1 * c;
        }
    }
    debug_assert_eq!(out.len(), b * s * h * d);
    Ok(out)
}
