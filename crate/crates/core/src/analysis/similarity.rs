use serde::{Deserialize, Serialize};

use super::NormMap;
use crate::attention::RopeConfig;
use crate::error::{GragError, Result};
use crate::scalar::Scalar;

/// Symmetric pairwise cosine similarities with a unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n.max(1))
    }

    /// Smallest off-diagonal entry, `None` with fewer than two maps.
    pub fn min_off_diagonal(&self) -> Option<f64> {
        (0..self.n)
            .flat_map(|i| (0..self.n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .reduce(f64::min)
    }
}

/// Cosine similarity between the flattened norm maps of one layer.
///
/// Pairs involving an all-zero map score 0.
pub fn cross_run_similarity<T: Scalar>(maps: &[NormMap<T>]) -> Result<SimilarityMatrix> {
    if let Some(first) = maps.first() {
        for m in maps {
            if m.values.shape() != first.values.shape() {
                return Err(GragError::shape(format!(
                    "norm map shapes differ: {:?} vs {:?}",
                    m.values.shape(),
                    first.values.shape()
                )));
            }
            if m.meta.layer != first.meta.layer {
                return Err(GragError::config(format!(
                    "norm maps come from different layers ({} vs {})",
                    m.meta.layer, first.meta.layer
                )));
            }
        }
    }
    let n = maps.len();
    let norms: Vec<f64> = maps.iter().map(|m| m.values.l2()).collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let denom = norms[i] * norms[j];
            let c = if denom > 0.0 {
                (maps[i].values.dot(&maps[j].values)? / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            values[i * n + j] = c;
            values[j * n + i] = c;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyBand {
    High,
    Mid,
    Low,
}

/// Norm-map energy attributed to one RoPE frequency band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSummary {
    pub band: FrequencyBand,
    pub dims: Vec<usize>,
    pub min_frequency: f64,
    pub max_frequency: f64,
    /// Mean of `E[h, d]` over all heads and the band's dims.
    pub mean_norm: f64,
    /// Fraction of `sum E^2` carried by the band.
    pub energy_share: f64,
}

/// Joins the columns of a norm map with their RoPE frequencies.
///
/// The top quartile of rotation pairs by frequency is `High`, the bottom
/// quartile `Low` and everything else `Mid` (absent when there are fewer
/// than three pairs).
pub fn frequency_bands<T: Scalar>(map: &NormMap<T>, rope: &RopeConfig) -> Result<Vec<BandSummary>> {
    rope.validate()?;
    let (h, d) = (map.heads(), map.head_dim());
    if d != rope.head_dim {
        return Err(GragError::shape(format!(
            "norm map has {d} dims, RoPE config has {}",
            rope.head_dim
        )));
    }
    let freqs = rope.pair_frequencies();
    let pairs = freqs.len();
    let quartile = (pairs / 4).max(1);
    let band_of = |pair: usize| {
        if pair < quartile {
            FrequencyBand::High
        } else if pair >= pairs - quartile {
            FrequencyBand::Low
        } else {
            FrequencyBand::Mid
        }
    };
    let total: f64 = map.values.data().iter().map(|&x| x.as_f64().powi(2)).sum();
    let mut out = Vec::new();
    for band in [FrequencyBand::High, FrequencyBand::Mid, FrequencyBand::Low] {
        let dims: Vec<usize> = (0..d).filter(|&dim| band_of(dim / 2) == band).collect();
        if dims.is_empty() {
            continue;
        }
        let vals: Vec<f64> = (0..h)
            .flat_map(|hh| dims.iter().map(move |&dim| (hh, dim)))
            .map(|(hh, dim)| map.values.data()[hh * d + dim].as_f64())
            .collect();
        let band_freqs = dims.iter().map(|&dim| freqs[dim / 2]);
        out.push(BandSummary {
            band,
            min_frequency: band_freqs.clone().fold(f64::INFINITY, f64::min),
            max_frequency: band_freqs.fold(0.0, f64::max),
            mean_norm: vals.iter().sum::<f64>() / vals.len() as f64,
            energy_share: if total > 0.0 {
                vals.iter().map(|v| v * v).sum::<f64>() / total
            } else {
                0.0
            },
            dims,
        });
    }
    Ok(out)
}
