//! Joint-attention throughput smoke benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::SCHEMA_VERSION;
use super::toy::UniformStream;
use crate::attention::{joint_attention, RopeConfig, SegmentLayout};
use crate::error::{GragError, Result};
use crate::grag::{grag_attention, GragConfig, GroupSelector};
use crate::scalar::{DType, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "schema")]
    pub schema_version: u32,
    #[serde(default = "n_text")]
    pub n_text: usize,
    #[serde(default = "n_img")]
    pub n_img: usize,
    #[serde(default = "heads")]
    pub heads: usize,
    #[serde(default = "head_dim")]
    pub head_dim: usize,
    #[serde(default = "one")]
    pub batch: usize,
    #[serde(default = "dtype")]
    pub dtype: DType,
    /// Timed repetitions; the fastest is reported.
    #[serde(default = "repeats")]
    pub repeats: usize,
}

fn schema() -> u32 {
    SCHEMA_VERSION
}
fn n_text() -> usize {
    256
}
fn n_img() -> usize {
    384
}
fn heads() -> usize {
    8
}
fn head_dim() -> usize {
    32
}
fn one() -> usize {
    1
}
fn dtype() -> DType {
    DType::F32
}
fn repeats() -> usize {
    3
}

impl Default for BenchConfig {
    /// `S = 1024` total tokens, `H = 8`, `D = 32`, fp32.
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub dtype: DType,
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub threads: usize,
    /// Fastest plain joint-attention forward.
    pub attention_seconds: f64,
    /// Fastest RoPE + GRAG + joint-attention forward.
    pub guided_seconds: f64,
    pub tokens_per_second: f64,
    /// `4 * B * H * S^2 * D`: the two attention matmuls.
    pub attention_flops: f64,
    pub gflops_per_second: f64,
}

fn best_of(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        f()?;
        best = best.min(t0.elapsed().as_secs_f64());
    }
    Ok(best)
}

fn run_typed<T: Scalar>(cfg: &BenchConfig, seed: u64) -> Result<(f64, f64)> {
    let layout = SegmentLayout::new(cfg.n_text, cfg.n_img)?;
    let shape = [cfg.batch, layout.total(), cfg.heads, cfg.head_dim];
    let mut rng = UniformStream::new(seed, 3);
    let q = rng.tensor::<T>(&shape, 1.0);
    let k = rng.tensor::<T>(&shape, 1.0);
    let v = rng.tensor::<T>(&shape, 1.0);
    let rope = RopeConfig::new(cfg.head_dim);
    let grag = GragConfig::for_selector(GroupSelector::SourceTokens, &layout, 1.0, 1.05)?;
    let plain = best_of(cfg.repeats, || {
        joint_attention(&q, &k, &v, &layout).map(drop)
    })?;
    let guided = best_of(cfg.repeats, || {
        grag_attention(&q, &k, &v, &layout, &rope, &grag).map(drop)
    })?;
    Ok((plain, guided))
}

pub fn run_bench(cfg: &BenchConfig, seed: u64) -> Result<BenchReport> {
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(GragError::config(format!(
            "schema_version {} is not supported",
            cfg.schema_version
        )));
    }
    if cfg.batch == 0 || cfg.heads == 0 || cfg.head_dim == 0 {
        return Err(GragError::config("batch, heads and head_dim must be >= 1"));
    }
    let (plain, guided) = match cfg.dtype {
        DType::F32 => run_typed::<f32>(cfg, seed)?,
        DType::F64 => run_typed::<f64>(cfg, seed)?,
    };
    let s = cfg.n_text + 2 * cfg.n_img;
    let flops = 4.0 * (cfg.batch * cfg.heads) as f64 * (s as f64).powi(2) * cfg.head_dim as f64;
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        dtype: cfg.dtype,
        batch: cfg.batch,
        seq_len: s,
        heads: cfg.heads,
        head_dim: cfg.head_dim,
        threads: rayon::current_num_threads(),
        attention_seconds: plain,
        guided_seconds: guided,
        tokens_per_second: (cfg.batch * s) as f64 / plain,
        attention_flops: flops,
        gflops_per_second: flops / plain / 1e9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape() {
        let c = BenchConfig::default();
        assert_eq!(c.n_text + 2 * c.n_img, 1024);
        assert_eq!((c.heads, c.head_dim), (8, 32));
    }

    #[test]
    fn small_run_reports_throughput() {
        let c = BenchConfig {
            n_text: 4,
            n_img: 6,
            heads: 2,
            head_dim: 4,
            repeats: 1,
            ..Default::default()
        };
        let r = run_bench(&c, 42).unwrap();
        assert_eq!(r.seq_len, 16);
        assert_eq!(r.attention_flops, 4.0 * 2.0 * 256.0 * 4.0);
        assert!(r.tokens_per_second > 0.0 && r.tokens_per_second.is_finite());
    }
}
