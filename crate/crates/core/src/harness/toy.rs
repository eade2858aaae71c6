//! Desk-scale stack of joint-attention blocks used by sweeps, benchmarks
//! and conformance fixtures.
//!
//! Each block projects the three token segments, applies RoPE (and GRAG
//! on the keys when configured for that layer), runs joint attention and
//! adds an affine output projection back onto each token (residual).
//! Text tokens use the text-side weights; edit and source tokens share the
//! image-side weights.
//!
//! Weights come from a ChaCha8 stream seeded with `seed` (stream 0), drawn
//! in row-major order per layer as `W_Q^t, W_K^t, W_V^t, W_Q^i, W_K^i,
//! W_V^i, W_O^t, b_O^t, W_O^i, b_O^i`. Every entry is
//! `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, from the top 53 bits of a `u64`.
//! Values are drawn in f64 and rounded to the model's scalar type, so f32
//! and f64 models built from one seed hold the same weights up to rounding.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::guidance::segment_attention_mass;
use crate::attention::{
    edit_attention_probs, joint_attention, project_tokens, ProjectionWeights, Qkv, RopeConfig,
    SegmentLayout, SourcePositions, DEFAULT_ROPE_BASE,
};
use crate::error::{GragError, Result};
use crate::grag::{guided_query_keys, GragConfig};
use crate::numerics::{matmul, slice_seq, Tensor};
use crate::scalar::Scalar;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelConfig {
    #[serde(default = "d::layers")]
    pub layers: usize,
    #[serde(default = "d::n_text")]
    pub n_text: usize,
    #[serde(default = "d::n_img")]
    pub n_img: usize,
    #[serde(default = "d::d_text")]
    pub d_text: usize,
    #[serde(default = "d::d_img")]
    pub d_img: usize,
    #[serde(default = "d::heads")]
    pub heads: usize,
    #[serde(default = "d::head_dim")]
    pub head_dim: usize,
    #[serde(default = "d::seed")]
    pub seed: u64,
    #[serde(default = "d::rope_base")]
    pub rope_base: f64,
    #[serde(default = "d::yes")]
    pub rope_enabled: bool,
    #[serde(default = "d::yes")]
    pub rotate_text: bool,
    #[serde(default)]
    pub source_positions: SourcePositions,
}

mod d {
    pub fn layers() -> usize {
        4
    }
    pub fn n_text() -> usize {
        8
    }
    pub fn n_img() -> usize {
        16
    }
    pub fn d_text() -> usize {
        48
    }
    pub fn d_img() -> usize {
        64
    }
    pub fn heads() -> usize {
        4
    }
    pub fn head_dim() -> usize {
        32
    }
    pub fn seed() -> u64 {
        super::DEFAULT_SEED
    }
    pub fn rope_base() -> f64 {
        super::DEFAULT_ROPE_BASE
    }
    pub fn yes() -> bool {
        true
    }
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ToyModelConfig {
    pub fn layout(&self) -> Result<SegmentLayout> {
        SegmentLayout::new(self.n_text, self.n_img)
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig {
            base: self.rope_base,
            head_dim: self.head_dim,
            enabled: self.rope_enabled,
            rotate_text: self.rotate_text,
            source_positions: self.source_positions,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("n_text", self.n_text),
            ("n_img", self.n_img),
            ("d_text", self.d_text),
            ("d_img", self.d_img),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(GragError::config(format!("{name} must be >= 1")));
        }
        self.rope().validate()
    }
}

/// One attention block's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBlock<T> {
    pub proj: ProjectionWeights<T>,
    /// `[d, d_text]`
    pub out_text: Tensor<T>,
    /// `[d_text]`
    pub bias_text: Tensor<T>,
    /// `[d, d_img]`
    pub out_img: Tensor<T>,
    /// `[d_img]`
    pub bias_img: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    pub config: ToyModelConfig,
    pub blocks: Vec<ToyBlock<T>>,
}

/// Uniform draws in `[-bound, bound)` from the top 53 bits of the stream.
pub(crate) struct UniformStream(ChaCha8Rng);

impl UniformStream {
    pub(crate) fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    pub(crate) fn next(&mut self, bound: f64) -> f64 {
        let unit = (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        (2.0 * unit - 1.0) * bound
    }

    pub(crate) fn tensor<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| T::lit(self.next(bound))).expect("non-empty shape")
    }
}

pub fn build_toy_model<T: Scalar>(cfg: &ToyModelConfig) -> Result<ToyModel<T>> {
    cfg.validate()?;
    let mut rng = UniformStream::new(cfg.seed, 0);
    let d = cfg.model_dim();
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let text = |rng: &mut UniformStream| rng.tensor::<T>(&[cfg.d_text, d], fan(cfg.d_text));
        let (qt, kt, vt) = (text(&mut rng), text(&mut rng), text(&mut rng));
        let img = |rng: &mut UniformStream| rng.tensor::<T>(&[cfg.d_img, d], fan(cfg.d_img));
        let (qi, ki, vi) = (img(&mut rng), img(&mut rng), img(&mut rng));
        let proj = ProjectionWeights::new(qt, kt, vt, qi, ki, vi, cfg.heads, cfg.head_dim)?;
        let out_text = rng.tensor(&[d, cfg.d_text], fan(d));
        let bias_text = rng.tensor(&[cfg.d_text], fan(d));
        let out_img = rng.tensor(&[d, cfg.d_img], fan(d));
        let bias_img = rng.tensor(&[cfg.d_img], fan(d));
        blocks.push(ToyBlock {
            proj,
            out_text,
            bias_text,
            out_img,
            bias_img,
        });
    }
    Ok(ToyModel {
        config: cfg.clone(),
        blocks,
    })
}

impl<T: Scalar> ToyModel<T> {
    /// SHA-256 (hex) over the little-endian bytes of every parameter.
    pub fn weight_checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for b in &self.blocks {
            let mut all: Vec<&Tensor<T>> = b.proj.tensors().to_vec();
            all.extend([&b.out_text, &b.bias_text, &b.out_img, &b.bias_img]);
            for t in all {
                buf.clear();
                for &x in t.data() {
                    x.write_le(&mut buf);
                }
                h.update(&buf);
            }
        }
        hex::encode(h.finalize())
    }
}

/// Token inputs of an edit pass: text `[B, N_t, d_t]`, edit and source
/// `[B, N_i, d_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditInputs<T> {
    pub text: Tensor<T>,
    pub edit: Tensor<T>,
    pub source: Tensor<T>,
}

impl<T: Scalar> EditInputs<T> {
    /// Deterministic inputs from stream 1 of `seed`: every segment is a
    /// shared offset vector in `U(-1, 1)` plus per-token `U(-1/2, 1/2)`
    /// noise, so each segment's embeddings cluster around a common bias.
    pub fn seeded(cfg: &ToyModelConfig, seed: u64, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(GragError::config("batch must be >= 1"));
        }
        let mut rng = UniformStream::new(seed, 1);
        let mut segment = |n: usize, width: usize| {
            let offset: Vec<f64> = (0..width).map(|_| rng.next(1.0)).collect();
            Tensor::from_fn([batch, n, width], |i| {
                T::lit(offset[i % width] + rng.next(0.5))
            })
            .expect("non-empty shape")
        };
        let text = segment(cfg.n_text, cfg.d_text);
        let edit = segment(cfg.n_img, cfg.d_img);
        let source = segment(cfg.n_img, cfg.d_img);
        Ok(Self { text, edit, source })
    }
}

/// Switches for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct PassOptions<'a> {
    pub grag: Option<&'a GragConfig>,
    /// Zeroes the text keys in every layer (the unconditional CFG analog).
    pub zero_text_keys: bool,
    /// Record edit-query attention probabilities per layer.
    pub trace: bool,
    /// Keep the per-layer Q/K/V exactly as attention consumed them.
    pub capture_qkv: bool,
}

/// Output of a traced pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EditTrace<T> {
    /// Final edit-segment representation `[B, N_i, d_i]`.
    pub output: Tensor<T>,
    /// Per-layer edit-query probabilities `[B, H, N_i, S]` (empty unless traced).
    pub probes: Vec<Tensor<T>>,
    /// Per-layer attention inputs `[B, S, H, D]` (empty unless captured).
    pub captured: Vec<Qkv<T>>,
}

impl<T: Scalar> EditTrace<T> {
    /// `(text, edit, source)` attention mass averaged over layers, batch,
    /// heads and edit queries.
    pub fn mean_segment_mass(&self, layout: &SegmentLayout) -> Result<[f64; 3]> {
        let mut acc = [0.0f64; 3];
        let mut rows = 0usize;
        for probe in &self.probes {
            for row in probe.data().chunks(layout.total()) {
                let m = segment_attention_mass(row, layout)?;
                for (a, v) in acc.iter_mut().zip(m) {
                    *a += v.as_f64();
                }
                rows += 1;
            }
        }
        if rows == 0 {
            return Err(GragError::config("pass was not traced"));
        }
        Ok(acc.map(|a| a / rows as f64))
    }
}

fn add_bias<T: Scalar>(x: &mut Tensor<T>, bias: &Tensor<T>) {
    let w = bias.len();
    for row in x.data_mut().chunks_mut(w) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

fn check_inputs<T: Scalar>(cfg: &ToyModelConfig, inputs: &EditInputs<T>) -> Result<usize> {
    let b = inputs.text.shape().first().copied().unwrap_or(0);
    let want = [
        ("text", &inputs.text, [b, cfg.n_text, cfg.d_text]),
        ("edit", &inputs.edit, [b, cfg.n_img, cfg.d_img]),
        ("source", &inputs.source, [b, cfg.n_img, cfg.d_img]),
    ];
    for (name, t, shape) in want {
        if t.shape() != shape {
            return Err(GragError::shape(format!(
                "{name} inputs have shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(b)
}

/// Forward pass with full control over guidance and tracing.
pub fn run_edit_pass_with<T: Scalar>(
    model: &ToyModel<T>,
    inputs: &EditInputs<T>,
    opts: &PassOptions<'_>,
) -> Result<EditTrace<T>> {
    let cfg = &model.config;
    let batch = check_inputs(cfg, inputs)?;
    let layout = cfg.layout()?;
    let rope = cfg.rope();
    if let Some(g) = opts.grag {
        g.validate(layout.total())?;
    }
    let (h, hd, d) = (cfg.heads, cfg.head_dim, cfg.model_dim());
    let mut text = inputs.text.clone();
    let mut edit = inputs.edit.clone();
    let mut source = inputs.source.clone();
    let mut probes = Vec::new();
    let mut captured = Vec::new();
    for (layer, block) in model.blocks.iter().enumerate() {
        let proj = project_tokens(&text, &edit, &source, &block.proj)?;
        let mut joint = proj.joint()?;
        if opts.zero_text_keys {
            let width = layout.n_text() * d;
            let s_width = layout.total() * d;
            for chunk in joint.k.data_mut().chunks_mut(s_width) {
                chunk[..width].fill(T::zero());
            }
        }
        let grag = opts.grag.filter(|g| g.applies_to_layer(layer));
        let (q, k) = guided_query_keys(&joint.q, &joint.k, &layout, &rope, grag)?;
        if opts.trace {
            let q_edit = slice_seq(&q, layout.edit().start, layout.edit().end)?;
            probes.push(edit_attention_probs(&q_edit, &k, &layout)?);
        }
        let attn = joint_attention(&q, &k, &joint.v, &layout)?;
        if opts.capture_qkv {
            captured.push(Qkv {
                q,
                k,
                v: joint.v.clone(),
            });
        }
        let attn = attn.into_reshaped([batch, layout.total(), h * hd])?;
        let seg = |r: std::ops::Range<usize>| slice_seq(&attn, r.start, r.end);
        let mut dt = matmul(&seg(layout.text())?, &block.out_text)?;
        add_bias(&mut dt, &block.bias_text);
        let mut de = matmul(&seg(layout.edit())?, &block.out_img)?;
        add_bias(&mut de, &block.bias_img);
        let mut ds = matmul(&seg(layout.source())?, &block.out_img)?;
        add_bias(&mut ds, &block.bias_img);
        text = text.add(&dt)?;
        edit = edit.add(&de)?;
        source = source.add(&ds)?;
    }
    Ok(EditTrace {
        output: edit,
        probes,
        captured,
    })
}

/// Final edit-segment representation, optionally with GRAG in the targeted
/// layers.
pub fn run_edit_pass<T: Scalar>(
    model: &ToyModel<T>,
    inputs: &EditInputs<T>,
    grag: Option<&GragConfig>,
) -> Result<Tensor<T>> {
    let opts = PassOptions {
        grag,
        ..Default::default()
    };
    Ok(run_edit_pass_with(model, inputs, &opts)?.output)
}
