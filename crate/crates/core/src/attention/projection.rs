use crate::error::{GragError, Result};
use crate::numerics::{concat_seq, matmul, Tensor};
use crate::scalar::Scalar;

/// Query/key/value embeddings of one token group, each `[B, N, H, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> Qkv<T> {
    /// Token-wise concatenation of several groups, in order.
    pub fn concat(parts: &[&Qkv<T>]) -> Result<Self> {
        let q: Vec<&Tensor<T>> = parts.iter().map(|p| &p.q).collect();
        let k: Vec<&Tensor<T>> = parts.iter().map(|p| &p.k).collect();
        let v: Vec<&Tensor<T>> = parts.iter().map(|p| &p.v).collect();
        Ok(Self {
            q: concat_seq(&q)?,
            k: concat_seq(&k)?,
            v: concat_seq(&v)?,
        })
    }
}

/// Per-segment projections produced by [`project_tokens`].
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentProjections<T> {
    pub text: Qkv<T>,
    pub edit: Qkv<T>,
    pub source: Qkv<T>,
}

impl<T: Scalar> SegmentProjections<T> {
    /// Joint `text | edit | source` sequence.
    pub fn joint(&self) -> Result<Qkv<T>> {
        Qkv::concat(&[&self.text, &self.edit, &self.source])
    }
}

/// Text-side (`d_t x d`) and image-side (`d_i x d`) projection matrices,
/// with the shared width `d = heads * head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights<T> {
    pub q_text: Tensor<T>,
    pub k_text: Tensor<T>,
    pub v_text: Tensor<T>,
    pub q_img: Tensor<T>,
    pub k_img: Tensor<T>,
    pub v_img: Tensor<T>,
    heads: usize,
    head_dim: usize,
}

impl<T: Scalar> ProjectionWeights<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        q_text: Tensor<T>,
        k_text: Tensor<T>,
        v_text: Tensor<T>,
        q_img: Tensor<T>,
        k_img: Tensor<T>,
        v_img: Tensor<T>,
        heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let d = heads * head_dim;
        if d == 0 {
            return Err(GragError::config("heads and head_dim must be positive"));
        }
        let check = |name: &str, w: &Tensor<T>, rows: Option<usize>| -> Result<usize> {
            match w.shape() {
                &[r, c] if c == d && rows.is_none_or(|want| want == r) => Ok(r),
                other => Err(GragError::shape(format!(
                    "{name} has shape {other:?}, expected [{}, {d}]",
                    rows.map_or("d_in".to_string(), |r| r.to_string())
                ))),
            }
        };
        let d_text = check("W_Q^t", &q_text, None)?;
        check("W_K^t", &k_text, Some(d_text))?;
        check("W_V^t", &v_text, Some(d_text))?;
        let d_img = check("W_Q^i", &q_img, None)?;
        check("W_K^i", &k_img, Some(d_img))?;
        check("W_V^i", &v_img, Some(d_img))?;
        Ok(Self {
            q_text,
            k_text,
            v_text,
            q_img,
            k_img,
            v_img,
            heads,
            head_dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn d_text(&self) -> usize {
        self.q_text.dim(0)
    }

    pub fn d_img(&self) -> usize {
        self.q_img.dim(0)
    }

    pub fn tensors(&self) -> [&Tensor<T>; 6] {
        [
            &self.q_text,
            &self.k_text,
            &self.v_text,
            &self.q_img,
            &self.k_img,
            &self.v_img,
        ]
    }
}

fn project_group<T: Scalar>(
    tokens: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    heads: usize,
    head_dim: usize,
    label: &str,
) -> Result<Qkv<T>> {
    let [b, n, width] = match tokens.shape() {
        &[b, n, w] => [b, n, w],
        other => {
            return Err(GragError::shape(format!(
                "{label} tokens must be [B, N, width], got {other:?}"
            )))
        }
    };
    if width != wq.dim(0) {
        return Err(GragError::shape(format!(
            "{label} token width {width} does not match projection input width {}",
            wq.dim(0)
        )));
    }
    let split = |t: Tensor<T>| t.into_reshaped([b, n, heads, head_dim]);
    Ok(Qkv {
        q: split(matmul(tokens, wq)?)?,
        k: split(matmul(tokens, wk)?)?,
        v: split(matmul(tokens, wv)?)?,
    })
}

/// Maps text tokens `[B, N_t, d_t]` and edit/source image tokens
/// `[B, N_i, d_i]` into the shared space, split into heads.
///
/// Edit and source tokens share the image-side weights.
pub fn project_tokens<T: Scalar>(
    text: &Tensor<T>,
    edit: &Tensor<T>,
    source: &Tensor<T>,
    w: &ProjectionWeights<T>,
) -> Result<SegmentProjections<T>> {
    let (h, d) = (w.heads, w.head_dim);
    Ok(SegmentProjections {
        text: project_group(text, &w.q_text, &w.k_text, &w.v_text, h, d, "text")?,
        edit: project_group(edit, &w.q_img, &w.k_img, &w.v_img, h, d, "edit")?,
        source: project_group(source, &w.q_img, &w.k_img, &w.v_img, h, d, "source")?,
    })
}
