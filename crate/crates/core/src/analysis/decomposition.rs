use super::{segment_dims, SegmentLabel};
use crate::attention::{attention_scale, dot, Segment, SegmentLayout};
use crate::error::{GragError, Result};
use crate::numerics::{reduce, ReduceKind, Tensor};
use crate::scalar::Scalar;

/// A segment split into its token-mean bias and per-token deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasDecomposition<T> {
    bias: Tensor<T>,
    deltas: Tensor<T>,
    label: Option<SegmentLabel>,
}

impl<T: Scalar> BiasDecomposition<T> {
    /// Pairs an arbitrary `[H, D]` bias with `[N, H, D]` deltas.
    ///
    /// Used for counterfactual experiments; [`decompose_bias`] is the
    /// normal constructor.
    pub fn from_parts(bias: Tensor<T>, deltas: Tensor<T>) -> Result<Self> {
        let [_, h, d] = segment_dims(&deltas)?;
        if bias.shape() != [h, d] {
            return Err(GragError::shape(format!(
                "bias shape {:?} does not match deltas {:?}",
                bias.shape(),
                deltas.shape()
            )));
        }
        Ok(Self {
            bias,
            deltas,
            label: None,
        })
    }

    pub fn with_label(mut self, label: SegmentLabel) -> Self {
        self.label = Some(label);
        self
    }

    /// `[H, D]`
    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    /// `[N, H, D]`
    pub fn deltas(&self) -> &Tensor<T> {
        &self.deltas
    }

    pub fn label(&self) -> Option<SegmentLabel> {
        self.label
    }

    pub fn n_tokens(&self) -> usize {
        self.deltas.dim(0)
    }

    pub fn heads(&self) -> usize {
        self.deltas.dim(1)
    }

    pub fn head_dim(&self) -> usize {
        self.deltas.dim(2)
    }

    /// `bias + deltas[i]` for every token, `[N, H, D]`.
    pub fn reconstruct(&self) -> Tensor<T> {
        let width = self.bias.len();
        let mut data = self.deltas.data().to_vec();
        for token in data.chunks_mut(width) {
            for (x, &b) in token.iter_mut().zip(self.bias.data()) {
                *x = b + *x;
            }
        }
        Tensor::from_parts(self.deltas.shape().to_vec(), data)
    }

    /// Whether `bias + deltas` reproduces `segment` bit for bit.
    ///
    /// This holds for tokens clustered around their bias. A token much
    /// smaller in magnitude than the bias can have no exact delta: the sum
    /// of two floats on the bias's ulp grid cannot land between grid points.
    pub fn is_exact(&self, segment: &Tensor<T>) -> bool {
        self.reconstruct()
            .data()
            .iter()
            .zip(segment.data())
            .all(|(a, b)| a.bits() == b.bits())
            && self.deltas.len() == segment.len()
    }

    /// Bias and deltas of head `h`: (`D`, `N x D`).
    fn head(&self, h: usize) -> (&[T], Vec<&[T]>) {
        let d = self.head_dim();
        let bias = &self.bias.data()[h * d..(h + 1) * d];
        let deltas = self
            .deltas
            .data()
            .chunks(self.heads() * d)
            .map(|tok| &tok[h * d..(h + 1) * d])
            .collect();
        (bias, deltas)
    }
}

/// Difference `t - b`, nudged by at most two ulps so that `b + delta`
/// rounds back to `t` whenever some nearby delta allows it.
fn exact_delta<T: Scalar>(t: T, b: T) -> T {
    let delta = t - b;
    if b + delta == t {
        return delta;
    }
    let (mut up, mut down) = (delta, delta);
    for _ in 0..2 {
        up = up.step_up();
        down = down.step_down();
        if b + up == t {
            return up;
        }
        if b + down == t {
            return down;
        }
    }
    delta
}

/// Splits `[N, H, D]` tokens into the token mean (the bias) and each
/// token's deviation from it.
pub fn decompose_bias<T: Scalar>(segment: &Tensor<T>) -> Result<BiasDecomposition<T>> {
    let [n, h, d] = segment_dims(segment)?;
    let seg = segment.reshape([n, h, d])?;
    let bias = reduce(&seg, 0, ReduceKind::Mean)?;
    let width = h * d;
    let deltas: Vec<T> = seg
        .data()
        .chunks(width)
        .flat_map(|tok| {
            tok.iter()
                .zip(bias.data())
                .map(|(&t, &b)| exact_delta(t, b))
        })
        .collect();
    Ok(BiasDecomposition {
        bias,
        deltas: Tensor::from_parts(vec![n, h, d], deltas),
        label: None,
    })
}

/// Decomposed keys of the three segments, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedKeys<T> {
    pub text: BiasDecomposition<T>,
    pub edit: BiasDecomposition<T>,
    pub source: BiasDecomposition<T>,
}

impl<T: Scalar> DecomposedKeys<T> {
    pub fn get(&self, segment: Segment) -> &BiasDecomposition<T> {
        match segment {
            Segment::Text => &self.text,
            Segment::Edit => &self.edit,
            Segment::Source => &self.source,
        }
    }

    fn check(&self, layout: &SegmentLayout, head: usize, q_len: usize) -> Result<()> {
        for seg in Segment::ALL {
            let dec = self.get(seg);
            let want = layout.range(seg).len();
            if dec.n_tokens() != want {
                return Err(GragError::shape(format!(
                    "{} keys hold {} tokens, layout expects {want}",
                    seg.name(),
                    dec.n_tokens()
                )));
            }
            if dec.heads() != self.text.heads() || dec.head_dim() != q_len {
                return Err(GragError::shape(format!(
                    "{} keys are [{}, {}, {}], query has {q_len} dims",
                    seg.name(),
                    dec.n_tokens(),
                    dec.heads(),
                    dec.head_dim()
                )));
            }
            if head >= dec.heads() {
                return Err(GragError::shape(format!(
                    "head {head} out of range for {} heads",
                    dec.heads()
                )));
            }
        }
        Ok(())
    }
}

/// Per-segment factors of the bias-factored softmax denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentSoftmaxTerms<T> {
    /// Scaled `<q, k_bias>` for text, edit, source.
    pub bias_logit: [T; 3],
    /// `sum_p exp(<q, delta_k_p>)` (scaled logits) for text, edit, source.
    pub delta_sum: [T; 3],
}

impl<T: Scalar> SegmentSoftmaxTerms<T> {
    /// Share of the denominator each segment contributes.
    pub fn segment_mass(&self) -> [T; 3] {
        let log_w = [0, 1, 2].map(|i| self.bias_logit[i] + self.delta_sum[i].ln());
        let max = log_w.iter().copied().fold(T::neg_infinity(), T::max);
        let w = log_w.map(|l| (l - max).exp());
        let total = w[0] + w[1] + w[2];
        w.map(|x| x / total)
    }
}

/// One attention row computed through the bias/delta factorisation.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredRow<T> {
    /// Probabilities over the full `text | edit | source` sequence.
    pub probs: Vec<T>,
    pub terms: SegmentSoftmaxTerms<T>,
}

/// Attention row of query `q` (one head, `D` values) over decomposed keys:
///
/// ```text
/// p_j = exp(<q, b_seg>) exp(<q, dk_j>) / sum_seg exp(<q, b_seg>) * Sigma_seg
/// ```
///
/// Logits use the same `1 / sqrt(D)` scale as
/// [`edit_attention_probs`](crate::attention::edit_attention_probs), which
/// this reproduces from raw keys. Exponentials are evaluated with
/// per-segment and global max shifts.
pub fn softmax_via_decomposition<T: Scalar>(
    q: &[T],
    head: usize,
    keys: &DecomposedKeys<T>,
    layout: &SegmentLayout,
) -> Result<FactoredRow<T>> {
    keys.check(layout, head, q.len())?;
    let scale = attention_scale::<T>(q.len());
    let mut bias_logit = [T::zero(); 3];
    let mut delta_logits: [Vec<T>; 3] = Default::default();
    let mut seg_max = [T::zero(); 3];
    let mut partial = [T::zero(); 3];
    for (i, seg) in Segment::ALL.into_iter().enumerate() {
        let (bias, deltas) = keys.get(seg).head(head);
        bias_logit[i] = dot(q, bias) * scale;
        let logits: Vec<T> = deltas.iter().map(|dk| dot(q, dk) * scale).collect();
        let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
        partial[i] = logits.iter().map(|&l| (l - m).exp()).sum();
        seg_max[i] = m;
        delta_logits[i] = logits;
    }
    let global = (0..3)
        .map(|i| bias_logit[i] + seg_max[i])
        .fold(T::neg_infinity(), T::max);
    let denom: T = (0..3)
        .map(|i| (bias_logit[i] + seg_max[i] - global).exp() * partial[i])
        .sum();
    let mut probs = Vec::with_capacity(layout.total());
    for i in 0..3 {
        probs.extend(
            delta_logits[i]
                .iter()
                .map(|&l| (bias_logit[i] + l - global).exp() / denom),
        );
    }
    let delta_sum = [0, 1, 2].map(|i| seg_max[i].exp() * partial[i]);
    Ok(FactoredRow {
        probs,
        terms: SegmentSoftmaxTerms {
            bias_logit,
            delta_sum,
        },
    })
}
