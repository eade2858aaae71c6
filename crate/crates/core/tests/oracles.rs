//! Library paths against straight-line fp64 re-implementations.

mod common;

use common::{max_abs, naive_attention, naive_grag, naive_rope, rng, to_f64, uniform};
use grag::attention::{
    joint_attention, project_tokens, ProjectionWeights, RopeConfig, SegmentLayout,
};
use grag::grag::{grag_attention, GragConfig, GroupSelector};
use grag::harness::toy::{build_toy_model, run_edit_pass, EditInputs, ToyModel, ToyModelConfig};
use grag::{Scalar, Tensor};

/// `x [rows, k] @ w [k, n]` on plain slices.
fn mm(x: &[f64], w: &[f64], k: usize, n: usize) -> Vec<f64> {
    let rows = x.len() / k;
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            out[r * n + j] = (0..k).map(|i| x[r * k + i] * w[i * n + j]).sum();
        }
    }
    out
}

#[test]
fn projection_matches_plain_matmul() {
    let mut r = rng(5);
    let (b, nt, ni, dt, di, h, d) = (2, 3, 4, 5, 6, 2, 4);
    let w = |r: &mut _, din| uniform::<f64>(r, &[din, h * d], -1.0, 1.0);
    let weights = ProjectionWeights::new(
        w(&mut r, dt),
        w(&mut r, dt),
        w(&mut r, dt),
        w(&mut r, di),
        w(&mut r, di),
        w(&mut r, di),
        h,
        d,
    )
    .unwrap();
    let text = uniform::<f64>(&mut r, &[b, nt, dt], -1.0, 1.0);
    let edit = uniform::<f64>(&mut r, &[b, ni, di], -1.0, 1.0);
    let source = uniform::<f64>(&mut r, &[b, ni, di], -1.0, 1.0);
    let p = project_tokens(&text, &edit, &source, &weights).unwrap();
    assert_eq!(p.text.q.shape(), &[b, nt, h, d]);
    let want = mm(&to_f64(&text), &to_f64(&weights.k_text), dt, h * d);
    assert!(max_abs(&to_f64(&p.text.k), &want) <= 1e-12);
    let want = mm(&to_f64(&source), &to_f64(&weights.v_img), di, h * d);
    assert!(max_abs(&to_f64(&p.source.v), &want) <= 1e-12);
    let want = mm(&to_f64(&edit), &to_f64(&weights.q_img), di, h * d);
    assert!(max_abs(&to_f64(&p.edit.q), &want) <= 1e-12);
}

fn attention_case<T: Scalar>(seed: u64, n_text: usize, n_img: usize, h: usize, d: usize) -> f64 {
    let layout = SegmentLayout::new(n_text, n_img).unwrap();
    let shape = [1, layout.total(), h, d];
    let mut r = rng(seed);
    let q = uniform::<T>(&mut r, &shape, -2.0, 2.0);
    let k = uniform::<T>(&mut r, &shape, -2.0, 2.0);
    let v = uniform::<T>(&mut r, &shape, -2.0, 2.0);
    let got = joint_attention(&q, &k, &v, &layout).unwrap();
    let want = naive_attention(&to_f64(&q), &to_f64(&k), &to_f64(&v), shape);
    max_abs(&to_f64(&got), &want)
}

#[test]
fn joint_attention_matches_triple_loop() {
    // S = 6, H = 2, D = 4
    assert!(attention_case::<f64>(1, 2, 2, 2, 4) <= 1e-12);
    assert!(attention_case::<f32>(1, 2, 2, 2, 4) <= 1e-5);
    for seed in 0..20 {
        let n_text = 1 + (seed as usize % 8);
        let n_img = 1 + (seed as usize * 5 % 12);
        assert!(attention_case::<f64>(seed, n_text, n_img, 3, 8) <= 1e-12);
        assert!(attention_case::<f32>(seed, n_text, n_img, 3, 8) <= 1e-5);
    }
}

#[test]
fn guided_attention_follows_the_reference_order() {
    // rotate, reweight the source keys, then attend
    let layout = SegmentLayout::new(4, 4).unwrap();
    let shape = [1, 12, 2, 8];
    let mut r = rng(11);
    let q = uniform::<f64>(&mut r, &shape, -1.0, 1.0);
    let k = uniform::<f64>(&mut r, &shape, -1.0, 1.0);
    let v = uniform::<f64>(&mut r, &shape, -1.0, 1.0);
    let cfg = GragConfig::for_selector(GroupSelector::SourceTokens, &layout, 1.0, 1.1).unwrap();
    let rope = RopeConfig::new(8);
    let got = grag_attention(&q, &k, &v, &layout, &rope, &cfg).unwrap();

    let positions = [0, 1, 2, 3, 4, 5, 6, 7, 4, 5, 6, 7];
    let q_rot = naive_rope(&to_f64(&q), shape, &positions, 10_000.0);
    let k_rot = naive_rope(&to_f64(&k), shape, &positions, 10_000.0);
    let k_hat = naive_grag(&k_rot, shape, 8, 12, 1.0, 1.1);
    let want = naive_attention(&q_rot, &k_hat, &to_f64(&v), shape);
    assert!(max_abs(&to_f64(&got), &want) <= 1e-12);

    let unguided = naive_attention(&q_rot, &k_rot, &to_f64(&v), shape);
    assert!(max_abs(&want, &unguided) > 1e-6);
}

/// Whole toy forward pass written out on plain vectors.
fn oracle_forward<T: Scalar>(
    model: &ToyModel<T>,
    inputs: &EditInputs<T>,
    grag: Option<(f64, f64)>,
) -> Vec<f64> {
    let c = &model.config;
    let (nt, ni, h, d) = (c.n_text, c.n_img, c.heads, c.head_dim);
    let s = nt + 2 * ni;
    let hd = h * d;
    let shape = [1, s, h, d];
    let positions: Vec<i64> = (0..nt as i64)
        .chain((nt as i64..(nt + ni) as i64).cycle().take(2 * ni))
        .collect();
    let mut text = to_f64(&inputs.text);
    let mut edit = to_f64(&inputs.edit);
    let mut source = to_f64(&inputs.source);
    for block in &model.blocks {
        let p = &block.proj;
        let proj =
            |w_t: &Tensor<T>, w_i: &Tensor<T>, text: &[f64], edit: &[f64], source: &[f64]| {
                let mut all = mm(text, &to_f64(w_t), c.d_text, hd);
                all.extend(mm(edit, &to_f64(w_i), c.d_img, hd));
                all.extend(mm(source, &to_f64(w_i), c.d_img, hd));
                all
            };
        let q = naive_rope(
            &proj(&p.q_text, &p.q_img, &text, &edit, &source),
            shape,
            &positions,
            c.rope_base,
        );
        let mut k = naive_rope(
            &proj(&p.k_text, &p.k_img, &text, &edit, &source),
            shape,
            &positions,
            c.rope_base,
        );
        let v = proj(&p.v_text, &p.v_img, &text, &edit, &source);
        if let Some((l, dl)) = grag {
            k = naive_grag(&k, shape, nt + ni, s, l, dl);
        }
        let a = naive_attention(&q, &k, &v, shape);
        let out =
            |rows: std::ops::Range<usize>, w: &Tensor<T>, bias: &Tensor<T>, x: &mut Vec<f64>| {
                let n = bias.len();
                let y = mm(&a[rows.start * hd..rows.end * hd], &to_f64(w), hd, n);
                for (i, v) in x.iter_mut().enumerate() {
                    *v += y[i] + bias.data()[i % n].as_f64();
                }
            };
        out(0..nt, &block.out_text, &block.bias_text, &mut text);
        out(nt..nt + ni, &block.out_img, &block.bias_img, &mut edit);
        out(nt + ni..s, &block.out_img, &block.bias_img, &mut source);
    }
    edit
}

fn fixture() -> ToyModelConfig {
    ToyModelConfig {
        layers: 2,
        n_text: 4,
        n_img: 6,
        d_text: 12,
        d_img: 16,
        heads: 2,
        head_dim: 8,
        ..Default::default()
    }
}

#[test]
fn toy_forward_matches_oracle() {
    let cfg = fixture();
    let layout = cfg.layout().unwrap();
    let g = GragConfig::for_selector(GroupSelector::SourceTokens, &layout, 1.05, 1.1).unwrap();

    let m64 = build_toy_model::<f64>(&cfg).unwrap();
    let in64 = EditInputs::seeded(&cfg, 42, 1).unwrap();
    let plain = oracle_forward(&m64, &in64, None);
    let guided = oracle_forward(&m64, &in64, Some((1.05, 1.1)));
    assert!(max_abs(&to_f64(&run_edit_pass(&m64, &in64, None).unwrap()), &plain) <= 1e-10);
    assert!(
        max_abs(
            &to_f64(&run_edit_pass(&m64, &in64, Some(&g)).unwrap()),
            &guided
        ) <= 1e-10
    );

    let m32 = build_toy_model::<f32>(&cfg).unwrap();
    let in32 = EditInputs::seeded(&cfg, 42, 1).unwrap();
    let got = to_f64(&run_edit_pass(&m32, &in32, Some(&g)).unwrap());
    assert!(max_abs(&got, &oracle_forward(&m32, &in32, Some((1.05, 1.1)))) <= 1e-4);
}

#[test]
fn toy_forward_golden_values() {
    let cfg = fixture();
    let model = build_toy_model::<f64>(&cfg).unwrap();
    assert_eq!(
        model.weight_checksum(),
        "a63fe7689a77ea7fec1cdb7b52ad2f22b53d55bb8f82dcd9e681c25c30dc9d4c"
    );
    let inputs = EditInputs::seeded(&cfg, 42, 1).unwrap();
    let library = to_f64(&run_edit_pass(&model, &inputs, None).unwrap());
    for out in [oracle_forward(&model, &inputs, None), library] {
        let sum: f64 = out.iter().sum();
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((sum - GOLDEN_SUM).abs() <= 1e-9, "sum {sum}");
        assert!((norm - GOLDEN_NORM).abs() <= 1e-9, "norm {norm}");
        assert!((out[0] - GOLDEN_FIRST).abs() <= 1e-9);
    }
}

// recorded from the fp64 oracle on the fixture above (seed 42)
const GOLDEN_SUM: f64 = -25.678799814397;
const GOLDEN_NORM: f64 = 7.896360067357;
const GOLDEN_FIRST: f64 = -0.891187409395;
