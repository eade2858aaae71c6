//! Acceptance gate: criteria 1-10, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the verdict lines always print.

mod common;

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{max_abs, rng, to_f64, uniform};
use grag::analysis::{
    cross_run_similarity, decompose_bias, extract_segment, norm_map, softmax_via_decomposition,
    DecomposedKeys, MapMeta, SegmentLabel,
};
use grag::attention::{
    apply_rope, edit_attention_probs, joint_attention, RopeConfig, Segment, SegmentLayout,
};
use grag::grag::{apply_grag, grag_attention, guided_query_keys, GragConfig, GroupSelector};
use grag::harness::bench::{run_bench, BenchConfig};
use grag::harness::npy::{decode, encode};
use grag::harness::sweep::{sweep, SweepMode, SweepSpec};
use grag::harness::toy::{build_toy_model, EditInputs, ToyModelConfig};
use grag::{NpyError, Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Failure reason of one criterion.
struct Fail(String);

impl<E: std::fmt::Display> From<E> for Fail {
    fn from(e: E) -> Self {
        Fail(e.to_string())
    }
}

type Check = Result<String, Fail>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), Fail> {
    if ok {
        Ok(())
    } else {
        Err(Fail(msg.into()))
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), Fail> {
    ensure(
        elapsed.as_secs_f64() < limit_s,
        format!("took {:.3} s, limit {limit_s} s", elapsed.as_secs_f64()),
    )
}

fn c1_identity() -> Check {
    let t0 = Instant::now();
    let layout = SegmentLayout::new(16, 24)?;
    let shape = [1, 64, 4, 32];
    let mut r = rng(1);
    let q = uniform::<f32>(&mut r, &shape, -1.0, 1.0);
    let k = uniform::<f32>(&mut r, &shape, -1.0, 1.0);
    let v = uniform::<f32>(&mut r, &shape, -1.0, 1.0);
    let id = GragConfig::for_selector(GroupSelector::SourceTokens, &layout, 1.0, 1.0)?;
    ensure(
        apply_grag(&k, &id)?.bitwise_eq(&k),
        "apply_grag(1, 1) changed the keys",
    )?;
    let rope = RopeConfig::new(32);
    let positions = layout.positions(&rope);
    let plain = joint_attention(
        &apply_rope(&q, &positions, &rope)?,
        &apply_rope(&k, &positions, &rope)?,
        &v,
        &layout,
    )?;
    let guided = grag_attention(&q, &k, &v, &layout, &rope, &id)?;
    let diff = guided.max_abs_diff(&plain)?;
    ensure(diff == 0.0, format!("grag_attention differs by {diff:e}"))?;
    within(t0.elapsed(), 1.0)?;
    Ok(format!(
        "bitwise identity, attention diff 0 ({:.0} ms)",
        t0.elapsed().as_secs_f64() * 1e3
    ))
}

fn c2_composition() -> Check {
    let t0 = Instant::now();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let shape = [
            1,
            r.gen_range(2..17),
            r.gen_range(1..3),
            2 * r.gen_range(1..5),
        ];
        let k = uniform::<f32>(&mut r, &shape, -1.0, 1.0);
        let s = shape[1];
        let start = r.gen_range(0..s - 1);
        let end = r.gen_range(start + 1..=s);
        let mut scale = || r.gen_range(0.8..1.25);
        let (l1, d1, l2, d2) = (scale(), scale(), scale(), scale());
        let g = |l, d| GragConfig::new(start, end, l, d);
        let twice = apply_grag(&apply_grag(&k, &g(l1, d1)?)?, &g(l2, d2)?)?;
        let once = apply_grag(&k, &g(l1 * l2, d1 * d2)?)?;
        worst = worst.max(twice.max_abs_diff(&once)?);
    }
    ensure(worst <= 1e-6, format!("max-abs {worst:e} > 1e-6"))?;
    within(t0.elapsed(), 5.0)?;
    Ok(format!("1000 cases, worst max-abs {worst:.2e} (fp32)"))
}

/// Worst gap between the bias-factored rows and direct softmax rows.
fn factored_gap<T: Scalar>(seed: u64) -> Result<f64, Fail> {
    let mut r = rng(seed);
    let layout = SegmentLayout::new(r.gen_range(1..=8), r.gen_range(1..=8))?;
    let (h, d) = (r.gen_range(1..=2), 2 * r.gen_range(1..=8));
    let shape = [1, layout.total(), h, d];
    let q = uniform::<T>(&mut r, &[1, layout.n_img(), h, d], -2.0, 2.0);
    let k = uniform::<T>(&mut r, &shape, -2.0, 2.0);
    let dec = |seg| decompose_bias(&extract_segment(&k, &layout, seg, 0)?);
    let keys = DecomposedKeys {
        text: dec(Segment::Text)?,
        edit: dec(Segment::Edit)?,
        source: dec(Segment::Source)?,
    };
    let (kd, qd) = (to_f64(&k), to_f64(&q));
    let lib = to_f64(&edit_attention_probs(&q, &k, &layout)?);
    let s = layout.total();
    let scale = 1.0 / (d as f64).sqrt();
    let mut worst = 0.0f64;
    for i in 0..layout.n_img() {
        for hh in 0..h {
            let qi = &q.data()[(i * h + hh) * d..(i * h + hh + 1) * d];
            let row = softmax_via_decomposition(qi, hh, &keys, &layout)?;
            let qv = &qd[(i * h + hh) * d..(i * h + hh + 1) * d];
            let logits: Vec<f64> = (0..layout.total())
                .map(|j| {
                    (0..d)
                        .map(|x| qv[x] * kd[(j * h + hh) * d + x])
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let direct: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
            worst = worst.max(max_abs(&to_f64(&Tensor::new(vec![s], row.probs)?), &direct));
            let at = (hh * layout.n_img() + i) * s;
            worst = worst.max(max_abs(&lib[at..at + s], &direct));
        }
    }
    Ok(worst)
}

fn c3_factored_softmax() -> Check {
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        w64 = w64.max(factored_gap::<f64>(seed)?);
        w32 = w32.max(factored_gap::<f32>(seed)?);
    }
    ensure(w64 <= 1e-6, format!("fp64 gap {w64:e}"))?;
    ensure(w32 <= 1e-5, format!("fp32 gap {w32:e}"))?;
    Ok(format!(
        "100 instances, worst {w64:.2e} (fp64) / {w32:.2e} (fp32)"
    ))
}

fn c4_collapse() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let layout = SegmentLayout::new(r.gen_range(1..9), r.gen_range(2..17))?;
        let shape = [1, layout.total(), 2, 8];
        let q = uniform::<f64>(&mut r, &shape, -2.0, 2.0);
        let k = uniform::<f64>(&mut r, &shape, -2.0, 2.0);
        let cfg = GragConfig::for_selector(
            GroupSelector::SourceTokens,
            &layout,
            r.gen_range(0.5..1.5),
            0.0,
        )?;
        let (q_rot, k_hat) = guided_query_keys(&q, &k, &layout, &RopeConfig::new(8), Some(&cfg))?;
        let edit = layout.edit();
        let q_edit = grag::numerics::slice_seq(&q_rot, edit.start, edit.end)?;
        let probs = edit_attention_probs(&q_edit, &k_hat, &layout)?;
        for row in probs.data().chunks(layout.total()) {
            let src = &row[layout.source()];
            let mean = src.iter().sum::<f64>() / src.len() as f64;
            let var = src.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / src.len() as f64;
            worst = worst.max(var);
        }
    }
    ensure(worst <= 1e-10, format!("variance {worst:e}"))?;
    Ok(format!(
        "20 instances, worst intra-group variance {worst:.2e}"
    ))
}

fn c5_rope() -> Check {
    let mut r = rng(5);
    let (mut norm_gap, mut shift_gap) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let d = 2 * r.gen_range(1..33);
        let cfg = RopeConfig::new(d);
        let q = uniform::<f64>(&mut r, &[1, 1, 1, d], -1.0, 1.0);
        let k = uniform::<f64>(&mut r, &[1, 1, 1, d], -1.0, 1.0);
        let (m, n, t) = (
            r.gen_range(-4096..4096),
            r.gen_range(-4096..4096),
            r.gen_range(-4096..4096),
        );
        let rot = |x: &Tensor<f64>, p: i64| apply_rope(x, &[p], &cfg);
        let qm = rot(&q, m)?;
        for (a, b) in q.data().chunks(2).zip(qm.data().chunks(2)) {
            norm_gap = norm_gap.max((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs());
        }
        let lhs = qm.dot(&rot(&k, n)?)?;
        let rhs = rot(&q, m + t)?.dot(&rot(&k, n + t)?)?;
        shift_gap = shift_gap.max((lhs - rhs).abs());
    }
    ensure(norm_gap <= 1e-6, format!("norm gap {norm_gap:e}"))?;
    ensure(shift_gap <= 1e-5, format!("shift gap {shift_gap:e}"))?;
    Ok(format!(
        "100 tuples, norm gap {norm_gap:.2e}, shift gap {shift_gap:.2e}"
    ))
}

fn c6_bias_recovery() -> Check {
    let (n, h, d) = (64, 4, 32);
    let mut r = rng(6);
    let b = uniform::<f64>(&mut r, &[h, d], -1.0, 1.0);
    let noise = Normal::new(0.0, 0.01 * b.l2())?;
    let label: SegmentLabel = "k_source".parse()?;
    let mut worst_cos = 1.0f64;
    let mut maps = Vec::new();
    for step in 0..10 {
        let seg = Tensor::from_fn([n, h, d], |i| b.data()[i % (h * d)] + noise.sample(&mut r))?;
        let est = decompose_bias(&seg)?;
        let cos = est.bias().dot(&b)? / (est.bias().l2() * b.l2());
        worst_cos = worst_cos.min(cos);
        maps.push(norm_map(
            &seg,
            MapMeta {
                label,
                layer: 0,
                step,
            },
        )?);
    }
    let sim = cross_run_similarity(&maps)?
        .min_off_diagonal()
        .ok_or("no pairs")?;
    ensure(worst_cos >= 0.999, format!("bias cosine {worst_cos}"))?;
    ensure(sim >= 0.999, format!("cross-run similarity {sim}"))?;
    Ok(format!(
        "bias cosine >= {worst_cos:.6}, cross-run similarity >= {sim:.6}"
    ))
}

/// Divergence ordering of the seed-42 fixture's joint block (row indices
/// over λ = δ ∈ {0.95, 1.00, 1.05, 1.10, 1.15}), recorded from the reference run.
const JOINT_GOLDEN_ORDERING: [usize; 5] = [1, 0, 2, 3, 4];

fn c7_sweep() -> Check {
    let t0 = Instant::now();
    let cfg = ToyModelConfig::default();
    let model = build_toy_model::<f64>(&cfg)?;
    let inputs = EditInputs::seeded(&cfg, cfg.seed, 1)?;
    let spec = SweepSpec {
        delta_grid: vec![1.0, 1.05, 1.10, 1.15],
        ..SweepSpec::new(SweepMode::DeltaOnly)
    };
    let delta = sweep(&model, &inputs, &spec)?;
    ensure(
        delta.rows[0].divergence == 0.0,
        "divergence at delta = 1 is not 0",
    )?;
    ensure(
        delta.strictly_increasing(),
        "delta curve is not strictly increasing",
    )?;
    ensure(
        delta.divergence_ordering() == [0, 1, 2, 3],
        "delta ordering differs from golden",
    )?;
    let joint = sweep(&model, &inputs, &SweepSpec::new(SweepMode::Joint))?;
    let ordering = joint.divergence_ordering();
    ensure(
        ordering == JOINT_GOLDEN_ORDERING,
        format!("joint ordering {ordering:?}, golden {JOINT_GOLDEN_ORDERING:?}"),
    )?;
    within(t0.elapsed(), 30.0)?;
    let curve: Vec<String> = delta
        .rows
        .iter()
        .map(|r| format!("{:.3e}", r.divergence))
        .collect();
    Ok(format!(
        "delta curve [{}], joint ordering {ordering:?}",
        curve.join(", ")
    ))
}

fn c8_interchange() -> Check {
    let mut r = rng(8);
    for i in 0..50 {
        let rank = r.gen_range(1..5);
        let dims: Vec<usize> = (0..rank).map(|_| r.gen_range(1..7)).collect();
        let x32 = uniform::<f32>(&mut r, &dims, -1e6, 1e6);
        let x64 = uniform::<f64>(&mut r, &dims, -1e6, 1e6);
        ensure(
            decode::<f32>(&encode(&x32))?.bitwise_eq(&x32),
            format!("fp32 shape {i} {dims:?}"),
        )?;
        ensure(
            decode::<f64>(&encode(&x64))?.bitwise_eq(&x64),
            format!("fp64 shape {i} {dims:?}"),
        )?;
    }
    let good = encode(&Tensor::<f32>::zeros([3, 4])?);
    let swap = |from: &[u8], to: &[u8]| {
        let at = good
            .windows(from.len())
            .position(|w| w == from)
            .expect("field present");
        let mut b = good.clone();
        b[at..at + to.len()].copy_from_slice(to);
        b
    };
    let mut bad_version = good.clone();
    bad_version[6] = 7;
    let errors = [
        decode::<f32>(b"\x93NUMPX\x01\x00").unwrap_err(),
        decode::<f32>(&bad_version).unwrap_err(),
        decode::<f32>(&good[..good.len() - 1]).unwrap_err(),
        decode::<f32>(&good[..16]).unwrap_err(),
        decode::<f32>(&swap(b"<f4", b">f4")).unwrap_err(),
        decode::<f32>(&swap(b"False", b"True ")).unwrap_err(),
        decode::<f64>(&good).unwrap_err(),
    ];
    let kinds: Vec<std::mem::Discriminant<NpyError>> =
        errors.iter().map(std::mem::discriminant).collect();
    for (i, a) in kinds.iter().enumerate() {
        ensure(
            !kinds[i + 1..].contains(a),
            format!("error kinds not distinct: {errors:?}"),
        )?;
    }
    Ok("50 shapes bitwise in fp32 and fp64, 7 distinct malformed-file errors".into())
}

fn c9_determinism() -> Check {
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("sweep.json");
    fs::write(
        &config,
        r#"{"schema_version": 1, "sweep": {"mode": "joint"}}"#,
    )?;
    let run = |out: &str| -> Result<(Vec<u8>, Vec<u8>), Fail> {
        let out = dir.path().join(out);
        let status = Command::new(env!("CARGO_BIN_EXE_grag"))
            .args(["--seed", "42", "sweep", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()?;
        ensure(
            status.status.success(),
            String::from_utf8_lossy(&status.stderr).into_owned(),
        )?;
        let read = |f: &str| fs::read(out.join(f));
        Ok((read("report.csv")?, read("summary.json")?))
    };
    let a = run("a")?;
    let b = run("b")?;
    ensure(a.0 == b.0, "report.csv differs")?;
    ensure(a.1 == b.1, "summary.json differs")?;
    Ok(format!(
        "two CLI sweeps byte-identical ({} + {} bytes)",
        a.0.len(),
        a.1.len()
    ))
}

fn c10_bench() -> Check {
    let cfg = BenchConfig {
        repeats: 1,
        ..Default::default()
    };
    let report = run_bench(&cfg, 42)?;
    ensure(
        report.seq_len == 1024 && report.heads == 8 && report.head_dim == 32,
        "bench shape",
    )?;
    ensure(
        report.tokens_per_second.is_finite() && report.tokens_per_second > 0.0,
        "no throughput",
    )?;
    ensure(
        report.attention_seconds < 2.0,
        format!("forward took {:.3} s", report.attention_seconds),
    )?;
    Ok(format!(
        "S=1024 H=8 D=32 forward {:.3} s, {:.0} tokens/s, {:.2} GFLOP/s, {} threads",
        report.attention_seconds,
        report.tokens_per_second,
        report.gflops_per_second,
        report.threads
    ))
}

fn main() {
    // libtest flags such as --list or filters are not used here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, fn() -> Check); 10] = [
        ("GRAG identity", c1_identity),
        ("composition law", c2_composition),
        ("segment sums vs bias-factored softmax", c3_factored_softmax),
        ("delta = 0 collapse", c4_collapse),
        ("RoPE properties", c5_rope),
        ("bias recovery", c6_bias_recovery),
        ("sweep fixture regression", c7_sweep),
        ("interchange fidelity", c8_interchange),
        ("determinism", c9_determinism),
        ("bench smoke", c10_bench),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS criterion {:>2} {name}: {detail}", i + 1),
            Err(Fail(why)) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
