//! Bundle-level commands: embedding statistics, GRAG application and toy
//! captures.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::bundle::{
    load_dump_bundle, write_dump_bundle, DumpBundle, EntryKey, Manifest, TensorName,
};
use super::config::{write_json, GragConfigFile, SCHEMA_VERSION};
use super::npy::AnyTensor;
use super::toy::{run_edit_pass_with, EditInputs, PassOptions, ToyModel};
use crate::analysis::{
    cross_run_similarity, extract_segment, frequency_bands, head_stats, norm_map, BandSummary,
    MapMeta, NormMap, Projection, SegmentLabel,
};
use crate::attention::{RopeConfig, DEFAULT_ROPE_BASE};
use crate::error::{GragError, Result};
use crate::grag::{apply_grag, GragConfig};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const NORM_MAP_CSV: &str = "norm_map.csv";
pub const HEAD_STATS_CSV: &str = "head_stats.csv";
pub const HEAD_MAGNITUDE_CSV: &str = "head_magnitude.csv";
pub const SIMILARITY_CSV: &str = "similarity.csv";
pub const ANALYSIS_JSON: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentSummary {
    pub layer: usize,
    pub segment: SegmentLabel,
    pub steps: Vec<usize>,
    /// Smallest cross-step cosine of the norm maps; absent with one step.
    pub min_similarity: Option<f64>,
    /// Bands of the norm map averaged over steps.
    pub bands: Vec<BandSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisSummary {
    pub schema_version: u32,
    pub producer: String,
    pub segments: Vec<SegmentSummary>,
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| GragError::io(path, e))
}

/// Norm maps, head statistics, cross-step similarity and frequency bands
/// for each requested segment of every layer in `bundle`.
pub fn analyze_bundle(
    bundle: &DumpBundle,
    labels: &[SegmentLabel],
    out: &Path,
) -> Result<AnalysisSummary> {
    let m = &bundle.manifest;
    if m.batch != 1 {
        return Err(GragError::config(format!(
            "analysis expects batch 1 captures, the bundle has batch {}",
            m.batch
        )));
    }
    if labels.is_empty() {
        return Err(GragError::config("no segments selected"));
    }
    let rope = RopeConfig {
        base: m.rope_base.unwrap_or(DEFAULT_ROPE_BASE),
        ..RopeConfig::new(m.head_dim)
    };
    fs::create_dir_all(out).map_err(|e| GragError::io(out, e))?;

    let (mut norm_rows, mut stat_rows, mut mag_rows, mut sim_rows) =
        (vec![], vec![], vec![], vec![]);
    let mut segments = Vec::new();
    for layer in bundle.layers() {
        for &label in labels {
            let name = match label.projection {
                Projection::Q => TensorName::Q,
                Projection::K => TensorName::K,
            };
            let mut maps: Vec<NormMap<f64>> = Vec::new();
            for step in bundle.steps(layer) {
                let Some(t) = bundle.get(layer, step, name) else {
                    continue;
                };
                let seg = extract_segment(&t.to_scalar::<f64>(), &m.layout, label.segment, 0)?;
                let map = norm_map(&seg, MapMeta { label, layer, step })?;
                let stats = head_stats(&seg)?;
                let (h, d) = (map.heads(), map.head_dim());
                let prefix = [layer.to_string(), step.to_string(), label.to_string()];
                for hh in 0..h {
                    for dd in 0..d {
                        let i = hh * d + dd;
                        let mut row = prefix.to_vec();
                        row.extend([hh.to_string(), dd.to_string()]);
                        let mut stat = row.clone();
                        row.push(map.values.data()[i].to_string());
                        stat.extend([
                            stats.mean.data()[i].to_string(),
                            stats.std.data()[i].to_string(),
                        ]);
                        norm_rows.push(row);
                        stat_rows.push(stat);
                    }
                    let mut row = prefix.to_vec();
                    row.extend([hh.to_string(), stats.mean_magnitude[hh].to_string()]);
                    mag_rows.push(row);
                }
                maps.push(map);
            }
            if maps.is_empty() {
                continue;
            }
            let sim = cross_run_similarity(&maps)?;
            for i in 0..maps.len() {
                for j in i + 1..maps.len() {
                    sim_rows.push(vec![
                        layer.to_string(),
                        label.to_string(),
                        maps[i].meta.step.to_string(),
                        maps[j].meta.step.to_string(),
                        sim.get(i, j).to_string(),
                    ]);
                }
            }
            let n = maps.len() as f64;
            let mut mean = maps[0].values.clone();
            for other in &maps[1..] {
                mean = mean.add(&other.values)?;
            }
            let mean = NormMap {
                values: mean.scale(1.0 / n),
                meta: maps[0].meta,
            };
            segments.push(SegmentSummary {
                layer,
                segment: label,
                steps: maps.iter().map(|x| x.meta.step).collect(),
                min_similarity: sim.min_off_diagonal(),
                bands: frequency_bands(&mean, &rope)?,
            });
        }
    }
    if segments.is_empty() {
        return Err(GragError::config(
            "the bundle holds no tensors for the selected segments",
        ));
    }
    let base = ["layer", "step", "segment", "head"];
    write_csv(
        &out.join(NORM_MAP_CSV),
        &[&base[..], &["dim", "value"]].concat(),
        norm_rows,
    )?;
    write_csv(
        &out.join(HEAD_STATS_CSV),
        &[&base[..], &["dim", "mean", "std"]].concat(),
        stat_rows,
    )?;
    write_csv(
        &out.join(HEAD_MAGNITUDE_CSV),
        &[&base[..], &["mean_magnitude"]].concat(),
        mag_rows,
    )?;
    write_csv(
        &out.join(SIMILARITY_CSV),
        &["layer", "segment", "step_a", "step_b", "cosine"],
        sim_rows,
    )?;
    let summary = AnalysisSummary {
        schema_version: SCHEMA_VERSION,
        producer: m.producer.clone(),
        segments,
    };
    write_json(out.join(ANALYSIS_JSON), &summary)?;
    Ok(summary)
}

fn guide(t: &AnyTensor, cfg: &GragConfig) -> Result<AnyTensor> {
    Ok(match t {
        AnyTensor::F32(x) => apply_grag(x, cfg)?.into(),
        AnyTensor::F64(x) => apply_grag(x, cfg)?.into(),
    })
}

/// Applies GRAG to the K tensors of the targeted layers and writes a new
/// bundle; Q and V are copied unchanged. Returns the number of K tensors
/// transformed.
pub fn apply_to_bundle(bundle_dir: &Path, config: &GragConfigFile, out: &Path) -> Result<usize> {
    let bundle = load_dump_bundle(bundle_dir)?;
    let m = &bundle.manifest;
    let cfg = config.resolve(Some(&m.layout))?;
    cfg.validate(m.layout.total())?;
    let mut tensors = BTreeMap::new();
    let mut touched = 0;
    for (key, t) in &bundle.tensors {
        let t = if key.name == TensorName::K && cfg.applies_to_layer(key.layer) {
            touched += 1;
            guide(t, &cfg)?
        } else {
            t.clone()
        };
        tensors.insert(*key, t);
    }
    let mut manifest = m.clone();
    manifest.producer = format!(
        "{} + grag apply (lambda={}, delta={})",
        m.producer, cfg.lambda, cfg.delta
    );
    write_dump_bundle(out, manifest, &tensors)?;
    Ok(touched)
}

/// Captures the attention inputs of `model` for each entry of `steps` (one
/// pass per step) as a bundle; Q and K are post-RoPE.
pub fn capture_toy_bundle<T: Scalar>(
    model: &ToyModel<T>,
    steps: &[EditInputs<T>],
    grag: Option<&GragConfig>,
    out: &Path,
) -> Result<Manifest>
where
    AnyTensor: From<Tensor<T>>,
{
    let cfg = &model.config;
    let mut manifest = Manifest::new(
        format!("grag toy model (seed {})", cfg.seed),
        T::DTYPE,
        cfg.layout()?,
        cfg.heads,
        cfg.head_dim,
    );
    manifest.rope_base = Some(cfg.rope_base);
    let mut tensors = BTreeMap::new();
    for (step, inputs) in steps.iter().enumerate() {
        manifest.batch = inputs.text.dim(0);
        let trace = run_edit_pass_with(
            model,
            inputs,
            &PassOptions {
                grag,
                capture_qkv: true,
                ..Default::default()
            },
        )?;
        for (layer, qkv) in trace.captured.into_iter().enumerate() {
            for (name, t) in [
                (TensorName::Q, qkv.q),
                (TensorName::K, qkv.k),
                (TensorName::V, qkv.v),
            ] {
                tensors.insert(EntryKey { layer, step, name }, AnyTensor::from(t));
            }
        }
    }
    if tensors.is_empty() {
        return Err(GragError::config("no steps to capture"));
    }
    write_dump_bundle(out, manifest, &tensors)
}
