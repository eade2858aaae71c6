//! λ / δ / CFG grid sweeps on the toy model.
//!
//! Every grid point is compared with a baseline pass: the unguided pass for
//! the GRAG modes, and the CFG combination at `cfg_reference` for
//! `cfg_only`. The unconditional pass of the CFG analog zeroes the text keys
//! in every layer.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{check_schema, read_json, write_json, SCHEMA_VERSION};
use super::guidance::cfg_combine;
use super::toy::{
    build_toy_model, run_edit_pass_with, EditInputs, PassOptions, ToyModel, ToyModelConfig,
};
use crate::error::{GragError, Result};
use crate::grag::{GragConfig, GroupSelector};
use crate::numerics::Tensor;
use crate::scalar::{DType, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Varies λ with δ = 1.
    LambdaOnly,
    /// Varies δ with λ = 1.
    DeltaOnly,
    /// Pairs `lambda_grid[i]` with `delta_grid[i]`.
    Joint,
    /// Varies the CFG scale with GRAG off.
    CfgOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub mode: SweepMode,
    #[serde(default = "default_scale_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_scale_grid")]
    pub delta_grid: Vec<f64>,
    #[serde(default = "default_cfg_grid")]
    pub cfg_grid: Vec<f64>,
    #[serde(default = "default_cfg_reference")]
    pub cfg_reference: f64,
    #[serde(default)]
    pub group_selector: GroupSelector,
    /// Layers receiving GRAG; empty means all.
    #[serde(default)]
    pub target_layers: BTreeSet<usize>,
    /// Recorded for protocol parity; the toy harness runs one forward pass.
    #[serde(default = "default_steps")]
    pub inference_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_scale_grid() -> Vec<f64> {
    vec![0.95, 1.0, 1.05, 1.10, 1.15]
}

fn default_cfg_grid() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 4.0, 5.0]
}

fn default_cfg_reference() -> f64 {
    4.0
}

fn default_steps() -> usize {
    24
}

fn default_batch() -> usize {
    1
}

impl SweepSpec {
    pub fn new(mode: SweepMode) -> Self {
        Self {
            mode,
            lambda_grid: default_scale_grid(),
            delta_grid: default_scale_grid(),
            cfg_grid: default_cfg_grid(),
            cfg_reference: default_cfg_reference(),
            group_selector: GroupSelector::default(),
            target_layers: BTreeSet::new(),
            inference_steps: default_steps(),
            batch_size: default_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, grid: &[f64], ok: fn(f64) -> bool, what: &str| {
            if grid.is_empty() {
                return Err(GragError::config(format!("{name} must not be empty")));
            }
            match grid.iter().find(|&&v| !ok(v)) {
                Some(v) => Err(GragError::config(format!(
                    "{name} value {v} must be {what}"
                ))),
                None => Ok(()),
            }
        };
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        match self.mode {
            SweepMode::LambdaOnly => check("lambda_grid", &self.lambda_grid, positive, "positive")?,
            SweepMode::DeltaOnly => check("delta_grid", &self.delta_grid, positive, "positive")?,
            SweepMode::Joint => {
                check("lambda_grid", &self.lambda_grid, positive, "positive")?;
                check("delta_grid", &self.delta_grid, positive, "positive")?;
                if self.lambda_grid.len() != self.delta_grid.len() {
                    return Err(GragError::config(format!(
                        "joint mode pairs the grids element-wise, but lambda_grid has {} values and delta_grid {}",
                        self.lambda_grid.len(),
                        self.delta_grid.len()
                    )));
                }
            }
            SweepMode::CfgOnly => {
                check("cfg_grid", &self.cfg_grid, non_negative, "non-negative")?;
                if !non_negative(self.cfg_reference) {
                    return Err(GragError::config("cfg_reference must be non-negative"));
                }
            }
        }
        if self.group_selector == GroupSelector::ExplicitRange {
            return Err(GragError::config(
                "sweeps select the group by segment (source_tokens or text_tokens)",
            ));
        }
        if self.batch_size == 0 {
            return Err(GragError::config("batch_size must be >= 1"));
        }
        Ok(())
    }

    /// `(λ, δ, s)` for each grid point, in grid order.
    pub fn points(&self) -> Vec<GridPoint> {
        let point = |lambda, delta, cfg| GridPoint { lambda, delta, cfg };
        match self.mode {
            SweepMode::LambdaOnly => self
                .lambda_grid
                .iter()
                .map(|&l| point(l, 1.0, None))
                .collect(),
            SweepMode::DeltaOnly => self
                .delta_grid
                .iter()
                .map(|&d| point(1.0, d, None))
                .collect(),
            SweepMode::Joint => self
                .lambda_grid
                .iter()
                .zip(&self.delta_grid)
                .map(|(&l, &d)| point(l, d, None))
                .collect(),
            SweepMode::CfgOnly => self
                .cfg_grid
                .iter()
                .map(|&s| point(1.0, 1.0, Some(s)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cfg: Option<f64>,
}

impl GridPoint {
    fn sort_key(&self) -> (f64, f64, f64) {
        (self.lambda, self.delta, self.cfg.unwrap_or(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(flatten)]
    pub point: GridPoint,
    /// `||out - baseline|| / ||baseline||` over the edit-segment output.
    pub divergence: f64,
    pub cosine: f64,
    pub mass_text: f64,
    pub mass_edit: f64,
    pub mass_source: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub mode: SweepMode,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Row indices sorted by ascending divergence (ties keep grid order).
    pub fn divergence_ordering(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.rows.len()).collect();
        idx.sort_by(|&a, &b| self.rows[a].divergence.total_cmp(&self.rows[b].divergence));
        idx
    }

    /// True when divergence strictly increases along the row order.
    pub fn strictly_increasing(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[0].divergence < w[1].divergence)
    }

    pub fn identity_row(&self) -> Option<&SweepRow> {
        self.rows.iter().find(|r| match (self.mode, r.point.cfg) {
            (SweepMode::CfgOnly, Some(_)) => r.divergence == 0.0,
            _ => r.point.lambda == 1.0 && r.point.delta == 1.0,
        })
    }
}

fn compare<T: Scalar>(out: &Tensor<T>, base: &Tensor<T>) -> Result<(f64, f64)> {
    if out.bitwise_eq(base) {
        return Ok((0.0, 1.0));
    }
    let diff = out.sub(base)?;
    let (nb, no) = (base.l2(), out.l2());
    let divergence = if nb > 0.0 { diff.l2() / nb } else { diff.l2() };
    let cosine = if nb > 0.0 && no > 0.0 {
        (out.dot(base)? / (nb * no)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok((divergence, cosine))
}

/// Runs every grid point of `spec` (in parallel) and returns rows sorted by
/// `(λ, δ, s)`.
pub fn sweep<T: Scalar>(
    model: &ToyModel<T>,
    inputs: &EditInputs<T>,
    spec: &SweepSpec,
) -> Result<SweepReport> {
    spec.validate()?;
    let layout = model.config.layout()?;
    let traced = |grag: Option<&GragConfig>, zero_text_keys: bool| {
        run_edit_pass_with(
            model,
            inputs,
            &PassOptions {
                grag,
                zero_text_keys,
                trace: true,
                capture_qkv: false,
            },
        )
    };
    let mut rows = if spec.mode == SweepMode::CfgOnly {
        let cond = traced(None, false)?;
        let uncond = traced(None, true)?;
        let mass = cond.mean_segment_mass(&layout)?;
        let baseline = cfg_combine(&uncond.output, &cond.output, spec.cfg_reference)?;
        spec.points()
            .into_par_iter()
            .map(|p| {
                let t0 = Instant::now();
                let out = cfg_combine(&uncond.output, &cond.output, p.cfg.unwrap_or(1.0))?;
                let (divergence, cosine) = compare(&out, &baseline)?;
                Ok(SweepRow {
                    point: p,
                    divergence,
                    cosine,
                    mass_text: mass[0],
                    mass_edit: mass[1],
                    mass_source: mass[2],
                    wall_time_s: t0.elapsed().as_secs_f64(),
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let baseline = traced(None, false)?.output;
        spec.points()
            .into_par_iter()
            .map(|p| {
                let t0 = Instant::now();
                let grag =
                    GragConfig::for_selector(spec.group_selector, &layout, p.lambda, p.delta)?
                        .with_target_layers(spec.target_layers.iter().copied());
                let run = traced(Some(&grag), false)?;
                let mass = run.mean_segment_mass(&layout)?;
                let (divergence, cosine) = compare(&run.output, &baseline)?;
                Ok(SweepRow {
                    point: p,
                    divergence,
                    cosine,
                    mass_text: mass[0],
                    mass_edit: mass[1],
                    mass_source: mass[2],
                    wall_time_s: t0.elapsed().as_secs_f64(),
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    rows.sort_by(|a, b| {
        let (ka, kb) = (a.point.sort_key(), b.point.sort_key());
        ka.0.total_cmp(&kb.0)
            .then(ka.1.total_cmp(&kb.1))
            .then(ka.2.total_cmp(&kb.2))
    });
    Ok(SweepReport {
        mode: spec.mode,
        rows,
    })
}

/// On-disk sweep configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub schema_version: u32,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    #[serde(default)]
    pub model: ToyModelConfig,
    pub sweep: SweepSpec,
}

fn default_dtype() -> DType {
    DType::F64
}

impl SweepConfig {
    pub fn new(spec: SweepSpec) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dtype: default_dtype(),
            model: ToyModelConfig::default(),
            sweep: spec,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg: Self = read_json(path)?;
        check_schema(cfg.schema_version, path)?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    schema_version: u32,
    mode: SweepMode,
    dtype: DType,
    seed: u64,
    weight_checksum: String,
    model: &'a ToyModelConfig,
    sweep: &'a SweepSpec,
    rows: &'a [SweepRow],
    divergence_ordering: Vec<usize>,
    strictly_increasing: bool,
}

/// Files written by [`run_sweep_to_dir`].
pub const REPORT_CSV: &str = "report.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const TIMING_CSV: &str = "timing.csv";

fn run_typed<T: Scalar>(cfg: &SweepConfig) -> Result<(SweepReport, String)> {
    let model = build_toy_model::<T>(&cfg.model)?;
    let inputs = EditInputs::seeded(&cfg.model, cfg.model.seed, cfg.sweep.batch_size)?;
    Ok((sweep(&model, &inputs, &cfg.sweep)?, model.weight_checksum()))
}

/// Builds the seeded model, runs the sweep and writes `report.csv`,
/// `summary.json` and `timing.csv` into `out`.
///
/// Only `timing.csv` depends on the machine; the other two files are
/// byte-identical across runs with the same configuration.
pub fn run_sweep_to_dir(cfg: &SweepConfig, out: &Path) -> Result<SweepReport> {
    let (report, checksum) = match cfg.dtype {
        DType::F32 => run_typed::<f32>(cfg)?,
        DType::F64 => run_typed::<f64>(cfg)?,
    };
    fs::create_dir_all(out).map_err(|e| GragError::io(out, e))?;

    let mut w = csv::Writer::from_path(out.join(REPORT_CSV))?;
    w.write_record([
        "lambda",
        "delta",
        "cfg",
        "divergence",
        "cosine",
        "mass_text",
        "mass_edit",
        "mass_source",
    ])?;
    for r in &report.rows {
        let cfg_scale = r.point.cfg.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([
            r.point.lambda.to_string(),
            r.point.delta.to_string(),
            cfg_scale,
            r.divergence.to_string(),
            r.cosine.to_string(),
            r.mass_text.to_string(),
            r.mass_edit.to_string(),
            r.mass_source.to_string(),
        ])?;
    }
    w.flush()
        .map_err(|e| GragError::io(out.join(REPORT_CSV), e))?;

    let mut t = csv::Writer::from_path(out.join(TIMING_CSV))?;
    t.write_record(["lambda", "delta", "cfg", "wall_time_s"])?;
    for r in &report.rows {
        let cfg_scale = r.point.cfg.map(|s| s.to_string()).unwrap_or_default();
        t.write_record([
            r.point.lambda.to_string(),
            r.point.delta.to_string(),
            cfg_scale,
            format!("{:.6}", r.wall_time_s),
        ])?;
    }
    t.flush()
        .map_err(|e| GragError::io(out.join(TIMING_CSV), e))?;

    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        mode: report.mode,
        dtype: cfg.dtype,
        seed: cfg.model.seed,
        weight_checksum: checksum,
        model: &cfg.model,
        sweep: &cfg.sweep,
        rows: &report.rows,
        divergence_ordering: report.divergence_ordering(),
        strictly_increasing: report.strictly_increasing(),
    };
    write_json(out.join(SUMMARY_JSON), &summary)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyModelConfig {
        ToyModelConfig {
            layers: 2,
            n_text: 4,
            n_img: 6,
            d_text: 8,
            d_img: 8,
            heads: 2,
            head_dim: 4,
            ..Default::default()
        }
    }

    fn run(spec: &SweepSpec) -> SweepReport {
        let cfg = small();
        let model = build_toy_model::<f64>(&cfg).unwrap();
        let inputs = EditInputs::seeded(&cfg, 42, 1).unwrap();
        sweep(&model, &inputs, spec).unwrap()
    }

    #[test]
    fn single_identity_point() {
        let spec = SweepSpec {
            lambda_grid: vec![1.0],
            delta_grid: vec![1.0],
            ..SweepSpec::new(SweepMode::Joint)
        };
        let r = run(&spec);
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].divergence, 0.0);
        assert_eq!(r.rows[0].cosine, 1.0);
    }

    #[test]
    fn rows_sorted_and_masses_normalised() {
        let spec = SweepSpec {
            delta_grid: vec![1.1, 0.9, 1.0],
            ..SweepSpec::new(SweepMode::DeltaOnly)
        };
        let r = run(&spec);
        let deltas: Vec<f64> = r.rows.iter().map(|x| x.point.delta).collect();
        assert_eq!(deltas, vec![0.9, 1.0, 1.1]);
        assert_eq!(r.identity_row().unwrap().divergence, 0.0);
        for row in &r.rows {
            assert!((row.mass_text + row.mass_edit + row.mass_source - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cfg_reference_row_is_baseline() {
        let r = run(&SweepSpec::new(SweepMode::CfgOnly));
        assert_eq!(r.rows.len(), 5);
        let at_ref = r.rows.iter().find(|x| x.point.cfg == Some(4.0)).unwrap();
        assert_eq!((at_ref.divergence, at_ref.cosine), (0.0, 1.0));
        assert!(r
            .rows
            .iter()
            .filter(|x| x.point.cfg != Some(4.0))
            .all(|x| x.divergence > 0.0));
    }

    #[test]
    fn invalid_specs() {
        let mut s = SweepSpec::new(SweepMode::Joint);
        s.delta_grid.pop();
        assert!(s.validate().is_err());
        let s = SweepSpec {
            lambda_grid: vec![],
            ..SweepSpec::new(SweepMode::LambdaOnly)
        };
        assert!(s.validate().is_err());
        let s = SweepSpec {
            delta_grid: vec![0.0],
            ..SweepSpec::new(SweepMode::DeltaOnly)
        };
        assert!(s.validate().is_err());
        let s = SweepSpec {
            cfg_grid: vec![-1.0],
            ..SweepSpec::new(SweepMode::CfgOnly)
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_json_defaults() {
        let s: SweepSpec = serde_json::from_str(r#"{"mode":"delta_only"}"#).unwrap();
        assert_eq!(s, SweepSpec::new(SweepMode::DeltaOnly));
        assert_eq!((s.inference_steps, s.batch_size), (24, 1));
    }
}
