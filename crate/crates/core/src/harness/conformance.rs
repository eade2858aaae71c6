//! Golden-vector bundles for cross-implementation checks of `apply_grag`.
//!
//! `conformance.json` lists the cases; each case has an input key tensor,
//! a GRAG config file (fully resolved range) and the expected output:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "producer": "grag 0.1.0",
//!   "cases": [
//!     { "name": "reference_default_f32", "dtype": "f32",
//!       "config": "reference_default_f32.config.json",
//!       "input": "reference_default_f32.input.npy",
//!       "expected": "reference_default_f32.expected.npy" }
//!   ]
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{check_schema, read_json, write_json, GragConfigFile, SCHEMA_VERSION};
use super::npy::{read_any, write_any, AnyTensor};
use super::toy::UniformStream;
use crate::attention::SegmentLayout;
use crate::error::{GragError, Result};
use crate::grag::{apply_grag, GragConfig, GroupSelector};
use crate::numerics::Tensor;
use crate::scalar::{DType, Scalar};

pub const INDEX: &str = "conformance.json";
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub name: String,
    pub dtype: DType,
    pub config: String,
    pub input: String,
    pub expected: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformanceIndex {
    pub schema_version: u32,
    pub producer: String,
    pub cases: Vec<CaseEntry>,
}

/// One fixture before it is written out.
#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub config: GragConfig,
    pub input: AnyTensor,
}

fn clustered<T: Scalar>(rng: &mut UniformStream, shape: [usize; 4]) -> Tensor<T> {
    let d = shape[3];
    let offset: Vec<f64> = (0..d).map(|_| rng.next(2.0)).collect();
    Tensor::from_fn(shape, |i| T::lit(offset[i % d] + rng.next(0.5))).expect("non-empty shape")
}

/// The shipped fixture set. Keys are drawn from stream 2 of `seed`.
///
/// `reference_default_f32` carries the reference integration's scales
/// (λ = 1.0, δ = 1.05) with its image-key range `[4096, 8192)` mapped onto
/// the source segment of the fixture layout.
pub fn default_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = UniformStream::new(seed, 2);
    let layout = SegmentLayout::new(8, 16)?;
    let (s, h, d) = (layout.total(), 4, 32);
    let src = |l, dl| GragConfig::for_selector(GroupSelector::SourceTokens, &layout, l, dl);
    let mut cases = Vec::new();
    let mut push = |name: &str, config: GragConfig, input: AnyTensor| {
        cases.push(Case {
            name: name.to_string(),
            config,
            input,
        })
    };
    push(
        "identity_f32",
        src(1.0, 1.0)?,
        clustered::<f32>(&mut rng, [1, s, h, d]).into(),
    );
    push(
        "reference_default_f32",
        src(1.0, 1.05)?,
        clustered::<f32>(&mut rng, [1, s, h, d]).into(),
    );
    push(
        "text_group_f32",
        GragConfig::for_selector(GroupSelector::TextTokens, &layout, 1.2, 0.9)?,
        clustered::<f32>(&mut rng, [1, s, h, d]).into(),
    );
    push(
        "collapse_f32",
        src(1.0, 0.0)?,
        clustered::<f32>(&mut rng, [1, s, h, d]).into(),
    );
    push(
        "partial_range_f32",
        GragConfig::new(10, 30, 0.9, 1.15)?,
        clustered::<f32>(&mut rng, [1, s, h, d]).into(),
    );
    push(
        "multi_batch_f32",
        src(1.05, 1.1)?,
        clustered::<f32>(&mut rng, [3, s, h, d]).into(),
    );
    push(
        "two_token_f64",
        GragConfig::new(0, 2, 1.0, 2.0)?,
        Tensor::new(vec![1, 2, 1, 2], vec![1.0f64, 0.0, 0.0, 1.0])?.into(),
    );
    push(
        "joint_f64",
        src(1.1, 1.1)?,
        clustered::<f64>(&mut rng, [1, s, h, d]).into(),
    );
    Ok(cases)
}

fn run_case(input: &AnyTensor, cfg: &GragConfig) -> Result<AnyTensor> {
    Ok(match input {
        AnyTensor::F32(x) => apply_grag(x, cfg)?.into(),
        AnyTensor::F64(x) => apply_grag(x, cfg)?.into(),
    })
}

/// Writes `cases` and their expected outputs into `dir`.
pub fn generate_bundle(dir: &Path, cases: &[Case]) -> Result<ConformanceIndex> {
    fs::create_dir_all(dir).map_err(|e| GragError::io(dir, e))?;
    let mut entries = Vec::new();
    for case in cases {
        let expected = run_case(&case.input, &case.config)?;
        let entry = CaseEntry {
            name: case.name.clone(),
            dtype: case.input.dtype(),
            config: format!("{}.config.json", case.name),
            input: format!("{}.input.npy", case.name),
            expected: format!("{}.expected.npy", case.name),
        };
        write_json(
            dir.join(&entry.config),
            &GragConfigFile::from_config(&case.config),
        )?;
        write_any(dir.join(&entry.input), &case.input)?;
        write_any(dir.join(&entry.expected), &expected)?;
        entries.push(entry);
    }
    let index = ConformanceIndex {
        schema_version: SCHEMA_VERSION,
        producer: format!("grag {}", env!("CARGO_PKG_VERSION")),
        cases: entries,
    };
    write_json(dir.join(INDEX), &index)?;
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub dtype: DType,
    /// `None` when the output shape differs from the expected one.
    pub max_abs_diff: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

fn max_abs(a: &AnyTensor, b: &AnyTensor) -> Option<f64> {
    if a.shape() != b.shape() || a.dtype() != b.dtype() {
        return None;
    }
    let got = a.to_scalar::<f64>();
    got.max_abs_diff(&b.to_scalar::<f64>()).ok()
}

/// Recomputes every case in `dir` and compares it with the stored output.
///
/// Errors (a missing or empty index, unreadable files) mean the bundle
/// could not be checked; mismatches are reported as failed cases.
pub fn check_bundle(dir: &Path, tolerance: f64) -> Result<ConformanceReport> {
    let index_path = dir.join(INDEX);
    if !index_path.is_file() {
        return Err(GragError::Bundle {
            path: dir.to_path_buf(),
            message: format!("no {INDEX} found"),
        });
    }
    let index: ConformanceIndex = read_json(&index_path)?;
    check_schema(index.schema_version, &index_path)?;
    if index.cases.is_empty() {
        return Err(GragError::Bundle {
            path: index_path,
            message: "no cases listed".into(),
        });
    }
    let file = |name: &str| -> PathBuf { dir.join(name) };
    let mut cases = Vec::new();
    for entry in &index.cases {
        let cfg = GragConfigFile::load(file(&entry.config))?.resolve(None)?;
        let input = read_any(file(&entry.input))?;
        let expected = read_any(file(&entry.expected))?;
        if input.dtype() != entry.dtype {
            return Err(GragError::Bundle {
                path: file(&entry.input),
                message: format!(
                    "case {} declares {} but the input holds {}",
                    entry.name,
                    entry.dtype,
                    input.dtype()
                ),
            });
        }
        let got = run_case(&input, &cfg)?;
        let diff = max_abs(&got, &expected);
        cases.push(CaseResult {
            name: entry.name.clone(),
            dtype: entry.dtype,
            max_abs_diff: diff,
            passed: diff.is_some_and(|d| d <= tolerance),
        });
    }
    Ok(ConformanceReport { tolerance, cases })
}
