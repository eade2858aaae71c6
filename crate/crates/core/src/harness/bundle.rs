//! Directories of captured Q/K/V tensors.
//!
//! A bundle is a directory holding `manifest.json` and one NPY file per
//! `(layer, step, name)` entry:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "producer": "my-pipeline 0.3",
//!   "dtype": "f32",
//!   "layout": { "n_text": 8, "n_img": 16 },
//!   "heads": 4,
//!   "head_dim": 32,
//!   "entries": [ { "layer": 0, "step": 0, "name": "K", "file": "l0_s0_K.npy" } ]
//! }
//! ```
//!
//! Every tensor has shape `[batch, S, H, D]` with `S = n_text + 2 * n_img`
//! and `batch` defaulting to 1. Q and K are expected after RoPE.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{check_schema, read_json, write_json, SCHEMA_VERSION};
use super::npy::{read_any, write_any, AnyTensor};
use crate::attention::SegmentLayout;
use crate::error::{GragError, Result};
use crate::scalar::DType;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TensorName {
    Q,
    K,
    V,
}

impl fmt::Display for TensorName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TensorName::Q => "Q",
            TensorName::K => "K",
            TensorName::V => "V",
        })
    }
}

impl FromStr for TensorName {
    type Err = GragError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Q" | "q" => Ok(TensorName::Q),
            "K" | "k" => Ok(TensorName::K),
            "V" | "v" => Ok(TensorName::V),
            _ => Err(GragError::config(format!("unknown tensor name {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntryKey {
    pub layer: usize,
    pub step: usize,
    pub name: TensorName,
}

impl fmt::Display for EntryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {} step {} {}", self.layer, self.step, self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub layer: usize,
    pub step: usize,
    pub name: TensorName,
    pub file: String,
}

impl ManifestEntry {
    pub fn key(&self) -> EntryKey {
        EntryKey {
            layer: self.layer,
            step: self.step,
            name: self.name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub producer: String,
    pub dtype: DType,
    pub layout: SegmentLayout,
    pub heads: usize,
    pub head_dim: usize,
    #[serde(default = "one")]
    pub batch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rope_base: Option<f64>,
    pub entries: Vec<ManifestEntry>,
}

fn one() -> usize {
    1
}

impl Manifest {
    pub fn new(
        producer: impl Into<String>,
        dtype: DType,
        layout: SegmentLayout,
        heads: usize,
        head_dim: usize,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            producer: producer.into(),
            dtype,
            layout,
            heads,
            head_dim,
            batch: 1,
            rope_base: None,
            entries: Vec::new(),
        }
    }

    pub fn expected_shape(&self) -> [usize; 4] {
        [self.batch, self.layout.total(), self.heads, self.head_dim]
    }

    /// Conventional file name for an entry.
    pub fn file_name(key: &EntryKey) -> String {
        format!("l{}_s{}_{}.npy", key.layer, key.step, key.name)
    }
}

/// A fully loaded and validated bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpBundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub tensors: BTreeMap<EntryKey, AnyTensor>,
}

impl DumpBundle {
    pub fn get(&self, layer: usize, step: usize, name: TensorName) -> Option<&AnyTensor> {
        self.tensors.get(&EntryKey { layer, step, name })
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.tensors.keys().map(|k| k.layer).collect();
        v.dedup();
        v
    }

    pub fn steps(&self, layer: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .tensors
            .keys()
            .filter(|k| k.layer == layer)
            .map(|k| k.step)
            .collect();
        v.dedup();
        v
    }
}

/// Reads `manifest.json` and every referenced tensor, failing on the first
/// missing file, undecodable tensor, dtype or shape mismatch, or duplicate
/// entry.
pub fn load_dump_bundle(dir: impl AsRef<Path>) -> Result<DumpBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(GragError::Bundle {
            path: dir.to_path_buf(),
            message: format!("no {MANIFEST} found"),
        });
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    check_schema(manifest.schema_version, &manifest_path)?;
    let fail = |message: String| GragError::Bundle {
        path: manifest_path.clone(),
        message,
    };
    if manifest.heads == 0 || manifest.head_dim == 0 || manifest.batch == 0 {
        return Err(fail("heads, head_dim and batch must be >= 1".into()));
    }
    if manifest.entries.is_empty() {
        return Err(fail("manifest lists no entries".into()));
    }
    let want = manifest.expected_shape();
    let mut tensors = BTreeMap::new();
    for entry in &manifest.entries {
        let key = entry.key();
        if tensors.contains_key(&key) {
            return Err(fail(format!("duplicate entry for {key}")));
        }
        let path = dir.join(&entry.file);
        if !path.is_file() {
            return Err(fail(format!(
                "{key}: file {} does not exist",
                path.display()
            )));
        }
        let t = read_any(&path)?;
        if t.dtype() != manifest.dtype {
            return Err(fail(format!(
                "{key}: {} holds {} but the manifest declares {}",
                entry.file,
                t.dtype(),
                manifest.dtype
            )));
        }
        if t.shape() != want {
            return Err(fail(format!(
                "{key}: {} has shape {:?} but the manifest implies {want:?}",
                entry.file,
                t.shape()
            )));
        }
        tensors.insert(key, t);
    }
    Ok(DumpBundle {
        dir: dir.to_path_buf(),
        manifest,
        tensors,
    })
}

/// Writes `tensors` under their conventional file names plus a manifest.
/// `manifest.entries` is replaced.
pub fn write_dump_bundle(
    dir: impl AsRef<Path>,
    mut manifest: Manifest,
    tensors: &BTreeMap<EntryKey, AnyTensor>,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| GragError::io(dir, e))?;
    manifest.entries.clear();
    for (key, t) in tensors {
        let file = Manifest::file_name(key);
        write_any(dir.join(&file), t)?;
        manifest.entries.push(ManifestEntry {
            layer: key.layer,
            step: key.step,
            name: key.name,
            file,
        });
    }
    write_json(dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn tiny(dir: &Path) -> Manifest {
        let layout = SegmentLayout::new(1, 1).unwrap();
        let m = Manifest::new("test", DType::F32, layout, 1, 2);
        let mut tensors = BTreeMap::new();
        for name in [TensorName::Q, TensorName::K, TensorName::V] {
            let key = EntryKey {
                layer: 0,
                step: 0,
                name,
            };
            let t = Tensor::<f32>::from_fn([1, 3, 1, 2], |i| i as f32).unwrap();
            tensors.insert(key, t.into());
        }
        write_dump_bundle(dir, m, &tensors).unwrap()
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        tiny(dir.path());
        let b = load_dump_bundle(dir.path()).unwrap();
        assert_eq!(b.tensors.len(), 3);
        assert_eq!(b.layers(), vec![0]);
        assert_eq!(b.get(0, 0, TensorName::K).unwrap().shape(), &[1, 3, 1, 2]);
    }

    fn err_text(dir: &Path) -> String {
        load_dump_bundle(dir).unwrap_err().to_string()
    }

    #[test]
    fn missing_file_named() {
        let dir = tempfile::tempdir().unwrap();
        tiny(dir.path());
        fs::remove_file(dir.path().join("l0_s0_V.npy")).unwrap();
        let e = err_text(dir.path());
        assert!(
            e.contains("layer 0 step 0 V") && e.contains("does not exist"),
            "{e}"
        );
    }

    #[test]
    fn shape_mismatch_names_layer_and_step() {
        let dir = tempfile::tempdir().unwrap();
        tiny(dir.path());
        let t = Tensor::<f32>::zeros([1, 4, 1, 2]).unwrap();
        crate::harness::npy::write_tensor(dir.path().join("l0_s0_K.npy"), &t).unwrap();
        let e = err_text(dir.path());
        assert!(e.contains("layer 0 step 0 K") && e.contains("shape"), "{e}");
    }

    #[test]
    fn truncated_tensor_names_file() {
        let dir = tempfile::tempdir().unwrap();
        tiny(dir.path());
        let p = dir.path().join("l0_s0_Q.npy");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        match load_dump_bundle(dir.path()) {
            Err(GragError::Npy { path, .. }) => assert_eq!(path, p),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dtype_mismatch_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny(dir.path());
        m.dtype = DType::F64;
        write_json(dir.path().join(MANIFEST), &m).unwrap();
        assert!(err_text(dir.path()).contains("declares f64"));
        m.dtype = DType::F32;
        m.entries.push(m.entries[0].clone());
        write_json(dir.path().join(MANIFEST), &m).unwrap();
        assert!(err_text(dir.path()).contains("duplicate"));
    }

    #[test]
    fn empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dump_bundle(dir.path()),
            Err(GragError::Bundle { .. })
        ));
    }
}
