//! JSON configuration files.
//!
//! Every file carries `"schema_version": 1`. A GRAG config looks like
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "group_selector": "explicit_range",
//!   "i_start": 24,
//!   "i_end": 40,
//!   "lambda": 1.0,
//!   "delta": 1.05,
//!   "target_layers": []
//! }
//! ```
//!
//! With a `source_tokens` or `text_tokens` selector, `i_start`/`i_end` may be
//! omitted and are resolved against the segment layout; if present they
//! must agree with it.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attention::SegmentLayout;
use crate::error::{GragError, Result};
use crate::grag::{GragConfig, GroupSelector};

pub const SCHEMA_VERSION: u32 = 1;

pub fn check_schema(found: u32, path: &Path) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(GragError::config(format!(
            "{}: schema_version {found} is not supported (expected {SCHEMA_VERSION})",
            path.display()
        )));
    }
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GragError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| GragError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|source| GragError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| GragError::io(path, e))
}

/// On-disk form of a [`GragConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GragConfigFile {
    pub schema_version: u32,
    #[serde(default)]
    pub group_selector: GroupSelector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_end: Option<usize>,
    pub lambda: f64,
    pub delta: f64,
    #[serde(default)]
    pub target_layers: BTreeSet<usize>,
}

impl GragConfigFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file: Self = read_json(path)?;
        check_schema(file.schema_version, path)?;
        Ok(file)
    }

    /// Writes the fully resolved range, so readers never need the layout.
    pub fn from_config(cfg: &GragConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            group_selector: cfg.group_selector,
            i_start: Some(cfg.i_start),
            i_end: Some(cfg.i_end),
            lambda: cfg.lambda,
            delta: cfg.delta,
            target_layers: cfg.target_layers.clone(),
        }
    }

    /// Resolves the group range; presets need a layout unless the range is
    /// spelled out.
    pub fn resolve(&self, layout: Option<&SegmentLayout>) -> Result<GragConfig> {
        let preset = layout.and_then(|l| self.group_selector.preset_range(l));
        let (start, end) = match (self.i_start, self.i_end, preset) {
            (Some(s), Some(e), Some(p)) if (s, e) != (p.start, p.end) => {
                return Err(GragError::config(format!(
                    "{:?} selects [{}, {}) for this layout but the file says [{s}, {e})",
                    self.group_selector, p.start, p.end
                )))
            }
            (Some(s), Some(e), _) => (s, e),
            (None, None, Some(p)) => (p.start, p.end),
            (None, None, None) if self.group_selector == GroupSelector::ExplicitRange => {
                return Err(GragError::config(
                    "explicit_range requires i_start and i_end",
                ))
            }
            (None, None, None) => {
                return Err(GragError::config(
                    "a preset group selector needs a segment layout to resolve its range",
                ))
            }
            _ => {
                return Err(GragError::config(
                    "i_start and i_end must be given together",
                ))
            }
        };
        let mut cfg = GragConfig::new(start, end, self.lambda, self.delta)?;
        cfg.group_selector = self.group_selector;
        cfg.target_layers = self.target_layers.clone();
        Ok(cfg)
    }
}
