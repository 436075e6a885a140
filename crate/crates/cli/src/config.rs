//! Config file loading with dotted-key overrides.
//!
//! The file is a JSON object whose keys are the run configuration fields
//! (all optional, defaults apply) plus an optional `matrix` section.
//! `--set key=value` overrides win over file values; values parse as JSON
//! where possible and fall back to strings.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sicl_core::harness::{LossKind, RunConfig};
use std::fs;
use std::path::Path;

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct ConfigFile {
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(default)]
    pub matrix: MatrixSection,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(default)]
pub struct MatrixSection {
    pub losses: Vec<LossKind>,
    /// Explicit seeds; empty means `seed .. seed + count`.
    pub seeds: Vec<u64>,
    pub seed_count: u64,
}

impl Default for MatrixSection {
    fn default() -> Self {
        MatrixSection {
            losses: vec![LossKind::Nce, LossKind::Sicl],
            seeds: Vec::new(),
            seed_count: 3,
        }
    }
}

impl MatrixSection {
    pub fn seeds_for(&self, base_seed: u64) -> Vec<u64> {
        if self.seeds.is_empty() {
            (base_seed..base_seed + self.seed_count).collect()
        } else {
            self.seeds.clone()
        }
    }
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile {
            run: RunConfig::default(),
            matrix: MatrixSection::default(),
        }
    }
}

/// Deep field-wise merge: objects recurse, everything else (including
/// arrays) is replaced wholesale.
fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(base), serde_json::Value::Object(overlay)) => {
            for (key, value) in overlay {
                match base.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    None => {
                        base.insert(key, value);
                    }
                }
            }
        }
        (base, overlay) => *base = overlay,
    }
}

pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<ConfigFile> {
    let mut value =
        serde_json::to_value(ConfigFile::default()).context("serializing default config")?;
    if let Some(p) = path {
        let text = fs::read_to_string(p)
            .with_context(|| format!("reading config file {}", p.display()))?;
        let file_value: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config file {}", p.display()))?;
        if !file_value.is_object() {
            bail!("config root must be a JSON object");
        }
        merge(&mut value, file_value);
    }
    for entry in overrides {
        let (key, raw) = entry
            .split_once('=')
            .with_context(|| format!("override {entry:?} is not KEY=VALUE"))?;
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        set_dotted(&mut value, key, parsed)?;
    }
    if let Some(seed) = seed {
        set_dotted(&mut value, "seed", serde_json::json!(seed))?;
    }
    let file: ConfigFile =
        serde_json::from_value(value).context("config does not match the run schema")?;
    Ok(file)
}

fn set_dotted(value: &mut serde_json::Value, key: &str, new: serde_json::Value) -> Result<()> {
    let mut cursor = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .with_context(|| format!("override {key:?}: {part:?} is not an object"))?;
        if i == parts.len() - 1 {
            obj.insert(part.to_string(), new);
            return Ok(());
        }
        cursor = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    unreachable!("split produces at least one part")
}
