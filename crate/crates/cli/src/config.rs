//! Layered run configuration: a TOML file, then `--set key=value` overrides
//! (also read from `ISGGEN_SET`), then dedicated flags. The fully resolved
//! form is content-hashed and written next to every run's outputs.
//!
//! ```toml
//! dataset = "data/synth"
//! out_dir = "runs/first"
//!
//! [model]
//! preset = "default"   # or "tiny"
//! [model.crn]          # optional: replaces the preset's section
//! output_resolution = 64
//! channels = [64, 32, 16]
//!
//! [train]
//! iterations = 2000
//! seed = 7
//! [train.weights]
//! perceptual = 0.0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use isggen_core::adversary::DiscConfig;
use isggen_core::config::{content_hash, ModelConfig};
use isggen_core::crn::CrnConfig;
use isggen_core::gcn::GcnConfig;
use isggen_core::layoutnet::LayoutConfig;
use isggen_core::trainer::TrainConfig;
use isggen_core::Vocabulary;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Default,
    Tiny,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub gcn: Option<GcnConfig>,
    pub layout: Option<LayoutConfig>,
    pub crn: Option<CrnConfig>,
    pub disc: Option<DiscConfig>,
    pub perceptual_seed: Option<u64>,
}

impl ModelSection {
    /// The architecture for a dataset vocabulary.
    pub fn resolve(&self, vocabulary: Vocabulary) -> ModelConfig {
        let mut cfg = match self.preset {
            Preset::Default => ModelConfig::new(vocabulary),
            Preset::Tiny => ModelConfig::tiny(vocabulary),
        };
        if let Some(s) = &self.gcn {
            cfg.gcn = s.clone();
        }
        if let Some(s) = &self.layout {
            cfg.layout = s.clone();
        }
        if let Some(s) = &self.crn {
            cfg.crn = s.clone();
        }
        if let Some(s) = &self.disc {
            cfg.disc = s.clone();
        }
        if let Some(s) = self.perceptual_seed {
            cfg.perceptual_seed = s;
        }
        cfg
    }
}

/// The run file as written by the user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
}

/// A run with every default filled in. `hash` covers all of it except the
/// output directory, so the same run written elsewhere hashes the same.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub dataset: PathBuf,
    pub dataset_id: String,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub hash: String,
}

pub const RESOLVED_FILE: &str = "run_config.json";

impl ResolvedRun {
    pub fn new(run: &RunConfig, vocabulary: Vocabulary, dataset_id: String) -> CliResult<Self> {
        let model = run.model.resolve(vocabulary);
        model.validate().map_err(|e| CliError::config(format!("model config: {e}")))?;
        run.train.validate().map_err(|e| CliError::config(format!("train config: {e}")))?;
        let hash = content_hash(&(&model, &run.train, &dataset_id));
        Ok(Self { dataset: run.dataset.clone(), dataset_id, out_dir: run.out_dir.clone(), model, train: run.train.clone(), hash })
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(RESOLVED_FILE);
        let bytes = serde_json::to_vec_pretty(self).expect("resolved config serializes");
        std::fs::write(&path, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

/// Set `dotted.key` in a TOML table. The value is parsed as TOML, falling
/// back to a plain string so `--set dataset=data/x` needs no quoting.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{assignment}` is not of the form key=value")))?;
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("override key `{key}` is malformed")));
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override key `{key}`: `{part}` is not a table")))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Read the run file and apply overrides in order.
pub fn load_run_config(path: &Path, overrides: &[String]) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut run: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(format!("{}: {e}", path.display())))?;
    // Relative paths in the file are relative to the file.
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [&mut run.dataset, &mut run.out_dir] {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(run)
}
