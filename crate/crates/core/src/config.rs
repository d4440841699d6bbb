//! Experiment configuration: one TOML document holding the data source,
//! synthesis, model, training, metric and sweep settings.
//!
//! `model.preset` selects a base model configuration (`desk`, `full`,
//! `reduced`) that the remaining `model.*` keys refine. Overrides given as
//! `dotted.key=value` pairs are applied before validation; values parse as
//! TOML and fall back to plain strings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{folder, manifest, split_protocol, synth, DatasetSplit, Label, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricMode;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `train.csv`, `dev.csv` and `test.csv` manifests.
    pub dir: Option<PathBuf>,
    /// Image-folder root (`<root>/<label_dir>/[<group>/]<frame>.png`).
    pub folder: Option<PathBuf>,
    /// Label of every label directory under `folder`.
    pub label_map: BTreeMap<String, Label>,
    /// Train/dev/test ratios for synthetic or folder data.
    pub split: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            folder: None,
            label_map: BTreeMap::new(),
            split: [0.6, 0.2, 0.2],
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub mode: MetricMode,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { mode: MetricMode::Frame }
    }
}

/// Axes understood by the ablation sweep.
pub const ABLATION_AXES: [&str; 6] = ["branch", "selector", "patch_size", "steps", "scheme", "fusion"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub axis: Option<String>,
    /// Values to sweep; empty means the axis default.
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn set_path(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for (i, key) in parents.iter().enumerate() {
        let entry = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a table", path[..=i].join("."))))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Replaces `model.preset` with the preset's values, refined by the other
/// `model` keys.
fn expand_preset(root: &mut toml::Table) -> Result<()> {
    let Some(model) = root.get_mut("model").and_then(toml::Value::as_table_mut) else {
        return Ok(());
    };
    let Some(preset) = model.remove("preset") else {
        return Ok(());
    };
    let name = preset
        .as_str()
        .ok_or_else(|| Error::Config("model.preset: expected a string".into()))?;
    let base = toml::Value::try_from(ModelConfig::preset(name)?).map_err(|e| Error::Config(e.to_string()))?;
    let mut merged = base.as_table().cloned().unwrap_or_default();
    for (k, v) in std::mem::take(model) {
        merged.insert(k, v);
    }
    *model = merged;
    Ok(())
}

impl ExperimentConfig {
    /// Parses a TOML document, applying `overrides` (`a.b=v`) first.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            set_path(&mut root, &path, value)?;
        }
        expand_preset(&mut root)?;
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(root)).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.data.dir.is_some() && self.data.folder.is_some() {
            return Err(Error::Config("set at most one of data.dir and data.folder".into()));
        }
        if self.data.dir.is_none() && self.synth.image_size != self.model.input_size {
            return Err(Error::Config(format!(
                "synth.image_size {} differs from model.input_size {}",
                self.synth.image_size, self.model.input_size
            )));
        }
        if let Some(axis) = &self.ablate.axis {
            if !ABLATION_AXES.contains(&axis.as_str()) {
                return Err(Error::Config(format!(
                    "ablate.axis `{axis}` is not one of {}",
                    ABLATION_AXES.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Resolves the configured data source into a train/dev/test split.
    /// Relative paths are taken relative to `base`.
    pub fn load_split(&self, base: &Path) -> Result<DatasetSplit> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let ratios = (self.data.split[0], self.data.split[1], self.data.split[2]);
        let size = Some(self.model.input_size);
        if let Some(dir) = &self.data.dir {
            let dir = resolve(dir);
            return Ok(DatasetSplit {
                train: manifest::read_manifest(&dir.join("train.csv"), size)?,
                dev: manifest::read_manifest(&dir.join("dev.csv"), size)?,
                test: manifest::read_manifest(&dir.join("test.csv"), size)?,
            });
        }
        if let Some(root) = &self.data.folder {
            let samples = folder::load_image_folder(&resolve(root), &self.data.label_map, self.model.input_size)?;
            return split_protocol(samples, ratios, self.data.split_seed);
        }
        split_protocol(synth::generate_dataset(&self.synth)?, ratios, self.data.split_seed)
    }
}
