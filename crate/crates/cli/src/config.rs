//! Run configuration: one TOML file, layered `--set key=value` overrides,
//! and the output-root environment variable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use glyphsim::analysis::Subsample;
use glyphsim::corpus::PreprocessConfig;
use glyphsim::model::{EncoderConfig, Preset};
use glyphsim::structure::TsneConfig;
use glyphsim::synthetic::{default_fixture, SyntheticScriptSpec};
use glyphsim::trainer::TrainConfig;

use crate::UserError;

pub const OUT_ENV: &str = "GLYPHSIM_OUT";
pub const DEFAULT_OUT: &str = "runs/default";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.7, val: 0.2, test: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSection {
    pub alpha: f64,
    pub subsample: Subsample,
    /// Comparison scripts; defaults to every manifest entry with role
    /// `comparison`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparisons: Option<Vec<String>>,
    /// Target scripts; defaults to every entry with role `target`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<String>>,
    /// Ensemble whose embedding space is used for every target. By default
    /// each target is analysed in its own ensemble's space.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub space: Option<String>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { alpha: 0.05, subsample: Subsample::default(), comparisons: None, targets: None, space: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionSection {
    pub tsne: TsneConfig,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        Self { tsne: TsneConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcamSection {
    /// Glyphs explained per script when none are named.
    pub per_script: usize,
    /// Ensemble member whose encoder is explained.
    pub member: usize,
}

impl Default for GradcamSection {
    fn default() -> Self {
        Self { per_script: 4, member: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus manifest (TOML).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Run directory; the environment variable and `--out` take precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Root seed for splits, composites, augmentation streams and analysis.
    pub seed: u64,
    pub preset: Preset,
    pub embed_batch: usize,
    pub split: SplitConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisSection,
    pub projection: ProjectionSection,
    pub gradcam: GradcamSection,
    pub synthetic: Vec<SyntheticScriptSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            output: None,
            seed: 0,
            preset: Preset::Paper,
            embed_batch: 32,
            split: SplitConfig::default(),
            preprocess: PreprocessConfig::default(),
            train: TrainConfig::default(),
            analysis: AnalysisSection::default(),
            projection: ProjectionSection::default(),
            gradcam: GradcamSection::default(),
            synthetic: default_fixture(30),
        }
    }
}

impl RunConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig::from_preset(self.preset)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.split;
        if ((s.train + s.val + s.test) - 1.0).abs() > 1e-9 || s.train <= 0.0 || s.val <= 0.0 || s.test < 0.0 {
            return Err(UserError::new(format!("split ratios must be positive and sum to 1 (got {}/{}/{})", s.train, s.val, s.test)).into());
        }
        if !(self.analysis.alpha > 0.0 && self.analysis.alpha < 1.0) {
            return Err(UserError::new(format!("analysis.alpha must lie in (0, 1), got {}", self.analysis.alpha)).into());
        }
        if self.embed_batch == 0 {
            return Err(UserError::new("embed_batch must be positive").into());
        }
        self.train.validate().map_err(|e| UserError::new(format!("train: {e}")))?;
        Ok(())
    }
}

/// Sets `a.b.c = value` in a TOML table, creating intermediate tables.
/// The value is parsed as a TOML literal, falling back to a string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!(UserError::new(format!("override `{assignment}` is not of the form key=value")));
    };
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        bail!(UserError::new(format!("override `{assignment}` has an empty key")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| UserError::new(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Flattens a TOML value into dotted keys; arrays stay whole.
fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Resolved configuration plus a record of where it departs from defaults.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub out: PathBuf,
    pub source: Option<PathBuf>,
    pub cli_overrides: Vec<String>,
    /// Dotted key -> value for every setting that differs from the defaults.
    pub changed: BTreeMap<String, String>,
}

pub fn load(path: Option<&Path>, sets: &[String], out_flag: Option<&Path>) -> Result<Loaded> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| UserError::new(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| UserError::new(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for s in sets {
        apply_override(&mut table, s)?;
    }
    let mut config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| UserError::new(format!("invalid configuration: {e}")))?;
    // Relative manifest paths are read relative to the config file.
    if let (Some(m), Some(p)) = (&config.manifest, path) {
        if m.is_relative() {
            let base = p.parent().unwrap_or(Path::new(""));
            config.manifest = Some(base.join(m));
        }
    }
    config.validate()?;
    let env_out = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let out = out_flag
        .map(Path::to_path_buf)
        .or(env_out)
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));

    let mut defaults = BTreeMap::new();
    flatten("", &toml::Value::try_from(RunConfig::default()).context("serialising defaults")?, &mut defaults);
    let mut now = BTreeMap::new();
    flatten("", &toml::Value::try_from(&config).context("serialising config")?, &mut now);
    let changed = now.into_iter().filter(|(k, v)| defaults.get(k) != Some(v)).collect();
    Ok(Loaded { config, out, source: path.map(Path::to_path_buf), cli_overrides: sets.to_vec(), changed })
}
