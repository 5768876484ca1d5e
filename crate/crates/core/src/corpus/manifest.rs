//! Declarative corpus manifest (TOML).
//!
//! ```toml
//! root = "data"            # optional; entries without `dir` use <root>/<name>
//!
//! [[entry]]
//! name = "Indus"
//! role = "target"
//!
//! [[entry]]
//! name = "Old-Naxi"
//! role = "comparison"
//! dir = "scans/old_naxi"
//! denoise = true
//!
//! [[entry]]
//! name = "TYC"
//! role = "comparison"
//! size = 300
//! composite = [
//!   { source = "Old-Naxi", proportion = 0.3333333333333333 },
//!   { source = "Ba-Shu", proportion = 0.3333333333333333 },
//!   { source = "Yi", proportion = 0.3333333333333334 },
//! ]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Role;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositePart {
    pub source: String,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub denoise: bool,
    /// Entries with a recipe are built from other entries instead of a
    /// directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composite: Option<Vec<CompositePart>>,
    /// Composite size; defaults to the sum of the source sizes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    /// Load as a helper source for composites only; not analysed on its own.
    #[serde(default)]
    pub source_only: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default, rename = "entry")]
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a manifest; relative paths are resolved against the manifest's
    /// own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let Some(root) = &m.root {
            if root.is_relative() {
                m.root = Some(base.join(root));
            }
        }
        for e in &mut m.entries {
            if let Some(d) = &e.dir {
                if d.is_relative() {
                    e.dir = Some(base.join(d));
                }
            }
        }
        Ok(m)
    }

    pub fn entry(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Directory an entry is loaded from.
    pub fn dir_of(&self, entry: &ManifestEntry) -> Option<PathBuf> {
        entry
            .dir
            .clone()
            .or_else(|| self.root.as_ref().map(|r| r.join(&entry.name)))
    }

    /// Checks names, composite recipes and (optionally) that directories
    /// exist.
    pub fn validate(&self, check_dirs: bool) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if e.name.is_empty() {
                return Err(Error::Config("manifest entry with empty name".into()));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate manifest entry `{}`", e.name)));
            }
        }
        for e in &self.entries {
            match &e.composite {
                Some(parts) => {
                    if parts.is_empty() {
                        return Err(Error::Config(format!("composite `{}` has no sources", e.name)));
                    }
                    let total: f64 = parts.iter().map(|p| p.proportion).sum();
                    if (total - 1.0).abs() > 1e-6 || parts.iter().any(|p| p.proportion < 0.0) {
                        return Err(Error::Config(format!(
                            "composite `{}` proportions must be non-negative and sum to 1 (got {total})",
                            e.name
                        )));
                    }
                    for p in parts {
                        match self.entry(&p.source) {
                            None => {
                                return Err(Error::Config(format!(
                                    "composite `{}` references unknown entry `{}`",
                                    e.name, p.source
                                )))
                            }
                            Some(src) if src.composite.is_some() => {
                                return Err(Error::Config(format!(
                                    "composite `{}` cannot nest composite `{}`",
                                    e.name, p.source
                                )))
                            }
                            _ => {}
                        }
                    }
                }
                None => {
                    let dir = self.dir_of(e).ok_or_else(|| {
                        Error::Config(format!("entry `{}` has no dir and the manifest has no root", e.name))
                    })?;
                    if check_dirs && !dir.is_dir() {
                        return Err(Error::Config(format!(
                            "entry `{}`: directory {} does not exist",
                            e.name,
                            dir.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
root = "data"

[[entry]]
name = "A"
role = "target"

[[entry]]
name = "B"
role = "comparison"
denoise = true
source_only = true

[[entry]]
name = "C"
role = "comparison"
dir = "elsewhere/c"
source_only = true

[[entry]]
name = "Mix"
role = "comparison"
size = 40
composite = [ { source = "B", proportion = 0.5 }, { source = "C", proportion = 0.5 } ]
"#;

    #[test]
    fn parses_and_validates() {
        let m = CorpusManifest::from_toml(SAMPLE).unwrap();
        assert_eq!(m.entries.len(), 4);
        assert!(m.entries[1].denoise);
        assert_eq!(m.dir_of(&m.entries[0]).unwrap(), PathBuf::from("data/A"));
        m.validate(false).unwrap();
        assert!(m.validate(true).is_err());
    }

    #[test]
    fn rejects_bad_proportions() {
        let bad = SAMPLE.replace("proportion = 0.5 }, { source = \"C\", proportion = 0.5", "proportion = 0.5 }, { source = \"C\", proportion = 0.6");
        let m = CorpusManifest::from_toml(&bad).unwrap();
        assert!(m.validate(false).is_err());
    }

    #[test]
    fn rejects_unknown_source() {
        let bad = SAMPLE.replace("source = \"C\"", "source = \"Z\"");
        let m = CorpusManifest::from_toml(&bad).unwrap();
        assert!(m.validate(false).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let m = CorpusManifest::from_toml(SAMPLE).unwrap();
        let again = CorpusManifest::from_toml(&m.to_toml().unwrap()).unwrap();
        assert_eq!(m, again);
    }
}
