//! Where each command reads and writes inside a run directory.

use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

use glyphsim::corpus::Role;

use crate::UserError;

pub struct Run {
    pub root: PathBuf,
}

/// `prepared/index.json`: the corpora written by `prepare`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreparedIndex {
    pub corpora: Vec<PreparedEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreparedEntry {
    pub name: String,
    pub role: Role,
    pub glyphs: usize,
    pub split: bool,
}

/// `embeddings/<space>/index.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub space: String,
    pub scripts: Vec<String>,
    pub models: Vec<String>,
    pub partial: bool,
}

impl Run {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn synthetic_dir(&self) -> PathBuf {
        self.root.join("synthetic")
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.root.join("prepared")
    }

    pub fn prepared(&self, name: &str) -> PathBuf {
        self.prepared_dir().join(name)
    }

    pub fn models(&self, target: &str) -> PathBuf {
        self.root.join("models").join(target)
    }

    pub fn embeddings(&self, space: &str) -> PathBuf {
        self.root.join("embeddings").join(space)
    }

    pub fn embedding_stem(&self, space: &str, script: &str, model: &str) -> PathBuf {
        self.embeddings(space).join(script).join(model)
    }

    pub fn tables(&self) -> PathBuf {
        self.root.join("tables")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn gradcam(&self) -> PathBuf {
        self.root.join("gradcam")
    }

    pub fn run_manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }

    pub fn index(&self) -> PathBuf {
        self.root.join("index.json")
    }

    pub fn prepared_index(&self) -> Result<PreparedIndex> {
        read_json(&self.prepared_dir().join("index.json"), "prepared corpora", "prepare")
    }

    pub fn embedding_index(&self, space: &str) -> Result<EmbeddingIndex> {
        read_json(&self.embeddings(space).join("index.json"), &format!("embeddings in the `{space}` space"), "embed")
    }
}

/// Fails with an error naming the command that produces `path`.
pub fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(UserError::new(format!("missing {what} ({}); run `glyphsim {producer}` first", path.display())).into())
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str, producer: &str) -> Result<T> {
    require(path, what, producer)?;
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}
