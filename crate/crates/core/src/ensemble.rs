//! Ensembles of independently trained encoders and their consensus
//! embeddings.
//!
//! An [`EmbeddingSet`] is stored as two files sharing a stem:
//! `<stem>.emb` holds the magic `GEMB`, a little-endian `u32` version,
//! `u64` row and column counts and the rows as little-endian `f64`;
//! `<stem>.ids` holds one glyph id per line in row order, preceded by a
//! `# script=<name> model=<id>` line.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::GlyphImage;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, EncoderConfig, HybridEncoder};

const MAGIC: &[u8; 4] = b"GEMB";
const VERSION: u32 = 1;

/// One frozen ensemble member.
#[derive(Debug, Clone)]
pub struct Member {
    pub seed: u64,
    pub path: Option<PathBuf>,
    pub encoder: HybridEncoder,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    /// Usually the target-script label.
    pub name: String,
    pub members: Vec<Member>,
    /// Members the ensemble was configured with; fewer trained means partial.
    pub expected: usize,
}

/// On-disk description of an ensemble directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleIndex {
    pub name: String,
    pub expected: usize,
    pub seeds: Vec<u64>,
    /// Checkpoint file names of trained members, relative to the index.
    pub checkpoints: Vec<String>,
    pub failures: Vec<String>,
}

pub const INDEX_FILE: &str = "ensemble.json";

impl Ensemble {
    pub fn new(name: impl Into<String>, members: Vec<Member>, expected: usize) -> Result<Self> {
        let name = name.into();
        if let Some(first) = members.first() {
            if let Some(m) = members.iter().find(|m| m.encoder.config != first.encoder.config) {
                return Err(Error::Config(format!(
                    "ensemble `{name}`: member with seed {} has a different encoder configuration",
                    m.seed
                )));
            }
        }
        Ok(Self { name, members, expected })
    }

    pub fn is_partial(&self) -> bool {
        self.members.len() < self.expected
    }

    pub fn config(&self) -> Option<&EncoderConfig> {
        self.members.first().map(|m| &m.encoder.config)
    }

    /// Errors on a partial (or empty) ensemble unless `allow_partial`.
    pub fn require_complete(&self, allow_partial: bool) -> Result<()> {
        if self.members.is_empty() || (self.is_partial() && !allow_partial) {
            return Err(Error::PartialEnsemble {
                name: self.name.clone(),
                trained: self.members.len(),
                expected: self.expected,
            });
        }
        Ok(())
    }

    /// Loads the members listed in `<dir>/ensemble.json`.
    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: EnsembleIndex = serde_json::from_str(&text)?;
        let mut members = Vec::new();
        for file in &index.checkpoints {
            let path = dir.join(file);
            let (encoder, _) = load_checkpoint(&path)?;
            members.push(Member { seed: encoder.seed, path: Some(path), encoder });
        }
        Self::new(index.name, members, index.expected)
    }
}

/// Embeddings of one script under one model, rows ordered by glyph id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub script: String,
    /// `model_<k>` or `consensus`.
    pub model_id: String,
    pub ids: Vec<String>,
    pub rows: Array2<f64>,
}

impl EmbeddingSet {
    pub fn new(script: impl Into<String>, model_id: impl Into<String>, ids: Vec<String>, rows: Array2<f64>) -> Result<Self> {
        let set = Self { script: script.into(), model_id: model_id.into(), ids, rows };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.rows.nrows() {
            return Err(Error::shape(format!("{} ids for {} rows", self.ids.len(), self.rows.nrows())));
        }
        if self.ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("{}/{}: glyph ids must be unique and sorted", self.script, self.model_id)));
        }
        if let Some((i, _)) = self.rows.outer_iter().enumerate().find(|(_, r)| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("non-finite embedding for glyph `{}`", self.ids[i])));
        }
        Ok(())
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let emb = stem.with_extension("emb");
        let io = |e| Error::io(&emb, e);
        let mut w = BufWriter::new(std::fs::File::create(&emb).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.rows.nrows() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.rows.ncols() as u64).to_le_bytes()).map_err(io)?;
        for v in self.rows.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)?;

        let ids = stem.with_extension("ids");
        let mut text = format!("# script={} model={}\n", self.script, self.model_id);
        for id in &self.ids {
            text.push_str(id);
            text.push('\n');
        }
        std::fs::write(&ids, text).map_err(|e| Error::io(&ids, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let emb = stem.with_extension("emb");
        let io = |e| Error::io(&emb, e);
        let mut r = BufReader::new(std::fs::File::open(&emb).map_err(io)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::invalid(format!("{}: not an embedding file", emb.display())));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        if u32::from_le_bytes(b4) != VERSION {
            return Err(Error::invalid(format!("{}: unsupported version", emb.display())));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io)?;
        let n = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(io)?;
        let d = u64::from_le_bytes(b8) as usize;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            r.read_exact(&mut b8).map_err(io)?;
            data.push(f64::from_le_bytes(b8));
        }
        let rows = Array2::from_shape_vec((n, d), data).map_err(|e| Error::shape(e.to_string()))?;

        let ids_path = stem.with_extension("ids");
        let f = std::fs::File::open(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let mut script = String::new();
        let mut model_id = String::new();
        let mut ids = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&ids_path, e))?;
            if let Some(h) = line.strip_prefix("# ") {
                for kv in h.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("script", v)) => script = v.to_string(),
                        Some(("model", v)) => model_id = v.to_string(),
                        _ => {}
                    }
                }
            } else if !line.is_empty() {
                ids.push(line);
            }
        }
        Self::new(script, model_id, ids, rows)
    }
}

fn sorted_by_id<'a>(glyphs: &[&'a GlyphImage]) -> Result<Vec<&'a GlyphImage>> {
    if glyphs.is_empty() {
        return Err(Error::invalid("cannot embed an empty corpus"));
    }
    let mut v = glyphs.to_vec();
    v.sort_by(|a, b| a.glyph_id.cmp(&b.glyph_id));
    if let Some(w) = v.windows(2).find(|w| w[0].glyph_id == w[1].glyph_id) {
        return Err(Error::invalid(format!("duplicate glyph id `{}`", w[0].glyph_id)));
    }
    Ok(v)
}

/// Inference-mode embeddings of `glyphs` under one encoder.
pub fn member_embed(
    encoder: &HybridEncoder,
    glyphs: &[&GlyphImage],
    script: &str,
    model_id: &str,
    batch: usize,
) -> Result<EmbeddingSet> {
    let sorted = sorted_by_id(glyphs)?;
    let side = encoder.config.input_size;
    if let Some(g) = sorted.iter().find(|g| g.pixels.dim() != (3, side, side)) {
        return Err(Error::Config(format!(
            "glyph `{}` is {:?} but the encoder expects (3, {side}, {side})",
            g.glyph_id,
            g.pixels.dim()
        )));
    }
    let f = encoder.embed(&sorted, batch)?;
    EmbeddingSet::new(script, model_id, sorted.iter().map(|g| g.glyph_id.clone()).collect(), f.fused)
}

/// Element-wise mean of member sets over identical glyph ids.
pub fn consensus_of(sets: &[EmbeddingSet]) -> Result<EmbeddingSet> {
    let first = sets.first().ok_or_else(|| Error::invalid("consensus needs at least one member"))?;
    // Accumulated as offsets from the first member so that identical
    // members reproduce it bit for bit.
    let mut offset = Array2::<f64>::zeros(first.rows.raw_dim());
    for s in sets {
        if s.ids != first.ids || s.rows.dim() != first.rows.dim() {
            return Err(Error::shape(format!("member `{}` covers different glyphs or dimensions", s.model_id)));
        }
        offset += &(&s.rows - &first.rows);
    }
    let mean = &first.rows + &(offset / sets.len() as f64);
    EmbeddingSet::new(first.script.clone(), "consensus", first.ids.clone(), mean)
}

/// Member sets (`model_0`, `model_1`, ...) and their consensus.
pub fn embed_all(
    ensemble: &Ensemble,
    glyphs: &[&GlyphImage],
    script: &str,
    batch: usize,
    allow_partial: bool,
) -> Result<(Vec<EmbeddingSet>, EmbeddingSet)> {
    ensemble.require_complete(allow_partial)?;
    let members = ensemble
        .members
        .iter()
        .enumerate()
        .map(|(k, m)| member_embed(&m.encoder, glyphs, script, &format!("model_{k}"), batch))
        .collect::<Result<Vec<_>>>()?;
    let consensus = consensus_of(&members)?;
    Ok((members, consensus))
}

pub fn consensus_embed(
    ensemble: &Ensemble,
    glyphs: &[&GlyphImage],
    script: &str,
    batch: usize,
    allow_partial: bool,
) -> Result<EmbeddingSet> {
    embed_all(ensemble, glyphs, script, batch, allow_partial).map(|(_, c)| c)
}
