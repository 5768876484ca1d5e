//! On-disk form of a prepared corpus: `corpus.json` with glyph metadata and
//! `intensity.f32`, the little-endian intensity planes in glyph order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{normalize_intensity, GlyphImage, Role, ScriptCorpus, SplitLabel};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct GlyphMeta {
    glyph_id: String,
    provenance: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    role: Role,
    side: usize,
    glyphs: Vec<GlyphMeta>,
    splits: Option<Vec<SplitLabel>>,
}

const META: &str = "corpus.json";
const DATA: &str = "intensity.f32";

/// Writes a standardised corpus to `dir` (created if missing).
pub fn save_prepared(corpus: &ScriptCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let side = corpus.glyphs.first().map(|g| g.pixels.dim().1).unwrap_or(0);
    let header = Header {
        name: corpus.name.clone(),
        role: corpus.role,
        side,
        glyphs: corpus
            .glyphs
            .iter()
            .map(|g| GlyphMeta {
                glyph_id: g.glyph_id.clone(),
                provenance: g.provenance.clone(),
            })
            .collect(),
        splits: corpus.splits.clone(),
    };
    let meta = dir.join(META);
    std::fs::write(&meta, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&meta, e))?;

    let data = dir.join(DATA);
    let file = std::fs::File::create(&data).map_err(|e| Error::io(&data, e))?;
    let mut w = BufWriter::new(file);
    for g in &corpus.glyphs {
        if !g.normalized || g.pixels.dim().1 != side || g.pixels.dim().2 != side {
            return Err(Error::invalid(format!(
                "glyph `{}` is not standardised to {side}x{side}",
                g.glyph_id
            )));
        }
        for v in g.intensity().iter() {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(|e| Error::io(&data, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&data, e))
}

/// Reads a corpus written by [`save_prepared`].
pub fn load_prepared(dir: &Path) -> Result<ScriptCorpus> {
    let meta = dir.join(META);
    let text = std::fs::read(&meta).map_err(|e| Error::io(&meta, e))?;
    let header: Header = serde_json::from_slice(&text)?;
    let data = dir.join(DATA);
    let file = std::fs::File::open(&data).map_err(|e| Error::io(&data, e))?;
    let mut r = BufReader::new(file);
    let plane = header.side * header.side;
    let mut buf = vec![0u8; plane * 4];
    let mut glyphs = Vec::with_capacity(header.glyphs.len());
    for m in header.glyphs {
        r.read_exact(&mut buf).map_err(|e| Error::io(&data, e))?;
        let vals: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let gray = Array2::from_shape_vec((header.side, header.side), vals).map_err(|e| Error::shape(e.to_string()))?;
        glyphs.push(GlyphImage {
            pixels: normalize_intensity(gray.view()),
            script: header.name.clone(),
            glyph_id: m.glyph_id,
            provenance: m.provenance,
            normalized: true,
        });
    }
    let corpus = ScriptCorpus {
        name: header.name,
        role: header.role,
        glyphs,
        splits: header.splits,
    };
    corpus.validate()?;
    Ok(corpus)
}
