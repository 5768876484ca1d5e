//! Single-file checkpoints: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header (config, seed, parameter names and shapes, free
//! metadata), then every parameter as little-endian `f64` in header order.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, HybridEncoder};
use crate::error::{Error, Result};
use crate::nn::Module;

const MAGIC: &[u8; 8] = b"GSCKPT01";

/// Free-form provenance stored beside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_idx: Option<usize>,
    pub epoch: Option<usize>,
    pub val_loss: Option<f64>,
    pub ensemble: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    seed: u64,
    meta: CheckpointMeta,
    params: Vec<Entry>,
}

pub fn save_checkpoint(enc: &HybridEncoder, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut params = Vec::new();
    enc.visit_params(&mut |p| params.push(Entry { name: p.name.clone(), shape: p.value.shape().to_vec() }));
    let header = serde_json::to_vec(&Header { config: enc.config.clone(), seed: enc.seed, meta: meta.clone(), params })?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    let mut err = None;
    enc.visit_params(&mut |p| {
        if err.is_some() {
            return;
        }
        for v in p.value.iter() {
            if let Err(e) = w.write_all(&v.to_le_bytes()) {
                err = Some(e);
                return;
            }
        }
    });
    if let Some(e) = err {
        return Err(io(e));
    }
    w.flush().map_err(io)
}

/// Rebuilds the encoder from the stored config and overwrites every
/// parameter by name.
pub fn load_checkpoint(path: &Path) -> Result<(HybridEncoder, CheckpointMeta)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header).map_err(io)?;
    let header: Header = serde_json::from_slice(&header)?;

    let mut values: HashMap<String, ArrayD<f64>> = HashMap::with_capacity(header.params.len());
    let mut buf = Vec::new();
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        buf.resize(n * 8, 0);
        r.read_exact(&mut buf).map_err(io)?;
        let data: Vec<f64> = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|err| Error::Checkpoint(err.to_string()))?;
        values.insert(e.name.clone(), arr);
    }

    let mut enc = HybridEncoder::new(header.config, header.seed)?;
    let mut problem = None;
    enc.visit_params_mut(&mut |p| match values.remove(&p.name) {
        Some(v) if v.shape() == p.value.shape() => p.value = v,
        Some(v) => {
            problem.get_or_insert(format!("{}: stored shape {:?}, model expects {:?}", p.name, v.shape(), p.value.shape()));
        }
        None => {
            problem.get_or_insert(format!("{}: missing from checkpoint", p.name));
        }
    });
    if let Some(m) = problem {
        return Err(Error::Checkpoint(m));
    }
    if let Some(extra) = values.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter `{extra}` in checkpoint")));
    }
    Ok((enc, header.meta))
}
