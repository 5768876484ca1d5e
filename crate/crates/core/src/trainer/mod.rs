//! Self-supervised contrastive training of one encoder and of seeded
//! ensembles.

mod loss;
mod optim;

use std::path::Path;

use ndarray::{concatenate, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use loss::{contrastive_loss, halves_pairing, LossConfig, LossOutput};
pub use optim::{clip_grad_norm, lr_at, AdamW, EarlyStopping, StopDecision};

use crate::augment::{positive_pair, AugmentationPolicy};
use crate::corpus::GlyphImage;
use crate::ensemble::{Ensemble, EnsembleIndex, Member, INDEX_FILE};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, stack_glyphs, CheckpointMeta, EncoderConfig, HybridEncoder};
use crate::nn::{Ctx, Module};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub warmup_frac: f64,
    pub temperature: f64,
    pub uniformity_weight: f64,
    pub var_reg: f64,
    pub var_eps: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub augmentation: AugmentationPolicy,
    /// Re-estimate BN running statistics over the training glyphs at the
    /// end of every epoch. Off by default; short runs need it because a
    /// small momentum leaves the running estimates near their init.
    pub bn_recalibration: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 3e-5,
            lr_min: 0.0,
            weight_decay: 1e-3,
            max_epochs: 20,
            patience: 5,
            warmup_frac: 0.10,
            temperature: 0.1,
            uniformity_weight: 0.1,
            var_reg: 1.0,
            var_eps: 1e-4,
            grad_clip_norm: 1.0,
            batch_size: 64,
            seeds: vec![42, 43, 44, 45, 46],
            augmentation: AugmentationPolicy::default(),
            bn_recalibration: false,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            var_reg: self.var_reg,
            var_eps: self.var_eps,
            uniformity_weight: self.uniformity_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad("warmup_frac must lie in (0, 1)");
        }
        if self.patience > self.max_epochs || self.max_epochs == 0 {
            return bad("need 1 <= max_epochs and patience <= max_epochs");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return bad("ensemble seeds must be distinct");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStatus {
    Completed,
    EarlyStopped,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// 1-based position in the ensemble.
    pub model_idx: usize,
    pub seed: u64,
    pub best_val_loss: f64,
    /// 1-based epoch of the best validation loss.
    pub best_epoch: usize,
    pub model_path: String,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub status: TrainStatus,
    pub message: Option<String>,
}

/// Checkpoint file name of ensemble member `idx` (1-based).
pub fn checkpoint_name(ensemble: &str, idx: usize) -> String {
    format!("{ensemble}_{idx}_hybrid_extractor_best.ckpt")
}

/// Builds `[views_a; views_b]` for a batch of glyphs.
fn pair_batch(
    glyphs: &[&GlyphImage],
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<ndarray::Array4<f64>> {
    let pairs: Vec<(GlyphImage, GlyphImage)> = crate::par::map_range(glyphs.len(), |i| {
        let mut r = rng::stream(seed, &[i as u64]);
        positive_pair(glyphs[i], policy, &mut r)
    });
    let a: Vec<&GlyphImage> = pairs.iter().map(|p| &p.0).collect();
    let b: Vec<&GlyphImage> = pairs.iter().map(|p| &p.1).collect();
    let (xa, xb) = (stack_glyphs(&a)?, stack_glyphs(&b)?);
    concatenate(Axis(0), &[xa.view(), xb.view()]).map_err(|e| Error::shape(e.to_string()))
}

/// Mean loss over the validation set in inference mode, with augmented
/// pairs drawn from a fixed stream so epochs are comparable.
pub fn validation_loss(enc: &HybridEncoder, val: &[&GlyphImage], cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut weight = 0.0;
    for (bi, chunk) in val.chunks(cfg.batch_size).enumerate() {
        if chunk.len() < 2 {
            continue;
        }
        let x = pair_batch(chunk, &cfg.augmentation, rng::derive(seed, &[rng::label("val"), bi as u64]))?;
        let (f, _) = enc.forward(x, &Ctx::eval())?;
        let out = contrastive_loss(&f.fused, &halves_pairing(f.fused.nrows()), &cfg.loss())?;
        total += out.total * chunk.len() as f64;
        weight += chunk.len() as f64;
    }
    if weight == 0.0 {
        return Err(Error::invalid("validation split needs at least 2 glyphs"));
    }
    Ok(total / weight)
}

/// Observer for per-epoch progress.
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, f64, f64);

/// Trains one encoder. The returned encoder holds the best-epoch weights;
/// when `ckpt` is given they are also written there.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    train: &[&GlyphImage],
    val: &[&GlyphImage],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    seed: u64,
    model_idx: usize,
    ckpt: Option<&Path>,
    mut on_epoch: Option<EpochHook<'_>>,
) -> Result<(HybridEncoder, TrainRecord)> {
    cfg.validate()?;
    if train.len() < 2 || val.len() < 2 {
        return Err(Error::invalid(format!(
            "training needs at least 2 train and 2 val glyphs (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    let mut enc = HybridEncoder::new(enc_cfg.clone(), rng::derive(seed, &[rng::label("init")]))?;
    let mut opt = AdamW::new(enc.param_count(), cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let batches_per_epoch = train.len() / cfg.batch_size + usize::from(train.len() % cfg.batch_size >= 2);
    let total_steps = (batches_per_epoch * cfg.max_epochs).max(1);
    let loss_cfg = cfg.loss();
    let mut record = TrainRecord {
        model_idx,
        seed,
        best_val_loss: f64::INFINITY,
        best_epoch: 0,
        model_path: ckpt.and_then(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        train_losses: Vec::new(),
        val_losses: Vec::new(),
        status: TrainStatus::Completed,
        message: None,
    };
    let mut best = enc.snapshot();
    let mut step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::label("order"), epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let glyphs: Vec<&GlyphImage> = idx.iter().map(|&i| train[i]).collect();
            let bseed = rng::derive(seed, &[rng::label("batch"), epoch as u64, bi as u64]);
            let x = pair_batch(&glyphs, &cfg.augmentation, bseed)?;
            let (f, cache) = enc.forward(x, &Ctx::train(bseed))?;
            let out = match contrastive_loss(&f.fused, &halves_pairing(f.fused.nrows()), &loss_cfg) {
                Ok(o) => o,
                Err(e) => {
                    record.status = TrainStatus::Diverged;
                    record.message = Some(format!("epoch {epoch}, batch {bi}: {e}"));
                    return Err(Error::Diverged(format!("model {model_idx} (seed {seed}) at epoch {epoch}: {e}")));
                }
            };
            let cache = cache.expect("training forward records");
            let mut grads = enc.backward(&cache, out.grad);
            enc.absorb(&cache);
            clip_grad_norm(&mut grads, cfg.grad_clip_norm);
            let lr = lr_at(step, total_steps, cfg.lr_max, cfg.lr_min, cfg.warmup_frac);
            opt.step(&mut enc, &grads, lr);
            step += 1;
            epoch_loss += out.total * idx.len() as f64;
            seen += idx.len();
        }
        let train_loss = epoch_loss / seen.max(1) as f64;
        if cfg.bn_recalibration {
            enc.recalibrate_bn(train, cfg.batch_size, rng::derive(seed, &[rng::label("recalibrate"), epoch as u64]))?;
        }
        let val_loss = validation_loss(&enc, val, cfg, seed)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("model {model_idx} (seed {seed}): validation loss {val_loss} at epoch {epoch}")));
        }
        record.train_losses.push(train_loss);
        record.val_losses.push(val_loss);
        log::info!("model {model_idx} seed {seed} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        if let Some(h) = on_epoch.as_mut() {
            h(epoch, train_loss, val_loss);
        }
        let d = stopper.update(epoch, val_loss);
        if d.improved {
            best = enc.snapshot();
        }
        if d.stop {
            record.status = TrainStatus::EarlyStopped;
            break;
        }
    }
    let (best_loss, best_epoch) = stopper.best();
    record.best_val_loss = best_loss;
    record.best_epoch = best_epoch;
    enc.restore(&best);
    if let Some(path) = ckpt {
        let meta = CheckpointMeta {
            model_idx: Some(model_idx),
            epoch: Some(best_epoch),
            val_loss: Some(best_loss),
            ensemble: None,
        };
        save_checkpoint(&enc, &meta, path)?;
    }
    Ok((enc, record))
}

/// Trains one member per seed on identical splits, writing checkpoints,
/// `summary.csv` and the ensemble index into `dir`. A member that fails is
/// logged and skipped, leaving the ensemble partial.
pub fn train_ensemble(
    name: &str,
    train: &[&GlyphImage],
    val: &[&GlyphImage],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<(Ensemble, Vec<TrainRecord>)> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut members = Vec::new();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (k, &seed) in cfg.seeds.iter().enumerate() {
        let idx = k + 1;
        let file = checkpoint_name(name, idx);
        let path = dir.join(&file);
        match train_model(train, val, enc_cfg, cfg, seed, idx, Some(&path), None) {
            Ok((encoder, record)) => {
                members.push(Member { seed, path: Some(path), encoder });
                records.push(record);
            }
            Err(e) => {
                log::error!("ensemble {name}: member {idx} (seed {seed}) failed: {e}");
                failures.push(format!("member {idx} (seed {seed}): {e}"));
            }
        }
    }
    write_summary(&records, &dir.join(SUMMARY_FILE))?;
    let index = EnsembleIndex {
        name: name.to_string(),
        expected: cfg.seeds.len(),
        seeds: cfg.seeds.clone(),
        checkpoints: records.iter().map(|r| r.model_path.clone()).collect(),
        failures,
    };
    let index_path = dir.join(INDEX_FILE);
    std::fs::write(&index_path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&index_path, e))?;
    let ensemble = Ensemble::new(name, members, cfg.seeds.len())?;
    Ok((ensemble, records))
}

pub const SUMMARY_FILE: &str = "summary.csv";

/// Writes the per-member summary with header
/// `model_idx,seed,val_loss,epoch,model_path`.
pub fn write_summary(records: &[TrainRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::Csv)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in records {
        w.write_record([
            r.model_idx.to_string(),
            r.seed.to_string(),
            r.best_val_loss.to_string(),
            r.best_epoch.to_string(),
            r.model_path.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const SUMMARY_HEADER: [&str; 5] = ["model_idx", "seed", "val_loss", "epoch", "model_path"];


#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy_config;
    use ndarray::Array2;

    fn glyphs(n: usize) -> Vec<GlyphImage> {
        (0..n)
            .map(|i| {
                let gray = Array2::from_shape_fn((64, 64), |(y, x)| {
                    let on = (y / 8 + x / 8 + i) % 3 == 0 || (x + i * 3) % 17 < 3;
                    if on { 0.1 } else { 0.95 }
                });
                GlyphImage::from_intensity(&gray, "s", format!("g{i}"))
            })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            max_epochs: 1,
            patience: 1,
            batch_size: 4,
            seeds: vec![1],
            augmentation: AugmentationPolicy::default(),
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { warmup_frac: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patience: 30, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { seeds: vec![1, 1], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn single_epoch_run_is_deterministic() {
        let gs = glyphs(8);
        let refs: Vec<&GlyphImage> = gs.iter().collect();
        let (train, val) = refs.split_at(5);
        let cfg = small_cfg();
        let (_, r1) = train_model(train, val, &toy_config(), &cfg, 7, 1, None, None).unwrap();
        let (_, r2) = train_model(train, val, &toy_config(), &cfg, 7, 1, None, None).unwrap();
        assert_eq!(r1.best_epoch, 1);
        assert_eq!(r1.val_losses.len(), 1);
        assert_eq!(r1, r2);
    }

    #[test]
    fn one_small_step_reduces_batch_loss() {
        let gs = glyphs(4);
        let refs: Vec<&GlyphImage> = gs.iter().collect();
        let cfg = TrainConfig { augmentation: AugmentationPolicy::identity(), ..small_cfg() };
        let mut enc = HybridEncoder::new(toy_config(), 3).unwrap();
        let x = pair_batch(&refs, &cfg.augmentation, 0).unwrap();
        // Eval-mode forward keeps the objective a fixed function of the weights.
        let (f, cache) = enc.forward(x.clone(), &Ctx::eval_recording()).unwrap();
        let before = contrastive_loss(&f.fused, &halves_pairing(8), &cfg.loss()).unwrap();
        let grads = enc.backward(cache.as_ref().unwrap(), before.grad.clone());
        let mut opt = AdamW::new(enc.param_count(), 0.0);
        opt.step(&mut enc, &grads, 1e-6);
        let (f2, _) = enc.forward(x, &Ctx::eval()).unwrap();
        let after = contrastive_loss(&f2.fused, &halves_pairing(8), &cfg.loss()).unwrap();
        assert!(after.total < before.total, "{} !< {}", after.total, before.total);
    }

    #[test]
    fn ensemble_of_one_writes_its_artifacts() {
        let gs = glyphs(6);
        let refs: Vec<&GlyphImage> = gs.iter().collect();
        let (train, val) = refs.split_at(4);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { seeds: vec![42], ..small_cfg() };
        let (ens, recs) = train_ensemble("T", train, val, &toy_config(), &cfg, dir.path()).unwrap();
        assert_eq!(ens.members.len(), 1);
        assert!(!ens.is_partial());
        assert_eq!(recs[0].seed, 42);
        assert!(dir.path().join("T_1_hybrid_extractor_best.ckpt").exists());
        let loaded = Ensemble::load(dir.path()).unwrap();
        assert_eq!(loaded.members.len(), 1);
        let a = crate::ensemble::consensus_embed(&ens, val, "T", 4, false).unwrap();
        let b = crate::ensemble::consensus_embed(&loaded, val, "T", 4, false).unwrap();
        assert_eq!(a, b);
        let text = std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn summary_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let rec = TrainRecord {
            model_idx: 1,
            seed: 42,
            best_val_loss: 1.25,
            best_epoch: 3,
            model_path: checkpoint_name("Indus_ensemble", 1),
            train_losses: vec![],
            val_losses: vec![],
            status: TrainStatus::Completed,
            message: None,
        };
        write_summary(&[rec], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "model_idx,seed,val_loss,epoch,model_path");
        assert_eq!(text.lines().nth(1).unwrap(), "1,42,1.25,3,Indus_ensemble_1_hybrid_extractor_best.ckpt");
    }
}
