//! Encoder training against the frozen diffusion backend.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::conditioning::{assemble_conditioning, CondBatch, PromptRole, PromptTemplate};
use crate::diffusion::DiffusionBackend;
use crate::encoder::{embedding_reg_loss, BackboneKind, EncoderConfig, FeatureMode, M2Encoder, ENCODER_KIND, OPTIM_PREFIX};
use crate::image::Image;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, derive_seed, SeededRng};
use crate::selfaug::{DatasetManifest, ManifestEntry, SampleKind};
use crate::vit::FinalReadout;
use crate::zoo::Zoo;
use crate::{Error, Result};

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const OPTIMIZER_NAME: &str = "adam";

/// Loss terms of one step. `l_total = l_diffusion + lambda * l_reg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_diffusion: f64,
    pub l_reg: f64,
    pub lambda: f64,
    pub l_total: f64,
}

/// One loss-log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Encoder architecture choices, including the ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSettings {
    pub num_words: usize,
    pub backbone: BackboneKind,
    pub feature_mode: FeatureMode,
    pub init_seed: u64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            num_words: 2,
            backbone: BackboneKind::FaceId,
            feature_mode: FeatureMode::MultiScale,
            init_seed: 0,
        }
    }
}

impl EncoderSettings {
    /// A trainable encoder on the chosen pre-trained backbone.
    pub fn build(&self, zoo: &Zoo) -> Result<M2Encoder> {
        let text_dim = zoo.backend.config().text.dim;
        let (vit, readout, weights) = match self.backbone {
            BackboneKind::FaceId => (
                zoo.face_id.config().vit.clone(),
                FinalReadout::IdentityHead,
                zoo.face_id.backbone_tensors(),
            ),
            BackboneKind::Generic => (zoo.clip.config().vit.clone(), FinalReadout::LastCls, zoo.clip.backbone_tensors()),
        };
        let mut config = EncoderConfig::new(vit, text_dim)?.with_words(self.num_words);
        config.backbone_kind = self.backbone;
        config.readout = readout;
        config.feature_mode = self.feature_mode;
        config.validate()?;
        // The generic tower has no identity head; drop any extra weights.
        let probe = M2Encoder::new(config.clone(), 0, false)?;
        let wanted: std::collections::HashSet<String> = probe
            .store()
            .tensors()
            .keys()
            .filter_map(|k| k.strip_prefix("backbone.").map(String::from))
            .collect();
        let weights = weights.into_iter().filter(|(k, _)| wanted.contains(k)).collect();
        M2Encoder::with_backbone(config, weights, self.init_seed, true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lambda: f64,
    /// Expected fraction of self-augmented samples per batch.
    pub mix_ratio: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub clip_norm: Option<f64>,
    pub encoder: EncoderSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 64,
            iterations: 60_000,
            lambda: 1e-4,
            mix_ratio: 0.5,
            seed: 0,
            checkpoint_every: 1000,
            clip_norm: Some(1.0),
            encoder: EncoderSettings::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings for the toy models.
    pub fn toy() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            iterations: 500,
            checkpoint_every: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Config(format!("mix ratio {} is not in [0, 1]", self.mix_ratio)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint cadence must be positive".into()));
        }
        if self.encoder.num_words == 0 {
            return Err(Error::Config("number of pseudo words must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("train config: {e}")))
    }

    /// Hash of everything except the iteration count, so a run can be
    /// extended by resuming with more iterations.
    pub fn resume_key(&self) -> Result<String> {
        let mut c = self.clone();
        c.iterations = 0;
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&c)?))[..16].to_string())
    }
}

/// Draws `batch` entries: each is self-augmented with probability
/// `mix_ratio`, then uniform within its kind.
pub fn sample_batch<'m>(
    manifest: &'m DatasetManifest,
    mix_ratio: f64,
    rng: &mut SeededRng,
    batch: usize,
) -> Result<Vec<&'m ManifestEntry>> {
    if !(0.0..=1.0).contains(&mix_ratio) {
        return Err(Error::Config(format!("mix ratio {mix_ratio} is not in [0, 1]")));
    }
    let recon = manifest.of_kind(SampleKind::Reconstruction);
    let selfaug = manifest.of_kind(SampleKind::Selfaug);
    if mix_ratio > 0.0 && selfaug.is_empty() {
        return Err(Error::Dataset(format!("mix ratio {mix_ratio} needs self-augmented samples, the manifest has none")));
    }
    if mix_ratio < 1.0 && recon.is_empty() {
        return Err(Error::Dataset(format!("mix ratio {mix_ratio} needs reconstruction samples, the manifest has none")));
    }
    Ok((0..batch)
        .map(|_| {
            let pool = if rng.random::<f64>() < mix_ratio { &selfaug } else { &recon };
            pool[rng.random_range(0..pool.len())]
        })
        .collect())
}

/// Decoded images of a manifest, keyed by relative path.
pub struct ImageCache {
    images: HashMap<String, Image>,
}

impl ImageCache {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut images = HashMap::new();
        for e in &manifest.entries {
            for rel in [&e.face, &e.target] {
                if !images.contains_key(rel) {
                    images.insert(rel.clone(), Image::load(&manifest.resolve(rel))?);
                }
            }
        }
        Ok(Self { images })
    }

    pub fn get(&self, rel: &str) -> Result<&Image> {
        self.images
            .get(rel)
            .ok_or_else(|| Error::DanglingRefs(vec![rel.to_string()]))
    }
}

/// Everything random about a step, fixed up front so the loss is a
/// deterministic function of the encoder weights.
pub struct PreparedBatch {
    pub faces: Tensor,
    pub latents: Tensor,
    pub templates: Vec<PromptTemplate>,
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
}

pub fn prepare_batch(
    entries: &[&ManifestEntry],
    images: &ImageCache,
    backend: &dyn DiffusionBackend,
    rng: &mut SeededRng,
) -> Result<PreparedBatch> {
    let faces = entries.iter().map(|e| images.get(&e.face)).collect::<Result<Vec<_>>>()?;
    let targets = entries.iter().map(|e| images.get(&e.target)).collect::<Result<Vec<_>>>()?;
    let templates = entries
        .iter()
        .map(|e| {
            let role = match e.kind {
                SampleKind::Reconstruction => PromptRole::Reconstruction,
                SampleKind::Selfaug => PromptRole::Editing,
            };
            PromptTemplate::new(e.prompt.clone(), role)
        })
        .collect::<Result<Vec<_>>>()?;
    let latents = backend.encode_images(&Image::batch_tensor(&targets)?)?;
    let t_max = backend.schedule().len();
    let timesteps = (0..entries.len()).map(|_| rng.random_range(0..t_max)).collect();
    let noise = rng::randn(rng, latents.shape())?;
    Ok(PreparedBatch {
        faces: Image::batch_tensor(&faces)?,
        latents,
        templates,
        timesteps,
        noise,
    })
}

/// Forward pass of the training objective. Returns the breakdown and the
/// differentiable total.
pub fn compute_loss(
    encoder: &M2Encoder,
    backend: &dyn DiffusionBackend,
    batch: &PreparedBatch,
    lambda: f64,
) -> Result<(LossBreakdown, Tensor)> {
    let words = encoder.encode_tensor(&batch.faces)?;
    let seqs = batch
        .templates
        .iter()
        .enumerate()
        .map(|(i, t)| assemble_conditioning(backend.text(), t, &words.sample(i)?))
        .collect::<Result<Vec<_>>>()?;
    let cond = CondBatch::new(&seqs.iter().collect::<Vec<_>>())?;
    let z_t = backend.schedule().add_noise(&batch.latents, &batch.timesteps, &batch.noise)?;
    let pred = backend.predict_noise(&z_t, &cond, &batch.timesteps)?;
    let l_diffusion = (pred - &batch.noise)?.sqr()?.mean_all()?;
    let l_reg = embedding_reg_loss(&words)?;
    let total = (&l_diffusion + (&l_reg * lambda)?)?;
    let breakdown = LossBreakdown {
        l_diffusion: l_diffusion.to_scalar()?,
        l_reg: l_reg.to_scalar()?,
        lambda,
        l_total: total.to_scalar()?,
    };
    Ok((breakdown, total))
}

/// One optimisation step; only the encoder's parameters move.
pub fn training_step(
    encoder: &M2Encoder,
    opt: &mut Adam,
    backend: &dyn DiffusionBackend,
    batch: &PreparedBatch,
    lambda: f64,
    step: usize,
) -> Result<LossBreakdown> {
    let (loss, total) = compute_loss(encoder, backend, batch, lambda)?;
    if !loss.l_total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!(
                "l_diffusion {} l_reg {} lambda {}; timesteps {:?}",
                loss.l_diffusion, loss.l_reg, lambda, batch.timesteps
            ),
        });
    }
    opt.step(&total.backward()?)?;
    Ok(loss)
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt-{step:06}.safetensors"))
}

/// Checkpoints in `dir`, by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    let Ok(rd) = std::fs::read_dir(dir) else {
        return Ok(out);
    };
    for entry in rd {
        let path = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(step) = name
            .strip_prefix("ckpt-")
            .and_then(|s| s.strip_suffix(".safetensors"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

pub mod meta_keys {
    pub const STEP: &str = "step";
    pub const OPTIMIZER: &str = "optimizer";
    pub const TRAIN_CONFIG: &str = "train_config";
    pub const RESUME_KEY: &str = "resume_key";
    pub const BACKEND_CHECKSUM: &str = "backend_checksum";
    pub const SELFAUG_IDENTITIES: &str = "selfaug_identities";
}

struct RunMeta<'a> {
    cfg: &'a TrainConfig,
    resume_key: String,
    backend_checksum: String,
    identities: String,
}

fn save_checkpoint(dir: &Path, step: usize, encoder: &M2Encoder, opt: &Adam, m: &RunMeta) -> Result<PathBuf> {
    use meta_keys::*;
    let mut tensors = encoder.store().tensors();
    for (k, v) in opt.state_tensors() {
        tensors.insert(format!("{OPTIM_PREFIX}.{k}"), v);
    }
    let meta = BTreeMap::from([
        (STEP.to_string(), step.to_string()),
        (OPTIMIZER.to_string(), OPTIMIZER_NAME.to_string()),
        (TRAIN_CONFIG.to_string(), serde_json::to_string(m.cfg)?),
        (RESUME_KEY.to_string(), m.resume_key.clone()),
        (BACKEND_CHECKSUM.to_string(), m.backend_checksum.clone()),
        (SELFAUG_IDENTITIES.to_string(), m.identities.clone()),
    ]);
    let path = checkpoint_path(dir, step);
    checkpoint::save(&path, ENCODER_KIND, encoder.config(), &meta, &tensors)?;
    Ok(path)
}

/// Self-augmented identities a checkpoint was trained on.
pub fn checkpoint_identities(path: &Path) -> Result<Vec<String>> {
    let archive = checkpoint::load(path, ENCODER_KIND)?;
    match archive.meta.get(meta_keys::SELFAUG_IDENTITIES) {
        Some(s) => serde_json::from_str(s).map_err(|e| Error::checkpoint(path, format!("bad identity list: {e}"))),
        None => Ok(Vec::new()),
    }
}

/// Encoder and optimizer restored from a training checkpoint.
fn restore(path: &Path, cfg: &TrainConfig, key: &str) -> Result<(usize, M2Encoder, Adam)> {
    let mut archive = checkpoint::load(path, ENCODER_KIND)?;
    if archive.meta.get(meta_keys::RESUME_KEY).map(String::as_str) != Some(key) {
        return Err(Error::checkpoint(path, "written by a run with a different configuration"));
    }
    let step: usize = archive
        .meta
        .get(meta_keys::STEP)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::checkpoint(path, "no step recorded"))?;
    let state = archive.take_prefixed(OPTIM_PREFIX);
    let config: EncoderConfig = archive.config(path)?;
    let encoder = M2Encoder::from_tensors(config, archive.tensors, true)?;
    let mut opt = Adam::new(encoder.store().vars(), adam_config(cfg))?;
    opt.load_state(state, step).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    Ok((step, encoder, opt))
}

fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        clip_norm: cfg.clip_norm,
        ..AdamConfig::default()
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(format!("reading {}", path.display()), e)),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn write_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Mean of `l_total` over a slice of the log.
pub fn mean_total(records: &[LossRecord]) -> f64 {
    records.iter().map(|r| r.loss.l_total).sum::<f64>() / records.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_step: usize,
    pub resumed_from: Option<usize>,
    pub checkpoints: Vec<PathBuf>,
    pub log: Vec<LossRecord>,
    pub backend_checksum: String,
}

/// Trains until `cfg.iterations` updates have been applied, resuming from
/// the newest checkpoint in `out` when there is one. `initial` is used for
/// fresh runs only.
pub fn run_training(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    backend: &dyn DiffusionBackend,
    initial: impl FnOnce() -> Result<M2Encoder>,
    out: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let key = cfg.resume_key()?;
    let before = backend.checksum()?;
    let meta = RunMeta {
        cfg,
        resume_key: key.clone(),
        backend_checksum: before.clone(),
        identities: serde_json::to_string(&manifest.selfaug_identities())?,
    };
    let log_path = out.join(LOSS_LOG);
    let existing = list_checkpoints(out)?;
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    let (start, encoder, mut opt, resumed_from) = match existing.last() {
        Some((_, path)) => {
            let (step, encoder, opt) = restore(path, cfg, &key)?;
            log::info!("resuming from {} at step {step}", path.display());
            checkpoints.extend(existing.iter().map(|(_, p)| p.clone()));
            (step, encoder, opt, Some(step))
        }
        None => {
            let encoder = initial()?;
            encoder.check_text_dim(backend.text().text_dim())?;
            let opt = Adam::new(encoder.store().vars(), adam_config(cfg))?;
            checkpoints.push(save_checkpoint(out, 0, &encoder, &opt, &meta)?);
            (0, encoder, opt, None)
        }
    };
    let mut log_records: Vec<LossRecord> = read_loss_log(&log_path)?.into_iter().filter(|r| r.step <= start).collect();
    write_loss_log(&log_path, &log_records)?;
    let images = ImageCache::load(manifest)?;
    let mut log_file = std::fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(format!("opening {}", log_path.display()), e))?;
    for step in start..cfg.iterations {
        let mut r = rng::rng(derive_seed(cfg.seed, &["train-step", &step.to_string()]));
        let entries = sample_batch(manifest, cfg.mix_ratio, &mut r, cfg.batch_size)?;
        let batch = prepare_batch(&entries, &images, backend, &mut r)?;
        let loss = training_step(&encoder, &mut opt, backend, &batch, cfg.lambda, step)?;
        let record = LossRecord { step: step + 1, loss };
        writeln!(log_file, "{}", serde_json::to_string(&record)?)
            .map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
        log_records.push(record);
        if (step + 1) % 50 == 0 {
            log::info!("step {} l_total {:.4}", step + 1, mean_total(&log_records[log_records.len().saturating_sub(50)..]));
        }
        if (step + 1) % cfg.checkpoint_every == 0 || step + 1 == cfg.iterations {
            checkpoints.push(save_checkpoint(out, step + 1, &encoder, &opt, &meta)?);
        }
    }
    let after = backend.checksum()?;
    if after != before {
        return Err(Error::Config(format!(
            "backend weights changed during training ({before} became {after})"
        )));
    }
    checkpoints.dedup();
    Ok(TrainOutcome {
        final_step: cfg.iterations.max(start),
        resumed_from,
        checkpoints,
        log: log_records,
        backend_checksum: after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_validation() {
        let cfg = TrainConfig::toy();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert!(TrainConfig::from_toml("lr = 0.0").is_err());
        assert!(TrainConfig::from_toml("mix_ratio = 1.5").is_err());
        let partial = TrainConfig::from_toml("iterations = 3\n[encoder]\nnum_words = 3\n").unwrap();
        assert_eq!(partial.iterations, 3);
        assert_eq!(partial.encoder.num_words, 3);
        assert_eq!(partial.lambda, 1e-4);
    }

    #[test]
    fn resume_key_ignores_iterations() {
        let a = TrainConfig::toy();
        let b = TrainConfig {
            iterations: 10,
            ..a.clone()
        };
        assert_eq!(a.resume_key().unwrap(), b.resume_key().unwrap());
        let c = TrainConfig { lr: 0.5, ..a.clone() };
        assert_ne!(a.resume_key().unwrap(), c.resume_key().unwrap());
    }
}
