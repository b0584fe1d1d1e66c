use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::autoencoder::{AutoencoderConfig, ToyAutoencoder};
use super::denoiser::{Denoiser, DenoiserConfig};
use super::schedule::{NoiseSchedule, ScheduleConfig};
use crate::checkpoint;
use crate::conditioning::{CondBatch, TextEmbedder};
use crate::nn::{checksum_tensors, ParamStore};
use crate::text::{TextConfig, TextEncoder, Tokenizer};
use crate::{Error, Result};

pub const BACKEND_KIND: &str = "backend";

/// Everything a text-to-image model offers to the personalisation code.
/// A full pre-trained pipeline can sit behind the same trait.
pub trait DiffusionBackend: Send + Sync {
    fn text(&self) -> &dyn TextEmbedder;
    fn schedule(&self) -> &NoiseSchedule;
    /// `[C, h, w]` of one latent.
    fn latent_shape(&self) -> [usize; 3];
    fn image_size(&self) -> usize;
    /// `(B, 3, H, W)` images to `(B, C, h, w)` latents.
    fn encode_images(&self, images: &Tensor) -> Result<Tensor>;
    fn decode_latents(&self, latents: &Tensor) -> Result<Tensor>;
    /// ε̂(z_t, c, t). The conditioning embeddings go through the contextual
    /// text encoder here, so gradients reach spliced pseudo words.
    fn predict_noise(&self, z_t: &Tensor, cond: &CondBatch, t: &[usize]) -> Result<Tensor>;
    /// Digest of every frozen weight.
    fn checksum(&self) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub autoencoder: AutoencoderConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub text: TextConfig,
    pub vocab: Vec<String>,
}

impl BackendConfig {
    /// Default toy configuration whose vocabulary knows the given names.
    pub fn with_names<S: AsRef<str>>(names: &[S]) -> Self {
        let text = TextConfig::default();
        let autoencoder = AutoencoderConfig::default();
        let denoiser = DenoiserConfig {
            latent_size: autoencoder.image_size / autoencoder.factor,
            text_dim: text.dim,
            ..DenoiserConfig::default()
        };
        Self {
            autoencoder,
            schedule: ScheduleConfig::default(),
            denoiser,
            text,
            vocab: Tokenizer::with_names(names).vocab().to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.dim != self.denoiser.text_dim {
            return Err(Error::Config(format!(
                "text width {} differs from the denoiser's context width {}",
                self.text.dim, self.denoiser.text_dim
            )));
        }
        let latent = self.autoencoder.image_size / self.autoencoder.factor.max(1);
        if latent != self.denoiser.latent_size {
            return Err(Error::Config(format!(
                "autoencoder latents are {latent} wide, denoiser expects {}",
                self.denoiser.latent_size
            )));
        }
        if self.denoiser.latent_channels != super::autoencoder::LATENT_CHANNELS {
            return Err(Error::Config("denoiser latent channels must be 4".into()));
        }
        Ok(())
    }
}

/// Small trained-from-scratch latent diffusion model.
pub struct ToyBackend {
    config: BackendConfig,
    store: ParamStore,
    tokenizer: Tokenizer,
    text: TextEncoder,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    autoencoder: ToyAutoencoder,
}

impl std::fmt::Debug for ToyBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyBackend")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl ToyBackend {
    /// Fresh weights. `trainable` is only for pre-training the backend.
    pub fn new(config: BackendConfig, seed: u64, trainable: bool) -> Result<Self> {
        Self::build(config, ParamStore::seeded(seed, trainable))
    }

    fn build(config: BackendConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let tokenizer = Tokenizer::from_vocab(config.vocab.clone());
        let root = store.root();
        let text = TextEncoder::new(root.pp("text"), &config.text, tokenizer.vocab_size())?;
        let denoiser = Denoiser::new(root.pp("denoiser"), &config.denoiser)?;
        store.finish_loading()?;
        Ok(Self {
            schedule: NoiseSchedule::new(&config.schedule)?,
            autoencoder: ToyAutoencoder::new(&config.autoencoder)?,
            config,
            store,
            tokenizer,
            text,
            denoiser,
        })
    }

    pub fn from_tensors(config: BackendConfig, tensors: HashMap<String, Tensor>) -> Result<Self> {
        Self::build(config, ParamStore::from_tensors(tensors, false))
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn autoencoder(&self) -> &ToyAutoencoder {
        &self.autoencoder
    }

    /// Separate digests for the text encoder and the denoiser.
    pub fn component_checksums(&self) -> Result<BTreeMap<String, String>> {
        let all = self.store.tensors();
        let mut out = BTreeMap::new();
        for part in ["text", "denoiser"] {
            let subset: BTreeMap<String, Tensor> = all
                .iter()
                .filter(|(k, _)| k.starts_with(&format!("{part}.")))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            out.insert(part.to_string(), checksum_tensors(&subset)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        checkpoint::save(path, BACKEND_KIND, &self.config, meta, &self.store.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = checkpoint::load(path, BACKEND_KIND)?;
        let config: BackendConfig = archive.config(path)?;
        Self::from_tensors(config, archive.tensors).map_err(|e| match e {
            Error::Shape(msg) => Error::checkpoint(path, format!("dimension mismatch: {msg}")),
            other => other,
        })
    }
}

impl TextEmbedder for ToyBackend {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn embed_ids(&self, ids: &[u32]) -> Result<Tensor> {
        self.text.embed_ids(ids)
    }

    fn text_dim(&self) -> usize {
        self.config.text.dim
    }

    fn max_text_len(&self) -> usize {
        self.config.text.max_len
    }
}

impl DiffusionBackend for ToyBackend {
    fn text(&self) -> &dyn TextEmbedder {
        self
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_shape(&self) -> [usize; 3] {
        self.autoencoder.latent_shape()
    }

    fn image_size(&self) -> usize {
        self.config.autoencoder.image_size
    }

    fn encode_images(&self, images: &Tensor) -> Result<Tensor> {
        self.autoencoder.encode(images)
    }

    fn decode_latents(&self, latents: &Tensor) -> Result<Tensor> {
        self.autoencoder.decode(latents)
    }

    fn predict_noise(&self, z_t: &Tensor, cond: &CondBatch, t: &[usize]) -> Result<Tensor> {
        let context = self.text.contextualize(&cond.embeddings, &cond.mask)?;
        // The network predicts v = √ᾱ·ε − √(1−ᾱ)·z_0, so that
        // ε̂ = √(1−ᾱ)·z_t + √ᾱ·v̂ is exact in the pure-noise limit.
        let v = self.denoiser.forward(z_t, t, &context, &cond.mask)?;
        self.schedule.add_noise(&v, t, z_t)
    }

    fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }
}
