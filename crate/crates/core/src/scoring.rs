//! Frozen scorers behind the evaluation metrics: an identity embedder built
//! on the face-recognition backbone and a small joint text-image embedder.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::detect::{crop_align_filter, CropConfig, FaceDetector, Rejection};
use crate::encoder::FaceSource;
use crate::image::Image;
use crate::nn::{normalize_last_dim, Init, Linear, ParamStore};
use crate::text::{pieces, Tokenizer, BASE_WORDS};
use crate::vit::{FinalReadout, Vit, VitConfig};
use crate::{Error, Result};

pub const FACE_ID_KIND: &str = "face-id";
pub const CLIP_KIND: &str = "joint-embedder";

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// L2-normalises rows of a `(B, d)` tensor.
pub fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_vec2::<f64>()?)
}

/// Identity embedding of aligned face crops.
pub trait IdentityScorer: Send + Sync {
    fn embed_faces(&self, faces: &[&Image]) -> Result<Vec<Vec<f64>>>;
}

/// Shared text-image embedding space.
pub trait JointEmbedder: Send + Sync {
    fn embed_images(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>>;
    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceIdConfig {
    pub vit: VitConfig,
    pub classes: usize,
    /// Logit scale of the cosine classifier.
    pub scale: f64,
}

impl Default for FaceIdConfig {
    fn default() -> Self {
        Self {
            vit: VitConfig::default(),
            classes: 256,
            scale: 16.0,
        }
    }
}

/// Face-recognition transformer trained with a cosine classifier. Its final
/// identity vector is the identity embedding; the transformer alone is the
/// encoder's backbone.
pub struct FaceIdModel {
    config: FaceIdConfig,
    store: ParamStore,
    vit: Vit,
    classifier: Tensor,
}

impl FaceIdModel {
    pub fn new(config: FaceIdConfig, seed: u64, trainable: bool) -> Result<Self> {
        Self::build(config, ParamStore::seeded(seed, trainable))
    }

    /// Frozen model from named tensors.
    pub fn from_tensors(config: FaceIdConfig, tensors: HashMap<String, Tensor>) -> Result<Self> {
        Self::build(config, ParamStore::from_tensors(tensors, false))
    }

    fn build(config: FaceIdConfig, store: ParamStore) -> Result<Self> {
        let vit = Vit::new(store.root().pp("vit"), &config.vit, FinalReadout::IdentityHead)?;
        let classifier = store.root().get(
            (config.classes, config.vit.dim),
            "classifier",
            Init::Normal(1.0),
        )?;
        store.finish_loading()?;
        Ok(Self {
            config,
            store,
            vit,
            classifier,
        })
    }

    pub fn config(&self) -> &FaceIdConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn vit(&self) -> &Vit {
        &self.vit
    }

    /// `(B, d)` identity vectors.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.vit.identity_vectors(images)
    }

    /// Scaled cosine logits `(B, classes)`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let e = unit_rows(&self.embed(images)?)?;
        let w = unit_rows(&self.classifier)?;
        Ok((e.matmul(&w.t()?)? * self.config.scale)?)
    }

    /// Transformer weights without their prefix, ready for the encoder.
    pub fn backbone_tensors(&self) -> HashMap<String, Tensor> {
        self.store
            .tensors()
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix("vit.").map(|k| (k.to_string(), v)))
            .collect()
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        checkpoint::save(path, FACE_ID_KIND, &self.config, meta, &self.store.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = checkpoint::load(path, FACE_ID_KIND)?;
        let config: FaceIdConfig = archive.config(path)?;
        Self::build(config, ParamStore::from_tensors(archive.tensors, false)).map_err(|e| match e {
            Error::Shape(msg) => Error::checkpoint(path, format!("dimension mismatch: {msg}")),
            other => other,
        })
    }
}

impl IdentityScorer for FaceIdModel {
    fn embed_faces(&self, faces: &[&Image]) -> Result<Vec<Vec<f64>>> {
        if faces.is_empty() {
            return Ok(Vec::new());
        }
        rows(&self.embed(&Image::batch_tensor(faces)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub vit: VitConfig,
    pub joint_dim: usize,
    pub vocab: Vec<String>,
    pub scale: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            vit: VitConfig {
                depth: 4,
                ..VitConfig::default()
            },
            joint_dim: 32,
            vocab: Tokenizer::new(BASE_WORDS).vocab().to_vec(),
            scale: 10.0,
        }
    }
}

/// Joint embedder: a transformer image tower and a bag-of-words text tower.
pub struct ToyClip {
    config: ClipConfig,
    store: ParamStore,
    tokenizer: Tokenizer,
    vit: Vit,
    image_proj: Linear,
    words: Tensor,
    text_proj: Linear,
}

impl ToyClip {
    pub fn new(config: ClipConfig, seed: u64, trainable: bool) -> Result<Self> {
        Self::build(config, ParamStore::seeded(seed, trainable))
    }

    /// Frozen model from named tensors.
    pub fn from_tensors(config: ClipConfig, tensors: HashMap<String, Tensor>) -> Result<Self> {
        Self::build(config, ParamStore::from_tensors(tensors, false))
    }

    fn build(config: ClipConfig, store: ParamStore) -> Result<Self> {
        let root = store.root();
        let tokenizer = Tokenizer::from_vocab(config.vocab.clone());
        let d = config.vit.dim;
        let vit = Vit::new(root.pp("vit"), &config.vit, FinalReadout::LastCls)?;
        let image_proj = Linear::new(root.pp("image_proj"), d, config.joint_dim)?;
        let words = root.get((tokenizer.vocab_size(), d), "words", Init::Normal(1.0))?;
        let text_proj = Linear::new(root.pp("text_proj"), d, config.joint_dim)?;
        store.finish_loading()?;
        Ok(Self {
            config,
            store,
            tokenizer,
            vit,
            image_proj,
            words,
            text_proj,
        })
    }

    pub fn config(&self) -> &ClipConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// The image tower alone; the "generic" backbone of the ablation.
    pub fn backbone_tensors(&self) -> HashMap<String, Tensor> {
        self.store
            .tensors()
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix("vit.").map(|k| (k.to_string(), v)))
            .collect()
    }

    /// Unit-norm `(B, joint_dim)` image embeddings.
    pub fn image_features(&self, images: &Tensor) -> Result<Tensor> {
        let v = self.vit.identity_vectors(images)?;
        unit_rows(&self.image_proj.forward(&v)?)
    }

    /// Unit-norm `(N, joint_dim)` text embeddings: mean of the known word
    /// vectors, layer-normalised and projected.
    pub fn text_features(&self, texts: &[&str]) -> Result<Tensor> {
        let n = texts.len();
        let v = self.tokenizer.vocab_size();
        let mut bag = vec![0.0; n * v];
        for (i, t) in texts.iter().enumerate() {
            let ids: Vec<u32> = pieces(t)
                .iter()
                .filter(|p| self.tokenizer.knows(p))
                .map(|p| self.tokenizer.id(p))
                .collect();
            for id in &ids {
                bag[i * v + *id as usize] += 1.0 / ids.len() as f64;
            }
        }
        let bag = Tensor::from_vec(bag, (n, v), &Device::Cpu)?;
        let pooled = normalize_last_dim(&bag.matmul(&self.words)?)?;
        unit_rows(&self.text_proj.forward(&pooled)?)
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        checkpoint::save(path, CLIP_KIND, &self.config, meta, &self.store.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = checkpoint::load(path, CLIP_KIND)?;
        let config: ClipConfig = archive.config(path)?;
        Self::build(config, ParamStore::from_tensors(archive.tensors, false)).map_err(|e| match e {
            Error::Shape(msg) => Error::checkpoint(path, format!("dimension mismatch: {msg}")),
            other => other,
        })
    }
}

impl JointEmbedder for ToyClip {
    fn embed_images(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.config.vit.image_size;
        let resized = images
            .iter()
            .map(|im| im.resize(n, n))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Image> = resized.iter().collect();
        rows(&self.image_features(&Image::batch_tensor(&refs)?)?)
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        rows(&self.text_features(texts)?)
    }
}

/// Mean cosine between the prompt embedding and each image embedding.
pub fn text_alignment(embedder: &dyn JointEmbedder, images: &[&Image], prompt_text: &str) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Config("text alignment of an empty image set".into()));
    }
    let text = embedder.embed_texts(&[prompt_text])?.remove(0);
    let embs = embedder.embed_images(images)?;
    Ok(embs.iter().map(|e| cosine(&text, e)).sum::<f64>() / embs.len() as f64)
}

/// No-face sentinel; the worst possible similarity.
pub const NO_FACE_SCORE: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceScore {
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<Rejection>,
}

/// Detection, alignment and identity embedding, shared by the similarity
/// metric and the dataset filter.
pub struct FaceSimilarity<'a> {
    pub scorer: &'a dyn IdentityScorer,
    pub detector: &'a dyn FaceDetector,
    pub crop: CropConfig,
}

impl FaceSimilarity<'_> {
    /// Identity embedding of the largest face in `image`.
    pub fn embed(&self, image: &Image) -> std::result::Result<Result<Vec<f64>>, Rejection> {
        let face = crop_align_filter(self.detector, image, &self.crop, "", FaceSource::Generated)?;
        Ok(self.scorer.embed_faces(&[face.image()]).map(|mut v| v.remove(0)))
    }

    /// Cosine between the faces found in both images. Both go through the
    /// same detector and alignment; a generated image without a usable face
    /// scores [`NO_FACE_SCORE`].
    pub fn score(&self, input: &Image, generated: &Image) -> Result<FaceScore> {
        let a = match self.embed(input) {
            Ok(v) => v?,
            Err(r) => return Err(Error::Image(format!("input face unusable: {r}"))),
        };
        self.score_against(&a, generated)
    }

    /// As [`Self::score`] with a precomputed input embedding.
    pub fn score_against(&self, input_embedding: &[f64], generated: &Image) -> Result<FaceScore> {
        match self.embed(generated) {
            Ok(v) => Ok(FaceScore {
                score: cosine(input_embedding, &v?),
                rejection: None,
            }),
            Err(r) => Ok(FaceScore {
                score: NO_FACE_SCORE,
                rejection: Some(r),
            }),
        }
    }
}
