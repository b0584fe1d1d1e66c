//! Pre-training of the frozen toy models: the diffusion backend, the
//! face-recognition model and the joint text-image embedder. Each is trained
//! from rendered faces and cached on disk keyed by a hash of its recipe.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::conditioning::{plain_conditioning, CondBatch, ConditioningSequence};
use crate::detect::{crop_align_filter, CropConfig, ToyDetector};
use crate::diffusion::{BackendConfig, DiffusionBackend, ToyAutoencoder, ToyBackend, AutoencoderConfig, BACKEND_KIND};
use crate::encoder::FaceSource;
use crate::face::{render, Edit, FaceParams, RenderOpts};
use crate::image::Image;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, derive_seed, SeededRng};
use crate::scoring::{ClipConfig, FaceIdConfig, FaceIdModel, ToyClip, CLIP_KIND, FACE_ID_KIND};
use crate::text::PLACEHOLDER;
use crate::{Error, Result};

pub const BACKEND_FILE: &str = "backend.safetensors";
pub const FACE_ID_FILE: &str = "face_id.safetensors";
pub const CLIP_FILE: &str = "clip.safetensors";

const RECIPE_KEY: &str = "recipe";

/// Captions of an unedited photo.
pub const PHOTO_TEMPLATES: [&str; 4] = [
    "S* face, looking at the camera",
    "a photo of S* face",
    "a portrait of S* face",
    "a picture of S*",
];

/// Captions describing an edit; the first one of each is the default
/// editing template for that effect.
pub fn edit_templates(edit: Edit) -> [&'static str; 2] {
    match edit {
        Edit::OilPainting => ["Oil painting style, S* face", "an oil painting of S* face"],
        Edit::Watercolor => ["Watercolor style, S* face", "a watercolor painting of S*"],
        Edit::PencilArt => ["Pencil art style, S* face", "a pencil portrait of S*"],
        Edit::Fauvism => ["Fauvism painting, S* face", "S* face, fauvism style"],
        Edit::Wizard => ["S* as a wizard, looking at the camera", "S* as a wizard"],
        Edit::Hat => ["S* wearing a hat, looking at the camera", "S* wearing a hat"],
        Edit::Chef => ["S* as a chef, looking at the camera", "S* as a chef"],
        Edit::Nurse => ["S* as a nurse, looking at the camera", "a photo of S* as a nurse"],
        Edit::Police => ["S* as a police, looking at the camera", "S* as a police"],
    }
}

fn bind(template: &str, subject: &str) -> String {
    template.replace(PLACEHOLDER, subject)
}

fn recipe_hash<T: Serialize>(recipe: &T) -> Result<String> {
    let json = serde_json::to_vec(recipe)?;
    Ok(hex::encode(Sha256::digest(&json))[..16].to_string())
}

/// Warm-up then cosine decay to a tenth of the peak.
fn lr_at(step: usize, steps: usize, peak: f64) -> f64 {
    let warmup = (steps / 20).max(1);
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let p = (step - warmup) as f64 / (steps - warmup).max(1) as f64;
    peak * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Round trip through the backend's autoencoder: the look of a generated
/// image.
fn ae_round_trip(ae: &ToyAutoencoder, images: &[Image]) -> Result<Vec<Image>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&Image> = images.iter().collect();
    let out = ae.decode(&ae.encode(&Image::batch_tensor(&refs)?)?)?;
    (0..images.len()).map(|i| Image::from_tensor(&out.get(i)?)).collect()
}

/// Renders one jittered photo.
fn photo(r: &mut SeededRng, face: &FaceParams, edit: Option<Edit>, size: usize) -> Image {
    render(face, &RenderOpts::jittered(r, size).with_edit(edit))
}

fn log_progress(what: &str, step: usize, steps: usize, loss: f64, started: Instant) {
    if step % 100 == 0 || step + 1 == steps {
        log::info!(
            "{what} step {step}/{steps} loss {loss:.4} ({:.0}s)",
            started.elapsed().as_secs_f64()
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRecipe {
    pub names: Vec<String>,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of captions replaced by the empty prompt.
    pub empty_fraction: f64,
    /// Fraction of the rest that shows a named celebrity.
    pub celebrity_fraction: f64,
    pub edit_fraction: f64,
}

impl BackendRecipe {
    pub fn new(names: Vec<String>) -> Self {
        Self {
            names,
            seed: 0,
            steps: 6000,
            batch: 32,
            lr: 1e-3,
            empty_fraction: 0.1,
            celebrity_fraction: 0.6,
            edit_fraction: 0.4,
        }
    }

    /// One (caption, image) pair.
    fn draw(&self, r: &mut SeededRng, size: usize) -> (String, Image) {
        let celebrity = r.random::<f64>() < self.celebrity_fraction && !self.names.is_empty();
        let (subject, face) = if celebrity {
            let name = &self.names[r.random_range(0..self.names.len())];
            (name.clone(), FaceParams::for_name(name))
        } else {
            ("a person".to_string(), FaceParams::random(r))
        };
        let edit = (r.random::<f64>() < self.edit_fraction).then(|| Edit::ALL[r.random_range(0..Edit::ALL.len())]);
        let template = match edit {
            Some(e) => edit_templates(e)[r.random_range(0..2)],
            None => PHOTO_TEMPLATES[r.random_range(0..PHOTO_TEMPLATES.len())],
        };
        let caption = if r.random::<f64>() < self.empty_fraction {
            String::new()
        } else {
            bind(template, &subject)
        };
        (caption, photo(r, &face, edit, size))
    }
}

/// Denoising pre-training of the text encoder and denoiser.
pub fn pretrain_backend(recipe: &BackendRecipe) -> Result<ToyBackend> {
    let config = BackendConfig::with_names(&recipe.names);
    let backend = ToyBackend::new(config.clone(), derive_seed(recipe.seed, &["backend-init"]), true)?;
    let mut opt = Adam::new(
        backend.store().vars(),
        AdamConfig {
            lr: recipe.lr,
            ..AdamConfig::default()
        },
    )?;
    let size = backend.image_size();
    let t_max = backend.schedule().len();
    let started = Instant::now();
    let mut smoothed = None;
    for step in 0..recipe.steps {
        let mut r = rng::rng(derive_seed(recipe.seed, &["backend-step", &step.to_string()]));
        let (captions, images): (Vec<String>, Vec<Image>) = (0..recipe.batch).map(|_| recipe.draw(&mut r, size)).unzip();
        let refs: Vec<&Image> = images.iter().collect();
        let z0 = backend.encode_images(&Image::batch_tensor(&refs)?)?;
        let seqs = captions
            .iter()
            .map(|c| plain_conditioning(&backend, c))
            .collect::<Result<Vec<ConditioningSequence>>>()?;
        let cond = CondBatch::new(&seqs.iter().collect::<Vec<_>>())?;
        let t: Vec<usize> = (0..recipe.batch).map(|_| r.random_range(0..t_max)).collect();
        let eps = rng::randn(&mut r, z0.shape())?;
        let z_t = backend.schedule().add_noise(&z0, &t, &eps)?;
        let loss = (backend.predict_noise(&z_t, &cond, &t)? - &eps)?.sqr()?.mean_all()?;
        let value = loss.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "backend pre-training".into(),
            });
        }
        opt.set_lr(lr_at(step, recipe.steps, recipe.lr));
        opt.step(&loss.backward()?)?;
        let s = smoothed.map_or(value, |s: f64| 0.98 * s + 0.02 * value);
        smoothed = Some(s);
        log_progress("backend", step, recipe.steps, s, started);
    }
    let tensors: HashMap<String, Tensor> = backend.store().tensors().into_iter().collect();
    ToyBackend::from_tensors(config, tensors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceIdRecipe {
    pub model: FaceIdConfig,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Additive cosine margin of the training logits.
    pub margin: f64,
    pub edit_fraction: f64,
    pub round_trip_fraction: f64,
}

impl Default for FaceIdRecipe {
    fn default() -> Self {
        Self {
            model: FaceIdConfig::default(),
            seed: 0,
            steps: 1500,
            batch: 32,
            lr: 1e-3,
            margin: 0.1,
            edit_fraction: 0.25,
            round_trip_fraction: 0.5,
        }
    }
}

/// Aligned crop as the scorers see it; the whole frame when nothing is
/// detected.
fn aligned(detector: &ToyDetector, crop: &CropConfig, image: &Image) -> Result<Image> {
    match crop_align_filter(detector, image, crop, "", FaceSource::Generated) {
        Ok(face) => Ok(face.image().clone()),
        Err(_) => image.resize(crop.output_size, crop.output_size),
    }
}

/// Classification pre-training over random identities with a cosine margin
/// loss.
pub fn pretrain_face_id(recipe: &FaceIdRecipe) -> Result<FaceIdModel> {
    let model = FaceIdModel::new(recipe.model.clone(), derive_seed(recipe.seed, &["face-id-init"]), true)?;
    let classes: Vec<FaceParams> = (0..recipe.model.classes)
        .map(|i| FaceParams::from_seed(derive_seed(recipe.seed, &["face-id-class", &i.to_string()])))
        .collect();
    let ae = ToyAutoencoder::new(&AutoencoderConfig::default())?;
    let detector = ToyDetector::default();
    let crop = CropConfig {
        output_size: recipe.model.vit.image_size,
        ..CropConfig::default()
    };
    let mut opt = Adam::new(
        model.store().vars(),
        AdamConfig {
            lr: recipe.lr,
            ..AdamConfig::default()
        },
    )?;
    let started = Instant::now();
    let mut smoothed = None;
    for step in 0..recipe.steps {
        let mut r = rng::rng(derive_seed(recipe.seed, &["face-id-step", &step.to_string()]));
        let mut labels = Vec::with_capacity(recipe.batch);
        let mut raw = Vec::new();
        let mut trip = Vec::new();
        for _ in 0..recipe.batch {
            let c = r.random_range(0..classes.len());
            let edit = (r.random::<f64>() < recipe.edit_fraction).then(|| Edit::ALL[r.random_range(0..Edit::ALL.len())]);
            let img = photo(&mut r, &classes[c], edit, 64);
            trip.push(r.random::<f64>() < recipe.round_trip_fraction);
            labels.push(c as u32);
            raw.push(img);
        }
        let tripped: Vec<Image> = raw.iter().zip(&trip).filter(|(_, t)| **t).map(|(i, _)| i.clone()).collect();
        let mut tripped = ae_round_trip(&ae, &tripped)?.into_iter();
        let crops = raw
            .into_iter()
            .zip(&trip)
            .map(|(img, t)| {
                let img = if *t { tripped.next().expect("one round trip per flag") } else { img };
                aligned(&detector, &crop, &img)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Image> = crops.iter().collect();
        let logits = model.logits(&Image::batch_tensor(&refs)?)?;
        let labels = Tensor::new(labels.as_slice(), &Device::Cpu)?;
        let onehot = candle_nn::encoding::one_hot(labels.clone(), recipe.model.classes, 1f64, 0f64)?;
        let logits = (logits - (onehot * (recipe.margin * recipe.model.scale))?)?;
        let loss = candle_nn::loss::cross_entropy(&logits, &labels)?;
        let value = loss.to_scalar::<f64>()?;
        opt.set_lr(lr_at(step, recipe.steps, recipe.lr));
        opt.step(&loss.backward()?)?;
        let s = smoothed.map_or(value, |s: f64| 0.98 * s + 0.02 * value);
        smoothed = Some(s);
        log_progress("face-id", step, recipe.steps, s, started);
    }
    let tensors = model.store().tensors().into_iter().collect();
    FaceIdModel::from_tensors(recipe.model.clone(), tensors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecipe {
    pub model: ClipConfig,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub round_trip_fraction: f64,
}

impl Default for ClipRecipe {
    fn default() -> Self {
        Self {
            model: ClipConfig::default(),
            seed: 0,
            steps: 800,
            batch: 32,
            lr: 1e-3,
            round_trip_fraction: 0.7,
        }
    }
}

/// Caption classes of the joint embedder: unedited photos, then one class
/// per edit. The identity slot reads "face".
pub fn clip_caption_classes() -> Vec<Vec<String>> {
    let subject = crate::conditioning::ALIGNMENT_WORD;
    let mut out = vec![PHOTO_TEMPLATES.iter().map(|t| bind(t, subject)).collect::<Vec<_>>()];
    for e in Edit::ALL {
        out.push(edit_templates(e).iter().map(|t| bind(t, subject)).collect());
    }
    out
}

fn log_sum_exp(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?;
    Ok((x.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()? + m)?)
}

/// Contrastive pre-training: each image is pulled towards every caption of
/// its edit class and pushed from the rest.
pub fn pretrain_clip(recipe: &ClipRecipe) -> Result<ToyClip> {
    let model = ToyClip::new(recipe.model.clone(), derive_seed(recipe.seed, &["clip-init"]), true)?;
    let classes = clip_caption_classes();
    let captions: Vec<&str> = classes.iter().flatten().map(String::as_str).collect();
    let owner: Vec<usize> = classes.iter().enumerate().flat_map(|(c, v)| std::iter::repeat_n(c, v.len())).collect();
    let ae = ToyAutoencoder::new(&AutoencoderConfig::default())?;
    let size = recipe.model.vit.image_size;
    let mut opt = Adam::new(
        model.store().vars(),
        AdamConfig {
            lr: recipe.lr,
            ..AdamConfig::default()
        },
    )?;
    let started = Instant::now();
    let mut smoothed = None;
    for step in 0..recipe.steps {
        let mut r = rng::rng(derive_seed(recipe.seed, &["clip-step", &step.to_string()]));
        let mut class_of = Vec::with_capacity(recipe.batch);
        let mut images = Vec::with_capacity(recipe.batch);
        for _ in 0..recipe.batch {
            let c = r.random_range(0..classes.len());
            let edit = (c > 0).then(|| Edit::ALL[c - 1]);
            let face = FaceParams::random(&mut r);
            images.push(photo(&mut r, &face, edit, size));
            class_of.push(c);
        }
        let trip: Vec<bool> = (0..recipe.batch).map(|_| r.random::<f64>() < recipe.round_trip_fraction).collect();
        let picked: Vec<Image> = images.iter().zip(&trip).filter(|(_, t)| **t).map(|(i, _)| i.clone()).collect();
        let mut tripped = ae_round_trip(&ae, &picked)?.into_iter();
        let images: Vec<Image> = images
            .into_iter()
            .zip(&trip)
            .map(|(img, t)| if *t { tripped.next().expect("one round trip per flag") } else { img })
            .collect();
        let refs: Vec<&Image> = images.iter().collect();
        let img = model.image_features(&Image::batch_tensor(&refs)?)?;
        let txt = model.text_features(&captions)?;
        let logits = (img.matmul(&txt.t()?)? * recipe.model.scale)?;
        let mut bias = vec![-1e9; recipe.batch * captions.len()];
        for (i, c) in class_of.iter().enumerate() {
            for (j, o) in owner.iter().enumerate() {
                if o == c {
                    bias[i * captions.len() + j] = 0.0;
                }
            }
        }
        let bias = Tensor::from_vec(bias, (recipe.batch, captions.len()), &Device::Cpu)?;
        let loss = (log_sum_exp(&logits)? - log_sum_exp(&(&logits + bias)?)?)?.mean_all()?;
        let value = loss.to_scalar::<f64>()?;
        opt.set_lr(lr_at(step, recipe.steps, recipe.lr));
        opt.step(&loss.backward()?)?;
        let s = smoothed.map_or(value, |s: f64| 0.98 * s + 0.02 * value);
        smoothed = Some(s);
        log_progress("clip", step, recipe.steps, s, started);
    }
    let tensors = model.store().tensors().into_iter().collect();
    ToyClip::from_tensors(recipe.model.clone(), tensors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooRecipe {
    pub backend: BackendRecipe,
    pub face_id: FaceIdRecipe,
    pub clip: ClipRecipe,
}

impl ZooRecipe {
    pub fn new(names: Vec<String>) -> Self {
        Self {
            backend: BackendRecipe::new(names),
            face_id: FaceIdRecipe::default(),
            clip: ClipRecipe::default(),
        }
    }
}

/// The frozen models every other stage builds on.
pub struct Zoo {
    pub backend: ToyBackend,
    pub face_id: FaceIdModel,
    pub clip: ToyClip,
}

fn cached(path: &Path, kind: &str, hash: &str) -> bool {
    match checkpoint::load(path, kind) {
        Ok(archive) => archive.meta.get(RECIPE_KEY).map(String::as_str) == Some(hash),
        Err(_) => false,
    }
}

fn recipe_meta(hash: &str) -> BTreeMap<String, String> {
    BTreeMap::from([(RECIPE_KEY.to_string(), hash.to_string())])
}

impl Zoo {
    pub fn paths(dir: &Path) -> [PathBuf; 3] {
        [dir.join(BACKEND_FILE), dir.join(FACE_ID_FILE), dir.join(CLIP_FILE)]
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let [b, f, c] = Self::paths(dir);
        Ok(Self {
            backend: ToyBackend::load(&b)?,
            face_id: FaceIdModel::load(&f)?,
            clip: ToyClip::load(&c)?,
        })
    }

    /// Loads each model whose cached recipe matches, training the others.
    pub fn load_or_build(dir: &Path, recipe: &ZooRecipe) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let [b, f, c] = Self::paths(dir);
        let hash = recipe_hash(&recipe.backend)?;
        if !cached(&b, BACKEND_KIND, &hash) {
            pretrain_backend(&recipe.backend)?.save(&b, &recipe_meta(&hash))?;
        }
        let hash = recipe_hash(&recipe.face_id)?;
        if !cached(&f, FACE_ID_KIND, &hash) {
            pretrain_face_id(&recipe.face_id)?.save(&f, &recipe_meta(&hash))?;
        }
        let hash = recipe_hash(&recipe.clip)?;
        if !cached(&c, CLIP_KIND, &hash) {
            pretrain_clip(&recipe.clip)?.save(&c, &recipe_meta(&hash))?;
        }
        Self::load(dir)
    }
}
