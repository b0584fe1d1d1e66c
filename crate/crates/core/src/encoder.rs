//! Multi-scale, multi-word identity encoder.
//!
//! A face goes through a vision transformer; normalised CLS tokens from four
//! evenly spaced blocks plus the final identity vector form a five-vector
//! bundle, and `k` independent MLP heads map the bundle to `k` word
//! embeddings in the text encoder's input space.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::image::Image;
use crate::nn::{self, Linear, ParamStore, Params};
use crate::vit::{FinalReadout, ReadPoint, Vit, VitConfig};
use crate::{Error, Result};

pub const ENCODER_KIND: &str = "encoder";

/// Tensor prefix of optimizer state inside training checkpoints.
pub const OPTIM_PREFIX: &str = "optim";

/// Number of vectors in a multi-scale feature bundle.
pub const FEATURE_VECTORS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceSource {
    Real,
    Generated,
}

/// A face crop at the backbone's input resolution, pixels in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFace {
    image: Image,
    identity_id: String,
    source: FaceSource,
}

impl AlignedFace {
    pub fn new(image: Image, identity_id: impl Into<String>, source: FaceSource) -> Result<Self> {
        if image.width() != image.height() {
            return Err(Error::Shape(format!(
                "aligned faces are square, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        if !image.in_range() {
            return Err(Error::Shape("pixel values outside [-1, 1]".into()));
        }
        Ok(Self {
            image,
            identity_id: identity_id.into(),
            source,
        })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn resolution(&self) -> usize {
        self.image.width()
    }

    pub fn identity_id(&self) -> &str {
        &self.identity_id
    }

    pub fn source(&self) -> FaceSource {
        self.source
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Transformer pre-trained for face identification.
    FaceId,
    /// Transformer from a generic text-image embedder.
    Generic,
}

/// Which part of the bundle the projection heads read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// All five vectors, concatenated.
    MultiScale,
    /// Only the final identity vector.
    FinalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone: VitConfig,
    pub backbone_kind: BackboneKind,
    pub readout: FinalReadout,
    /// 1-based block indices of the four intermediate CLS reads.
    pub extraction_layers: Vec<usize>,
    pub feature_mode: FeatureMode,
    pub num_words: usize,
    pub text_dim: usize,
    pub projector_hidden: Vec<usize>,
}

/// Evenly spaced quartile blocks of a `depth`-block transformer.
pub fn quartile_layers(depth: usize) -> Result<Vec<usize>> {
    if depth < 4 {
        return Err(Error::Config(format!(
            "multi-scale extraction needs at least 4 blocks, got {depth}"
        )));
    }
    Ok((1..=4).map(|q| (depth * q + 2) / 4).collect())
}

impl EncoderConfig {
    /// Default layout: quartile reads, two words, two hidden layers of
    /// width `2·d_b`.
    pub fn new(backbone: VitConfig, text_dim: usize) -> Result<Self> {
        let extraction_layers = quartile_layers(backbone.depth)?;
        let hidden = 2 * backbone.dim;
        let cfg = Self {
            backbone,
            backbone_kind: BackboneKind::FaceId,
            readout: FinalReadout::IdentityHead,
            extraction_layers,
            feature_mode: FeatureMode::MultiScale,
            num_words: 2,
            text_dim,
            projector_hidden: vec![hidden, hidden],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_words(mut self, k: usize) -> Self {
        self.num_words = k;
        self
    }

    pub fn input_resolution(&self) -> usize {
        self.backbone.image_size
    }

    pub fn read_points(&self) -> Vec<ReadPoint> {
        self.extraction_layers
            .iter()
            .map(|&l| ReadPoint::Block(l))
            .chain(std::iter::once(ReadPoint::Final))
            .collect()
    }

    pub fn projector_input_dim(&self) -> usize {
        match self.feature_mode {
            FeatureMode::MultiScale => FEATURE_VECTORS * self.backbone.dim,
            FeatureMode::FinalOnly => self.backbone.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_words == 0 {
            return Err(Error::Config("number of pseudo words must be at least 1".into()));
        }
        if self.text_dim == 0 {
            return Err(Error::Config("text embedding width must be positive".into()));
        }
        if self.extraction_layers.len() != FEATURE_VECTORS - 1 {
            return Err(Error::Config(format!(
                "expected {} extraction layers, got {}",
                FEATURE_VECTORS - 1,
                self.extraction_layers.len()
            )));
        }
        let depth = self.backbone.depth;
        if self.extraction_layers.iter().any(|&l| l == 0 || l > depth) {
            return Err(Error::Config(format!(
                "extraction layers {:?} are not blocks of a depth-{depth} backbone",
                self.extraction_layers
            )));
        }
        if self.extraction_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "extraction layers {:?} are not strictly increasing",
                self.extraction_layers
            )));
        }
        if self.projector_hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("projector hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// The ordered bundle `[v_3, v_6, v_9, v_12, v_final]` for a batch of faces.
#[derive(Debug, Clone)]
pub struct MultiScaleFeature {
    vectors: Tensor,
    read_points: Vec<ReadPoint>,
}

impl MultiScaleFeature {
    /// `vectors` is `(batch, 5, d_b)`.
    pub fn new(vectors: Tensor, read_points: Vec<ReadPoint>) -> Result<Self> {
        let (_, n, _) = vectors.dims3()?;
        if n != FEATURE_VECTORS || read_points.len() != FEATURE_VECTORS {
            return Err(Error::Shape(format!(
                "a multi-scale feature has {FEATURE_VECTORS} vectors, got {n}"
            )));
        }
        if read_points.windows(2).any(|w| w[0] >= w[1])
            || read_points.last() != Some(&ReadPoint::Final)
        {
            return Err(Error::Shape(format!(
                "read points {read_points:?} must increase and end with the final vector"
            )));
        }
        Ok(Self {
            vectors,
            read_points,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.vectors
    }

    pub fn read_points(&self) -> &[ReadPoint] {
        &self.read_points
    }

    pub fn batch_size(&self) -> usize {
        self.vectors.dims()[0]
    }

    pub fn num_vectors(&self) -> usize {
        self.vectors.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.vectors.dims()[2]
    }

    pub fn vector(&self, sample: usize, index: usize) -> Result<Vec<f64>> {
        Ok(self.vectors.get(sample)?.get(index)?.to_vec1()?)
    }
}

/// `k` word embeddings per face, `(batch, k, d_text)`.
#[derive(Debug, Clone)]
pub struct PseudoWords {
    embeddings: Tensor,
}

impl PseudoWords {
    pub fn new(embeddings: Tensor) -> Result<Self> {
        let (_, k, d) = embeddings.dims3()?;
        if k == 0 || d == 0 {
            return Err(Error::Shape("pseudo words must be non-empty".into()));
        }
        Ok(Self { embeddings })
    }

    /// A single face's words from plain vectors.
    pub fn from_vecs(words: &[Vec<f64>]) -> Result<Self> {
        let k = words.len();
        let d = words.first().map(Vec::len).unwrap_or(0);
        if words.iter().any(|w| w.len() != d) {
            return Err(Error::Shape("pseudo words differ in width".into()));
        }
        let flat: Vec<f64> = words.iter().flatten().copied().collect();
        Self::new(Tensor::from_vec(flat, (1, k, d), &Device::Cpu)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn batch_size(&self) -> usize {
        self.embeddings.dims()[0]
    }

    pub fn k(&self) -> usize {
        self.embeddings.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dims()[2]
    }

    /// Words of one sample as a `(k, d_text)` tensor.
    pub fn sample(&self, index: usize) -> Result<Tensor> {
        Ok(self.embeddings.get(index)?)
    }

    pub fn to_vecs(&self, index: usize) -> Result<Vec<Vec<f64>>> {
        Ok(self.embeddings.get(index)?.to_vec2()?)
    }
}

/// `Σ_i ‖s_i‖` per face, averaged over the batch. The gradient at a zero
/// embedding is defined as zero.
pub fn embedding_reg_loss(words: &PseudoWords) -> Result<Tensor> {
    let norms = nn::l2_norm_last_dim(words.tensor())?;
    Ok(norms.sum(D::Minus1)?.mean_all()?)
}

#[derive(Debug, Clone)]
struct Head {
    layers: Vec<Linear>,
}

/// `k` independent MLPs reading the same feature bundle.
#[derive(Debug, Clone)]
pub struct Projector {
    heads: Vec<Head>,
    mode: FeatureMode,
    feature_dim: usize,
}

impl Projector {
    pub fn new(p: Params, config: &EncoderConfig) -> Result<Self> {
        let mut heads = Vec::with_capacity(config.num_words);
        for i in 0..config.num_words {
            let hp = p.pp(format!("heads.{i}"));
            let mut widths = vec![config.projector_input_dim()];
            widths.extend(&config.projector_hidden);
            widths.push(config.text_dim);
            let layers = widths
                .windows(2)
                .enumerate()
                .map(|(j, w)| Linear::new(hp.pp(format!("fc{j}")), w[0], w[1]))
                .collect::<Result<Vec<_>>>()?;
            heads.push(Head { layers });
        }
        Ok(Self {
            heads,
            mode: config.feature_mode,
            feature_dim: config.backbone.dim,
        })
    }

    pub fn forward(&self, features: &MultiScaleFeature) -> Result<PseudoWords> {
        if features.dim() != self.feature_dim || features.num_vectors() != FEATURE_VECTORS {
            return Err(Error::Shape(format!(
                "projector expects {FEATURE_VECTORS} vectors of width {}, got {} of width {}",
                self.feature_dim,
                features.num_vectors(),
                features.dim()
            )));
        }
        let b = features.batch_size();
        let input = match self.mode {
            FeatureMode::MultiScale => features
                .tensor()
                .reshape((b, FEATURE_VECTORS * self.feature_dim))?,
            FeatureMode::FinalOnly => features
                .tensor()
                .narrow(1, FEATURE_VECTORS - 1, 1)?
                .squeeze(1)?,
        };
        let mut words = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let mut x = input.clone();
            let last = head.layers.len() - 1;
            for (j, layer) in head.layers.iter().enumerate() {
                x = layer.forward(&x)?;
                if j < last {
                    x = x.silu()?;
                }
            }
            words.push(x);
        }
        PseudoWords::new(Tensor::stack(&words, 1)?)
    }

    /// Weights and biases of head `i`, input layer first.
    pub fn head_layers(&self, i: usize) -> Vec<(Tensor, Tensor)> {
        self.heads[i]
            .layers
            .iter()
            .map(|l| {
                (
                    l.weight().clone(),
                    l.bias().expect("projector layers carry biases").clone(),
                )
            })
            .collect()
    }
}

/// The identity encoder: backbone plus projection heads.
pub struct M2Encoder {
    config: EncoderConfig,
    store: ParamStore,
    backbone: Vit,
    projector: Projector,
}

impl std::fmt::Debug for M2Encoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("M2Encoder")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl M2Encoder {
    /// Randomly initialised encoder.
    pub fn new(config: EncoderConfig, seed: u64, trainable: bool) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::seeded(seed, trainable);
        Self::build(config, store)
    }

    /// Backbone weights from a pre-trained transformer (tensor names without
    /// the `backbone.` prefix); projection heads freshly initialised.
    pub fn with_backbone(
        config: EncoderConfig,
        backbone: HashMap<String, Tensor>,
        seed: u64,
        trainable: bool,
    ) -> Result<Self> {
        config.validate()?;
        let fresh = ParamStore::seeded(seed, trainable);
        // Only used to draw the head initialisation.
        Projector::new(fresh.root().pp("projector"), &config)?;
        let mut all: HashMap<String, Tensor> = fresh.tensors().into_iter().collect();
        for (k, v) in backbone {
            all.insert(format!("backbone.{k}"), v);
        }
        let store = ParamStore::from_tensors(all, trainable);
        Self::build(config, store)
    }

    pub fn from_tensors(config: EncoderConfig, tensors: HashMap<String, Tensor>, trainable: bool) -> Result<Self> {
        config.validate()?;
        Self::build(config, ParamStore::from_tensors(tensors, trainable))
    }

    fn build(config: EncoderConfig, store: ParamStore) -> Result<Self> {
        let backbone = Vit::new(store.root().pp("backbone"), &config.backbone, config.readout)?;
        let projector = Projector::new(store.root().pp("projector"), &config)?;
        store.finish_loading()?;
        Ok(Self {
            config,
            store,
            backbone,
            projector,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Vit {
        &self.backbone
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    /// Batch tensor `(B, 3, n, n)` from aligned faces, checking resolution.
    pub fn face_batch(&self, faces: &[&AlignedFace]) -> Result<Tensor> {
        let n = self.config.input_resolution();
        if faces.is_empty() {
            return Err(Error::Shape("empty face batch".into()));
        }
        for f in faces {
            if f.resolution() != n {
                return Err(Error::Shape(format!(
                    "face {} is {}x{}, backbone expects {n}x{n}",
                    f.identity_id(),
                    f.resolution(),
                    f.resolution()
                )));
            }
        }
        let images: Vec<&Image> = faces.iter().map(|f| f.image()).collect();
        Image::batch_tensor(&images)
    }

    pub fn extract_multiscale_features(&self, faces: &[&AlignedFace]) -> Result<MultiScaleFeature> {
        self.extract_from_tensor(&self.face_batch(faces)?)
    }

    pub fn extract_from_tensor(&self, images: &Tensor) -> Result<MultiScaleFeature> {
        let points = self.config.read_points();
        let vectors = self.backbone.forward_read(images, &points)?;
        MultiScaleFeature::new(Tensor::stack(&vectors, 1)?, points)
    }

    pub fn project_to_embeddings(&self, features: &MultiScaleFeature) -> Result<PseudoWords> {
        self.projector.forward(features)
    }

    pub fn encode_identity(&self, face: &AlignedFace) -> Result<PseudoWords> {
        self.encode_batch(&[face])
    }

    pub fn encode_batch(&self, faces: &[&AlignedFace]) -> Result<PseudoWords> {
        let features = self.extract_multiscale_features(faces)?;
        self.project_to_embeddings(&features)
    }

    pub fn encode_tensor(&self, images: &Tensor) -> Result<PseudoWords> {
        self.project_to_embeddings(&self.extract_from_tensor(images)?)
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        checkpoint::save(path, ENCODER_KIND, &self.config, meta, &self.store.tensors())
    }

    /// Loads an encoder archive. Training checkpoints also carry optimizer
    /// moments under `optim.`; those are ignored here.
    pub fn load(path: &Path, trainable: bool) -> Result<Self> {
        let mut archive = checkpoint::load(path, ENCODER_KIND)?;
        archive.take_prefixed(OPTIM_PREFIX);
        let config: EncoderConfig = archive.config(path)?;
        Self::from_tensors(config, archive.tensors, trainable).map_err(|e| match e {
            Error::Config(msg) => Error::checkpoint(path, msg),
            Error::Shape(msg) => Error::checkpoint(path, format!("dimension mismatch: {msg}")),
            other => other,
        })
    }

    /// Fails unless the words this encoder emits fit a text encoder of
    /// width `text_dim`.
    pub fn check_text_dim(&self, text_dim: usize) -> Result<()> {
        if self.config.text_dim != text_dim {
            return Err(Error::Config(format!(
                "encoder emits {}-wide words, text encoder expects {text_dim}",
                self.config.text_dim
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        let vit = VitConfig {
            image_size: 16,
            patch_size: 8,
            depth: 4,
            dim: 8,
            heads: 2,
            mlp_hidden: 16,
        };
        EncoderConfig::new(vit, 6).unwrap()
    }

    fn face(seed: u64) -> AlignedFace {
        let mut r = crate::rng::rng(seed);
        let data = crate::rng::normal_vec(&mut r, 16 * 16 * 3)
            .into_iter()
            .map(|v| (v * 0.4).clamp(-1.0, 1.0))
            .collect();
        AlignedFace::new(Image::new(16, 16, data).unwrap(), "x", FaceSource::Real).unwrap()
    }

    #[test]
    fn quartiles() {
        assert_eq!(quartile_layers(12).unwrap(), vec![3, 6, 9, 12]);
        assert_eq!(quartile_layers(4).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(quartile_layers(6).unwrap(), vec![2, 3, 5, 6]);
        assert!(quartile_layers(3).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.num_words = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny();
        c.extraction_layers = vec![1, 1, 2, 3];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.extraction_layers = vec![1, 2, 3, 5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn feature_bundle_shape() {
        let enc = M2Encoder::new(tiny(), 1, false).unwrap();
        let f = face(0);
        let v = enc.extract_multiscale_features(&[&f]).unwrap();
        assert_eq!(v.num_vectors(), 5);
        assert_eq!(v.dim(), 8);
        assert_eq!(
            v.read_points(),
            &[
                ReadPoint::Block(1),
                ReadPoint::Block(2),
                ReadPoint::Block(3),
                ReadPoint::Block(4),
                ReadPoint::Final
            ]
        );
    }

    #[test]
    fn wrong_resolution_is_a_shape_error() {
        let enc = M2Encoder::new(tiny(), 1, false).unwrap();
        let img = Image::filled(8, 8, [0.0; 3]);
        let f = AlignedFace::new(img, "y", FaceSource::Real).unwrap();
        assert!(matches!(enc.encode_identity(&f), Err(Error::Shape(_))));
    }

    #[test]
    fn final_only_mode_ignores_intermediate_vectors() {
        let mut c = tiny();
        c.feature_mode = FeatureMode::FinalOnly;
        let enc = M2Encoder::new(c, 2, false).unwrap();
        let v = enc.extract_multiscale_features(&[&face(1)]).unwrap();
        let a = enc.project_to_embeddings(&v).unwrap().to_vecs(0).unwrap();
        let mut t = v.tensor().to_vec3::<f64>().unwrap();
        for row in t[0].iter_mut().take(4) {
            for x in row.iter_mut() {
                *x += 3.0;
            }
        }
        let flat: Vec<f64> = t.concat().concat();
        let perturbed = MultiScaleFeature::new(
            Tensor::from_vec(flat, (1, 5, 8), &Device::Cpu).unwrap(),
            v.read_points().to_vec(),
        )
        .unwrap();
        let b = enc.project_to_embeddings(&perturbed).unwrap().to_vecs(0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reg_loss_known_values() {
        let mut s1 = vec![0.0; 6];
        s1[0] = 3.0;
        s1[1] = 4.0;
        let w = PseudoWords::from_vecs(&[s1, vec![0.0; 6]]).unwrap();
        let l = embedding_reg_loss(&w).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l, 5.0);
        let z = PseudoWords::from_vecs(&[vec![0.0; 6], vec![0.0; 6]]).unwrap();
        assert_eq!(embedding_reg_loss(&z).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("enc.safetensors");
        let enc = M2Encoder::new(tiny(), 3, false).unwrap();
        enc.save(&p, &BTreeMap::new()).unwrap();
        let back = M2Encoder::load(&p, false).unwrap();
        let f = face(4);
        assert_eq!(
            enc.encode_identity(&f).unwrap().to_vecs(0).unwrap(),
            back.encode_identity(&f).unwrap().to_vecs(0).unwrap()
        );

        // Same tensors, but a config that claims wider words.
        let mut wrong = tiny();
        wrong.text_dim = 7;
        checkpoint::save(&p, ENCODER_KIND, &wrong, &BTreeMap::new(), &enc.store().tensors())
            .unwrap();
        let err = M2Encoder::load(&p, false).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"), "{err}");
    }

    #[test]
    fn aligned_face_rejects_out_of_range_pixels() {
        let img = Image::new(2, 2, vec![1.5; 12]).unwrap();
        assert!(AlignedFace::new(img, "z", FaceSource::Generated).is_err());
    }
}
