//! Self-augmented editability dataset: celebrity names in, filtered
//! <identity face, editing prompt, edited image> triplets out.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{placeholder_form, plain_conditioning, render_prompt, PromptTemplate, SOURCE_FACE_TEMPLATE};
use crate::detect::{crop_align_filter, CropConfig, FaceDetector, Rejection};
use crate::diffusion::sampler::{ddim_sample_batch, SamplerConfig};
use crate::diffusion::DiffusionBackend;
use crate::encoder::{AlignedFace, FaceSource};
use crate::face::{render, FaceParams, RenderOpts};
use crate::image::Image;
use crate::rng::{self, derive_seed};
use crate::scoring::{FaceSimilarity, JointEmbedder, NO_FACE_SCORE};
use crate::{Error, Result};

pub const MANIFEST_FORMAT: &str = "dreamid-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGES_DIR: &str = "images";

/// Deduplicated, ordered celebrity names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CelebrityList {
    pub names: Vec<String>,
    pub provenance: String,
}

impl CelebrityList {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// One name per line; blank lines and `#` comments skipped; the first
/// spelling of a case-insensitive duplicate wins.
pub fn ingest_names(text: &str, provenance: impl Into<String>) -> Result<CelebrityList> {
    let mut seen = HashSet::new();
    let mut names = Vec::new();
    let mut dropped = 0usize;
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let line = line.split_whitespace().collect::<Vec<_>>().join(" ");
        if seen.insert(line.to_lowercase()) {
            names.push(line);
        } else {
            log::debug!("duplicate name {line:?} dropped");
            dropped += 1;
        }
    }
    if names.is_empty() {
        return Err(Error::Dataset("name source is empty".into()));
    }
    if dropped > 0 {
        log::info!("{dropped} duplicate names dropped");
    }
    Ok(CelebrityList {
        names,
        provenance: provenance.into(),
    })
}

pub fn ingest_names_file(path: &Path) -> Result<CelebrityList> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading names {}", path.display()), e))?;
    ingest_names(&text, path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfAugConfig {
    pub per_name: usize,
    pub per_pair: usize,
    pub keep_fraction: f64,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub crop: CropConfig,
    /// Reconstruction identities rendered as the real-face corpus.
    pub recon_identities: usize,
    pub recon_photos: usize,
    /// Images sampled per backend call.
    pub batch: usize,
}

impl Default for SelfAugConfig {
    fn default() -> Self {
        Self {
            per_name: 4,
            per_pair: 4,
            keep_fraction: 0.25,
            seed: 0,
            sampler: SamplerConfig::default(),
            crop: CropConfig::default(),
            recon_identities: 64,
            recon_photos: 4,
            batch: 32,
        }
    }
}

impl SelfAugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_name == 0 || self.per_pair == 0 {
            return Err(Error::Config("per_name and per_pair must be positive".into()));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!("keep fraction {} is not in (0, 1]", self.keep_fraction)));
        }
        if self.batch == 0 {
            return Err(Error::Config("sampling batch must be positive".into()));
        }
        self.sampler.validate()
    }

    pub fn hash(&self, names: &CelebrityList, templates: &[String]) -> Result<String> {
        let json = serde_json::to_vec(&(self, &names.names, templates))?;
        Ok(hex::encode(Sha256::digest(&json))[..16].to_string())
    }
}

/// A generated image with the prompt and seed that produced it.
#[derive(Debug, Clone)]
pub struct Generated {
    pub name: String,
    pub prompt: String,
    pub seed: u64,
    pub index: usize,
    pub image: Image,
}

struct Job {
    name: String,
    prompt: String,
    seed: u64,
    index: usize,
}

/// Samples every job, batching backend calls. A failing batch is retried
/// item by item and failing items are skipped.
fn run_jobs(backend: &dyn DiffusionBackend, jobs: Vec<Job>, cfg: &SelfAugConfig) -> Vec<Generated> {
    let mut out = Vec::with_capacity(jobs.len());
    let sample = |chunk: &[Job]| -> Result<Vec<Image>> {
        let conds = chunk
            .iter()
            .map(|j| plain_conditioning(backend.text(), &j.prompt))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = conds.iter().collect();
        let seeds: Vec<u64> = chunk.iter().map(|j| j.seed).collect();
        ddim_sample_batch(backend, &refs, &seeds, &cfg.sampler)
    };
    for chunk in jobs.chunks(cfg.batch) {
        let images = match sample(chunk) {
            Ok(images) => images.into_iter().map(Some).collect(),
            Err(e) => {
                log::warn!("batch failed ({e}); retrying one by one");
                chunk
                    .iter()
                    .map(|j| match sample(std::slice::from_ref(j)) {
                        Ok(mut v) => v.pop(),
                        Err(e) => {
                            log::warn!("skipping {:?} seed {}: {e}", j.prompt, j.seed);
                            None
                        }
                    })
                    .collect::<Vec<_>>()
            }
        };
        for (job, image) in chunk.iter().zip(images) {
            if let Some(image) = image {
                out.push(Generated {
                    name: job.name.clone(),
                    prompt: job.prompt.clone(),
                    seed: job.seed,
                    index: job.index,
                    image,
                });
            }
        }
    }
    out
}

/// `per_name` faces per name from the source-face template.
pub fn generate_source_faces(
    list: &CelebrityList,
    backend: &dyn DiffusionBackend,
    per_name: usize,
    cfg: &SelfAugConfig,
) -> Result<Vec<Generated>> {
    let mut jobs = Vec::new();
    for name in &list.names {
        let prompt = render_prompt(SOURCE_FACE_TEMPLATE, name)?;
        for index in 0..per_name {
            let seed = derive_seed(cfg.seed, &["source", &name.to_lowercase(), &index.to_string()]);
            jobs.push(Job {
                name: name.clone(),
                prompt: prompt.clone(),
                seed,
                index,
            });
        }
    }
    Ok(run_jobs(backend, jobs, cfg))
}

/// `per_pair` edited images per (name, template). Returned prompts are in
/// placeholder form; the generating name survives only as `Generated::name`,
/// which pairs edits with source faces.
pub fn generate_edited_images(
    list: &CelebrityList,
    templates: &[String],
    backend: &dyn DiffusionBackend,
    per_pair: usize,
    cfg: &SelfAugConfig,
) -> Result<Vec<Generated>> {
    let mut jobs = Vec::new();
    for name in &list.names {
        for (ti, template) in templates.iter().enumerate() {
            let prompt = render_prompt(template, name)?;
            for j in 0..per_pair {
                let index = ti * per_pair + j;
                let seed = derive_seed(cfg.seed, &["edit", &name.to_lowercase(), &ti.to_string(), &j.to_string()]);
                jobs.push(Job {
                    name: name.clone(),
                    prompt: prompt.clone(),
                    seed,
                    index,
                });
            }
        }
    }
    let mut out = run_jobs(backend, jobs, cfg);
    for g in &mut out {
        let ti = g.index / per_pair;
        g.prompt = placeholder_form(&templates[ti]);
    }
    Ok(out)
}

/// A source face that passed detection and the size filter.
#[derive(Debug, Clone)]
pub struct SourceFace {
    pub generated: Generated,
    pub face: AlignedFace,
}

pub fn filter_sources(generated: Vec<Generated>, detector: &dyn FaceDetector, crop: &CropConfig) -> Vec<SourceFace> {
    generated
        .into_iter()
        .filter_map(|g| match crop_align_filter(detector, &g.image, crop, &g.name, FaceSource::Generated) {
            Ok(face) => Some(SourceFace { generated: g, face }),
            Err(r) => {
                log::info!("source face {} #{} rejected: {r}", g.name, g.index);
                None
            }
        })
        .collect()
}

/// An unscored triplet.
#[derive(Debug, Clone)]
pub struct Candidate {
    /// Stable id; ties in the ranking break on it.
    pub id: String,
    pub identity_id: String,
    pub source: Image,
    pub face: AlignedFace,
    pub prompt: String,
    pub edited: Image,
}

/// Pairs the j-th edited image of a name with its (j mod n)-th accepted
/// source face. Names without an accepted source yield nothing.
pub fn pair_candidates(sources: &[SourceFace], edited: Vec<Generated>) -> Vec<Candidate> {
    let mut by_name: BTreeMap<String, Vec<&SourceFace>> = BTreeMap::new();
    for s in sources {
        by_name.entry(s.generated.name.clone()).or_default().push(s);
    }
    for v in by_name.values_mut() {
        v.sort_by_key(|s| s.generated.index);
    }
    let mut out = Vec::new();
    for (order, g) in edited.into_iter().enumerate() {
        let Some(faces) = by_name.get(&g.name) else {
            log::info!("no accepted source face for {}; its edits are dropped", g.name);
            continue;
        };
        let s = faces[g.index % faces.len()];
        out.push(Candidate {
            id: format!("{order:06}"),
            identity_id: g.name,
            source: s.generated.image.clone(),
            face: s.face.clone(),
            prompt: g.prompt,
            edited: g.image,
        });
    }
    out
}

/// Scores of one candidate within its prompt group.
#[derive(Debug, Clone, PartialEq)]
pub struct RankInput {
    pub id: String,
    pub group: String,
    pub id_score: f64,
    pub clip_score: f64,
    /// False when the edited image has no usable face.
    pub has_face: bool,
}

/// Rank score per candidate: the sum of min-max normalised identity and
/// text scores within the prompt group, in [0, 2]; -1 for faceless images.
pub fn rank_scores(inputs: &[RankInput]) -> Vec<f64> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in inputs.iter().enumerate() {
        groups.entry(&c.group).or_default().push(i);
    }
    let mut out = vec![NO_FACE_SCORE; inputs.len()];
    for members in groups.values() {
        let faced: Vec<usize> = members.iter().copied().filter(|&i| inputs[i].has_face).collect();
        let norm = |f: &dyn Fn(&RankInput) -> f64| {
            let lo = faced.iter().map(|&i| f(&inputs[i])).fold(f64::INFINITY, f64::min);
            let hi = faced.iter().map(|&i| f(&inputs[i])).fold(f64::NEG_INFINITY, f64::max);
            move |x: f64| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 }
        };
        let id_norm = norm(&|c| c.id_score);
        let clip_norm = norm(&|c| c.clip_score);
        for &i in &faced {
            out[i] = id_norm(inputs[i].id_score) + clip_norm(inputs[i].clip_score);
        }
    }
    out
}

/// Number kept from a group of `n`.
pub fn keep_count(n: usize, keep_fraction: f64) -> usize {
    if n == 0 {
        0
    } else {
        ((keep_fraction * n as f64).floor() as usize).clamp(1, n)
    }
}

/// Keep flags: the top `keep_count` of every prompt group by rank score,
/// ties broken by ascending id.
pub fn select(inputs: &[RankInput], keep_fraction: f64) -> Vec<bool> {
    let scores = rank_scores(inputs);
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in inputs.iter().enumerate() {
        groups.entry(&c.group).or_default().push(i);
    }
    let mut kept = vec![false; inputs.len()];
    for members in groups.values_mut() {
        members.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then_with(|| inputs[a].id.cmp(&inputs[b].id))
        });
        for &i in members.iter().take(keep_count(members.len(), keep_fraction)) {
            kept[i] = true;
        }
    }
    kept
}

#[derive(Debug, Clone)]
pub struct Triplet {
    pub candidate: Candidate,
    pub id_score: f64,
    pub clip_score: f64,
    pub rank_score: f64,
    pub rejection: Option<Rejection>,
    pub kept: bool,
}

/// Scores every candidate and keeps the top fraction per prompt.
pub fn score_and_filter(
    candidates: Vec<Candidate>,
    similarity: &FaceSimilarity,
    joint: &dyn JointEmbedder,
    keep_fraction: f64,
) -> Result<Vec<Triplet>> {
    let mut inputs = Vec::with_capacity(candidates.len());
    let mut rejections = Vec::with_capacity(candidates.len());
    let mut text_cache: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for c in &candidates {
        let s = similarity.score(&c.source, &c.edited)?;
        if let Some(r) = &s.rejection {
            log::info!("candidate {} ({}) has no usable face: {r}", c.id, c.prompt);
        }
        let text = PromptTemplate::editing(c.prompt.clone())?.alignment_text();
        if !text_cache.contains_key(&text) {
            let e = joint.embed_texts(&[&text])?.remove(0);
            text_cache.insert(text.clone(), e);
        }
        let img = joint.embed_images(&[&c.edited])?.remove(0);
        let clip_score = crate::scoring::cosine(&text_cache[&text], &img);
        inputs.push(RankInput {
            id: c.id.clone(),
            group: c.prompt.clone(),
            id_score: s.score,
            clip_score,
            has_face: s.rejection.is_none(),
        });
        rejections.push(s.rejection);
    }
    let scores = rank_scores(&inputs);
    let kept = select(&inputs, keep_fraction);
    Ok(candidates
        .into_iter()
        .zip(inputs)
        .zip(rejections)
        .enumerate()
        .map(|(i, ((candidate, input), rejection))| Triplet {
            candidate,
            id_score: input.id_score,
            clip_score: input.clip_score,
            rank_score: scores[i],
            rejection,
            kept: kept[i],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Reconstruction,
    Selfaug,
}

/// One manifest record. Field order here is the canonical serialised order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub kind: SampleKind,
    pub identity_id: String,
    /// Aligned conditioning face, relative to the dataset root.
    pub face: String,
    /// Image the diffusion loss reconstructs.
    pub target: String,
    /// Placeholder-form prompt.
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub reconstruction: usize,
    pub selfaug: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    counts: ManifestCounts,
    config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub config_hash: String,
}

impl DatasetManifest {
    pub fn counts(&self) -> ManifestCounts {
        let selfaug = self.entries.iter().filter(|e| e.kind == SampleKind::Selfaug).count();
        ManifestCounts {
            reconstruction: self.entries.len() - selfaug,
            selfaug,
        }
    }

    pub fn of_kind(&self, kind: SampleKind) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.kind == kind).collect()
    }

    /// Distinct identities of the self-augmented part.
    pub fn selfaug_identities(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&str> = self
            .entries
            .iter()
            .filter(|e| e.kind == SampleKind::Selfaug)
            .map(|e| e.identity_id.as_str())
            .collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Referenced files that do not exist.
    pub fn missing_files(&self) -> Vec<String> {
        let mut missing: Vec<String> = self
            .entries
            .iter()
            .flat_map(|e| [&e.face, &e.target])
            .filter(|r| !self.root.join(r).is_file())
            .cloned()
            .collect();
        missing.sort();
        missing.dedup();
        missing
    }

    fn canonicalize(&mut self) {
        self.entries.sort_by(|a, b| {
            (a.kind, &a.identity_id, &a.prompt, &a.target, &a.face).cmp(&(b.kind, &b.identity_id, &b.prompt, &b.target, &b.face))
        });
    }

    /// Canonical JSONL text: header line, then one entry per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            counts: self.counts(),
            config_hash: self.config_hash.clone(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        let mut lines = text.lines();
        let header: ManifestHeader = serde_json::from_str(lines.next().ok_or_else(|| Error::Dataset("empty manifest".into()))?)
            .map_err(|e| Error::Dataset(format!("bad manifest header: {e}")))?;
        if header.format != MANIFEST_FORMAT {
            return Err(Error::Dataset(format!("not a manifest: format {:?}", header.format)));
        }
        if header.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!("manifest version {} is not supported", header.version)));
        }
        let entries = lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Dataset(format!("manifest line {}: {e}", i + 2))))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        let manifest = Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
            config_hash: header.config_hash,
        };
        if manifest.counts() != header.counts {
            return Err(Error::Dataset("manifest header counts disagree with its entries".into()));
        }
        let missing = manifest.missing_files();
        if !missing.is_empty() {
            return Err(Error::DanglingRefs(missing));
        }
        Ok(manifest)
    }
}

/// Content-addressed PNG store under `<root>/images`.
pub struct ImageStore {
    root: PathBuf,
}

impl ImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes the image (if new) and returns its path relative to the root.
    pub fn put(&self, image: &Image) -> Result<String> {
        let bytes = image.png_bytes()?;
        let hash = hex::encode(Sha256::digest(&bytes));
        let rel = format!("{IMAGES_DIR}/{}/{hash}.png", &hash[..2]);
        let path = self.root.join(&rel);
        if !path.is_file() {
            let dir = path.parent().expect("image path has a parent");
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            std::fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        Ok(rel)
    }
}

/// Stores kept triplets; returns their manifest entries.
pub fn store_triplets(store: &ImageStore, triplets: &[Triplet]) -> Result<Vec<ManifestEntry>> {
    triplets
        .iter()
        .filter(|t| t.kept)
        .map(|t| {
            Ok(ManifestEntry {
                kind: SampleKind::Selfaug,
                identity_id: t.candidate.identity_id.clone(),
                face: store.put(t.candidate.face.image())?,
                target: store.put(&t.candidate.edited)?,
                prompt: t.candidate.prompt.clone(),
                id_score: Some(t.id_score),
                clip_score: Some(t.clip_score),
            })
        })
        .collect()
}

/// Identity id of the i-th rendered reconstruction identity.
pub fn recon_identity_id(i: usize) -> String {
    format!("real-{i:04}")
}

/// The real-face corpus: jittered photos of random identities, aligned.
/// The photo is the diffusion target; its aligned crop is the face.
pub fn render_recon_entries(
    store: &ImageStore,
    identities: usize,
    photos: usize,
    seed: u64,
    detector: &dyn FaceDetector,
    crop: &CropConfig,
) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for i in 0..identities {
        let id = recon_identity_id(i);
        let params = FaceParams::from_seed(derive_seed(seed, &["recon-identity", &i.to_string()]));
        let mut r = rng::rng(derive_seed(seed, &["recon-photos", &i.to_string()]));
        for p in 0..photos {
            let mut photo = render(&params, &RenderOpts::jittered(&mut r, 64));
            let face = match crop_align_filter(detector, &photo, crop, &id, FaceSource::Real) {
                Ok(f) => f,
                Err(rej) => {
                    log::info!("recon photo {id}#{p} rejected ({rej}); using a centred render");
                    photo = render(&params, &RenderOpts::default());
                    match crop_align_filter(detector, &photo, crop, &id, FaceSource::Real) {
                        Ok(f) => f,
                        Err(_) => continue,
                    }
                }
            };
            out.push(ManifestEntry {
                kind: SampleKind::Reconstruction,
                identity_id: id.clone(),
                face: store.put(face.image())?,
                target: store.put(&photo)?,
                prompt: crate::conditioning::RECONSTRUCTION_TEMPLATE.to_string(),
                id_score: None,
                clip_score: None,
            });
        }
    }
    Ok(out)
}

/// Single finalisation step: canonical order, reference check, write.
pub fn write_manifest(
    root: &Path,
    triplets: Vec<ManifestEntry>,
    recon_entries: Vec<ManifestEntry>,
    config_hash: &str,
) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        root: root.to_path_buf(),
        entries: recon_entries.into_iter().chain(triplets).collect(),
        config_hash: config_hash.to_string(),
    };
    manifest.canonicalize();
    let missing = manifest.missing_files();
    if !missing.is_empty() {
        return Err(Error::DanglingRefs(missing));
    }
    let path = root.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_jsonl()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

/// Everything a dataset build needs besides its configuration.
pub struct Builders<'a> {
    pub backend: &'a dyn DiffusionBackend,
    pub similarity: FaceSimilarity<'a>,
    pub joint: &'a dyn JointEmbedder,
}

/// The whole pipeline: sources, edits, scoring, filtering and the
/// manifest, written under `out`.
pub fn build_dataset(
    list: &CelebrityList,
    templates: &[String],
    cfg: &SelfAugConfig,
    models: &Builders,
    out: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let store = ImageStore::new(out);
    let sources = generate_source_faces(list, models.backend, cfg.per_name, cfg)?;
    log::info!("{} source faces generated", sources.len());
    let sources = filter_sources(sources, models.similarity.detector, &cfg.crop);
    log::info!("{} source faces accepted", sources.len());
    let edited = generate_edited_images(list, templates, models.backend, cfg.per_pair, cfg)?;
    log::info!("{} edited images generated", edited.len());
    let candidates = pair_candidates(&sources, edited);
    let triplets = score_and_filter(candidates, &models.similarity, models.joint, cfg.keep_fraction)?;
    let kept = store_triplets(&store, &triplets)?;
    log::info!("{} of {} triplets kept", kept.len(), triplets.len());
    let recon = render_recon_entries(
        &store,
        cfg.recon_identities,
        cfg.recon_photos,
        cfg.seed,
        models.similarity.detector,
        &cfg.crop,
    )?;
    write_manifest(out, kept, recon, &cfg.hash(list, templates)?)
}
