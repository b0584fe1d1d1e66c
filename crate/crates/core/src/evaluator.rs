//! Evaluation protocol and report tables.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{assemble_conditioning, PromptTemplate};
use crate::detect::{crop_align_filter, CropConfig, FaceDetector};
use crate::diffusion::sampler::{ddim_sample_batch, write_with_sidecar, SamplerConfig, Sidecar};
use crate::diffusion::DiffusionBackend;
use crate::encoder::{AlignedFace, BackboneKind, FaceSource, FeatureMode, M2Encoder};
use crate::image::Image;
use crate::rng::derive_seed;
use crate::scoring::{text_alignment, FaceSimilarity, JointEmbedder};
use crate::{Error, Result};

/// Images generated per (identity, prompt) cell.
pub const IMAGES_PER_CELL: usize = 4;

/// A test identity: the photo as given and its aligned crop.
#[derive(Debug, Clone)]
pub struct TestFace {
    pub identity_id: String,
    pub image: Image,
    pub face: AlignedFace,
}

impl TestFace {
    pub fn new(identity_id: impl Into<String>, image: Image, detector: &dyn FaceDetector, crop: &CropConfig) -> Result<Self> {
        let identity_id = identity_id.into();
        let face = crop_align_filter(detector, &image, crop, &identity_id, FaceSource::Real)
            .map_err(|r| Error::Image(format!("test face {identity_id}: {r}")))?;
        Ok(Self {
            identity_id,
            image,
            face,
        })
    }
}

/// Every PNG in `dir`, one identity per file named by its stem.
pub fn load_test_faces(dir: &Path, detector: &dyn FaceDetector, crop: &CropConfig) -> Result<Vec<TestFace>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Image(format!("no face images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            TestFace::new(id, Image::load(p)?, detector, crop)
        })
        .collect()
}

/// Test identities that also appear among the self-augmented celebrities,
/// compared case-insensitively.
pub fn identity_overlap(test: &[String], selfaug: &[String]) -> Vec<String> {
    let known: BTreeSet<String> = selfaug.iter().map(|s| s.to_lowercase()).collect();
    let hits: BTreeSet<String> = test.iter().filter(|t| known.contains(&t.to_lowercase())).cloned().collect();
    hits.into_iter().collect()
}

pub fn check_disjoint(test: &[String], selfaug: &[String]) -> Result<()> {
    let overlap = identity_overlap(test, selfaug);
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::IdentityOverlap(overlap))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub trials: usize,
    pub median_s: f64,
    pub p95_s: f64,
}

impl TimingStats {
    /// Median (mean of the middle pair for even counts) and nearest-rank
    /// 95th percentile.
    pub fn from_samples(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("timing needs at least one trial".into()));
        }
        samples.sort_by(f64::total_cmp);
        let n = samples.len();
        let median = if n % 2 == 1 {
            samples[n / 2]
        } else {
            (samples[n / 2 - 1] + samples[n / 2]) / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Ok(Self {
            trials: n,
            median_s: median,
            p95_s: samples[rank - 1],
        })
    }
}

/// Wall-clock per `encode_identity` call after one warm-up call.
pub fn measure_encoding_time(encoder: &M2Encoder, faces: &[&AlignedFace], trials: usize) -> Result<TimingStats> {
    let first = faces
        .first()
        .ok_or_else(|| Error::Config("timing needs at least one face".into()))?;
    encoder.encode_identity(first)?;
    let samples = (0..trials)
        .map(|i| {
            let start = Instant::now();
            encoder.encode_identity(faces[i % faces.len()])?;
            Ok(start.elapsed().as_secs_f64())
        })
        .collect::<Result<Vec<_>>>()?;
    TimingStats::from_samples(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub identity_id: String,
    pub prompt: String,
    pub text_alignment: f64,
    pub face_similarity: f64,
    pub n_images: usize,
    /// Generations without a usable face (scored -1).
    pub no_face: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub text_alignment: f64,
    pub face_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<CellRecord>,
    pub aggregates: Aggregates,
    pub encoding_time: TimingStats,
    pub config_hash: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn total_images(&self) -> usize {
        self.cells.iter().map(|c| c.n_images).sum()
    }
}

/// Means of per-cell values.
pub fn aggregate(cells: &[CellRecord]) -> Aggregates {
    let n = cells.len().max(1) as f64;
    Aggregates {
        text_alignment: cells.iter().map(|c| c.text_alignment).sum::<f64>() / n,
        face_similarity: cells.iter().map(|c| c.face_similarity).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub images_per_cell: usize,
    pub sampler: SamplerConfig,
    pub timing_trials: usize,
    pub crop: CropConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            images_per_cell: IMAGES_PER_CELL,
            sampler: SamplerConfig::default(),
            timing_trials: 20,
            crop: CropConfig::default(),
        }
    }
}

/// The frozen scorers of the protocol.
pub struct Scorers<'a> {
    pub similarity: FaceSimilarity<'a>,
    pub joint: &'a dyn JointEmbedder,
}

/// Seed of image `j` of a cell.
pub fn cell_seed(base: u64, identity: &str, prompt: &str, j: usize) -> u64 {
    derive_seed(base, &["eval", identity, prompt, &j.to_string()])
}

/// Generates `images_per_cell` images per (identity, prompt) and scores
/// them. Refuses to run when a test identity is a self-augmented one.
#[allow(clippy::too_many_arguments)]
pub fn run_protocol(
    encoder: &M2Encoder,
    backend: &dyn DiffusionBackend,
    test_faces: &[TestFace],
    prompts: &[PromptTemplate],
    selfaug_identities: &[String],
    scorers: &Scorers,
    cfg: &ProtocolConfig,
    image_dir: Option<&Path>,
) -> Result<EvalReport> {
    let ids: Vec<String> = test_faces.iter().map(|f| f.identity_id.clone()).collect();
    check_disjoint(&ids, selfaug_identities)?;
    if test_faces.is_empty() || prompts.is_empty() {
        return Err(Error::Config("evaluation needs at least one face and one prompt".into()));
    }
    if cfg.images_per_cell == 0 {
        return Err(Error::Config("images per cell must be positive".into()));
    }
    cfg.sampler.validate()?;
    let mut cells = Vec::new();
    for tf in test_faces {
        let words = encoder.encode_identity(&tf.face)?.sample(0)?;
        let reference = match scorers.similarity.embed(&tf.image) {
            Ok(v) => v?,
            Err(r) => return Err(Error::Image(format!("test face {}: {r}", tf.identity_id))),
        };
        for prompt in prompts {
            let cond = assemble_conditioning(backend.text(), prompt, &words)?;
            let seeds: Vec<u64> = (0..cfg.images_per_cell)
                .map(|j| cell_seed(cfg.sampler.seed, &tf.identity_id, prompt.text(), j))
                .collect();
            let images = ddim_sample_batch(backend, &vec![&cond; seeds.len()], &seeds, &cfg.sampler)?;
            let refs: Vec<&Image> = images.iter().collect();
            let ta = text_alignment(scorers.joint, &refs, &prompt.alignment_text())?;
            let mut fs = 0.0;
            let mut no_face = 0;
            for img in &images {
                let s = scorers.similarity.score_against(&reference, img)?;
                if s.rejection.is_some() {
                    no_face += 1;
                }
                fs += s.score;
            }
            if let Some(dir) = image_dir {
                for (j, (img, seed)) in images.iter().zip(&seeds).enumerate() {
                    let stem = format!("{}-{}-{j}", tf.identity_id, prompt_slug(prompt.text()));
                    let sidecar = Sidecar {
                        prompt: prompt.text().to_string(),
                        seed: *seed,
                        sampler: cfg.sampler.with_seed(*seed),
                        identity: Some(tf.identity_id.clone()),
                    };
                    write_with_sidecar(dir, &stem, img, &sidecar)?;
                }
            }
            cells.push(CellRecord {
                identity_id: tf.identity_id.clone(),
                prompt: prompt.text().to_string(),
                text_alignment: ta,
                face_similarity: fs / images.len() as f64,
                n_images: images.len(),
                no_face,
            });
        }
    }
    let faces: Vec<&AlignedFace> = test_faces.iter().map(|f| &f.face).collect();
    let encoding_time = measure_encoding_time(encoder, &faces, cfg.timing_trials.max(1))?;
    let hash_input = serde_json::to_vec(&(cfg, &ids, prompts.iter().map(|p| p.text()).collect::<Vec<_>>()))?;
    Ok(EvalReport {
        aggregates: aggregate(&cells),
        cells,
        encoding_time,
        config_hash: hex::encode(Sha256::digest(&hash_input))[..16].to_string(),
    })
}

/// File-name friendly form of a prompt.
pub fn prompt_slug(prompt: &str) -> String {
    let mut s: String = prompt
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    while s.contains("--") {
        s = s.replace("--", "-");
    }
    s.trim_matches('-').to_string()
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        ""
    }
}

fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<String>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(header.iter().map(|h| h.to_string()).collect());
    out.push_str(&format!(
        "|{}|\n",
        widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")
    ));
    for r in rows {
        out.push_str(&line(r.clone()));
    }
    out
}

fn score(x: f64) -> String {
    format!("{x:.3}")
}

fn seconds(x: f64) -> String {
    if x < 1.0 {
        format!("{x:.4} s")
    } else {
        format!("{x:.1} s")
    }
}

/// Method comparison: Methods / Text-alignment / Face similarity /
/// Encoding Time.
pub fn comparison_table(rows: &[(String, &EvalReport)]) -> String {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, r)| {
            vec![
                name.clone(),
                score(r.aggregates.text_alignment),
                score(r.aggregates.face_similarity),
                seconds(r.encoding_time.median_s),
            ]
        })
        .collect();
    render_table(&["Methods", "Text-alignment ↑", "Face similarity ↑", "Encoding Time ↓"], &rows)
}

/// One configuration of the encoder ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderVariant {
    pub backbone: BackboneKind,
    pub feature_mode: FeatureMode,
    pub num_words: usize,
}

impl EncoderVariant {
    pub fn label(&self) -> String {
        format!(
            "{}-{}-k{}",
            match self.backbone {
                BackboneKind::FaceId => "faceid",
                BackboneKind::Generic => "generic",
            },
            match self.feature_mode {
                FeatureMode::MultiScale => "ms",
                FeatureMode::FinalOnly => "final",
            },
            self.num_words
        )
    }

    /// The four rows of the encoder ablation, in table order.
    pub fn table_rows() -> [EncoderVariant; 4] {
        let v = |backbone, feature_mode, num_words| EncoderVariant {
            backbone,
            feature_mode,
            num_words,
        };
        [
            v(BackboneKind::Generic, FeatureMode::FinalOnly, 1),
            v(BackboneKind::FaceId, FeatureMode::FinalOnly, 1),
            v(BackboneKind::FaceId, FeatureMode::MultiScale, 1),
            v(BackboneKind::FaceId, FeatureMode::MultiScale, 2),
        ]
    }
}

/// Encoder ablation: ID Encoder / MS Feat / Multi Embedding /
/// Text-alignment / Face-similarity.
pub fn encoder_ablation_table(rows: &[(EncoderVariant, &EvalReport)]) -> String {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|(v, r)| {
            vec![
                mark(v.backbone == BackboneKind::FaceId).to_string(),
                mark(v.feature_mode == FeatureMode::MultiScale).to_string(),
                mark(v.num_words > 1).to_string(),
                score(r.aggregates.text_alignment),
                score(r.aggregates.face_similarity),
            ]
        })
        .collect();
    render_table(
        &["ID Encoder", "MS Feat", "Multi Embedding", "Text-alignment ↑", "Face-similarity ↑"],
        &rows,
    )
}

/// Training-data ablation: Recon / self-aug / Text-alignment / Face
/// similarity.
pub fn data_ablation_table(rows: &[((bool, bool), &EvalReport)]) -> String {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|((recon, selfaug), r)| {
            vec![
                mark(*recon).to_string(),
                mark(*selfaug).to_string(),
                score(r.aggregates.text_alignment),
                score(r.aggregates.face_similarity),
            ]
        })
        .collect();
    render_table(&["Recon", "self-aug", "Text-alignment ↑", "Face similarity ↑"], &rows)
}

/// Word-count ablation: Emb Num / Text-alignment / Face similarity.
pub fn word_count_table(rows: &[(usize, &EvalReport)]) -> String {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|(k, r)| vec![k.to_string(), score(r.aggregates.text_alignment), score(r.aggregates.face_similarity)])
        .collect();
    render_table(&["Emb Num", "Text-alignment ↑", "Face similarity ↑"], &rows)
}

/// Per-cell breakdown of one report.
pub fn cell_table(report: &EvalReport) -> String {
    let rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            vec![
                c.identity_id.clone(),
                c.prompt.clone(),
                score(c.text_alignment),
                score(c.face_similarity),
                c.n_images.to_string(),
            ]
        })
        .collect();
    render_table(&["Identity", "Prompt", "Text-alignment", "Face similarity", "Images"], &rows)
}
