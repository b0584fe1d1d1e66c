//! Encoder ablation harness: trains one encoder per variant on the same data
//! and evaluates each under the same protocol.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::PromptTemplate;
use crate::encoder::{BackboneKind, FeatureMode};
use crate::evaluator::{encoder_ablation_table, run_protocol, word_count_table, EncoderVariant, EvalReport, ProtocolConfig, Scorers, TestFace};
use crate::selfaug::DatasetManifest;
use crate::trainer::{run_training, TrainConfig};
use crate::zoo::Zoo;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: EncoderVariant,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn get(&self, v: &EncoderVariant) -> Option<&EvalReport> {
        self.rows.iter().find(|r| &r.variant == v).map(|r| &r.report)
    }

    /// Backbone and feature ablation, in the fixed row order.
    pub fn encoder_table(&self) -> String {
        let rows: Vec<_> = EncoderVariant::table_rows()
            .iter()
            .filter_map(|v| self.get(v).map(|r| (*v, r)))
            .collect();
        encoder_ablation_table(&rows)
    }

    /// Word-count ablation over the multi-scale face-ID encoder.
    pub fn word_count_table(&self) -> String {
        let rows: Vec<_> = self
            .rows
            .iter()
            .filter(|r| r.variant.backbone == BackboneKind::FaceId && r.variant.feature_mode == FeatureMode::MultiScale)
            .map(|r| (r.variant.num_words, &r.report))
            .collect();
        word_count_table(&rows)
    }
}

/// The encoder-table rows plus `k = 3`.
pub fn default_variants() -> Vec<EncoderVariant> {
    let mut v = EncoderVariant::table_rows().to_vec();
    v.push(EncoderVariant {
        backbone: BackboneKind::FaceId,
        feature_mode: FeatureMode::MultiScale,
        num_words: 3,
    });
    v
}

#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    zoo: &Zoo,
    manifest: &DatasetManifest,
    test_faces: &[TestFace],
    prompts: &[PromptTemplate],
    train: &TrainConfig,
    protocol: &ProtocolConfig,
    variants: &[EncoderVariant],
    out: &Path,
) -> Result<AblationReport> {
    let scorers = Scorers {
        similarity: crate::scoring::FaceSimilarity {
            scorer: &zoo.face_id,
            detector: &crate::detect::ToyDetector::default(),
            crop: protocol.crop.clone(),
        },
        joint: &zoo.clip,
    };
    let identities = manifest.selfaug_identities();
    let mut rows = Vec::new();
    for v in variants {
        let mut cfg = train.clone();
        cfg.encoder.backbone = v.backbone;
        cfg.encoder.feature_mode = v.feature_mode;
        cfg.encoder.num_words = v.num_words;
        let dir = out.join(v.label());
        log::info!("ablation variant {}", v.label());
        let settings = cfg.encoder.clone();
        let outcome = run_training(&cfg, manifest, &zoo.backend, || settings.build(zoo), &dir)?;
        let last = outcome.checkpoints.last().expect("training saves at least one checkpoint");
        let encoder = crate::encoder::M2Encoder::load(last, false)?;
        let report = run_protocol(&encoder, &zoo.backend, test_faces, prompts, &identities, &scorers, protocol, None)?;
        rows.push(AblationRow { variant: *v, report });
    }
    Ok(AblationReport { rows })
}
