#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use candle_core::Tensor;
use dreamid::detect::{CropConfig, ToyDetector};
use dreamid::diffusion::backend::{BackendConfig, ToyBackend};
use dreamid::encoder::{EncoderConfig, M2Encoder};
use dreamid::selfaug::{ingest_names_file, render_recon_entries, write_manifest, DatasetManifest, ImageStore, ManifestEntry, SampleKind};
use dreamid::vit::VitConfig;
use dreamid::zoo::{Zoo, ZooRecipe};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn names_file() -> PathBuf {
    fixtures().join("celebrities.txt")
}

/// The shipped pre-trained models, or a quickly trained stand-in when the
/// fixtures are missing.
pub fn zoo_dir() -> PathBuf {
    let shipped = fixtures().join("zoo");
    if Zoo::paths(&shipped).iter().all(|p| p.is_file()) {
        return shipped;
    }
    static BUILT: OnceLock<PathBuf> = OnceLock::new();
    BUILT
        .get_or_init(|| {
            let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("tiny-zoo");
            let names = ingest_names_file(&names_file()).unwrap().names;
            let mut recipe = ZooRecipe::new(names);
            recipe.backend.steps = 150;
            recipe.face_id.steps = 150;
            recipe.clip.steps = 100;
            Zoo::load_or_build(&dir, &recipe).expect("tiny zoo builds");
            dir
        })
        .clone()
}

pub fn zoo() -> Zoo {
    Zoo::load(&zoo_dir()).expect("zoo loads")
}

/// Small untrained backend for shape and gradient tests.
pub fn tiny_backend(seed: u64) -> ToyBackend {
    ToyBackend::new(BackendConfig::with_names(&["Ada Vell", "Bo Lin"]), seed, false).unwrap()
}

pub fn tiny_vit() -> VitConfig {
    VitConfig {
        image_size: 16,
        patch_size: 8,
        depth: 4,
        dim: 8,
        heads: 2,
        mlp_hidden: 16,
    }
}

pub fn tiny_encoder(text_dim: usize, k: usize, seed: u64, trainable: bool) -> M2Encoder {
    let cfg = EncoderConfig::new(tiny_vit(), text_dim).unwrap().with_words(k);
    M2Encoder::new(cfg, seed, trainable).unwrap()
}

/// Reconstruction-only manifest of `identities` rendered people.
pub fn recon_manifest(root: &Path, identities: usize, photos: usize, seed: u64) -> DatasetManifest {
    let store = ImageStore::new(root);
    let recon = render_recon_entries(
        &store,
        identities,
        photos,
        seed,
        &ToyDetector::default(),
        &CropConfig::default(),
    )
    .unwrap();
    write_manifest(root, Vec::new(), recon, "test").unwrap()
}

/// Manifest with both kinds; the self-augmented half reuses rendered
/// images under a placeholder-form editing prompt.
pub fn mixed_manifest(root: &Path) -> DatasetManifest {
    let base = recon_manifest(root, 3, 2, 1);
    let selfaug: Vec<ManifestEntry> = base
        .entries
        .iter()
        .take(4)
        .enumerate()
        .map(|(i, e)| ManifestEntry {
            kind: SampleKind::Selfaug,
            identity_id: format!("Name {i}"),
            prompt: "S* as a chef".into(),
            id_score: Some(0.5),
            clip_score: Some(0.2),
            ..e.clone()
        })
        .collect();
    write_manifest(root, selfaug, base.entries.clone(), "mixed").unwrap()
}

pub fn to_f64s(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn tensors_of(enc: &M2Encoder) -> HashMap<String, Tensor> {
    enc.store().tensors().into_iter().collect()
}

/// Brute-force filter: per prompt, min-max normalise both scores over the
/// images that have a face, sum them, put faceless images at -1, sort by
/// score (then id) and keep max(1, floor(fraction * n)).
pub fn filter_oracle(items: &[dreamid::selfaug::RankInput], fraction: f64) -> (Vec<f64>, Vec<bool>) {
    let mut scores = vec![-1.0; items.len()];
    let mut kept = vec![false; items.len()];
    let mut groups: Vec<&str> = items.iter().map(|c| c.group.as_str()).collect();
    groups.sort();
    groups.dedup();
    for g in groups {
        let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].group == g).collect();
        let faced: Vec<usize> = idx.iter().copied().filter(|&i| items[i].has_face).collect();
        let range = |f: fn(&dreamid::selfaug::RankInput) -> f64| {
            let v: Vec<f64> = faced.iter().map(|&i| f(&items[i])).collect();
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        };
        let (ilo, ihi) = range(|c| c.id_score);
        let (clo, chi) = range(|c| c.clip_score);
        for &i in &faced {
            let a = if ihi > ilo { (items[i].id_score - ilo) / (ihi - ilo) } else { 0.0 };
            let b = if chi > clo { (items[i].clip_score - clo) / (chi - clo) } else { 0.0 };
            scores[i] = a + b;
        }
        let mut order = idx.clone();
        // Selection sort, descending.
        for a in 0..order.len() {
            for b in a + 1..order.len() {
                let (x, y) = (order[a], order[b]);
                if scores[y] > scores[x] || (scores[y] == scores[x] && items[y].id < items[x].id) {
                    order.swap(a, b);
                }
            }
        }
        let n = idx.len();
        let keep = ((fraction * n as f64).floor() as usize).max(1).min(n);
        for &i in &order[..keep] {
            kept[i] = true;
        }
    }
    (scores, kept)
}

/// Random candidate set with a few prompt groups, faceless images and ties.
pub fn random_rank_inputs(seed: u64) -> Vec<dreamid::selfaug::RankInput> {
    use rand::Rng;
    let mut r = dreamid::rng::rng(seed);
    let n = r.random_range(1..40);
    let groups = r.random_range(1..5);
    (0..n)
        .map(|i| {
            let tie = r.random::<f64>() < 0.2;
            dreamid::selfaug::RankInput {
                id: format!("{:06}", r.random_range(0..1000) * 100 + i),
                group: format!("S* prompt {}", r.random_range(0..groups)),
                id_score: if tie { 0.5 } else { r.random_range(-1.0..1.0) },
                clip_score: if tie { 0.25 } else { r.random_range(-1.0..1.0) },
                has_face: r.random::<f64>() > 0.15,
            }
        })
        .collect()
}
