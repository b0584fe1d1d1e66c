mod common;

use dreamid::conditioning::PromptTemplate;
use dreamid::detect::{CropConfig, ToyDetector};
use dreamid::diffusion::{BackendConfig, DiffusionBackend, SamplerConfig, ToyBackend};
use dreamid::encoder::{EncoderConfig, M2Encoder};
use dreamid::evaluator::{
    aggregate, check_disjoint, comparison_table, data_ablation_table, encoder_ablation_table, identity_overlap,
    measure_encoding_time, run_protocol, word_count_table, EncoderVariant, ProtocolConfig, Scorers, TestFace,
    TimingStats, IMAGES_PER_CELL,
};
use dreamid::face::{render, FaceParams, RenderOpts};
use dreamid::image::Image;
use dreamid::rng;
use dreamid::scoring::{cosine, text_alignment, ClipConfig, FaceIdConfig, FaceIdModel, FaceSimilarity, ToyClip};
use dreamid::vit::VitConfig;
use dreamid::Error;
use proptest::prelude::*;

proptest! {
    #[test]
    fn cosine_matches_formula_and_is_bounded(seed in any::<u64>(), n in 1usize..16, c in 1e-3f64..1e3) {
        let mut r = rng::rng(seed);
        let a = rng::normal_vec(&mut r, n);
        let b: Vec<f64> = rng::normal_vec(&mut r, n).into_iter().map(|x| x * c).collect();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let got = cosine(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&got));
        prop_assert!((got - dot / (na * nb)).abs() < 1e-12);
        prop_assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        prop_assert!((cosine(&a, &neg) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn timing_stats_match_sorted_order(seed in any::<u64>(), n in 1usize..60) {
        let mut r = rng::rng(seed);
        let v: Vec<f64> = rng::normal_vec(&mut r, n).into_iter().map(f64::abs).collect();
        let s = TimingStats::from_samples(v.clone()).unwrap();
        let mut sorted = v;
        sorted.sort_by(f64::total_cmp);
        let below = sorted.iter().filter(|&&x| x < s.median_s).count();
        let above = sorted.iter().filter(|&&x| x > s.median_s).count();
        prop_assert!(below <= n / 2 && above <= n / 2);
        prop_assert!(s.p95_s >= s.median_s);
        let rank = (0.95 * n as f64).ceil() as usize;
        prop_assert_eq!(s.p95_s, sorted[rank - 1]);
    }
}

#[test]
fn timing_stats_examples() {
    let s = TimingStats::from_samples(vec![4.0, 1.0, 3.0, 2.0]).unwrap();
    assert_eq!(s.median_s, 2.5);
    assert_eq!(s.p95_s, 4.0);
    assert!(TimingStats::from_samples(Vec::new()).is_err());
}

#[test]
fn identity_overlap_is_case_insensitive_and_fatal() {
    let test = vec!["Ada Vell".to_string(), "t-001".to_string()];
    let selfaug = vec!["ada vell".to_string(), "Bo Lin".to_string()];
    assert_eq!(identity_overlap(&test, &selfaug), vec!["Ada Vell"]);
    match check_disjoint(&test, &selfaug) {
        Err(Error::IdentityOverlap(v)) => assert_eq!(v, vec!["Ada Vell"]),
        other => panic!("expected an overlap error, got {other:?}"),
    }
    assert!(check_disjoint(&test[1..], &selfaug).is_ok());
}

struct Models {
    backend: ToyBackend,
    encoder: M2Encoder,
    face_id: FaceIdModel,
    clip: ToyClip,
}

fn models() -> Models {
    let mut cfg = BackendConfig::with_names(&["Ada Vell"]);
    cfg.denoiser.depth = 1;
    cfg.denoiser.dim = 16;
    cfg.denoiser.mlp_hidden = 16;
    let backend = ToyBackend::new(cfg, 1, false).unwrap();
    let vit = VitConfig {
        depth: 4,
        dim: 16,
        ..VitConfig::default()
    };
    let encoder = M2Encoder::new(EncoderConfig::new(vit.clone(), backend.text().text_dim()).unwrap(), 2, false).unwrap();
    let face_id = FaceIdModel::new(
        FaceIdConfig {
            vit: vit.clone(),
            classes: 4,
            scale: 16.0,
        },
        3,
        false,
    )
    .unwrap();
    let clip = ToyClip::new(
        ClipConfig {
            vit,
            ..ClipConfig::default()
        },
        4,
        false,
    )
    .unwrap();
    Models {
        backend,
        encoder,
        face_id,
        clip,
    }
}

fn test_faces(n: usize) -> Vec<TestFace> {
    (0..n)
        .map(|i| {
            let img = render(&FaceParams::from_seed(100 + i as u64), &RenderOpts::default());
            TestFace::new(format!("t-{i:03}"), img, &ToyDetector::default(), &CropConfig::default()).unwrap()
        })
        .collect()
}

#[test]
fn self_similarity_is_one() {
    let m = models();
    let det = ToyDetector::default();
    let sim = FaceSimilarity {
        scorer: &m.face_id,
        detector: &det,
        crop: CropConfig::default(),
    };
    for f in test_faces(3) {
        let s = sim.score(&f.image, &f.image).unwrap();
        assert!((s.score - 1.0).abs() < 1e-6);
        assert!(s.rejection.is_none());
    }
    let blank = Image::filled(64, 64, [0.0; 3]);
    let s = sim.score(&test_faces(1)[0].image, &blank).unwrap();
    assert_eq!(s.score, -1.0);
    assert!(sim.score(&blank, &blank).is_err());
    let img = test_faces(1)[0].image.clone();
    let ta = text_alignment(&m.clip, &[&img, &img], "a photo of face").unwrap();
    assert!((-1.0..=1.0).contains(&ta));
    assert!(text_alignment(&m.clip, &[], "x").is_err());
}

#[test]
fn protocol_generates_four_images_per_cell() {
    let m = models();
    let det = ToyDetector::default();
    let scorers = Scorers {
        similarity: FaceSimilarity {
            scorer: &m.face_id,
            detector: &det,
            crop: CropConfig::default(),
        },
        joint: &m.clip,
    };
    let cfg = ProtocolConfig {
        sampler: SamplerConfig {
            steps: 3,
            ..SamplerConfig::default()
        },
        timing_trials: 3,
        ..ProtocolConfig::default()
    };
    assert_eq!(cfg.images_per_cell, IMAGES_PER_CELL);
    assert_eq!(IMAGES_PER_CELL, 4);
    let faces = test_faces(2);
    let prompts: Vec<PromptTemplate> = ["S* as a chef", "Oil painting style, S* face", "S* wearing a hat"]
        .iter()
        .map(|p| PromptTemplate::editing(*p).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let report = run_protocol(&m.encoder, &m.backend, &faces, &prompts, &[], &scorers, &cfg, Some(dir.path())).unwrap();
    assert_eq!(report.cells.len(), 6);
    assert_eq!(report.total_images(), 24);
    assert!(report.cells.iter().all(|c| c.n_images == 4));
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "png").count(), 24);
    assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "json").count(), 24);

    let n = report.cells.len() as f64;
    let ta = report.cells.iter().map(|c| c.text_alignment).sum::<f64>() / n;
    let fs = report.cells.iter().map(|c| c.face_similarity).sum::<f64>() / n;
    assert!((report.aggregates.text_alignment - ta).abs() < 1e-12);
    assert!((report.aggregates.face_similarity - fs).abs() < 1e-12);
    assert_eq!(aggregate(&report.cells), report.aggregates);
    for c in &report.cells {
        assert!((-1.0..=1.0).contains(&c.text_alignment));
        assert!((-1.0..=1.0).contains(&c.face_similarity));
    }
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 6);

    // Same seeds, same report.
    let again = run_protocol(&m.encoder, &m.backend, &faces, &prompts, &[], &scorers, &cfg, None).unwrap();
    assert_eq!(again.cells, report.cells);

    let overlap = run_protocol(&m.encoder, &m.backend, &faces, &prompts, &["T-001".into()], &scorers, &cfg, None);
    assert!(matches!(overlap, Err(Error::IdentityOverlap(ref v)) if v == &vec!["t-001".to_string()]));
}

#[test]
fn encoding_is_sub_second() {
    let m = models();
    let faces = test_faces(2);
    let refs: Vec<_> = faces.iter().map(|f| &f.face).collect();
    let t = measure_encoding_time(&m.encoder, &refs, 5).unwrap();
    assert_eq!(t.trials, 5);
    assert!(t.median_s < 1.0, "{t:?}");
}

#[test]
fn tables_have_the_published_columns() {
    let m = models();
    let det = ToyDetector::default();
    let scorers = Scorers {
        similarity: FaceSimilarity {
            scorer: &m.face_id,
            detector: &det,
            crop: CropConfig::default(),
        },
        joint: &m.clip,
    };
    let cfg = ProtocolConfig {
        images_per_cell: 1,
        sampler: SamplerConfig {
            steps: 2,
            ..SamplerConfig::default()
        },
        timing_trials: 1,
        ..ProtocolConfig::default()
    };
    let prompts = vec![PromptTemplate::editing("S* as a nurse").unwrap()];
    let r = run_protocol(&m.encoder, &m.backend, &test_faces(1), &prompts, &[], &scorers, &cfg, None).unwrap();
    let header = |t: &str| t.lines().next().unwrap().split('|').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect::<Vec<_>>();

    let t = comparison_table(&[("ours".into(), &r)]);
    assert_eq!(header(&t), ["Methods", "Text-alignment ↑", "Face similarity ↑", "Encoding Time ↓"]);
    assert_eq!(t.lines().count(), 3);

    let rows: Vec<_> = EncoderVariant::table_rows().iter().map(|v| (*v, &r)).collect();
    let t = encoder_ablation_table(&rows);
    assert_eq!(header(&t), ["ID Encoder", "MS Feat", "Multi Embedding", "Text-alignment ↑", "Face-similarity ↑"]);
    assert_eq!(t.lines().count(), 6);
    // Row checkmarks follow the variant switches.
    let marks: Vec<usize> = t.lines().skip(2).map(|l| l.matches('✓').count()).collect();
    assert_eq!(marks, vec![0, 1, 2, 3]);

    let t = data_ablation_table(&[((true, false), &r), ((true, true), &r)]);
    assert_eq!(header(&t), ["Recon", "self-aug", "Text-alignment ↑", "Face similarity ↑"]);
    let t = word_count_table(&[(1, &r), (2, &r), (3, &r)]);
    assert_eq!(header(&t), ["Emb Num", "Text-alignment ↑", "Face similarity ↑"]);
    assert_eq!(t.lines().count(), 5);
}

#[test]
fn faceless_test_photo_is_an_image_error() {
    let blank = Image::filled(64, 64, [0.3; 3]);
    let r = TestFace::new("t-9", blank, &ToyDetector::default(), &CropConfig::default());
    assert!(matches!(r, Err(Error::Image(_))));
}
