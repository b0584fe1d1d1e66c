mod common;

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use common::*;
use dreamid::encoder::{embedding_reg_loss, quartile_layers, AlignedFace, EncoderConfig, FaceSource, FeatureMode, M2Encoder, PseudoWords};
use dreamid::face::{render, FaceParams, RenderOpts};
use dreamid::image::Image;
use dreamid::rng;
use dreamid::vit::ReadPoint;
use dreamid::Error;
use proptest::prelude::*;

fn face(seed: u64, size: usize) -> AlignedFace {
    let img = render(
        &FaceParams::from_seed(seed),
        &RenderOpts {
            size,
            ..RenderOpts::default()
        },
    );
    AlignedFace::new(img, format!("id-{seed}"), FaceSource::Real).unwrap()
}

/// Scalar loop over `Σ_i ‖s_i‖`.
fn norm_oracle(words: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for w in words {
        let mut sq = 0.0;
        for x in w {
            sq += x * x;
        }
        total += sq.sqrt();
    }
    total
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Plain-loop forward of one projection head.
fn dense_oracle(layers: &[(Tensor, Tensor)], input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    for (j, (w, b)) in layers.iter().enumerate() {
        let w = w.to_vec2::<f64>().unwrap();
        let b = b.to_vec1::<f64>().unwrap();
        let mut y = vec![0.0; w.len()];
        for (o, row) in w.iter().enumerate() {
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(&x) {
                acc += wi * xi;
            }
            y[o] = acc;
        }
        if j + 1 < layers.len() {
            y.iter_mut().for_each(|v| *v = silu(*v));
        }
        x = y;
    }
    x
}

#[test]
fn reg_loss_hand_examples() {
    let l = |w: Vec<Vec<f64>>| {
        embedding_reg_loss(&PseudoWords::from_vecs(&w).unwrap())
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    };
    assert!((l(vec![vec![3.0, 4.0]]) - 5.0).abs() < 1e-12);
    assert!((l(vec![vec![3.0, 4.0], vec![0.0, 0.0], vec![1.0, 0.0]]) - 6.0).abs() < 1e-12);
    assert_eq!(l(vec![vec![0.0; 5], vec![0.0; 5]]), 0.0);
}

#[test]
fn default_extraction_reads_quarter_points_of_twelve_blocks() {
    assert_eq!(quartile_layers(12).unwrap(), vec![3, 6, 9, 12]);
    assert_eq!(quartile_layers(4).unwrap(), vec![1, 2, 3, 4]);
    assert!(quartile_layers(3).is_err());
    let cfg = EncoderConfig::new(Default::default(), 32).unwrap();
    assert_eq!(cfg.num_words, 2);
    assert_eq!(
        cfg.read_points(),
        vec![
            ReadPoint::Block(3),
            ReadPoint::Block(6),
            ReadPoint::Block(9),
            ReadPoint::Block(12),
            ReadPoint::Final
        ]
    );
}

#[test]
fn features_match_a_block_by_block_trace() {
    let enc = tiny_encoder(6, 2, 11, false);
    let faces = [face(1, 16), face(2, 16)];
    let refs: Vec<&AlignedFace> = faces.iter().collect();
    let feats = enc.extract_multiscale_features(&refs).unwrap();
    assert_eq!(feats.num_vectors(), 5);
    assert_eq!(feats.batch_size(), 2);

    let vit = enc.backbone();
    let images = Image::batch_tensor(&faces.iter().map(|f| f.image()).collect::<Vec<_>>()).unwrap();
    let mut hidden = vit.embed(&images).unwrap();
    let mut trace = Vec::new();
    for block in vit.blocks() {
        hidden = block.forward(&hidden, None).unwrap();
        trace.push(hidden.clone());
    }
    let layers = &enc.config().extraction_layers;
    for s in 0..2 {
        for (i, &l) in layers.iter().enumerate() {
            let want = vit.read_cls(&trace[l - 1]).unwrap().get(s).unwrap().to_vec1::<f64>().unwrap();
            assert!(max_abs_diff(&feats.vector(s, i).unwrap(), &want) < 1e-12);
        }
        let last = vit.final_vector(trace.last().unwrap()).unwrap();
        let want = last.get(s).unwrap().to_vec1::<f64>().unwrap();
        assert!(max_abs_diff(&feats.vector(s, 4).unwrap(), &want) < 1e-12);
    }
}

#[test]
fn projector_matches_plain_loops() {
    for mode in [FeatureMode::MultiScale, FeatureMode::FinalOnly] {
        let mut cfg = EncoderConfig::new(tiny_vit(), 5).unwrap().with_words(3);
        cfg.feature_mode = mode;
        let enc = M2Encoder::new(cfg, 4, false).unwrap();
        let f = face(9, 16);
        let feats = enc.extract_multiscale_features(&[&f]).unwrap();
        let input: Vec<f64> = match mode {
            FeatureMode::MultiScale => (0..5).flat_map(|i| feats.vector(0, i).unwrap()).collect(),
            FeatureMode::FinalOnly => feats.vector(0, 4).unwrap(),
        };
        let words = enc.project_to_embeddings(&feats).unwrap().to_vecs(0).unwrap();
        assert_eq!(words.len(), 3);
        for (i, w) in words.iter().enumerate() {
            let want = dense_oracle(&enc.projector().head_layers(i), &input);
            assert!(max_abs_diff(w, &want) < 1e-10, "head {i} in {mode:?}");
        }
    }
}

#[test]
fn zero_projector_gives_zero_words() {
    let enc = tiny_encoder(6, 2, 3, false);
    let tensors = tensors_of(&enc)
        .into_iter()
        .map(|(k, v)| {
            if k.starts_with("projector.") {
                let z = v.zeros_like().unwrap();
                (k, z)
            } else {
                (k, v)
            }
        })
        .collect();
    let zeroed = M2Encoder::from_tensors(enc.config().clone(), tensors, false).unwrap();
    let words = zeroed.encode_identity(&face(5, 16)).unwrap().to_vecs(0).unwrap();
    assert!(words.iter().flatten().all(|&x| x == 0.0));
}

#[test]
fn encode_is_the_composition_and_is_deterministic() {
    let enc = tiny_encoder(6, 2, 8, false);
    let f = face(3, 16);
    let direct = enc.encode_identity(&f).unwrap().to_vecs(0).unwrap();
    let composed = enc
        .project_to_embeddings(&enc.extract_multiscale_features(&[&f]).unwrap())
        .unwrap()
        .to_vecs(0)
        .unwrap();
    assert_eq!(direct, composed);
    assert_eq!(direct, enc.encode_identity(&f).unwrap().to_vecs(0).unwrap());
    let pw = enc.encode_identity(&f).unwrap();
    assert_eq!((pw.batch_size(), pw.k(), pw.dim()), (1, 2, 6));
}

#[test]
fn wrong_resolution_is_a_shape_error() {
    let enc = tiny_encoder(6, 2, 8, false);
    let err = enc.encode_identity(&face(3, 32)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let enc = tiny_encoder(6, 2, 8, false);
    let p = dir.path().join("enc.safetensors");
    enc.save(&p, &BTreeMap::new()).unwrap();
    let back = M2Encoder::load(&p, false).unwrap();
    let f = face(4, 16);
    assert_eq!(
        enc.encode_identity(&f).unwrap().to_vecs(0).unwrap(),
        back.encode_identity(&f).unwrap().to_vecs(0).unwrap()
    );
    assert!(back.check_text_dim(6).is_ok());
    assert!(back.check_text_dim(7).is_err());

    let backend = tiny_backend(0);
    let bp = dir.path().join("backend.safetensors");
    backend.save(&bp, &BTreeMap::new()).unwrap();
    assert!(matches!(M2Encoder::load(&bp, false), Err(Error::Checkpoint { .. })));
    assert!(M2Encoder::load(&dir.path().join("missing.safetensors"), false).is_err());
}

#[test]
fn reg_loss_gradient_matches_central_differences() {
    let mut r = rng::rng(42);
    for _ in 0..5 {
        let w = rng::normal_vec(&mut r, 12);
        let var = Var::from_tensor(&Tensor::from_vec(w.clone(), (1, 3, 4), &candle_core::Device::Cpu).unwrap()).unwrap();
        let loss = embedding_reg_loss(&PseudoWords::new(var.as_tensor().clone()).unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        let g = to_f64s(grads.get(var.as_tensor()).unwrap());
        let h = 1e-6;
        for i in 0..w.len() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[i] += h;
            minus[i] -= h;
            let rows = |v: &[f64]| v.chunks(4).map(<[f64]>::to_vec).collect::<Vec<_>>();
            let fd = (norm_oracle(&rows(&plus)) - norm_oracle(&rows(&minus))) / (2.0 * h);
            assert!(rel_err(g[i], fd) < 1e-3, "coord {i}: {} vs {fd}", g[i]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn reg_loss_matches_scalar_oracle(
        k in 1usize..5,
        d in 1usize..9,
        seed in any::<u64>(),
        scale in 1e-3f64..1e3,
    ) {
        let mut r = rng::rng(seed);
        let words: Vec<Vec<f64>> = (0..k)
            .map(|_| rng::normal_vec(&mut r, d).into_iter().map(|x| x * scale).collect())
            .collect();
        let got = embedding_reg_loss(&PseudoWords::from_vecs(&words).unwrap()).unwrap().to_scalar::<f64>().unwrap();
        let want = norm_oracle(&words);
        prop_assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-12));
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn reg_loss_is_homogeneous(seed in any::<u64>(), c in -10.0f64..10.0) {
        let mut r = rng::rng(seed);
        let words: Vec<Vec<f64>> = (0..2).map(|_| rng::normal_vec(&mut r, 4)).collect();
        let scaled: Vec<Vec<f64>> = words.iter().map(|w| w.iter().map(|x| x * c).collect()).collect();
        let l = |w: &[Vec<f64>]| embedding_reg_loss(&PseudoWords::from_vecs(w).unwrap()).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!((l(&scaled) - c.abs() * l(&words)).abs() < 1e-9 * (1.0 + l(&words)));
    }
}
