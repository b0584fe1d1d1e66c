mod common;

use std::path::Path;

use common::*;
use dreamid::checkpoint;
use dreamid::conditioning::{assemble_conditioning, CondBatch};
use dreamid::diffusion::{BackendConfig, DiffusionBackend, ToyBackend};
use dreamid::encoder::{EncoderConfig, M2Encoder, ENCODER_KIND};
use dreamid::image::Image;
use dreamid::rng;
use dreamid::selfaug::{ImageStore, SampleKind};
use dreamid::trainer::{
    compute_loss, list_checkpoints, meta_keys, prepare_batch, read_loss_log, run_training, sample_batch,
    ImageCache, TrainConfig, LOSS_LOG,
};
use dreamid::vit::VitConfig;
use dreamid::Error;

fn backend() -> ToyBackend {
    let mut cfg = BackendConfig::with_names(&["Ada Vell"]);
    cfg.denoiser.depth = 1;
    cfg.denoiser.dim = 16;
    cfg.denoiser.mlp_hidden = 16;
    ToyBackend::new(cfg, 2, false).unwrap()
}

fn encoder(text_dim: usize, seed: u64) -> M2Encoder {
    let vit = VitConfig {
        image_size: 64,
        patch_size: 16,
        depth: 4,
        dim: 8,
        heads: 2,
        mlp_hidden: 16,
    };
    M2Encoder::new(EncoderConfig::new(vit, text_dim).unwrap(), seed, true).unwrap()
}

fn cfg(iterations: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 3,
        iterations,
        checkpoint_every: 2,
        mix_ratio: 0.0,
        ..TrainConfig::toy()
    }
}

#[test]
fn loss_is_diffusion_plus_weighted_reg() {
    let dir = tempfile::tempdir().unwrap();
    let m = mixed_manifest(dir.path());
    let b = backend();
    let enc = encoder(b.text().text_dim(), 0);
    let cache = ImageCache::load(&m).unwrap();
    let mut r = rng::rng(9);
    for lambda in [0.0, 1e-4, 0.3] {
        let entries = sample_batch(&m, 0.5, &mut r, 4).unwrap();
        let batch = prepare_batch(&entries, &cache, &b, &mut r).unwrap();
        let (l, total) = compute_loss(&enc, &b, &batch, lambda).unwrap();
        assert_eq!(l.l_total, total.to_scalar::<f64>().unwrap());
        let want = l.l_diffusion + lambda * l.l_reg;
        assert!((l.l_total - want).abs() <= 1e-12 * l.l_total.abs());
        if lambda == 0.0 {
            assert_eq!(l.l_total, l.l_diffusion);
        }
    }
}

#[test]
fn loss_terms_match_plain_loops() {
    let dir = tempfile::tempdir().unwrap();
    let m = mixed_manifest(dir.path());
    let b = backend();
    let enc = encoder(b.text().text_dim(), 1);
    let cache = ImageCache::load(&m).unwrap();
    let mut r = rng::rng(3);
    let entries = sample_batch(&m, 0.5, &mut r, 3).unwrap();
    let batch = prepare_batch(&entries, &cache, &b, &mut r).unwrap();
    let (l, _) = compute_loss(&enc, &b, &batch, 0.5).unwrap();

    let words = enc.encode_tensor(&batch.faces).unwrap();
    let mut reg = 0.0;
    let mut seqs = Vec::new();
    for i in 0..3 {
        for w in words.to_vecs(i).unwrap() {
            reg += w.iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        seqs.push(assemble_conditioning(b.text(), &batch.templates[i], &words.sample(i).unwrap()).unwrap());
    }
    reg /= 3.0;
    let cond = CondBatch::new(&seqs.iter().collect::<Vec<_>>()).unwrap();
    let z = to_f64s(&batch.latents);
    let eps = to_f64s(&batch.noise);
    let per = z.len() / 3;
    let mut zt = vec![0.0; z.len()];
    for i in 0..z.len() {
        let ab = b.schedule().alpha_bar(batch.timesteps[i / per]).unwrap();
        zt[i] = ab.sqrt() * z[i] + (1.0 - ab).sqrt() * eps[i];
    }
    let zt = candle_core::Tensor::from_vec(zt, batch.latents.shape(), &candle_core::Device::Cpu).unwrap();
    let pred = to_f64s(&b.predict_noise(&zt, &cond, &batch.timesteps).unwrap());
    let mse = pred.iter().zip(&eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>() / pred.len() as f64;
    assert!((l.l_diffusion - mse).abs() < 1e-9 * mse);
    assert!((l.l_reg - reg).abs() < 1e-9 * reg);
}

#[test]
fn mix_ratio_is_honoured_in_expectation() {
    let dir = tempfile::tempdir().unwrap();
    let m = mixed_manifest(dir.path());
    let mut r = rng::rng(0);
    for mix in [0.0, 0.3, 0.5, 1.0] {
        let draws = sample_batch(&m, mix, &mut r, 10_000).unwrap();
        let frac = draws.iter().filter(|e| e.kind == SampleKind::Selfaug).count() as f64 / 1e4;
        assert!((frac - mix).abs() <= 0.02, "mix {mix}: {frac}");
    }
    assert!(sample_batch(&m, 1.5, &mut r, 1).is_err());
    let recon_only = recon_manifest(&dir.path().join("r"), 1, 1, 0);
    assert!(matches!(sample_batch(&recon_only, 0.5, &mut r, 1), Err(Error::Dataset(_))));
}

#[test]
fn timesteps_are_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let m = recon_manifest(dir.path(), 1, 1, 0);
    let b = backend();
    let cache = ImageCache::load(&m).unwrap();
    let mut r = rng::rng(1);
    let entries = sample_batch(&m, 0.0, &mut r, 4000).unwrap();
    let batch = prepare_batch(&entries, &cache, &b, &mut r).unwrap();
    let mut bins = [0usize; 10];
    for &t in &batch.timesteps {
        assert!(t < 1000);
        bins[t / 100] += 1;
    }
    // 400 expected per bin; a 5-sigma band.
    assert!(bins.iter().all(|&c| (300..=500).contains(&c)), "{bins:?}");
}

#[test]
fn zero_iterations_leave_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let m = recon_manifest(&dir.path().join("data"), 2, 1, 0);
    let b = backend();
    let out = dir.path().join("run");
    let o = run_training(&cfg(0), &m, &b, || Ok(encoder(b.text().text_dim(), 0)), &out).unwrap();
    assert_eq!(o.final_step, 0);
    assert_eq!(list_checkpoints(&out).unwrap().iter().map(|c| c.0).collect::<Vec<_>>(), vec![0]);
    assert!(read_loss_log(&out.join(LOSS_LOG)).unwrap().is_empty());
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = recon_manifest(&dir.path().join("data"), 2, 2, 0);
    let b = backend();
    let d = b.text().text_dim();
    let whole = dir.path().join("whole");
    let parts = dir.path().join("parts");
    let a = run_training(&cfg(4), &m, &b, || Ok(encoder(d, 0)), &whole).unwrap();
    let first = run_training(&cfg(2), &m, &b, || Ok(encoder(d, 0)), &parts).unwrap();
    assert_eq!(first.resumed_from, None);
    let second = run_training(&cfg(4), &m, &b, || panic!("resume must not rebuild"), &parts).unwrap();
    assert_eq!(second.resumed_from, Some(2));
    assert_eq!(a.log, second.log);
    let load = |p: &Path| {
        let mut arch = checkpoint::load(p, ENCODER_KIND).unwrap();
        arch.take_prefixed("optim");
        let mut v: Vec<(String, Vec<f64>)> = arch.tensors.iter().map(|(k, t)| (k.clone(), to_f64s(t))).collect();
        v.sort_by(|x, y| x.0.cmp(&y.0));
        v
    };
    assert_eq!(load(a.checkpoints.last().unwrap()), load(second.checkpoints.last().unwrap()));
    assert_eq!(
        list_checkpoints(&parts).unwrap().iter().map(|c| c.0).collect::<Vec<_>>(),
        vec![0, 2, 4]
    );

    // A different configuration refuses to resume.
    let other = TrainConfig { lr: 0.5, ..cfg(6) };
    assert!(matches!(
        run_training(&other, &m, &b, || Ok(encoder(d, 0)), &parts),
        Err(Error::Checkpoint { .. })
    ));
}

#[test]
fn checkpoints_record_their_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let m = mixed_manifest(&dir.path().join("data"));
    let b = backend();
    let c = TrainConfig { mix_ratio: 0.5, ..cfg(1) };
    let o = run_training(&c, &m, &b, || Ok(encoder(b.text().text_dim(), 0)), &dir.path().join("run")).unwrap();
    let arch = checkpoint::load(o.checkpoints.last().unwrap(), ENCODER_KIND).unwrap();
    assert_eq!(arch.meta[meta_keys::STEP], "1");
    assert_eq!(arch.meta[meta_keys::OPTIMIZER], "adam");
    assert_eq!(arch.meta[meta_keys::BACKEND_CHECKSUM], b.checksum().unwrap());
    let ids: Vec<String> = serde_json::from_str(&arch.meta[meta_keys::SELFAUG_IDENTITIES]).unwrap();
    assert_eq!(ids, m.selfaug_identities());
    assert_eq!(o.backend_checksum, b.checksum().unwrap());
    // The checkpoint loads as a plain encoder.
    let enc = M2Encoder::load(o.checkpoints.last().unwrap(), false).unwrap();
    let face = Image::filled(64, 64, [0.0; 3]);
    let f = dreamid::encoder::AlignedFace::new(face, "x", dreamid::encoder::FaceSource::Real).unwrap();
    assert_eq!(enc.encode_identity(&f).unwrap().k(), 2);
}

#[test]
fn mismatched_text_width_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = recon_manifest(&dir.path().join("data"), 1, 1, 0);
    let b = backend();
    let d = b.text().text_dim();
    let r = run_training(&cfg(1), &m, &b, || Ok(encoder(d + 1, 0)), &dir.path().join("run"));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn store_and_manifest_helpers_round_trip_images() {
    let dir = tempfile::tempdir().unwrap();
    let store = ImageStore::new(dir.path());
    let img = dreamid::face::render(&dreamid::face::FaceParams::from_seed(3), &Default::default());
    let rel = store.put(&img).unwrap();
    let back = Image::load(&dir.path().join(rel)).unwrap();
    assert_eq!(back.data(), img.quantized().data());
}
