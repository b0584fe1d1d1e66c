//! Toy text-conditioned latent diffusion: noise schedule, fixed autoencoder,
//! transformer denoiser and a DDIM sampler with classifier-free guidance.

pub mod autoencoder;
pub mod backend;
pub mod denoiser;
pub mod sampler;
pub mod schedule;

pub use autoencoder::{AutoencoderConfig, ToyAutoencoder};
pub use backend::{BackendConfig, DiffusionBackend, ToyBackend, BACKEND_KIND};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use sampler::{ddim_sample, ddim_sample_batch, ddim_sample_unconditional, guide, SamplerConfig, Sidecar};
pub use schedule::{NoiseSchedule, ScheduleConfig};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{plain_conditioning, CondBatch};
    use crate::rng;

    fn backend() -> ToyBackend {
        let mut cfg = BackendConfig::with_names(&["Ada Vell"]);
        cfg.denoiser.depth = 1;
        cfg.denoiser.dim = 16;
        cfg.denoiser.mlp_hidden = 16;
        ToyBackend::new(cfg, 5, false).unwrap()
    }

    #[test]
    fn predict_noise_keeps_latent_shape_and_is_pure() {
        let b = backend();
        let z = rng::randn(&mut rng::rng(1), (2, 4, 16, 16)).unwrap();
        let c1 = plain_conditioning(&b, "a photo of ada vell face").unwrap();
        let c2 = plain_conditioning(&b, "").unwrap();
        let cond = CondBatch::new(&[&c1, &c2]).unwrap();
        let e1 = b.predict_noise(&z, &cond, &[10, 900]).unwrap();
        let e2 = b.predict_noise(&z, &cond, &[10, 900]).unwrap();
        assert_eq!(e1.dims(), z.dims());
        assert_eq!(
            e1.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            e2.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let wrong = rng::randn(&mut rng::rng(1), (2, 4, 8, 8)).unwrap();
        assert!(b.predict_noise(&wrong, &cond, &[1, 2]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_keeps_checksum() {
        let b = backend();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.safetensors");
        b.save(&p, &Default::default()).unwrap();
        let back = ToyBackend::load(&p).unwrap();
        assert_eq!(back.checksum().unwrap(), b.checksum().unwrap());
        assert!(crate::encoder::M2Encoder::load(&p, false).is_err());
    }

    #[test]
    fn sampler_rejects_zero_steps() {
        let b = backend();
        let c = plain_conditioning(&b, "").unwrap();
        let cfg = SamplerConfig {
            steps: 0,
            ..SamplerConfig::default()
        };
        assert!(ddim_sample(&b, &c, &cfg).is_err());
    }
}
