use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::backend::DiffusionBackend;
use crate::conditioning::{plain_conditioning, CondBatch, ConditioningSequence};
use crate::image::Image;
use crate::rng;
use crate::{Error, Result};

/// Prompt of the unconditional guidance branch.
pub const UNCONDITIONAL_PROMPT: &str = "";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            guidance_scale: 7.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Config(format!(
                "guidance scale must be a finite non-negative number, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Classifier-free guidance: `uncond + s · (cond − uncond)`.
pub fn guide(uncond: &Tensor, cond: &Tensor, scale: f64) -> Result<Tensor> {
    Ok((uncond + ((cond - uncond)? * scale)?)?)
}

/// One deterministic DDIM update from `t` to `t_prev` (`None` = clean).
pub fn ddim_step(
    backend: &dyn DiffusionBackend,
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
) -> Result<Tensor> {
    let schedule = backend.schedule();
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(tp) => schedule.alpha_bar(tp)?,
        None => 1.0,
    };
    let x0 = ((z_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    Ok(((x0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?)
}

fn initial_noise(backend: &dyn DiffusionBackend, seeds: &[u64]) -> Result<Tensor> {
    let [c, h, w] = backend.latent_shape();
    let per = seeds
        .iter()
        .map(|&s| rng::randn(&mut rng::rng(s), (1, c, h, w)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&per, 0)?)
}

fn run_ddim(
    backend: &dyn DiffusionBackend,
    seeds: &[u64],
    cfg: &SamplerConfig,
    mut predict: impl FnMut(&Tensor, &[usize]) -> Result<Tensor>,
) -> Result<Tensor> {
    cfg.validate()?;
    let timesteps = backend.schedule().inference_timesteps(cfg.steps)?;
    let mut z = initial_noise(backend, seeds)?;
    for (i, &t) in timesteps.iter().enumerate() {
        let ts = vec![t; seeds.len()];
        let eps = predict(&z, &ts)?;
        z = ddim_step(backend, &z, &eps, t, timesteps.get(i + 1).copied())?;
    }
    Ok(z)
}

/// Guided DDIM latents for one conditioning per seed.
pub fn ddim_sample_latents(
    backend: &dyn DiffusionBackend,
    conds: &[&ConditioningSequence],
    seeds: &[u64],
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    if conds.len() != seeds.len() || conds.is_empty() {
        return Err(Error::Config(format!(
            "{} conditionings for {} seeds",
            conds.len(),
            seeds.len()
        )));
    }
    let cond = CondBatch::new(conds)?;
    let empty = plain_conditioning(backend.text(), UNCONDITIONAL_PROMPT)?;
    let uncond = CondBatch::new(&vec![&empty; seeds.len()])?;
    run_ddim(backend, seeds, cfg, |z, ts| {
        let eps_u = backend.predict_noise(z, &uncond, ts)?;
        let eps_c = backend.predict_noise(z, &cond, ts)?;
        guide(&eps_u, &eps_c, cfg.guidance_scale)
    })
}

/// Unguided sampling from the empty prompt alone.
pub fn ddim_sample_unconditional_latents(
    backend: &dyn DiffusionBackend,
    seeds: &[u64],
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    let empty = plain_conditioning(backend.text(), UNCONDITIONAL_PROMPT)?;
    let uncond = CondBatch::new(&vec![&empty; seeds.len()])?;
    run_ddim(backend, seeds, cfg, |z, ts| backend.predict_noise(z, &uncond, ts))
}

pub fn decode_images(backend: &dyn DiffusionBackend, latents: &Tensor) -> Result<Vec<Image>> {
    let images = backend.decode_latents(latents)?;
    (0..images.dim(0)?)
        .map(|i| Image::from_tensor(&images.get(i)?))
        .collect()
}

/// One image for `cond`, seeded by `cfg.seed`.
pub fn ddim_sample(
    backend: &dyn DiffusionBackend,
    cond: &ConditioningSequence,
    cfg: &SamplerConfig,
) -> Result<Image> {
    let z = ddim_sample_latents(backend, &[cond], &[cfg.seed], cfg)?;
    Ok(decode_images(backend, &z)?.remove(0))
}

/// Batched sampling; image `i` uses `seeds[i]`.
pub fn ddim_sample_batch(
    backend: &dyn DiffusionBackend,
    conds: &[&ConditioningSequence],
    seeds: &[u64],
    cfg: &SamplerConfig,
) -> Result<Vec<Image>> {
    let z = ddim_sample_latents(backend, conds, seeds, cfg)?;
    decode_images(backend, &z)
}

pub fn ddim_sample_unconditional(
    backend: &dyn DiffusionBackend,
    seeds: &[u64],
    cfg: &SamplerConfig,
) -> Result<Vec<Image>> {
    let z = ddim_sample_unconditional_latents(backend, seeds, cfg)?;
    decode_images(backend, &z)
}

/// Record written next to every generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub prompt: String,
    pub seed: u64,
    pub sampler: SamplerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<String>,
}

/// Writes `<stem>.png` and `<stem>.json`; returns both paths.
pub fn write_with_sidecar(dir: &Path, stem: &str, image: &Image, sidecar: &Sidecar) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let png = dir.join(format!("{stem}.png"));
    let json = dir.join(format!("{stem}.json"));
    image.save_png(&png)?;
    let mut text = serde_json::to_string_pretty(sidecar)?;
    text.push('\n');
    std::fs::write(&json, text).map_err(|e| Error::io(json.display().to_string(), e))?;
    Ok((png, json))
}

/// Zero latent batch, for shape probes.
pub fn zero_latents(backend: &dyn DiffusionBackend, batch: usize) -> Result<Tensor> {
    let [c, h, w] = backend.latent_shape();
    Ok(Tensor::zeros((batch, c, h, w), crate::nn::DTYPE, &Device::Cpu)?)
}
