use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fixed, parameter-free image ↔ latent map.
///
/// Encoding average-pools `factor × factor` cells, rotates RGB into one luma
/// and two chroma axes with an orthonormal matrix, and appends a fourth
/// channel holding the luma standard deviation inside each cell. Decoding
/// inverts the rotation and upsamples by nearest neighbour; the detail
/// channel is lost. Each latent channel is then shifted and scaled so that
/// rendered faces come out near zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub image_size: usize,
    pub factor: usize,
    pub shift: [f64; LATENT_CHANNELS],
    pub scale: [f64; LATENT_CHANNELS],
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            factor: 4,
            shift: [1.71, 0.07, 0.07, 0.15],
            scale: [1.13, 5.75, 3.92, 2.58],
        }
    }
}

pub const LATENT_CHANNELS: usize = 4;

const S3: f64 = 0.577_350_269_189_625_8;
const S2: f64 = 0.707_106_781_186_547_5;
const S6: f64 = 0.408_248_290_463_863;

/// Rows: luma, red-green, yellow-blue.
const MIX: [[f64; 3]; 3] = [[S3, S3, S3], [S2, -S2, 0.0], [S6, S6, -2.0 * S6]];

#[derive(Debug, Clone)]
pub struct ToyAutoencoder {
    config: AutoencoderConfig,
    mix: Tensor,
    shift: Tensor,
    scale: Tensor,
}

impl ToyAutoencoder {
    pub fn new(config: &AutoencoderConfig) -> Result<Self> {
        if config.factor == 0 || config.image_size % config.factor != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of the latent factor {}",
                config.image_size, config.factor
            )));
        }
        if config.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("latent scales must be positive".into()));
        }
        let per_channel = |v: [f64; LATENT_CHANNELS]| {
            Tensor::from_vec(v.to_vec(), (1, LATENT_CHANNELS, 1, 1), &Device::Cpu)
        };
        Ok(Self {
            config: config.clone(),
            mix: Tensor::from_vec(MIX.concat(), (3, 3), &Device::Cpu)?,
            shift: per_channel(config.shift)?,
            scale: per_channel(config.scale)?,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn latent_size(&self) -> usize {
        self.config.image_size / self.config.factor
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.latent_size();
        [LATENT_CHANNELS, s, s]
    }

    /// `(B, 3, H, W)` images in [-1, 1] to `(B, 4, h, w)` latents.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        let n = self.config.image_size;
        if c != 3 || h != n || w != n {
            return Err(Error::Shape(format!(
                "autoencoder expects (B, 3, {n}, {n}), got ({b}, {c}, {h}, {w})"
            )));
        }
        let f = self.config.factor;
        let s = self.latent_size();
        let cells = images.reshape((b, 3, s, f, s, f))?;
        let pooled = cells.mean(5)?.mean(3)?;
        let rotated = pooled
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .broadcast_matmul(&self.mix.t()?)?
            .permute((0, 3, 1, 2))?;
        let luma = (images.sum_keepdim(1)? * S3)?.reshape((b, 1, s, f, s, f))?;
        let centred = luma.broadcast_sub(&luma.mean_keepdim(5)?.mean_keepdim(3)?)?;
        let detail = centred.sqr()?.mean(5)?.mean(3)?.sqrt()?;
        let z = Tensor::cat(&[&rotated, &detail], 1)?;
        Ok(z.broadcast_sub(&self.shift)?.broadcast_mul(&self.scale)?.contiguous()?)
    }

    /// `(B, 4, h, w)` latents to `(B, 3, H, W)` images clamped to [-1, 1].
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = latents.dims4()?;
        let s = self.latent_size();
        if c != LATENT_CHANNELS || h != s || w != s {
            return Err(Error::Shape(format!(
                "autoencoder expects latents (B, {LATENT_CHANNELS}, {s}, {s}), got ({b}, {c}, {h}, {w})"
            )));
        }
        let raw = latents.broadcast_div(&self.scale)?.broadcast_add(&self.shift)?;
        let colour = raw.narrow(1, 0, 3)?;
        let rgb = colour
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .broadcast_matmul(&self.mix)?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        let n = self.config.image_size;
        Ok(rgb.upsample_nearest2d(n, n)?.clamp(-1.0, 1.0)?)
    }
}
