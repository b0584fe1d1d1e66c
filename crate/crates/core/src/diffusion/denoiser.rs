use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::nn::{key_padding_bias, timestep_embedding, Attention, Init, LayerNorm, Linear, Mlp, Params};
use crate::{Error, Result};

/// Transformer noise predictor over latent patches, with cross-attention
/// to the contextual text states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub text_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 16,
            patch_size: 2,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_hidden: 128,
            text_dim: 32,
        }
    }
}

impl DenoiserConfig {
    fn grid(&self) -> usize {
        self.latent_size / self.patch_size
    }

    fn patch_dim(&self) -> usize {
        self.latent_channels * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone)]
struct Block {
    time: Linear,
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    cross_attn: Attention,
    norm3: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn new(p: Params, c: &DenoiserConfig) -> Result<Self> {
        Ok(Self {
            time: Linear::new(p.pp("time"), c.dim, c.dim)?,
            norm1: LayerNorm::new(p.pp("norm1"), c.dim)?,
            self_attn: Attention::new(p.pp("self_attn"), c.dim, c.dim, c.heads)?,
            norm2: LayerNorm::new(p.pp("norm2"), c.dim)?,
            cross_attn: Attention::new(p.pp("cross_attn"), c.dim, c.text_dim, c.heads)?,
            norm3: LayerNorm::new(p.pp("norm3"), c.dim)?,
            mlp: Mlp::new(p.pp("mlp"), c.dim, c.mlp_hidden)?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, ctx: &Tensor, ctx_bias: &Tensor) -> Result<Tensor> {
        let x = x.broadcast_add(&self.time.forward(temb)?.unsqueeze(1)?)?;
        let x = (&x + self.self_attn.forward(&self.norm1.forward(&x)?, None, None)?)?;
        let x = (&x + self.cross_attn.forward(&self.norm2.forward(&x)?, Some(ctx), Some(ctx_bias))?)?;
        Ok((&x + self.mlp.forward(&self.norm3.forward(&x)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    patch_in: Linear,
    pos: Tensor,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<Block>,
    norm_out: LayerNorm,
    patch_out: Linear,
    /// Linear path from input to output patches; the output norm would
    /// otherwise discard each token's scale.
    skip: Linear,
}

impl Denoiser {
    pub fn new(p: Params, config: &DenoiserConfig) -> Result<Self> {
        let c = config;
        if c.patch_size == 0 || c.latent_size % c.patch_size != 0 {
            return Err(Error::Config(format!(
                "latent size {} is not a multiple of patch size {}",
                c.latent_size, c.patch_size
            )));
        }
        let blocks = (0..c.depth)
            .map(|i| Block::new(p.pp(format!("blocks.{i}")), c))
            .collect::<Result<Vec<_>>>()?;
        let tokens = c.grid() * c.grid();
        Ok(Self {
            config: c.clone(),
            patch_in: Linear::new(p.pp("patch_in"), c.patch_dim(), c.dim)?,
            pos: p.get((1, tokens, c.dim), "pos", Init::Normal(0.02))?,
            time_in: Linear::new(p.pp("time_in"), c.dim, c.dim)?,
            time_out: Linear::new(p.pp("time_out"), c.dim, c.dim)?,
            blocks,
            norm_out: LayerNorm::new(p.pp("norm_out"), c.dim)?,
            patch_out: Linear::with_std(p.pp("patch_out"), c.dim, c.patch_dim(), 0.02)?,
            skip: Linear::with_std(p.pp("skip"), c.patch_dim(), c.patch_dim(), 0.0)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Raw network output in the backend's parametrisation. `z_t`: `(B, C, h, w)`; `context`: `(B, L, text_dim)` contextual text
    /// states with a `(B, L)` 0/1 mask.
    pub fn forward(&self, z_t: &Tensor, t: &[usize], context: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let (b, ch, h, w) = z_t.dims4()?;
        if ch != c.latent_channels || h != c.latent_size || w != c.latent_size {
            return Err(Error::Shape(format!(
                "denoiser expects latents (B, {}, {s}, {s}), got ({b}, {ch}, {h}, {w})",
                c.latent_channels,
                s = c.latent_size
            )));
        }
        let (cb, _, cd) = context.dims3()?;
        if cb != b || cd != c.text_dim {
            return Err(Error::Shape(format!(
                "conditioning batch ({cb}, _, {cd}) does not fit latents of batch {b} and text width {}",
                c.text_dim
            )));
        }
        if t.len() != b {
            return Err(Error::Shape(format!("{} timesteps for a batch of {b}", t.len())));
        }
        let p = c.patch_size;
        let g = c.grid();
        let patches = z_t
            .reshape((b, ch, g, p, g, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, g * g, c.patch_dim()))?;
        let mut x = self.patch_in.forward(&patches)?.broadcast_add(&self.pos)?;
        let temb = timestep_embedding(t, c.dim)?;
        let temb = self.time_out.forward(&self.time_in.forward(&temb)?.silu()?)?.silu()?;
        let bias = key_padding_bias(mask)?;
        for block in &self.blocks {
            x = block.forward(&x, &temb, context, &bias)?;
        }
        let out = (self.patch_out.forward(&self.norm_out.forward(&x)?)? + self.skip.forward(&patches)?)?;
        Ok(out
            .reshape((b, g, g, ch, p, p))?
            .permute((0, 3, 1, 4, 2, 5))?
            .contiguous()?
            .reshape((b, ch, h, w))?)
    }
}
