//! Vision transformer with per-block CLS read-out.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{EncoderBlock, Init, LayerNorm, Linear, Params};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 16,
            depth: 12,
            dim: 64,
            heads: 4,
            mlp_hidden: 128,
        }
    }
}

impl VitConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "invalid transformer shape: depth {}, dim {}, heads {}",
                self.depth, self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Where a feature vector is read from the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReadPoint {
    /// Normalised CLS token after block `n` (1-based).
    Block(usize),
    /// The backbone's final identity vector.
    Final,
}

/// How the final identity vector is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FinalReadout {
    /// Identity projection head applied to the last normalised CLS token.
    #[default]
    IdentityHead,
    /// The last normalised CLS token itself.
    LastCls,
}

#[derive(Debug, Clone)]
pub struct Vit {
    config: VitConfig,
    readout: FinalReadout,
    patch_embed: Linear,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    id_head: Linear,
}

impl Vit {
    pub fn new(p: Params, config: &VitConfig, readout: FinalReadout) -> Result<Self> {
        config.validate()?;
        let patch_dim = 3 * config.patch_size * config.patch_size;
        let blocks = (0..config.depth)
            .map(|i| {
                EncoderBlock::new(
                    p.pp(format!("blocks.{i}")),
                    config.dim,
                    config.heads,
                    config.mlp_hidden,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            readout,
            patch_embed: Linear::new(p.pp("patch_embed"), patch_dim, config.dim)?,
            cls: p.get((1, 1, config.dim), "cls", Init::Normal(0.02))?,
            pos: p.get(
                (1, config.num_patches() + 1, config.dim),
                "pos",
                Init::Normal(0.02),
            )?,
            blocks,
            norm: LayerNorm::new(p.pp("norm"), config.dim)?,
            id_head: Linear::new(p.pp("id_head"), config.dim, config.dim)?,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn readout(&self) -> FinalReadout {
        self.readout
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    /// `(B, 3, H, W)` images to `(B, 1 + patches, dim)` token sequence.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        let n = self.config.image_size;
        if c != 3 || h != n || w != n {
            return Err(Error::Shape(format!(
                "backbone expects (B, 3, {n}, {n}) input, got ({b}, {c}, {h}, {w})"
            )));
        }
        let p = self.config.patch_size;
        let g = self.config.grid();
        let patches = images
            .reshape((b, 3, g, p, g, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, g * g, 3 * p * p))?;
        let tokens = self.patch_embed.forward(&patches)?;
        let cls = self.cls.broadcast_as((b, 1, self.config.dim))?;
        Ok(Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.pos)?)
    }

    /// Layer-normalised CLS token of a hidden sequence.
    pub fn read_cls(&self, hidden: &Tensor) -> Result<Tensor> {
        self.norm.forward(&hidden.narrow(1, 0, 1)?.squeeze(1)?)
    }

    /// Identity vector from the last hidden sequence.
    pub fn final_vector(&self, last_hidden: &Tensor) -> Result<Tensor> {
        let cls = self.read_cls(last_hidden)?;
        match self.readout {
            FinalReadout::IdentityHead => self.id_head.forward(&cls),
            FinalReadout::LastCls => Ok(cls),
        }
    }

    /// Runs the backbone and returns one `(B, dim)` tensor per read point,
    /// in the order given.
    pub fn forward_read(&self, images: &Tensor, points: &[ReadPoint]) -> Result<Vec<Tensor>> {
        for pt in points {
            if let ReadPoint::Block(l) = pt {
                if *l == 0 || *l > self.config.depth {
                    return Err(Error::Config(format!(
                        "read point block {l} outside 1..={}",
                        self.config.depth
                    )));
                }
            }
        }
        let needed = points
            .iter()
            .map(|p| match p {
                ReadPoint::Block(l) => *l,
                ReadPoint::Final => self.config.depth,
            })
            .max()
            .unwrap_or(0);
        let mut hidden = self.embed(images)?;
        let mut per_block = Vec::with_capacity(needed);
        for block in &self.blocks[..needed] {
            hidden = block.forward(&hidden, None)?;
            per_block.push(hidden.clone());
        }
        points
            .iter()
            .map(|p| match p {
                ReadPoint::Block(l) => self.read_cls(&per_block[l - 1]),
                ReadPoint::Final => self.final_vector(&per_block[self.config.depth - 1]),
            })
            .collect()
    }

    pub fn identity_vectors(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self
            .forward_read(images, &[ReadPoint::Final])?
            .remove(0))
    }
}

/// Zero image batch for shape probes.
pub fn blank_batch(config: &VitConfig, batch: usize) -> Result<Tensor> {
    Ok(Tensor::zeros(
        (batch, 3, config.image_size, config.image_size),
        crate::nn::DTYPE,
        &Device::Cpu,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn small() -> VitConfig {
        VitConfig {
            image_size: 16,
            patch_size: 8,
            depth: 4,
            dim: 8,
            heads: 2,
            mlp_hidden: 16,
        }
    }

    #[test]
    fn reads_requested_points() {
        let store = ParamStore::seeded(1, false);
        let vit = Vit::new(store.root(), &small(), FinalReadout::IdentityHead).unwrap();
        let x = crate::rng::randn(&mut crate::rng::rng(0), (2, 3, 16, 16)).unwrap();
        let outs = vit
            .forward_read(&x, &[ReadPoint::Block(1), ReadPoint::Block(4), ReadPoint::Final])
            .unwrap();
        assert_eq!(outs.len(), 3);
        for o in &outs {
            assert_eq!(o.dims(), &[2, 8]);
        }
    }

    #[test]
    fn rejects_wrong_resolution_and_bad_points() {
        let store = ParamStore::seeded(1, false);
        let vit = Vit::new(store.root(), &small(), FinalReadout::LastCls).unwrap();
        let x = blank_batch(&VitConfig { image_size: 8, ..small() }, 1).unwrap();
        assert!(matches!(vit.embed(&x), Err(Error::Shape(_))));
        let ok = blank_batch(&small(), 1).unwrap();
        assert!(vit.forward_read(&ok, &[ReadPoint::Block(5)]).is_err());
        assert!(vit.forward_read(&ok, &[ReadPoint::Block(0)]).is_err());
    }

    #[test]
    fn read_points_order_final_last() {
        assert!(ReadPoint::Block(12) < ReadPoint::Final);
        assert!(ReadPoint::Block(3) < ReadPoint::Block(6));
    }
}
