//! Seeded randomness. Candle's CPU sampler is not seedable, so every random
//! tensor in the crate is drawn here from a ChaCha stream.

use candle_core::{Device, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::Result;

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed from a base seed and a path of labels.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Standard-normal tensor of the given shape (f64, CPU).
pub fn randn<S: Into<Shape>>(rng: &mut impl Rng, shape: S) -> Result<Tensor> {
    let shape = shape.into();
    let data = normal_vec(rng, shape.elem_count());
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}
