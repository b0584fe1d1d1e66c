use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear-β variance schedule with its cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        let n = config.train_timesteps;
        if n < 2 {
            return Err(Error::Config("schedule needs at least 2 timesteps".into()));
        }
        if !(0.0 < config.beta_start && config.beta_start <= config.beta_end && config.beta_end < 1.0)
        {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got {} and {}",
                config.beta_start, config.beta_end
            )));
        }
        let step = (config.beta_end - config.beta_start) / (n - 1) as f64;
        let betas: Vec<f64> = (0..n).map(|i| config.beta_start + step * i as f64).collect();
        let alphas_cumprod = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            betas,
            alphas_cumprod,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// ᾱ_t for `t` in `0..len()`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod.get(t).copied().ok_or_else(|| {
            Error::Config(format!("timestep {t} outside 0..{}", self.len()))
        })
    }

    fn coefficients(&self, t: &[usize], b: usize) -> Result<(Tensor, Tensor)> {
        if t.len() != b {
            return Err(Error::Shape(format!(
                "{} timesteps for a batch of {b}",
                t.len()
            )));
        }
        let ab = t
            .iter()
            .map(|&t| self.alpha_bar(t))
            .collect::<Result<Vec<_>>>()?;
        let signal: Vec<f64> = ab.iter().map(|a| a.sqrt()).collect();
        let noise: Vec<f64> = ab.iter().map(|a| (1.0 - a).sqrt()).collect();
        let shape = (b, 1, 1, 1);
        Ok((
            Tensor::from_vec(signal, shape, &Device::Cpu)?,
            Tensor::from_vec(noise, shape, &Device::Cpu)?,
        ))
    }

    /// `z_t = √ᾱ_t · z + √(1 − ᾱ_t) · ε` for a `(B, C, h, w)` batch with one
    /// timestep per sample.
    pub fn add_noise(&self, z: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        if z.dims() != eps.dims() {
            return Err(Error::Shape(format!(
                "noise {:?} does not match latent {:?}",
                eps.dims(),
                z.dims()
            )));
        }
        let (signal, noise) = self.coefficients(t, z.dim(0)?)?;
        Ok((z.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
    }

    /// Closed-form estimate of `z_0` from `z_t` and a noise estimate.
    pub fn predict_x0(&self, z_t: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        let (signal, noise) = self.coefficients(t, z_t.dim(0)?)?;
        Ok((z_t - eps.broadcast_mul(&noise)?)?.broadcast_div(&signal)?)
    }

    /// Evenly spaced descending timesteps for a `steps`-step sampler.
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.len() {
            return Err(Error::Config(format!(
                "sampler steps must lie in 1..={}, got {steps}",
                self.len()
            )));
        }
        let ratio = self.len() / steps;
        Ok((0..steps).rev().map(|i| i * ratio + (self.len() - 1 - (steps - 1) * ratio)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_configs() {
        let bad = ScheduleConfig {
            beta_start: 0.0,
            ..ScheduleConfig::default()
        };
        assert!(NoiseSchedule::new(&bad).is_err());
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        assert!(s.alpha_bar(1000).is_err());
    }

    #[test]
    fn inference_timesteps_descend_and_end_at_the_last_index() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let ts = s.inference_timesteps(30).unwrap();
        assert_eq!(ts.len(), 30);
        assert_eq!(ts[0], 999);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.inference_timesteps(1).unwrap(), vec![999]);
        assert!(s.inference_timesteps(0).is_err());
    }
}
