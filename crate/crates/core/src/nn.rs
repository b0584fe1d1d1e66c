//! Small neural-network building blocks on top of candle primitives.
//!
//! Everything runs in f64 on the CPU. Layers are written against basic tensor
//! ops only, so reverse-mode gradients exist for every path (candle's fused
//! layer-norm kernel has no backward pass).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Mutex;

use candle_core::{CpuStorage, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::rng::{self, SeededRng};
use crate::{Error, Result};

pub const DTYPE: DType = DType::F64;

/// Parameter initialisation scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    Const(f64),
}

/// Owns the parameters of one model, either freshly initialised from a
/// seeded stream or taken from a checkpoint.
pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    rng: Mutex<SeededRng>,
    loaded: Option<Mutex<HashMap<String, Tensor>>>,
    trainable: bool,
}

impl ParamStore {
    pub fn seeded(seed: u64, trainable: bool) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(rng::rng(seed)),
            loaded: None,
            trainable,
        }
    }

    pub fn from_tensors(tensors: HashMap<String, Tensor>, trainable: bool) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(rng::rng(0)),
            loaded: Some(Mutex::new(tensors)),
            trainable,
        }
    }

    pub fn root(&self) -> Params<'_> {
        Params {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// After a model has been built from loaded tensors, reject leftovers.
    pub fn finish_loading(&self) -> Result<()> {
        if let Some(loaded) = &self.loaded {
            let left = loaded.lock().expect("param store poisoned");
            if !left.is_empty() {
                let mut names: Vec<_> = left.keys().cloned().collect();
                names.sort();
                return Err(Error::Shape(format!(
                    "checkpoint carries tensors the model does not use: {}",
                    names.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// All parameters by name, in sorted order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let vars = self.vars.lock().expect("param store poisoned");
        vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let vars = self.vars.lock().expect("param store poisoned");
        vars.iter()
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// SHA-256 over parameter names, shapes and raw values.
    pub fn checksum(&self) -> Result<String> {
        checksum_tensors(&self.tensors())
    }

    fn get(&self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        let value = match &self.loaded {
            Some(loaded) => {
                let t = loaded
                    .lock()
                    .expect("param store poisoned")
                    .remove(&name)
                    .ok_or_else(|| Error::Shape(format!("checkpoint is missing tensor {name}")))?;
                if t.shape() != &shape {
                    return Err(Error::Shape(format!(
                        "tensor {name}: checkpoint has {:?}, model expects {:?}",
                        t.dims(),
                        shape.dims()
                    )));
                }
                t.to_dtype(DTYPE)?
            }
            None => {
                let n = shape.elem_count();
                let data = match init {
                    Init::Const(c) => vec![c; n],
                    Init::Normal(std) => {
                        let mut rng = self.rng.lock().expect("param store poisoned");
                        rng::normal_vec(&mut *rng, n)
                            .into_iter()
                            .map(|x| x * std)
                            .collect()
                    }
                };
                Tensor::from_vec(data, shape, &Device::Cpu)?
            }
        };
        let var = Var::from_tensor(&value)?;
        let out = if self.trainable {
            var.as_tensor().clone()
        } else {
            var.as_detached_tensor()
        };
        let mut vars = self.vars.lock().expect("param store poisoned");
        if vars.insert(name.clone(), var).is_some() {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        Ok(out)
    }

    /// Draws a uniform sample from the store's own stream; used for
    /// initialisation choices that are not plain tensors.
    pub fn uniform(&self) -> f64 {
        self.rng.lock().expect("param store poisoned").random()
    }
}

pub fn checksum_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in t.flatten_all()?.to_vec1::<f64>()? {
            h.update(x.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Hierarchical view into a [`ParamStore`].
#[derive(Clone)]
pub struct Params<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Params<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Params<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Params {
            store: self.store,
            prefix,
        }
    }

    pub fn get<S: Into<Shape>>(&self, shape: S, name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.get(full, shape.into(), init)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(p: Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_std(p, in_dim, out_dim, 1.0 / (in_dim as f64).sqrt())
    }

    pub fn with_std(p: Params, in_dim: usize, out_dim: usize, std: f64) -> Result<Self> {
        let weight = p.get((out_dim, in_dim), "weight", Init::Normal(std))?;
        let bias = p.get(out_dim, "bias", Init::Const(0.0))?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(p: Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = p.get(
            (out_dim, in_dim),
            "weight",
            Init::Normal(1.0 / (in_dim as f64).sqrt()),
        )?;
        Ok(Self { weight, bias: None })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // One 2-D product over all leading axes beats a broadcast batch of
        // small ones.
        let dims = x.dims();
        let y = if dims.len() > 2 {
            let rows: usize = dims[..dims.len() - 1].iter().product();
            let mut out_dims = dims.to_vec();
            *out_dims.last_mut().expect("rank > 2") = self.weight.dim(0)?;
            x.reshape((rows, dims[dims.len() - 1]))?
                .matmul(&self.weight.t()?)?
                .reshape(out_dims)?
        } else {
            x.broadcast_matmul(&self.weight.t()?)?
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(p: Params, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.get(dim, "gamma", Init::Const(1.0))?,
            beta: p.get(dim, "beta", Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = normalize_last_dim(x)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

const LN_EPS: f64 = 1e-5;

/// Zero-mean, unit-variance normalisation over the last axis. A fused op:
/// the composed version spends most of a training step in its backward.
struct LastDimStandardize;

fn contiguous_f64<'a>(storage: &'a CpuStorage, layout: &Layout) -> candle_core::Result<&'a [f64]> {
    let data = match storage {
        CpuStorage::F64(v) => v,
        _ => return Err(candle_core::Error::Msg("expected f64 storage".into())),
    };
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("expected a contiguous tensor".into()))?;
    Ok(&data[start..end])
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

impl candle_core::CustomOp1 for LastDimStandardize {
    fn name(&self) -> &'static str {
        "last-dim-standardize"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = *layout.shape().dims().last().unwrap_or(&1);
        let data = contiguous_f64(storage, layout)?;
        let mut out = Vec::with_capacity(data.len());
        for row in data.chunks(d.max(1)) {
            let (mean, inv) = row_stats(row);
            out.extend(row.iter().map(|x| (x - mean) * inv));
        }
        Ok((CpuStorage::F64(out), layout.shape().clone()))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let d = arg.dim(D::Minus1)?;
        let x = arg.contiguous()?.flatten_all()?.to_vec1::<f64>()?;
        let y = res.contiguous()?.flatten_all()?.to_vec1::<f64>()?;
        let g = grad_res.contiguous()?.flatten_all()?.to_vec1::<f64>()?;
        let mut out = Vec::with_capacity(x.len());
        for ((xr, yr), gr) in x.chunks(d).zip(y.chunks(d)).zip(g.chunks(d)) {
            let (_, inv) = row_stats(xr);
            let n = d as f64;
            let g_mean = gr.iter().sum::<f64>() / n;
            let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
            out.extend(
                gr.iter()
                    .zip(yr)
                    .map(|(gi, yi)| inv * (gi - g_mean - yi * gy_mean)),
            );
        }
        Ok(Some(Tensor::from_vec(out, arg.shape(), arg.device())?))
    }
}

/// Zero-mean, unit-variance normalisation over the last axis.
pub fn normalize_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(LastDimStandardize)?)
}

/// Multi-head attention. Self-attention when `context` is `None`.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(p: Params, dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::no_bias(p.pp("q"), dim, dim)?,
            k: Linear::no_bias(p.pp("k"), context_dim, dim)?,
            v: Linear::no_bias(p.pp("v"), context_dim, dim)?,
            out: Linear::new(p.pp("out"), dim, dim)?,
            heads,
        })
    }

    /// `mask_bias`, when given, is added to the attention logits and must
    /// broadcast to `(batch, heads, queries, keys)`.
    pub fn forward(
        &self,
        x: &Tensor,
        context: Option<&Tensor>,
        mask_bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, n, dim) = x.dims3()?;
        let ctx = context.unwrap_or(x);
        let m = ctx.dim(1)?;
        let hd = dim / self.heads;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((b, len, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.q.forward(x)?, n)?;
        let k = split(self.k.forward(ctx)?, m)?;
        let v = split(self.v.forward(ctx)?, m)?;
        let mut logits = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        if let Some(bias) = mask_bias {
            logits = logits.broadcast_add(bias)?;
        }
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let y = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, dim))?;
        self.out.forward(&y)
    }
}

/// Additive attention bias from a `(batch, keys)` 0/1 mask.
pub fn key_padding_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, m) = mask.dims2()?;
    let bias = ((mask.to_dtype(DTYPE)? - 1.0)? * 1e9)?;
    Ok(bias.reshape((b, 1, 1, m))?)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(p: Params, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(p.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(p.pp("fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.silu()?)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(p: Params, dim: usize, heads: usize, mlp_hidden: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(p.pp("norm1"), dim)?,
            attn: Attention::new(p.pp("attn"), dim, dim, heads)?,
            norm2: LayerNorm::new(p.pp("norm2"), dim)?,
            mlp: Mlp::new(p.pp("mlp"), dim, mlp_hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask_bias: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, None, mask_bias)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// Sinusoidal embedding of integer timesteps, `(batch, dim)`.
pub fn timestep_embedding(timesteps: &[usize], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (timesteps.len(), dim), &Device::Cpu)?)
}

/// Euclidean norm over the last axis with the subgradient at zero fixed to 0.
struct LastDimNorm;

impl candle_core::CustomOp1 for LastDimNorm {
    fn name(&self) -> &'static str {
        "last-dim-l2-norm"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims();
        let d = *dims
            .last()
            .ok_or_else(|| candle_core::Error::Msg("norm of a scalar".into()))?;
        let out_shape: Shape = dims[..dims.len() - 1].into();
        let data = contiguous_f64(storage, layout)?;
        let out: Vec<f64> = data
            .chunks(d.max(1))
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Ok((CpuStorage::F64(out), out_shape))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let positive = res.gt(0.0)?;
        let safe = positive.where_cond(res, &res.ones_like()?)?;
        let scale = positive.where_cond(&(grad_res / safe)?, &res.zeros_like()?)?;
        Ok(Some(arg.broadcast_mul(&scale.unsqueeze(D::Minus1)?)?))
    }
}

/// `‖x‖₂` over the last axis; gradient `x/‖x‖`, and 0 where `x = 0`.
pub fn l2_norm_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(LastDimNorm)?)
}

/// Names of parameters that appear in `a` but whose values differ from `b`.
pub fn changed_params(
    a: &BTreeMap<String, Tensor>,
    b: &BTreeMap<String, Tensor>,
) -> Result<HashSet<String>> {
    let mut changed = HashSet::new();
    for (name, ta) in a {
        match b.get(name) {
            Some(tb) => {
                let va = ta.flatten_all()?.to_vec1::<f64>()?;
                let vb = tb.flatten_all()?.to_vec1::<f64>()?;
                if va.iter().zip(&vb).any(|(x, y)| x.to_bits() != y.to_bits()) {
                    changed.insert(name.clone());
                }
            }
            None => {
                changed.insert(name.clone());
            }
        }
    }
    Ok(changed)
}
