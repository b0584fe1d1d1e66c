//! Versioned single-file model archives.
//!
//! An archive is a safetensors file whose header metadata carries the
//! archive kind, the format version and the JSON-encoded model config.
//! Tensors are stored as little-endian f64.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

pub const FORMAT: &str = "dreamid";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct Archive {
    pub kind: String,
    pub version: u32,
    pub config: serde_json::Value,
    pub meta: BTreeMap<String, String>,
    pub tensors: HashMap<String, Tensor>,
}

impl Archive {
    pub fn config<T: DeserializeOwned>(&self, path: &Path) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::checkpoint(path, format!("malformed config: {e}")))
    }

    /// Removes and returns all tensors whose name starts with `prefix.`,
    /// with the prefix stripped.
    pub fn take_prefixed(&mut self, prefix: &str) -> HashMap<String, Tensor> {
        let dotted = format!("{prefix}.");
        let names: Vec<String> = self
            .tensors
            .keys()
            .filter(|k| k.starts_with(&dotted))
            .cloned()
            .collect();
        names
            .into_iter()
            .map(|k| {
                let t = self.tensors.remove(&k).expect("key listed above");
                (k[dotted.len()..].to_string(), t)
            })
            .collect()
    }
}

pub fn save<C: Serialize>(
    path: &Path,
    kind: &str,
    config: &C,
    meta: &BTreeMap<String, String>,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut header = HashMap::new();
    header.insert("format".to_string(), FORMAT.to_string());
    header.insert("kind".to_string(), kind.to_string());
    header.insert("version".to_string(), FORMAT_VERSION.to_string());
    header.insert("config".to_string(), serde_json::to_string(config)?);
    for (k, v) in meta {
        header.insert(format!("meta.{k}"), v.clone());
    }

    let mut buffers = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let values = t.flatten_all()?.to_vec1::<f64>()?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name.clone(), t.dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::checkpoint(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, Some(header))
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path, expected_kind: &str) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (_, metadata) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::checkpoint(path, format!("not a model archive: {e}")))?;
    let header = metadata
        .metadata()
        .clone()
        .ok_or_else(|| Error::checkpoint(path, "archive header has no metadata"))?;
    let field = |k: &str| {
        header
            .get(k)
            .cloned()
            .ok_or_else(|| Error::checkpoint(path, format!("archive header lacks `{k}`")))
    };
    if field("format")? != FORMAT {
        return Err(Error::checkpoint(path, "unknown archive format"));
    }
    let kind = field("kind")?;
    if kind != expected_kind {
        return Err(Error::checkpoint(
            path,
            format!("expected a {expected_kind} archive, found {kind}"),
        ));
    }
    let version: u32 = field("version")?
        .parse()
        .map_err(|_| Error::checkpoint(path, "unparseable archive version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::checkpoint(
            path,
            format!("archive version {version} is not supported (expected {FORMAT_VERSION})"),
        ));
    }
    let config: serde_json::Value = serde_json::from_str(&field("config")?)
        .map_err(|e| Error::checkpoint(path, format!("malformed config: {e}")))?;
    let meta = header
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
        .collect();

    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::checkpoint(
                path,
                format!("tensor {name} has dtype {:?}, expected F64", view.dtype()),
            ));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::from_vec(values, view.shape(), &Device::Cpu)?;
        tensors.insert(name, t);
    }
    Ok(Archive {
        kind,
        version,
        config,
        meta,
        tensors,
    })
}
