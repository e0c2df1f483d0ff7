//! Binary tensor container and model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FCNN" | version: u32 | header_len: u64 | header (UTF-8 TOML) | payload
//! ```
//!
//! The header holds a `meta` table and a `tensors` array of
//! `{ name, dtype = "f32", shape, offset }`, offsets counted in bytes from
//! the start of the payload. The payload is the tensors' 32-bit floats.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;
use crate::train::{RngState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"FCNN";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: toml::Table,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: toml::Table,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), dtype: "f32".into(), shape: t.shape().to_vec(), offset };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let header = toml::to_string(&Header { meta: self.meta.clone(), tensors: entries })
            .expect("container header is TOML-representable");
        let mut out = Vec::with_capacity(PREFIX + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX {
            return Err(Error::checkpoint("header", format!("file is {} bytes, shorter than the prefix", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::checkpoint("magic", format!("expected \"FCNN\", found {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::checkpoint("version", format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let payload_start = (PREFIX as u64)
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| Error::checkpoint("header", format!("header length {header_len} runs past end of file")))?
            as usize;
        let text = std::str::from_utf8(&bytes[PREFIX..payload_start])
            .map_err(|e| Error::checkpoint("header", format!("not UTF-8: {e}")))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::checkpoint("header", e.to_string()))?;
        let payload = &bytes[payload_start..];

        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0u64;
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(Error::checkpoint(&e.name, format!("unsupported dtype `{}`", e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(Error::checkpoint(&e.name, format!("offset {} != expected {expected_offset}", e.offset)));
            }
            let n = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = n.and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::checkpoint(&e.name, "shape overflows"))?;
            let start = e.offset as usize;
            let chunk = payload.get(start..start + len).ok_or_else(|| {
                Error::checkpoint(&e.name, format!("payload truncated: need {len} bytes at offset {start}"))
            })?;
            let data = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape, data).map_err(|err| Error::checkpoint(&e.name, err.to_string()))?));
            expected_offset += len as u64;
        }
        if expected_offset != payload.len() as u64 {
            return Err(Error::checkpoint(
                "payload",
                format!("{} trailing bytes after the last tensor", payload.len() as u64 - expected_offset),
            ));
        }
        Ok(Container { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    fn meta_field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<Option<T>> {
        self.meta
            .get(key)
            .map(|v| v.clone().try_into().map_err(|e: toml::de::Error| Error::checkpoint(key, e.to_string())))
            .transpose()
    }
}

fn to_value<T: Serialize>(v: &T) -> toml::Value {
    toml::Value::try_from(v).expect("metadata is TOML-representable")
}

/// Everything needed to rebuild, evaluate or resume a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    /// Class names in logit order.
    pub scenes: Vec<String>,
    pub norm: Option<NormStats>,
    pub train: Option<TrainConfig>,
    pub rng: Option<RngState>,
    /// Model parameters followed by batch-norm buffers.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, scenes: Vec<String>) -> Self {
        Checkpoint {
            spec: model.spec().clone(),
            scenes,
            norm: None,
            train: None,
            rng: None,
            tensors: model.named_tensors().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuild the model, checking every tensor against the model spec.
    pub fn model(&self) -> Result<Model> {
        let expected = self.spec.param_shapes()?.len() + self.spec.buffer_shapes()?.len();
        let map: BTreeMap<String, Tensor<f32>> = self.tensors.iter().cloned().collect();
        if map.len() != self.tensors.len() {
            return Err(Error::checkpoint("tensors", "duplicate tensor names"));
        }
        if map.len() != expected {
            let known: std::collections::BTreeSet<String> = self
                .spec
                .param_shapes()?
                .into_iter()
                .chain(self.spec.buffer_shapes()?)
                .map(|(n, _)| n)
                .collect();
            if let Some(extra) = map.keys().find(|k| !known.contains(*k)) {
                return Err(Error::checkpoint(extra, "tensor not part of the model spec"));
            }
        }
        Model::from_tensors(&self.spec, &map)
    }

    pub fn to_container(&self) -> Container {
        let mut meta = toml::Table::new();
        meta.insert("kind".into(), "checkpoint".into());
        meta.insert("spec".into(), to_value(&self.spec));
        meta.insert("scenes".into(), to_value(&self.scenes));
        if let Some(n) = &self.norm {
            meta.insert("norm".into(), to_value(n));
        }
        if let Some(t) = &self.train {
            meta.insert("train".into(), to_value(t));
        }
        if let Some(r) = &self.rng {
            meta.insert("rng".into(), to_value(r));
        }
        Container { meta, tensors: self.tensors.clone() }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        match c.meta.get("kind").and_then(|v| v.as_str()) {
            Some("checkpoint") => {}
            other => return Err(Error::checkpoint("kind", format!("expected a checkpoint, found {other:?}"))),
        }
        let spec: ModelSpec = c.meta_field("spec")?.ok_or_else(|| Error::checkpoint("spec", "missing"))?;
        let scenes: Vec<String> = c.meta_field("scenes")?.ok_or_else(|| Error::checkpoint("scenes", "missing"))?;
        if scenes.len() != spec.num_classes {
            return Err(Error::checkpoint("scenes", format!("{} names for {} classes", scenes.len(), spec.num_classes)));
        }
        let ck = Checkpoint {
            norm: c.meta_field("norm")?,
            train: c.meta_field("train")?,
            rng: c.meta_field("rng")?,
            spec,
            scenes,
            tensors: c.tensors,
        };
        ck.model()?;
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Feature files reuse the container with a single `logmel` tensor `[C, M, T]`.
pub const FEATURE_TENSOR: &str = "logmel";

pub fn save_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let mut meta = toml::Table::new();
    meta.insert("kind".into(), "features".into());
    Container { meta, tensors: vec![(FEATURE_TENSOR.into(), features.clone())] }.save(path)
}

pub fn load_features(path: &Path) -> Result<Tensor<f32>> {
    let c = Container::load(path)?;
    let mut tensors = c.tensors.into_iter();
    match (tensors.next(), tensors.next()) {
        (Some((name, t)), None) if name == FEATURE_TENSOR && t.shape().len() == 3 => Ok(t),
        _ => Err(Error::checkpoint(FEATURE_TENSOR, format!("{} holds no single [C, M, T] `logmel` tensor", path.display()))),
    }
}
