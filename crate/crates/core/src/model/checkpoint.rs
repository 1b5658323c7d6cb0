//! JSON checkpoints: a config plus named tensors whose payloads are
//! base64-encoded little-endian `f64`s, so values round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Parameter, Tensor};

pub const FORMAT: &str = "mmkd-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    config: serde_json::Value,
    params: BTreeMap<String, TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub params: BTreeMap<String, Tensor>,
}

fn encode(t: &Tensor) -> TensorRecord {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    TensorRecord {
        shape: t.shape().to_vec(),
        data: STANDARD.encode(bytes),
    }
}

fn decode(name: &str, r: &TensorRecord) -> Result<Tensor> {
    let bytes = STANDARD
        .decode(&r.data)
        .map_err(|e| Error::Data(format!("parameter {name}: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Data(format!("parameter {name}: truncated payload")));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(r.shape.clone(), data).map_err(|e| Error::Data(format!("parameter {name}: {e}")))
}

impl Checkpoint {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            config,
            params: BTreeMap::new(),
        }
    }

    pub fn insert_params<'a>(&mut self, prefix: &str, params: impl IntoIterator<Item = &'a Parameter>) {
        for p in params {
            self.params.insert(format!("{prefix}{}", p.name()), p.value.clone());
        }
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.params
            .remove(name)
            .ok_or_else(|| Error::Data(format!("checkpoint missing parameter `{name}`")))
    }

    /// Takes `name` and checks its shape against `expected`.
    pub fn take_shaped(&mut self, name: &str, expected: &[usize]) -> Result<Tensor> {
        let t = self.take(name)?;
        if t.shape() != expected {
            return Err(Error::Data(format!(
                "parameter `{name}` has shape {:?}, expected {expected:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: FORMAT.to_string(),
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), encode(v))).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != FORMAT {
            return Err(Error::Data(format!("unsupported checkpoint format `{}`", file.format)));
        }
        let params = file
            .params
            .iter()
            .map(|(k, r)| decode(k, r).map(|t| (k.clone(), t)))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: file.config,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
