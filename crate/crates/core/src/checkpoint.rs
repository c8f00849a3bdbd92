//! `JBF1` checkpoint files: magic, little-endian u64 header length, JSON
//! header, then little-endian `f32` tensors back to back.

use std::fs;
use std::path::Path;

use nnkit::optim::AdamState;
use nnkit::ParamTree;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"JBF1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    pub offset: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub params: ParamTree,
    pub adam: Option<AdamState>,
    pub step: u64,
}

const PARAM: &str = "param/";
const MOM1: &str = "adam.m/";
const MOM2: &str = "adam.v/";

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn encode(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn from_model(model: &Model, adam: Option<&AdamState>, train: Option<&TrainConfig>) -> Self {
        Self {
            model: model.config().clone(),
            train: train.cloned(),
            params: model.params.clone(),
            adam: adam.cloned(),
            step: adam.map_or(0, |a| a.step),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: String, shape: &[usize], values: &[f64]| {
            let bytes = encode(values);
            tensors.push(TensorEntry {
                name,
                shape: shape.to_vec(),
                offset: payload.len() / 4,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
            payload.extend_from_slice(&bytes);
        };
        for (name, p) in self.params.iter() {
            push(format!("{PARAM}{name}"), &p.shape, &p.value);
        }
        if let Some(adam) = &self.adam {
            for (name, p) in self.params.iter() {
                let m = adam.m.get(name).ok_or_else(|| corrupt(format!("no Adam moment for {name}")))?;
                let v = adam.v.get(name).ok_or_else(|| corrupt(format!("no Adam moment for {name}")))?;
                push(format!("{MOM1}{name}"), &p.shape, m);
                push(format!("{MOM2}{name}"), &p.shape, v);
            }
        }
        let header = Header {
            version: VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing JBF1 magic"));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(12..12usize.saturating_add(hlen)).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.version != VERSION {
            return Err(corrupt(format!(
                "format version {} (this build reads {VERSION})",
                header.version
            )));
        }
        let payload = &bytes[12 + hlen..];
        let mut params = ParamTree::new();
        let mut m = std::collections::BTreeMap::new();
        let mut v = std::collections::BTreeMap::new();
        let mut end = 0;
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let (a, b) = (t.offset * 4, t.offset * 4 + n * 4);
            let raw = payload.get(a..b).ok_or_else(|| corrupt(format!("{} runs past the payload", t.name)))?;
            if hex::encode(Sha256::digest(raw)) != t.sha256 {
                return Err(corrupt(format!("checksum mismatch in {}", t.name)));
            }
            end = end.max(b);
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if let Some(name) = t.name.strip_prefix(PARAM) {
                params.insert(name, nnkit::Tensor::new(&t.shape, values))?;
            } else if let Some(name) = t.name.strip_prefix(MOM1) {
                m.insert(name.to_string(), values);
            } else if let Some(name) = t.name.strip_prefix(MOM2) {
                v.insert(name.to_string(), values);
            } else {
                return Err(corrupt(format!("unknown tensor {}", t.name)));
            }
        }
        if end != payload.len() {
            return Err(corrupt("trailing bytes after the last tensor"));
        }
        let adam = if m.is_empty() && v.is_empty() {
            None
        } else {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(corrupt("Adam moments do not cover every parameter"));
            }
            Some(AdamState { m, v, step: header.step })
        };
        Ok(Self {
            model: header.model,
            train: header.train,
            params,
            adam,
            step: header.step,
        })
    }

    /// Writes via a temporary file so an interrupted save never clobbers
    /// the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let io = |e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        };
        fs::write(&tmp, &bytes).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model; with `expected`, its config must match exactly.
    pub fn into_model(self, expected: Option<&ModelConfig>) -> Result<Model> {
        if let Some(cfg) = expected {
            if cfg != &self.model {
                let why = if cfg.mics != self.model.mics {
                    format!("checkpoint has {} mics, config asks for {}", self.model.mics, cfg.mics)
                } else {
                    "checkpoint model config differs from the requested one".to_string()
                };
                return Err(Error::ConfigMismatch(why));
            }
        }
        Model::from_params(&self.model, self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            enc_channels: vec![4, 4, 4],
            ft_hidden: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn bytes_roundtrip_exactly() {
        let model = Model::new(&small()).unwrap();
        let mut adam = AdamState::new(&model.params);
        adam.step = 3;
        adam.m.values_mut().for_each(|m| m.iter_mut().for_each(|x| *x = 0.125));
        let ck = Checkpoint::from_model(&model, Some(&adam), Some(&TrainConfig::default()));
        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn corruption_is_detected() {
        let model = Model::new(&small()).unwrap();
        let mut a = Checkpoint::from_model(&model, None, None).to_bytes().unwrap();
        let last = a.len() - 1;
        a[last] ^= 0x55;
        assert!(matches!(Checkpoint::from_bytes(&a), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(b"JBF2xxxxxxxx"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_is_checked() {
        let model = Model::new(&small()).unwrap();
        let a = Checkpoint::from_model(&model, None, None).to_bytes().unwrap();
        let text = String::from_utf8_lossy(&a).replace("\"version\":1", "\"version\":9");
        assert!(matches!(Checkpoint::from_bytes(text.as_bytes()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_mic_count_is_a_mismatch() {
        let model = Model::new(&small()).unwrap();
        let ck = Checkpoint::from_model(&model, None, None);
        let other = ModelConfig { mics: 4, ..small() };
        assert!(matches!(ck.into_model(Some(&other)), Err(Error::ConfigMismatch(_))));
    }
}
