//! Binary checkpoints: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f64` in
//! declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Module;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"CRKNET01";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub epoch: Option<usize>,
    pub train: Option<TrainConfig>,
}

impl Meta {
    pub fn trained(config: &TrainConfig, epoch: usize) -> Self {
        Self {
            epoch: Some(epoch),
            train: Some(config.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    meta: Meta,
}

pub fn to_bytes(model: &Model, meta: &Meta) -> Result<Vec<u8>> {
    let params = model.params();
    let header = Header {
        model: model.config.clone(),
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name().to_string(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let body: usize = params.iter().map(|p| p.numel()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Meta)> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| bad(&e.to_string()))?;
    let mut model = Model::new(header.model)?;
    let names: Vec<(String, Vec<usize>)> = model
        .params()
        .iter()
        .map(|p| (p.name().to_string(), p.value.shape().to_vec()))
        .collect();
    let stored: Vec<(String, Vec<usize>)> = header
        .tensors
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    if names != stored {
        return Err(bad("tensor table does not match the model configuration"));
    }
    let body = &bytes[end..];
    let want: usize = names.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if body.len() != 8 * want {
        return Err(bad(&format!(
            "expected {} data bytes, found {}",
            8 * want,
            body.len()
        )));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    model.visit_mut(&mut |p| {
        for w in p.value.data_mut() {
            *w = values.next().expect("length checked");
        }
    });
    Ok((model, header.meta))
}

pub fn save(model: &Model, path: &Path, meta: &Meta) -> Result<()> {
    fs::write(path, to_bytes(model, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, Meta)> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn model() -> Model {
        let mut cfg = ModelConfig::desk(32, 32, 1);
        cfg.seed = 3;
        Model::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let meta = Meta {
            epoch: Some(4),
            train: Some(TrainConfig::default()),
        };
        let bytes = to_bytes(&m, &meta).unwrap();
        let (back, meta2) = from_bytes(&bytes).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(back.config, m.config);
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.value.data(), b.value.data());
        }
        assert_eq!(to_bytes(&back, &meta2).unwrap(), bytes);
    }

    #[test]
    fn loaded_model_predicts_identically() {
        let m = model();
        let (back, _) = from_bytes(&to_bytes(&m, &Meta::default()).unwrap()).unwrap();
        let x = Tensor::randn(&[1, 3, 32, 32], 1.0, &mut crate::nn::init_rng(0, "x"));
        assert_eq!(m.predict(&x).unwrap().0, back.predict(&x).unwrap().0);
    }

    #[test]
    fn corruption_is_a_format_error() {
        let bytes = to_bytes(&model(), &Meta::default()).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let truncated = &bytes[..bytes.len() - 8];
        let mut huge = bytes.clone();
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        for b in [&bad_magic[..], truncated, &huge[..], &bytes[..10]] {
            assert!(matches!(from_bytes(b), Err(Error::Format(_))));
        }
    }

    #[test]
    fn missing_file_is_io() {
        assert!(matches!(
            load(Path::new("/nonexistent/x.ckpt")),
            Err(Error::Io { .. })
        ));
    }
}
