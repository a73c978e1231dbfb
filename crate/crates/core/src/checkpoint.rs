//! Binary checkpoint container.
//!
//! Layout: `b"CSEN"`, `u32` LE version, `u64` LE header length, a UTF-8 JSON
//! header, then the little-endian payload. The header maps tensor names to
//! `{shape, dtype, offset, length}` (byte offsets into the payload) and
//! carries a `meta` object whose `checksum` is the CRC-32 of the payload.
//!
//! Tensor names are prefixed `param/`, `buffer/`, `adam.m/` and `adam.v/`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{ParamSet, Tensor};
use crate::training::{Adam, History, Precision, TrainState};

pub const MAGIC: &[u8; 4] = b"CSEN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamMeta {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    /// Caller-supplied resolved configuration, stored verbatim.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub model: ModelConfig,
    pub num_ids: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub precision: Precision,
    pub adam: AdamMeta,
    pub history: History,
    /// Filled in on save; ignored by the caller.
    pub checksum: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: BTreeMap<String, TensorEntry>,
    meta: Meta,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, (Dtype, Tensor)>,
    pub meta: Meta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = BTreeMap::new();
        for (name, (dtype, t)) in &self.tensors {
            let offset = payload.len() as u64;
            match dtype {
                Dtype::F64 => t.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
                Dtype::F32 => {
                    for &v in t.data() {
                        let s = v as f32;
                        if f64::from(s).to_bits() != v.to_bits() && !v.is_nan() {
                            return Err(Error::Checkpoint(format!(
                                "tensor `{name}` holds values not representable as f32"
                            )));
                        }
                        payload.extend_from_slice(&s.to_le_bytes());
                    }
                }
            }
            entries.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape().to_vec(),
                    dtype: *dtype,
                    offset,
                    length: payload.len() as u64 - offset,
                },
            );
        }
        let mut meta = self.meta.clone();
        meta.checksum = crc32fast::hash(&payload);
        let header = serde_json::to_vec(&Header { tensors: entries, meta })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 {
            return Err(bad(format!("truncated: {} bytes is shorter than the 16-byte preamble", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}, expected \"CSEN\"", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body = &bytes[16..];
        if hlen > body.len() as u64 {
            return Err(bad(format!("truncated: header needs {hlen} bytes, {} present", body.len())));
        }
        let (hbytes, payload) = body.split_at(hlen as usize);
        let header: Header =
            serde_json::from_slice(hbytes).map_err(|e| bad(format!("malformed header: {e}")))?;
        let expected_len: u64 = header.tensors.values().map(|e| e.length).sum();
        if (payload.len() as u64) < expected_len {
            return Err(bad(format!(
                "truncated: payload has {} bytes, header describes {expected_len}",
                payload.len()
            )));
        }
        if payload.len() as u64 != expected_len {
            return Err(bad(format!(
                "payload has {} bytes, header describes {expected_len}",
                payload.len()
            )));
        }
        let crc = crc32fast::hash(payload);
        if crc != header.meta.checksum {
            return Err(bad(format!(
                "payload checksum {crc:08x} does not match header {:08x}; file is corrupt",
                header.meta.checksum
            )));
        }
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.length != (numel * e.dtype.width()) as u64 {
                return Err(bad(format!(
                    "tensor `{name}`: length {} does not match shape {:?} of {:?}",
                    e.length, e.shape, e.dtype
                )));
            }
            let end = e.offset.checked_add(e.length).filter(|&x| x <= payload.len() as u64);
            let Some(end) = end else {
                return Err(bad(format!("tensor `{name}` extends past the payload")));
            };
            let raw = &payload[e.offset as usize..end as usize];
            let data: Vec<f64> = match e.dtype {
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
            };
            tensors.insert(name, (e.dtype, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Snapshot of a training state. Parameters and buffers use the
    /// precision's width; optimizer moments are always `f64`.
    pub fn from_state(state: &TrainState, precision: Precision, seed: u64, config: serde_json::Value, config_hash: String) -> Self {
        let width = match precision {
            Precision::F64 => Dtype::F64,
            Precision::F32 => Dtype::F32,
        };
        let mut tensors = BTreeMap::new();
        for (prefix, set) in [("param/", &state.model.params), ("buffer/", &state.model.buffers)] {
            for (name, t) in set.iter() {
                tensors.insert(format!("{prefix}{name}"), (width, plain(t)));
            }
        }
        for (prefix, moments) in [("adam.m/", &state.adam.m), ("adam.v/", &state.adam.v)] {
            for (name, v) in moments {
                let shape = state.model.params.get(name).map(|t| t.shape().to_vec()).unwrap_or_else(|_| vec![v.len()]);
                let t = Tensor::new(shape, v.clone()).expect("moment matches its parameter");
                tensors.insert(format!("{prefix}{name}"), (Dtype::F64, t));
            }
        }
        let a = &state.adam;
        Self {
            tensors,
            meta: Meta {
                config,
                config_hash,
                model: state.model.config.clone(),
                num_ids: state.model.num_ids,
                epoch: state.epoch,
                seed,
                precision,
                adam: AdamMeta {
                    beta1: a.beta1,
                    beta2: a.beta2,
                    eps: a.eps,
                    step: a.step,
                },
                history: state.history.clone(),
                checksum: 0,
            },
        }
    }

    /// Restores into a freshly built model of the stored architecture.
    pub fn into_state(self) -> Result<TrainState> {
        let model = Model::new(self.meta.model.clone(), self.meta.num_ids, self.meta.seed)?;
        self.restore_into(model)
    }

    /// Overwrites every tensor of `model`; the tensor sets and shapes must
    /// agree exactly.
    pub fn restore_into(self, mut model: Model) -> Result<TrainState> {
        let mut stored: BTreeMap<String, Tensor> = self.tensors.into_iter().map(|(k, (_, t))| (k, t)).collect();
        fill(&mut model.params, "param/", &mut stored)?;
        fill(&mut model.buffers, "buffer/", &mut stored)?;
        let mut adam = Adam::new(self.meta.adam.beta1, self.meta.adam.beta2, self.meta.adam.eps);
        adam.step = self.meta.adam.step;
        for (prefix, slot) in [("adam.m/", &mut adam.m), ("adam.v/", &mut adam.v)] {
            let names: Vec<String> = stored.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
            for key in names {
                let name = &key[prefix.len()..];
                let t = stored.remove(&key).expect("listed above");
                let p = model
                    .params
                    .get(name)
                    .map_err(|_| Error::Checkpoint(format!("`{key}` has no matching parameter in the model")))?;
                if p.shape() != t.shape() {
                    return Err(mismatch(&key, t.shape(), p.shape()));
                }
                slot.insert(name.to_string(), t.into_data());
            }
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("checkpoint tensor `{extra}` does not exist in the model")));
        }
        Ok(TrainState {
            model,
            adam,
            epoch: self.meta.epoch,
            history: self.meta.history,
        })
    }
}

fn plain(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("same shape")
}

fn mismatch(name: &str, stored: &[usize], model: &[usize]) -> Error {
    Error::Checkpoint(format!(
        "shape mismatch for `{name}`: checkpoint has {stored:?}, model expects {model:?}"
    ))
}

fn fill(set: &mut ParamSet, prefix: &str, stored: &mut BTreeMap<String, Tensor>) -> Result<()> {
    for (name, t) in set.iter_mut() {
        let key = format!("{prefix}{name}");
        let src = stored
            .remove(&key)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing `{key}`")))?;
        if src.shape() != t.shape() {
            return Err(mismatch(&key, src.shape(), t.shape()));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}
