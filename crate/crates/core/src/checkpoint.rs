//! Checkpoints and the tensor container file format.
//!
//! A container is one line of JSON followed by a newline and a raw
//! little-endian payload:
//!
//! ```text
//! {"format":"colora-lab","kind":"checkpoint","tensors":[{"name":..,"dtype":"f32","shape":[..],"offset":0},..],..}\n
//! <payload bytes>
//! ```
//!
//! Offsets are relative to the first payload byte. Adapter files use the same
//! container with `"kind":"adapters"`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::net::{self, LayerId, ModelSpec, ParamBinder};
use crate::tensor::{Real, Tensor};

pub const FORMAT: &str = "colora-lab";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Serializes named tensors after a JSON header carrying `fields`.
pub fn encode_container<T: Real>(kind: &str, fields: Map<String, Value>, tensors: &[(String, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: T::DTYPE.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let mut header = Map::new();
    header.insert("format".into(), Value::from(FORMAT));
    header.insert("version".into(), Value::from(1));
    header.insert("kind".into(), Value::from(kind));
    header.extend(fields);
    header.insert("tensors".into(), serde_json::to_value(&entries)?);
    let mut out = serde_json::to_vec(&Value::Object(header))?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parsed header plus tensors converted to `T`.
pub fn decode_container<T: Real>(bytes: &[u8], expected_kind: &str) -> std::result::Result<(Map<String, Value>, Vec<(String, Tensor<T>)>), String> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or("missing header terminator")?;
    let header: Value = serde_json::from_slice(&bytes[..split]).map_err(|e| e.to_string())?;
    let Value::Object(mut header) = header else {
        return Err("header is not an object".into());
    };
    if header.get("format").and_then(Value::as_str) != Some(FORMAT) {
        return Err("unknown format tag".into());
    }
    let kind = header.get("kind").and_then(Value::as_str).unwrap_or_default();
    if kind != expected_kind {
        return Err(format!("expected a {expected_kind} file, found {kind:?}"));
    }
    let entries: Vec<TensorEntry> =
        serde_json::from_value(header.remove("tensors").ok_or("missing tensor table")?).map_err(|e| e.to_string())?;
    let payload = &bytes[split + 1..];
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let numel: usize = e.shape.iter().product();
        let data: Vec<T> = match e.dtype.as_str() {
            "f32" => read_slice::<f32>(payload, e.offset, numel)?.into_iter().map(|v| T::of(f64::from(v))).collect(),
            "f64" => read_slice::<f64>(payload, e.offset, numel)?.into_iter().map(T::of).collect(),
            other => return Err(format!("unsupported dtype {other}")),
        };
        let t = Tensor::new(&e.shape, data).map_err(|err| err.to_string())?;
        tensors.push((e.name, t));
    }
    Ok((header, tensors))
}

fn read_slice<U: Real>(payload: &[u8], offset: usize, numel: usize) -> std::result::Result<Vec<U>, String> {
    let end = offset + numel * U::BYTES;
    let bytes = payload.get(offset..end).ok_or("tensor runs past the payload")?;
    Ok(bytes.chunks_exact(U::BYTES).map(U::read_le).collect())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub steps: u64,
    pub loss: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    /// Trainable-parameter accounting from the run that produced the checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuned: Option<crate::colora::TunedCount>,
}

/// Topology plus one tensor per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real = f32> {
    pub spec: ModelSpec,
    pub params: BTreeMap<LayerId, Tensor<T>>,
    pub meta: CheckpointMeta,
}

impl<T: Real> Checkpoint<T> {
    /// Kaiming-uniform initialization of `spec` from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Ok(Checkpoint {
            spec: spec.clone(),
            params: net::init_params(spec, seed)?,
            meta: CheckpointMeta {
                seed,
                steps: 0,
                loss: String::new(),
                ..Default::default()
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Checks that every layer of the spec is present with the right shape.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let layers = self.spec.layers();
        if layers.len() != self.params.len() {
            return Err(Error::TopologyMismatch(format!(
                "spec has {} tensors, checkpoint has {}",
                layers.len(),
                self.params.len()
            )));
        }
        for (id, shape) in layers {
            match self.params.get(&id) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::TopologyMismatch(format!(
                        "{id}: expected {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::TopologyMismatch(format!("missing {id}"))),
            }
        }
        Ok(())
    }

    pub fn same_topology(&self, other: &Self) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::TopologyMismatch("model specs differ".into()));
        }
        for (id, t) in &self.params {
            match other.params.get(id) {
                Some(o) if o.shape() == t.shape() => {}
                _ => return Err(Error::TopologyMismatch(format!("layer {id} differs"))),
            }
        }
        if self.params.len() != other.params.len() {
            return Err(Error::TopologyMismatch("layer sets differ".into()));
        }
        Ok(())
    }

    /// Plain inference on `[N,3,H,W]`.
    pub fn forward(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let mut binder = ParamBinder {
            params: &self.params,
            trainable: &|_| false,
        };
        let y = net::forward_graph(&self.spec, &mut g, &mut binder, x)?;
        Ok(g.value(y).clone())
    }

    pub fn cast<U: Real>(&self) -> Checkpoint<U> {
        Checkpoint {
            spec: self.spec.clone(),
            params: self.params.iter().map(|(k, v)| (*k, v.cast())).collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut fields = Map::new();
        fields.insert("spec".into(), serde_json::to_value(&self.spec)?);
        fields.insert("meta".into(), serde_json::to_value(&self.meta)?);
        let named: Vec<(String, &Tensor<T>)> = self.params.iter().map(|(k, v)| (k.to_string(), v)).collect();
        encode_container("checkpoint", fields, &named)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (mut header, tensors) = decode_container::<T>(bytes, "checkpoint")?;
        let spec: ModelSpec =
            serde_json::from_value(header.remove("spec").ok_or("missing spec")?).map_err(|e| e.to_string())?;
        let meta: CheckpointMeta =
            serde_json::from_value(header.remove("meta").unwrap_or_default()).map_err(|e| e.to_string())?;
        let mut params = BTreeMap::new();
        for (name, t) in tensors {
            let id: LayerId = name.parse().map_err(|e: Error| e.to_string())?;
            params.insert(id, t);
        }
        let ckpt = Checkpoint { spec, params, meta };
        ckpt.validate().map_err(|e| e.to_string())?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }
}
