//! Checkpoint archive: a tar file holding `manifest.json` (format version,
//! config, tensor table) and `params.bin` (little-endian f64 payload).

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::params::ParamKind;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "params.bin";
const M_PREFIX: &str = "optimizer.m/";
const V_PREFIX: &str = "optimizer.v/";

/// AdamW moments, aligned with the model's trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    pub optimizer: Option<OptimizerSnapshot>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum EntryKind {
    Trainable,
    Buffer,
    Optimizer,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step: u64,
    optimizer_step: Option<u64>,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn append_file(builder: &mut tar::Builder<Vec<u8>>, name: &str, data: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_ustar();
    header.set_path(name)?;
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_cksum();
    builder.append(&header, data)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = self.model.store();
        let mut payload: Vec<u8> = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: String, kind: EntryKind, t: &Tensor, payload: &mut Vec<u8>| {
            tensors.push(TensorEntry {
                name,
                kind,
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for id in store.ids() {
            let kind = match store.kind(id) {
                ParamKind::Trainable => EntryKind::Trainable,
                ParamKind::Buffer => EntryKind::Buffer,
            };
            push(store.name(id).to_string(), kind, store.get(id), &mut payload);
        }
        if let Some(opt) = &self.optimizer {
            let ids = store.trainable_ids();
            if opt.m.len() != ids.len() || opt.v.len() != ids.len() {
                return Err(Error::State(format!(
                    "optimizer holds {} moments for {} trainable tensors",
                    opt.m.len(),
                    ids.len()
                )));
            }
            for (id, m) in ids.iter().zip(&opt.m) {
                push(format!("{M_PREFIX}{}", store.name(*id)), EntryKind::Optimizer, m, &mut payload);
            }
            for (id, v) in ids.iter().zip(&opt.v) {
                push(format!("{V_PREFIX}{}", store.name(*id)), EntryKind::Optimizer, v, &mut payload);
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            step: self.step,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            config: serde_json::to_value(self.model.config())?,
            tensors,
        };
        let manifest = serde_json::to_vec_pretty(&manifest)?;
        let mut builder = tar::Builder::new(Vec::new());
        let io = |e: std::io::Error| Error::io("<checkpoint archive>", e);
        append_file(&mut builder, MANIFEST, &manifest).map_err(io)?;
        append_file(&mut builder, PAYLOAD, &payload).map_err(io)?;
        builder.into_inner().map_err(io)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let malformed = |m: String| Error::Checkpoint(CheckpointError::Malformed(m));
        let mut manifest_bytes = None;
        let mut payload = None;
        let mut archive = tar::Archive::new(bytes);
        let entries = archive.entries().map_err(|e| malformed(e.to_string()))?;
        for entry in entries {
            let mut entry = entry.map_err(|e| malformed(e.to_string()))?;
            let path = entry.path().map_err(|e| malformed(e.to_string()))?.to_string_lossy().into_owned();
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf).map_err(|e| malformed(e.to_string()))?;
            match path.as_str() {
                MANIFEST => manifest_bytes = Some(buf),
                PAYLOAD => payload = Some(buf),
                other => return Err(malformed(format!("unexpected archive member `{other}`"))),
            }
        }
        let manifest_bytes = manifest_bytes.ok_or_else(|| malformed(format!("no {MANIFEST}")))?;
        let payload = payload.ok_or_else(|| malformed(format!("no {PAYLOAD}")))?;

        // the version is checked before the rest of the manifest is trusted
        let raw: serde_json::Value =
            serde_json::from_slice(&manifest_bytes).map_err(|e| malformed(e.to_string()))?;
        let version = raw
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| malformed("manifest lacks format_version".into()))?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(CheckpointError::VersionMismatch {
                found: version as u32,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| malformed(e.to_string()))?;
        let config: ModelConfig =
            serde_json::from_value(manifest.config).map_err(|e| malformed(format!("config: {e}")))?;

        let read = |e: &TensorEntry| -> Result<Tensor> {
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(n * 8).filter(|&end| end <= payload.len());
            let end = end.ok_or_else(|| malformed(format!("tensor `{}` runs past the payload", e.name)))?;
            let data = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::new(e.shape.clone(), data)
        };
        let find = |name: &str| manifest.tensors.iter().find(|e| e.name == name);

        let mut model = Model::new(config)?;
        let store = model.store_mut();
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let entry = find(&name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            let expected = store.get(id).shape().to_vec();
            if entry.shape != expected {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected,
                    found: entry.shape.clone(),
                }
                .into());
            }
            store.set(id, read(entry)?)?;
        }
        let known = store.len() + 2 * store.trainable_ids().len();
        if manifest.tensors.len() > known {
            return Err(malformed(format!(
                "{} tensors listed, the model defines {}",
                manifest.tensors.len(),
                store.len()
            )));
        }

        let optimizer = match manifest.optimizer_step {
            None => None,
            Some(step) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for id in store.trainable_ids() {
                    let name = store.name(id);
                    let shape = store.get(id).shape().to_vec();
                    for (prefix, out) in [(M_PREFIX, &mut m), (V_PREFIX, &mut v)] {
                        let full = format!("{prefix}{name}");
                        let entry = find(&full).ok_or_else(|| CheckpointError::MissingTensor(full.clone()))?;
                        if entry.shape != shape {
                            return Err(CheckpointError::ShapeMismatch {
                                name: full,
                                expected: shape.clone(),
                                found: entry.shape.clone(),
                            }
                            .into());
                        }
                        out.push(read(entry)?);
                    }
                }
                Some(OptimizerSnapshot { step, m, v })
            }
        };
        Ok(Checkpoint {
            model,
            step: manifest.step,
            optimizer,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
