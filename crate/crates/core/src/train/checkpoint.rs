//! Single-file checkpoints: magic, format version, a JSON header, then every
//! tensor as little-endian f64 in header order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerKind, Slot};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{AttentionUNet, ModelConfig};
use crate::nn::{Module, TensorMut};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"HUNETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub steps: u64,
    pub slots: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Scalar type the model was trained in.
    pub scalar: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub model: AttentionUNet<T>,
    pub optimizer: Option<Optimizer<T>>,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &AttentionUNet<T>,
    optimizer: Option<&Optimizer<T>>,
    loss: &LossConfig,
    epoch: usize,
    metrics: BTreeMap<String, f64>,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    model.visit("", &mut |name, t| {
        let v = t.value();
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: v.shape().to_vec(),
        });
        payload.extend(v.iter().map(|x| x.as_f64()));
    });
    let optimizer = optimizer.map(|o| {
        let mut slots = Vec::new();
        for s in &o.slots {
            for (suffix, a) in [("first", Some(&s.first)), ("second", s.second.as_ref())] {
                if let Some(a) = a {
                    slots.push(TensorEntry {
                        name: format!("{}#{suffix}", s.name),
                        shape: a.shape().to_vec(),
                    });
                    payload.extend(a.iter().map(|x| x.as_f64()));
                }
            }
        }
        OptimizerEntry {
            kind: o.kind,
            lr: o.lr,
            steps: o.steps,
            slots,
        }
    });
    let header = Header {
        meta: CheckpointMeta {
            model: model.config().clone(),
            loss: *loss,
            epoch,
            metrics,
            scalar: T::NAME.to_string(),
        },
        tensors,
        optimizer,
    };
    let json = serde_json::to_vec(&header)?;

    let mut bytes = Vec::with_capacity(24 + json.len() + 8 * payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads just the metadata.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let (header, _) = read_raw(path)?;
    Ok(header.meta)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let (header, payload) = read_raw(path)?;
    let mut values = payload.into_iter();
    let mut take = |entry: &TensorEntry| -> Result<ArrayD<T>> {
        let n: usize = entry.shape.iter().product();
        let data: Vec<T> = values.by_ref().take(n).map(T::of).collect();
        if data.len() != n {
            return Err(Error::Checkpoint(format!("payload truncated at tensor `{}`", entry.name)));
        }
        Ok(ArrayD::from_shape_vec(IxDyn(&entry.shape), data).expect("length checked"))
    };

    let mut model = AttentionUNet::<T>::new(header.meta.model.clone(), 0)?;
    let mut loaded = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        loaded.push((entry, take(entry)?));
    }
    let mut expected = 0usize;
    let mut problem = None;
    model.visit_mut("", &mut |name, t| {
        let slot = loaded.get_mut(expected);
        expected += 1;
        let Some((entry, value)) = slot else {
            problem.get_or_insert(format!("missing tensor `{name}`"));
            return;
        };
        let target = match t {
            TensorMut::Param(p) => &mut p.value,
            TensorMut::Buffer(b) => b,
        };
        if entry.name != name || value.shape() != target.shape() {
            problem.get_or_insert(format!(
                "tensor `{}` {:?} does not match model tensor `{name}` {:?}",
                entry.name,
                value.shape(),
                target.shape()
            ));
            return;
        }
        std::mem::swap(target, value);
    });
    if expected != loaded.len() {
        problem.get_or_insert(format!("file holds {} tensors, model has {expected}", loaded.len()));
    }
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }

    let optimizer = match &header.optimizer {
        None => None,
        Some(o) => {
            let mut slots: Vec<Slot<T>> = Vec::new();
            for entry in &o.slots {
                let value = take(entry)?;
                let (name, suffix) = entry
                    .name
                    .rsplit_once('#')
                    .ok_or_else(|| Error::Checkpoint(format!("bad optimizer slot name `{}`", entry.name)))?;
                match suffix {
                    "first" => slots.push(Slot {
                        name: name.to_string(),
                        first: value,
                        second: None,
                    }),
                    "second" => match slots.last_mut() {
                        Some(s) if s.name == name => s.second = Some(value),
                        _ => return Err(Error::Checkpoint(format!("orphan optimizer slot `{}`", entry.name))),
                    },
                    _ => return Err(Error::Checkpoint(format!("bad optimizer slot name `{}`", entry.name))),
                }
            }
            Some(Optimizer {
                kind: o.kind,
                lr: o.lr,
                steps: o.steps,
                slots,
            })
        }
    };
    if values.next().is_some() {
        return Err(Error::Checkpoint("trailing data after the last tensor".into()));
    }
    Ok(Checkpoint {
        meta: header.meta,
        model,
        optimizer,
    })
}

/// Loads a checkpoint that must hold a model with the given architecture.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, config: &ModelConfig) -> Result<Checkpoint<T>> {
    let meta = read_checkpoint_meta(path)?;
    if &meta.model != config {
        return Err(Error::ArchitectureMismatch(format!(
            "file has {:?}, requested {:?}",
            meta.model, config
        )));
    }
    load_checkpoint(path)
}

fn read_raw(path: &Path) -> Result<(Header, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len || !(body.len() - len).is_multiple_of(8) {
        return Err(Error::Checkpoint("corrupt checkpoint: bad header length".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint header: {e}")))?;
    let payload = body[len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, payload))
}
