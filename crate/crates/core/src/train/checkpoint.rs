//! Checkpoint directory: `manifest.json` plus `tensors.bin`, a blob of
//! little-endian `f32` tensors concatenated in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, TrainSchedule};
use crate::diffcore::{ParamStore, Real, Tensor};
use crate::hvrnn::ModelConfig;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// Everything needed to rebuild a model and resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub step: u64,
    pub epoch: usize,
    pub rng_state: u64,
    pub params: Vec<NamedTensor>,
    pub adam_m: Vec<NamedTensor>,
    pub adam_v: Vec<NamedTensor>,
    pub adam_t: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    schedule: TrainSchedule,
    step: u64,
    epoch: usize,
    rng_state: u64,
    adam_t: u64,
    /// Hex SHA-256 of `tensors.bin`.
    checksum: String,
    tensors: Vec<TensorEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn capture<R: Real>(
        model: &ModelConfig,
        schedule: &TrainSchedule,
        store: &ParamStore<R>,
        adam: &Adam,
        step: u64,
        epoch: usize,
        rng_state: u64,
    ) -> Self {
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        let named = |ts: &[Tensor<f32>]| -> Vec<NamedTensor> {
            names.iter().zip(ts).map(|(n, t)| NamedTensor { name: n.clone(), tensor: t.clone() }).collect()
        };
        let values: Vec<Tensor<f32>> = store.iter().map(|(_, p)| p.value().cast()).collect();
        Self {
            model: model.clone(),
            schedule: schedule.clone(),
            step,
            epoch,
            rng_state,
            params: named(&values),
            adam_m: named(&adam.m),
            adam_v: named(&adam.v),
            adam_t: adam.t,
        }
    }

    /// Copy parameter values into `store`, which must hold exactly the
    /// checkpoint's names with matching shapes.
    pub fn restore_params<R: Real>(&self, store: &mut ParamStore<R>) -> Result<()> {
        self.check_names(store)?;
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = &self.params.iter().find(|p| p.name == name).expect("checked").tensor;
            store.set_value(id, t.cast())?;
        }
        Ok(())
    }

    /// Optimizer state aligned to `store` order.
    pub fn restore_adam<R: Real>(&self, store: &ParamStore<R>) -> Result<Adam> {
        self.check_names(store)?;
        let find = |list: &[NamedTensor], name: &str| list.iter().find(|p| p.name == name).map(|p| p.tensor.clone());
        let mut adam = Adam { m: Vec::new(), v: Vec::new(), t: self.adam_t };
        for (_, p) in store.iter() {
            match (find(&self.adam_m, &p.name), find(&self.adam_v, &p.name)) {
                (Some(m), Some(v)) if m.shape() == p.value().shape() && v.shape() == p.value().shape() => {
                    adam.m.push(m);
                    adam.v.push(v);
                }
                _ => return Err(Error::Checkpoint(format!("optimizer state missing or misshapen for `{}`", p.name))),
            }
        }
        Ok(adam)
    }

    fn check_names<R: Real>(&self, store: &ParamStore<R>) -> Result<()> {
        let missing: Vec<&str> = store
            .iter()
            .filter(|(_, p)| !self.params.iter().any(|c| c.name == p.name))
            .map(|(_, p)| p.name.as_str())
            .collect();
        let extra: Vec<&str> =
            self.params.iter().filter(|c| store.id(&c.name).is_none()).map(|c| c.name.as_str()).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Checkpoint(format!(
                "parameter names differ; missing from checkpoint: [{}]; not in model: [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        for c in &self.params {
            let have = store.get(store.id(&c.name).expect("checked")).value().shape();
            if have != c.tensor.shape() {
                return Err(Error::Checkpoint(format!("`{}` has shape {:?}, model expects {have:?}", c.name, c.tensor.shape())));
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let groups: [(&str, &[NamedTensor]); 3] = [("", &ck.params), ("adam.m.", &ck.adam_m), ("adam.v.", &ck.adam_v)];
    for (prefix, list) in groups {
        for nt in list {
            let offset = blob.len() as u64;
            nt.tensor.data().iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
            tensors.push(TensorEntry {
                name: format!("{prefix}{}", nt.name),
                shape: nt.tensor.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                length: blob.len() as u64 - offset,
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: ck.model.clone(),
        schedule: ck.schedule.clone(),
        step: ck.step,
        epoch: ck.epoch,
        rng_state: ck.rng_state,
        adam_t: ck.adam_t,
        checksum: hex(&Sha256::digest(&blob)),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let (mpath, bpath) = (dir.join(MANIFEST), dir.join(BLOB));
    std::fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let (mpath, bpath) = (dir.join(MANIFEST), dir.join(BLOB));
    let mctx = mpath.display().to_string();
    let bctx = bpath.display().to_string();
    let text = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let value: serde_json::Value = serde_json::from_slice(&text)
        .map_err(|e| Error::format(&mctx, line_offset(&text, e.line()), format!("invalid JSON: {e}")))?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::format(&mctx, 0, format!("unknown format version {version:?}, expected {FORMAT_VERSION}")));
    }
    let m: Manifest = serde_json::from_value(value).map_err(|e| Error::format(&mctx, 0, format!("bad manifest: {e}")))?;
    let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let need = m.tensors.iter().map(|t| t.offset + t.length).max().unwrap_or(0);
    if (blob.len() as u64) < need {
        return Err(Error::format(&bctx, blob.len() as u64, format!("truncated: manifest needs {need} bytes")));
    }
    if hex(&Sha256::digest(&blob)) != m.checksum {
        return Err(Error::format(&bctx, 0, "checksum mismatch"));
    }
    let (mut params, mut adam_m, mut adam_v) = (Vec::new(), Vec::new(), Vec::new());
    for t in &m.tensors {
        let numel: usize = t.shape.iter().product();
        if t.dtype != "f32" || t.length != 4 * numel as u64 {
            return Err(Error::format(&mctx, 0, format!("tensor `{}`: dtype {} with {} bytes for shape {:?}", t.name, t.dtype, t.length, t.shape)));
        }
        let bytes = &blob[t.offset as usize..(t.offset + t.length) as usize];
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let tensor = Tensor::new(&t.shape, data)?;
        let (list, name) = if let Some(n) = t.name.strip_prefix("adam.m.") {
            (&mut adam_m, n)
        } else if let Some(n) = t.name.strip_prefix("adam.v.") {
            (&mut adam_v, n)
        } else {
            (&mut params, t.name.as_str())
        };
        if list.iter().any(|p: &NamedTensor| p.name == name) {
            return Err(Error::format(&mctx, 0, format!("tensor `{}` listed twice", t.name)));
        }
        list.push(NamedTensor { name: name.to_string(), tensor });
    }
    Ok(Checkpoint {
        model: m.model,
        schedule: m.schedule,
        step: m.step,
        epoch: m.epoch,
        rng_state: m.rng_state,
        params,
        adam_m,
        adam_v,
        adam_t: m.adam_t,
    })
}

fn line_offset(text: &[u8], line: usize) -> u64 {
    text.split(|&b| b == b'\n').take(line.saturating_sub(1)).map(|l| l.len() as u64 + 1).sum()
}
