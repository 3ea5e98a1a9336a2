//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.toml   config, step, rng and schedule state, tensor index
//! <dir>/params.bin      little-endian parameter values in index order
//! <dir>/optimizer.bin   AdamW moments (optional)
//! ```
//!
//! Index offsets and lengths are in bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::tensor::{DType, Float, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "xsa-checkpoint";
const VERSION: u32 = 1;
const MANIFEST: &str = "manifest.toml";
const PARAMS: &str = "params.bin";
const OPTIMIZER: &str = "optimizer.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
    pub dtype: DType,
}

/// Position of a `ChaCha8Rng` stream. `word_pos` is a decimal `u128`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentState {
    /// Optimizer step count.
    pub t: u64,
    pub m: Vec<ParamEntry>,
    pub v: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: DType,
    pub step: u64,
    #[serde(default)]
    pub tokens_seen: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    pub model: ModelConfig,
    /// Training configuration echo, kept opaque here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<toml::Table>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rng: Vec<RngState>,
    pub params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<MomentState>,
}

/// A checkpoint held in memory: manifest plus raw blobs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    params: Vec<u8>,
    optimizer: Option<Vec<u8>>,
}

fn encode<S: Float>(entries: &mut Vec<ParamEntry>, blob: &mut Vec<u8>, name: &str, shape: &[usize], data: &[S]) {
    let offset = blob.len() as u64;
    for &x in data {
        x.write_le(blob);
    }
    entries.push(ParamEntry {
        name: name.to_string(),
        shape: shape.to_vec(),
        offset,
        len: blob.len() as u64 - offset,
        dtype: S::DTYPE,
    });
}

fn decode<S: Float>(entry: &ParamEntry, blob: &[u8]) -> Result<Vec<S>> {
    let size = entry.dtype.size_of();
    let numel: usize = entry.shape.iter().product();
    let (start, len) = (entry.offset as usize, entry.len as usize);
    if len != numel * size || start.checked_add(len).is_none_or(|end| end > blob.len()) {
        return Err(Error::Checkpoint(format!(
            "entry `{}` ({:?}, {} bytes at {}) does not fit the blob",
            entry.name, entry.shape, entry.len, entry.offset
        )));
    }
    let bytes = &blob[start..start + len];
    Ok(match entry.dtype {
        d if d == S::DTYPE => bytes.chunks_exact(size).map(S::read_le).collect(),
        DType::F32 => bytes.chunks_exact(4).map(|b| S::of(f32::read_le(b) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|b| S::of(f64::read_le(b))).collect(),
    })
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, dir.join(name))?;
    Ok(())
}

impl Checkpoint {
    /// Snapshot of the model's parameters at `step`.
    pub fn capture<S: Float>(model: &Model<S>, step: u64) -> Self {
        let mut params = Vec::new();
        let mut blob = Vec::new();
        for (name, _, t) in model.params() {
            encode(&mut params, &mut blob, &name, t.shape(), t.data());
        }
        Checkpoint {
            manifest: Manifest {
                format: CHECKPOINT_FORMAT.to_string(),
                version: VERSION,
                dtype: S::DTYPE,
                step,
                tokens_seen: 0,
                lr: None,
                model: model.config().clone(),
                train: None,
                rng: Vec::new(),
                params,
                optimizer: None,
            },
            params: blob,
            optimizer: None,
        }
    }

    /// Attaches AdamW moments, given in parameter order.
    pub fn set_optimizer<S: Float>(&mut self, t: u64, m: &[Vec<S>], v: &[Vec<S>]) -> Result<()> {
        let n = self.manifest.params.len();
        if m.len() != n || v.len() != n {
            return Err(Error::Checkpoint(format!(
                "{} / {} moment buffers for {n} parameters",
                m.len(),
                v.len()
            )));
        }
        let mut blob = Vec::new();
        let (mut me, mut ve) = (Vec::new(), Vec::new());
        for (p, (mb, vb)) in self.manifest.params.iter().zip(m.iter().zip(v)) {
            let numel: usize = p.shape.iter().product();
            if mb.len() != numel || vb.len() != numel {
                return Err(Error::Checkpoint(format!("moment size mismatch for `{}`", p.name)));
            }
            encode(&mut me, &mut blob, &p.name, &p.shape, mb);
            encode(&mut ve, &mut blob, &p.name, &p.shape, vb);
        }
        self.manifest.optimizer = Some(MomentState { t, m: me, v: ve });
        self.optimizer = Some(blob);
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest =
            toml::to_string(&self.manifest).map_err(|e| Error::Checkpoint(format!("serializing manifest: {e}")))?;
        write_file(dir, PARAMS, &self.params)?;
        match &self.optimizer {
            Some(blob) => write_file(dir, OPTIMIZER, blob)?,
            None => {
                let stale = dir.join(OPTIMIZER);
                if stale.exists() {
                    fs::remove_file(stale)?;
                }
            }
        }
        // The manifest goes last so a directory with a manifest is complete.
        write_file(dir, MANIFEST, manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))
            .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", dir.join(MANIFEST).display())))?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("parsing manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        let params = fs::read(dir.join(PARAMS))?;
        let optimizer = match manifest.optimizer {
            Some(_) => Some(fs::read(dir.join(OPTIMIZER))?),
            None => None,
        };
        Ok(Checkpoint {
            manifest,
            params,
            optimizer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.manifest.model
    }

    /// Rebuilds the model in precision `S`, converting stored values if needed.
    pub fn model<S: Float>(&self) -> Result<Model<S>> {
        let mut model = Model::<S>::new(&self.manifest.model)?;
        let entries = &self.manifest.params;
        let mut slots = model.params_mut();
        if slots.len() != entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                slots.len()
            )));
        }
        for ((name, _, slot), entry) in slots.iter_mut().zip(entries) {
            if *name != entry.name || slot.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "expected `{name}` {:?}, found `{}` {:?}",
                    slot.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            **slot = Tensor::from_vec(decode(entry, &self.params)?, &entry.shape)?.requiring_grad();
        }
        drop(slots);
        Ok(model)
    }

    /// AdamW moments `(t, m, v)` in parameter order, if stored.
    #[allow(clippy::type_complexity)]
    pub fn moments<S: Float>(&self) -> Result<Option<(u64, Vec<Vec<S>>, Vec<Vec<S>>)>> {
        let (Some(state), Some(blob)) = (&self.manifest.optimizer, &self.optimizer) else {
            return Ok(None);
        };
        let m = state.m.iter().map(|e| decode(e, blob)).collect::<Result<Vec<_>>>()?;
        let v = state.v.iter().map(|e| decode(e, blob)).collect::<Result<Vec<_>>>()?;
        Ok(Some((state.t, m, v)))
    }
}
