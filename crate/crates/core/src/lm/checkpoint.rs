//! Binary checkpoint: `GRTH`, a little-endian `u32` format version, a `u32`
//! tensor count, then per tensor its name, shape and `f32` data. A JSON
//! sidecar (`<path>.json`) carries the config, role tag, adapter spec and
//! provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{adapter_targets, init_model, AdapterSet, AdapterSpec, ModelConfig, ModelHandle, RoleTag};
use crate::jsonl::{write_atomic, JsonlError};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"GRTH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] JsonlError),
    #[error("cannot read {path}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("checkpoint format version {found}, reader supports {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("bad checkpoint sidecar: {0}")]
    Sidecar(String),
    #[error("checkpoint tensor `{name}`: {detail}")]
    Tensor { name: String, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ModelConfig,
    pub role_tag: RoleTag,
    pub adapters: Option<AdapterSpec>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

fn named_tensors(model: &ModelHandle) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = model.base.iter().map(|(k, v)| (k.clone(), v)).collect();
    if let Some(ad) = &model.adapters {
        for (k, (d, u)) in &ad.pairs {
            out.push((format!("adapter.{}.down", k), d));
            out.push((format!("adapter.{}.up", k), u));
        }
    }
    out
}

pub fn encode(model: &ModelHandle) -> Vec<u8> {
    encode_version(model, FORMAT_VERSION)
}

pub(crate) fn encode_version(model: &ModelHandle, version: u32) -> Vec<u8> {
    let tensors = named_tensors(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse the tensor section, checking magic and version before anything else.
pub fn decode_tensors(bytes: &[u8], expected_version: u32) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != expected_version {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: expected_version,
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| CheckpointError::Truncated("utf-8 name".into()))?;
        let ndim = r.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&name)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Truncated(name.clone()))?, &name)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Tensor {
            name: name.clone(),
            detail: e.to_string(),
        })?;
        out.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Tensor {
            name: "<trailer>".into(),
            detail: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn meta_of(model: &ModelHandle, provenance: BTreeMap<String, String>) -> CheckpointMeta {
    CheckpointMeta {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        role_tag: model.role,
        adapters: model.adapters.as_ref().map(|a| a.spec.clone()),
        provenance,
    }
}

/// Atomically write the tensor file and its sidecar.
pub fn save_checkpoint(
    model: &ModelHandle,
    path: &Path,
    provenance: BTreeMap<String, String>,
) -> Result<(), CheckpointError> {
    let meta = serde_json::to_string_pretty(&meta_of(model, provenance)).expect("meta serializes");
    write_atomic(path, &encode(model))?;
    write_atomic(&sidecar_path(path), meta.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelHandle, CheckpointMeta), CheckpointError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| CheckpointError::Read {
            path: p.display().to_string(),
            source,
        })
    };
    let bytes = read(path)?;
    let mut tensors = decode_tensors(&bytes, FORMAT_VERSION)?;
    let side = read(&sidecar_path(path))?;
    let meta: CheckpointMeta = serde_json::from_slice(&side).map_err(|e| CheckpointError::Sidecar(e.to_string()))?;
    let model = assemble(&meta, &mut tensors)?;
    Ok((model, meta))
}

fn assemble(meta: &CheckpointMeta, tensors: &mut BTreeMap<String, Tensor>) -> Result<ModelHandle, CheckpointError> {
    let template = init_model(&meta.config).map_err(|e| CheckpointError::Sidecar(e.to_string()))?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor, CheckpointError> {
        let t = tensors.remove(name).ok_or_else(|| CheckpointError::Tensor {
            name: name.to_string(),
            detail: "missing".into(),
        })?;
        if t.shape() != shape {
            return Err(CheckpointError::Tensor {
                name: name.to_string(),
                detail: format!("shape {:?}, expected {:?}", t.shape(), shape),
            });
        }
        Ok(t)
    };
    let mut base = BTreeMap::new();
    for (name, t) in &template.base {
        base.insert(name.clone(), take(name, t.shape())?);
    }
    let adapters = match &meta.adapters {
        None => None,
        Some(spec) => {
            let d = meta.config.model_dim;
            let mut pairs = BTreeMap::new();
            for target in adapter_targets(&meta.config) {
                let down = take(&format!("adapter.{}.down", target), &[d, spec.rank])?;
                let up = take(&format!("adapter.{}.up", target), &[spec.rank, d])?;
                pairs.insert(target, (down, up));
            }
            Some(AdapterSet {
                spec: spec.clone(),
                pairs,
            })
        }
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::Tensor {
            name: extra.clone(),
            detail: "unexpected tensor".into(),
        });
    }
    Ok(ModelHandle {
        config: meta.config.clone(),
        base,
        adapters,
        role: meta.role_tag,
    })
}
