//! Self-describing tensor container used for model checkpoints and datasets.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SKDC" | u32 version | u64 header length | JSON header | tensor blobs | sha256
//! ```
//!
//! The trailing digest covers every preceding byte. Tensor offsets in the
//! header are relative to the start of the blob section.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::real::{DType, Real};
use crate::vit::{ArchConfig, Vit, Widths};

const MAGIC: &[u8; 4] = b"SKDC";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    #[serde(default)]
    arch: Option<ArchConfig>,
    #[serde(default)]
    widths: Option<Widths>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U32 => TensorData::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }

    /// Real-valued view converted to `T`; `None` for integer tensors.
    pub fn to_real<T: Real>(&self) -> Option<Vec<T>> {
        match self {
            TensorData::F32(v) => Some(v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect()),
            TensorData::F64(v) => Some(v.iter().map(|&x| T::from_f64_lossy(x)).collect()),
            TensorData::U32(_) => None,
        }
    }
}

/// In-memory form of a container file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub kind: String,
    pub arch: Option<ArchConfig>,
    pub widths: Option<Widths>,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<(String, Vec<usize>, TensorData)>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "container",
                format!("tensor `{name}`: shape {shape:?} but {} values", data.len()),
            ));
        }
        self.tensors.push((name, shape, data));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &TensorData)> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d))
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, shape, data) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: data.dtype(),
                shape: shape.clone(),
                offset,
            });
            offset += (data.len() * data.dtype().size()) as u64;
        }
        let header = Header {
            kind: self.kind.clone(),
            arch: self.arch,
            widths: self.widths.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)
            .map_err(|e| Error::Malformed(format!("header encoding: {e}")))?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, data) in &self.tensors {
            data.write_le(&mut out);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses a container; `origin` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 16 + DIGEST_LEN {
            return Err(Error::Checksum {
                path: origin.to_path_buf(),
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum {
                path: origin.to_path_buf(),
            });
        }
        if &body[..4] != MAGIC {
            return Err(Error::Malformed("bad magic".into()));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Malformed(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let blobs_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Malformed("header length past end of file".into()))?;
        let header: Header = serde_json::from_slice(&body[16..blobs_start])
            .map_err(|e| Error::Malformed(format!("header: {e}")))?;
        let blobs = &body[blobs_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + count * e.dtype.size();
            if end > blobs.len() {
                return Err(Error::Malformed(format!("tensor `{}` past end of data", e.name)));
            }
            tensors.push((e.name, e.shape, TensorData::read_le(e.dtype, &blobs[start..end])));
        }
        Ok(Self {
            kind: header.kind,
            arch: header.arch,
            widths: header.widths,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub const MODEL_KIND: &str = "model";

/// Packs a model (any precision) into a container.
pub fn model_container<T: Real>(
    model: &Vit<T>,
    meta: BTreeMap<String, serde_json::Value>,
) -> Result<Container> {
    let widths = model.widths();
    let mut c = Container::new(MODEL_KIND);
    c.arch = Some(model.arch);
    c.meta = meta;
    for ((name, shape), data) in Vit::<T>::named_shapes(&model.arch, &widths)
        .into_iter()
        .zip(model.tensors())
    {
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(data.iter().map(|v| v.as_f64() as f32).collect()),
            _ => TensorData::F64(data.iter().map(|v| v.as_f64()).collect()),
        };
        c.push(name, shape, data)?;
    }
    c.widths = Some(widths);
    Ok(c)
}

pub fn save_model<T: Real>(
    model: &Vit<T>,
    path: &Path,
    meta: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    model_container(model, meta)?.write(path)
}

/// Rebuilds a model from a container. With `declared` set, tensors are
/// validated against that architecture instead of the stored one.
pub fn model_from_container<T: Real>(c: &Container, declared: Option<&ArchConfig>) -> Result<Vit<T>> {
    if c.kind != MODEL_KIND {
        return Err(Error::Malformed(format!("expected a model container, found `{}`", c.kind)));
    }
    let stored = c
        .arch
        .ok_or_else(|| Error::Malformed("model container without arch".into()))?;
    let arch = declared.copied().unwrap_or(stored);
    arch.validate()?;
    let widths = match &c.widths {
        Some(w) if arch == stored => w.clone(),
        Some(_) | None => Widths::full(&arch),
    };
    if widths.head_dims.len() != arch.depth
        || widths.head_dims.iter().any(|h| h.len() != arch.heads)
    {
        return Err(Error::Malformed("widths inconsistent with arch".into()));
    }
    let mut model = Vit::<T>::zeros_with_widths(arch, &widths);
    for ((name, shape), dst) in Vit::<T>::named_shapes(&arch, &widths)
        .into_iter()
        .zip(model.tensors_mut())
    {
        let (found, data) = c.get(&name)?;
        if found != shape.as_slice() {
            return Err(Error::TensorShape {
                name,
                expected: shape,
                found: found.to_vec(),
            });
        }
        let values = data
            .to_real::<T>()
            .ok_or_else(|| Error::Malformed(format!("tensor `{name}` is not real-valued")))?;
        dst.copy_from_slice(&values);
    }
    if !model.all_finite() {
        return Err(Error::NonFinite("checkpoint tensors".into()));
    }
    Ok(model)
}

pub fn load_model<T: Real>(path: &Path, declared: Option<&ArchConfig>) -> Result<Vit<T>> {
    model_from_container(&Container::read(path)?, declared)
}
