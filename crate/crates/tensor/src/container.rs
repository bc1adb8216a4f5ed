//! Named-tensor container: an 8-byte little-endian manifest length, a JSON
//! manifest (name, shape, dtype, byte offset per tensor plus free-form
//! metadata), then the little-endian payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::{numel, Tensor};

pub const FORMAT: &str = "named-tensors/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    tensors: Vec<EntryMeta>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Convert to the requested precision.
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }
}

/// In-memory form of one container file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, AnyTensor)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: AnyTensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), AnyTensor::from_tensor(t));
        }
    }

    /// Overwrite every parameter of `store` from entries named `prefix + name`.
    pub fn fill_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", store.name(id));
            let t = self.get(&key).ok_or_else(|| TensorError::Format(format!("missing tensor {key}")))?;
            store.set(id, t.to())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(EntryMeta { name: name.clone(), shape: t.shape().to_vec(), dtype: t.dtype(), offset: payload.len() as u64 });
            match t {
                AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut payload)),
                AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut payload)),
            }
        }
        let manifest = Manifest { format: FORMAT.to_string(), tensors: entries, meta: self.meta.clone() };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| TensorError::Format(m.to_string());
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| fmt("truncated header"))?.try_into().expect("8 bytes");
        let mlen = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes.get(8..8 + mlen).ok_or_else(|| fmt("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        if manifest.format != FORMAT {
            return Err(fmt(&format!("unknown format {}", manifest.format)));
        }
        let payload = &bytes[8 + mlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n = numel(&e.shape);
            let start = e.offset as usize;
            let end = start + n * e.dtype.size_of();
            let raw = payload.get(start..end).ok_or_else(|| fmt(&format!("payload for {} out of range", e.name)))?;
            let t = match e.dtype {
                DType::F32 => AnyTensor::F32(Tensor::new(e.shape, raw.chunks_exact(4).map(f32::read_le).collect())?),
                DType::F64 => AnyTensor::F64(Tensor::new(e.shape, raw.chunks_exact(8).map(f64::read_le).collect())?),
            };
            tensors.push((e.name, t));
        }
        Ok(Self { meta: manifest.meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
