//! Self-describing binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SRCKPT01" | u8 endianness (1 = little) | u64 header_len | header JSON
//! u64 n_tensors | per tensor: u32 name_len, name, u32 ndim, u64 dims..., f64 data (row-major)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crossencoder::RerankerModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::xformer::{Backbone, ModelConfig, ParameterSet};

const MAGIC: &[u8; 8] = b"SRCKPT01";
const LITTLE_ENDIAN: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: Vec<StoredTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BackboneHeader {
    kind: String,
    config: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("JSON value serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(LITTLE_ENDIAN);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        if r.take(1)?[0] != LITTLE_ENDIAN {
            return Err(Error::Format("unsupported checkpoint endianness".into()));
        }
        let header_len = r.u64()? as usize;
        let header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let n = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(StoredTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Short content hash identifying the exact weights.
    pub fn fingerprint(&self) -> String {
        fingerprint_bytes(&self.to_bytes())
    }

    pub fn kind(&self) -> Option<&str> {
        self.header.get("kind").and_then(|k| k.as_str())
    }

    pub fn tensor(&self, name: &str) -> Result<&StoredTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))
    }

    pub fn from_backbone<T: Scalar>(kind: &str, backbone: &Backbone<T>, extra: serde_json::Value) -> Self {
        let header = BackboneHeader { kind: kind.to_string(), config: backbone.config.clone(), extra };
        let tensors = backbone
            .params
            .named_tensors()
            .into_iter()
            .map(|(name, shape, data)| StoredTensor { name, shape, data: data.iter().map(|x| x.to_f64_lossy()).collect() })
            .collect();
        Self { header: serde_json::to_value(header).expect("header serializes"), tensors }
    }

    pub fn push<T: Scalar>(&mut self, name: &str, shape: Vec<usize>, data: &[T]) {
        self.tensors.push(StoredTensor {
            name: name.to_string(),
            shape,
            data: data.iter().map(|x| x.to_f64_lossy()).collect(),
        });
    }

    pub fn extra(&self) -> serde_json::Value {
        self.header.get("extra").cloned().unwrap_or(serde_json::Value::Null)
    }

    /// Rebuilds the backbone tensors stored in this container.
    pub fn to_backbone<T: Scalar>(&self) -> Result<Backbone<T>> {
        let header: BackboneHeader = serde_json::from_value(self.header.clone())
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        header.config.validate()?;
        let mut params = ParameterSet::<T>::zeros(&header.config);
        let names: Vec<(String, Vec<usize>)> =
            params.named_tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        for ((name, shape), dst) in names.iter().zip(params.tensors_mut()) {
            let src = self.tensor(name)?;
            if &src.shape != shape {
                return Err(Error::Shape(format!("tensor {name}: stored {:?}, expected {:?}", src.shape, shape)));
            }
            for (d, &s) in dst.iter_mut().zip(&src.data) {
                if !s.is_finite() {
                    return Err(Error::Format(format!("tensor {name} contains non-finite values")));
                }
                *d = T::of(s);
            }
        }
        Backbone::from_parts(header.config, params)
    }
}

pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reranker checkpoints are backbone containers plus `head.weight` and `head.bias`.
impl<T: Scalar> RerankerModel<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_backbone("reranker", &self.backbone, serde_json::Value::Null);
        ck.push("head.weight", vec![self.head_weight.len()], &self.head_weight);
        ck.push("head.bias", vec![1], std::slice::from_ref(&self.head_bias));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind() != Some("reranker") {
            return Err(Error::Format(format!("expected a reranker checkpoint, found {:?}", ck.kind())));
        }
        let backbone = ck.to_backbone()?;
        let w = ck.tensor("head.weight")?;
        let b = ck.tensor("head.bias")?;
        if b.data.len() != 1 {
            return Err(Error::Shape("head.bias must hold one value".into()));
        }
        Self::from_parts(backbone, w.data.iter().map(|&x| T::of(x)).collect(), T::of(b.data[0]))
    }
}

pub(crate) fn matrix_from<T: Scalar>(t: &StoredTensor) -> Result<Matrix<T>> {
    if t.shape.len() != 2 {
        return Err(Error::Shape(format!("tensor {} must be 2-D, has shape {:?}", t.name, t.shape)));
    }
    Ok(Matrix::from_vec(t.shape[0], t.shape[1], t.data.iter().map(|&x| T::of(x)).collect()))
}
