//! Single-file checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "SGADCKPT"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     header length H in bytes, u64 little-endian
//! 20      H     UTF-8 JSON header
//! 20+H    ...   tensor data
//! ```
//!
//! The header is `{"dtype": "f32"|"f64", "metadata": {...}, "tensors":
//! {name: {"shape": [...], "offset": o, "len": n}}}`. `offset` and `len`
//! are byte counts relative to the start of the data section; tensors are
//! packed back to back in name order as little-endian IEEE-754 values of
//! the header dtype, in row-major order.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;

use super::config::TrainConfig;

pub const MAGIC: &[u8; 8] = b"SGADCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Trained networks.
    Model,
    /// Test fixture whose predictor returns the ground truth.
    LabelEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub step: u64,
    pub config: Option<TrainConfig>,
    pub network: Option<NetworkConfig>,
    pub class_names: Vec<String>,
    pub normalization: Normalization,
    /// Update counts per optimizer-state entry, keyed like the tensors.
    pub optimizer_steps: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    metadata: CheckpointMeta,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub dtype: DType,
    pub tensors: BTreeMap<String, Tensor>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    }
}

fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported tensor dtype `{other}`"))),
    }
}

impl Checkpoint {
    pub fn label_echo(class_names: Vec<String>) -> Self {
        Self {
            meta: CheckpointMeta {
                kind: CheckpointKind::LabelEcho,
                step: 0,
                config: None,
                network: None,
                class_names,
                normalization: Normalization::default(),
                optimizer_steps: BTreeMap::new(),
            },
            dtype: DType::F32,
            tensors: BTreeMap::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let width = self.dtype.size_in_bytes();
        let mut data = Vec::new();
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            let t = t.to_dtype(self.dtype)?;
            let offset = data.len() as u64;
            match self.dtype {
                DType::F32 => {
                    for v in t.flatten_all()?.to_vec1::<f32>()? {
                        data.extend_from_slice(&v.to_le_bytes());
                    }
                }
                DType::F64 => {
                    for v in t.flatten_all()?.to_vec1::<f64>()? {
                        data.extend_from_slice(&v.to_le_bytes());
                    }
                }
                other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
            }
            entries.insert(
                name.clone(),
                TensorEntry {
                    shape: t.dims().to_vec(),
                    offset,
                    len: (t.elem_count() * width) as u64,
                },
            );
        }
        let header = serde_json::to_vec(&Header {
            dtype: dtype_name(self.dtype)?.to_string(),
            metadata: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = PREAMBLE
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..data_start])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let dtype = parse_dtype(&header.dtype)?;
        let width = dtype.size_in_bytes();
        let data = &bytes[data_start..];
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            let count: usize = e.shape.iter().product();
            let (start, len) = (e.offset as usize, e.len as usize);
            if len != count * width || start.checked_add(len).is_none_or(|end| end > data.len()) {
                return Err(Error::Checkpoint(format!("tensor `{name}` lies outside the data section")));
            }
            let raw = &data[start..start + len];
            let t = match dtype {
                DType::F32 => Tensor::from_vec(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect::<Vec<_>>(),
                    e.shape.as_slice(),
                    &Device::Cpu,
                )?,
                _ => Tensor::from_vec(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect::<Vec<_>>(),
                    e.shape.as_slice(),
                    &Device::Cpu,
                )?,
            };
            tensors.insert(name, t);
        }
        Ok(Self {
            meta: header.metadata,
            dtype,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
