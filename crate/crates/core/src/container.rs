//! Versioned binary container of named arrays, used for checkpoints and
//! backbone weight files.
//!
//! Layout: the 4-byte magic `VPRD`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, then the raw payload.
//! The header lists every section as `{name, dtype, shape, offset, len}`
//! (offsets and lengths in bytes, relative to the payload start) together
//! with free-form metadata and the SHA-256 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vidpred_tensor::{Real, Tensor};

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"VPRD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionInfo {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    sections: Vec<SectionInfo>,
    sha256: String,
}

/// One named array. Values are held as `f64`, which represents every `f32`
/// exactly, and written in `dtype`.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Section {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let dtype = if T::DTYPE == "f32" { Dtype::F32 } else { Dtype::F64 };
        Section {
            name: name.into(),
            dtype,
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.to_f64().unwrap()).collect(),
        }
    }

    pub fn from_f64(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Self {
        Section {
            name: name.into(),
            dtype: Dtype::F64,
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        Ok(Tensor::from_vec(
            &self.shape,
            self.data.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )?)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, s: Section) {
        self.sections.push(s);
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Section> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    /// Sections whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix<T: Real>(&self, prefix: &str) -> Result<Vec<(String, Tensor<T>)>> {
        self.sections
            .iter()
            .filter_map(|s| s.name.strip_prefix(prefix).map(|n| (n.to_string(), s)))
            .map(|(n, s)| Ok((n, s.to_tensor()?)))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut infos = Vec::with_capacity(self.sections.len());
        for s in &self.sections {
            let n: usize = s.shape.iter().product();
            if n != s.data.len() {
                return Err(Error::Checkpoint(format!(
                    "section `{}` has {} values for shape {:?}",
                    s.name,
                    s.data.len(),
                    s.shape
                )));
            }
            let offset = payload.len();
            match s.dtype {
                Dtype::F32 => s.data.iter().for_each(|&v| payload.extend_from_slice(&(v as f32).to_le_bytes())),
                Dtype::F64 => s.data.iter().for_each(|&v| payload.extend_from_slice(&v.to_le_bytes())),
            }
            infos.push(SectionInfo {
                name: s.name.clone(),
                dtype: s.dtype,
                shape: s.shape.clone(),
                offset,
                len: payload.len() - offset,
            });
        }
        let header = Header {
            meta: self.meta.clone(),
            sections: infos,
            sha256: hex::encode(Sha256::digest(&payload)),
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + hjson.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a VPRD container"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "container version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])?;
        let payload = &bytes[hend..];
        if hex::encode(Sha256::digest(payload)) != header.sha256 {
            return Err(bad("payload checksum mismatch"));
        }
        let mut sections = Vec::with_capacity(header.sections.len());
        for info in header.sections {
            let n: usize = info.shape.iter().product();
            if info.len != n * info.dtype.size() || info.offset + info.len > payload.len() {
                return Err(Error::Checkpoint(format!("section `{}` has an inconsistent extent", info.name)));
            }
            let raw = &payload[info.offset..info.offset + info.len];
            let data = match info.dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            sections.push(Section {
                name: info.name,
                dtype: info.dtype,
                shape: info.shape,
                data,
            });
        }
        Ok(Container {
            meta: header.meta,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}
