//! Self-describing binary container for named arrays.
//!
//! Layout: an 8-byte magic, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header describing the payload,
//! then the raw array bytes. Both dataset files and checkpoints use this
//! container; they differ only in `kind`, metadata, and array names.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CIFBOX01";
pub const FORMAT_VERSION: u32 = 1;

/// Array payload. All on-disk encodings are little-endian.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I8(Vec<i8>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::I8(_) => "i8",
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len() * 4,
            ArrayData::F64(v) => v.len() * 8,
            ArrayData::I8(v) => v.len(),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match self {
            ArrayData::F64(v) => Ok(v),
            other => Err(Error::Format(format!(
                "expected f64 array, found {}",
                other.dtype()
            ))),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match self {
            ArrayData::F32(v) => Ok(v),
            other => Err(Error::Format(format!(
                "expected f32 array, found {}",
                other.dtype()
            ))),
        }
    }

    pub fn as_i8(&self) -> Result<&[i8]> {
        match self {
            ArrayData::I8(v) => Ok(v),
            other => Err(Error::Format(format!(
                "expected i8 array, found {}",
                other.dtype()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn new(name: &str, shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "array `{name}`: shape {shape:?} implies {expected} elements, data has {}",
                data.len()
            )));
        }
        Ok(NamedArray {
            name: name.to_string(),
            shape,
            data,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayDescriptor {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: serde_json::Map<String, serde_json::Value>,
    arrays: Vec<ArrayDescriptor>,
}

/// An in-memory container: a kind tag, free-form JSON metadata, and named arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Container {
            kind: kind.to_string(),
            meta: serde_json::Map::new(),
            arrays: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: serde_json::Value) {
        self.meta.insert(key.to_string(), value);
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format(format!("missing or non-integer meta field `{key}`")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Format(format!("missing or non-string meta field `{key}`")))
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut descriptors = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for a in &self.arrays {
            let byte_len = a.data.byte_len() as u64;
            descriptors.push(ArrayDescriptor {
                name: a.name.clone(),
                dtype: a.data.dtype().to_string(),
                shape: a.shape.clone(),
                offset,
                byte_len,
            });
            offset += byte_len;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: descriptors,
        };
        let header_bytes =
            serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;

        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for a in &self.arrays {
            match &a.data {
                ArrayData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                ArrayData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                ArrayData::I8(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic; not a container file".into()));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let header_len = u64::from_le_bytes(buf8) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Header =
            serde_json::from_slice(&header_bytes).map_err(|e| Error::Format(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: header.format_version,
                supported: FORMAT_VERSION,
            });
        }

        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;

        let mut arrays = Vec::with_capacity(header.arrays.len());
        for d in &header.arrays {
            let start = d.offset as usize;
            let end = start + d.byte_len as usize;
            let bytes = payload.get(start..end).ok_or_else(|| {
                Error::Format(format!("array `{}` extends past end of file", d.name))
            })?;
            let data = match d.dtype.as_str() {
                "f32" => ArrayData::F32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                "f64" => ArrayData::F64(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                "i8" => ArrayData::I8(bytes.iter().map(|&b| b as i8).collect()),
                other => {
                    return Err(Error::Format(format!(
                        "array `{}` has unknown dtype `{other}`",
                        d.name
                    )))
                }
            };
            arrays.push(NamedArray::new(&d.name, d.shape.clone(), data)?);
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        Self::read_from(BufReader::new(file))
    }
}
