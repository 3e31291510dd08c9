//! Tensor checkpoint files.
//!
//! Layout: an ASCII header followed by little-endian raw scalars.
//!
//! ```text
//! fragmix-tensors 1
//! meta model.mixer_depth=4
//! tensor backbone.stem.conv.weight f32 16,3,3,3 0 1728
//! ...
//! end
//! <data>
//! ```
//!
//! Each `tensor` line carries name, dtype, shape, byte offset into the data
//! section and byte length.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{DType, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "fragmix-tensors 1";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        StoredTensor {
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decodes the stored values, converting to `T` when the dtype differs.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = match self.dtype {
            DType::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => self
                .bytes
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::read_le(c)))
                .collect(),
        };
        Tensor::from_parts(self.shape.clone(), data)
    }
}

/// Named tensors plus free-form `key=value` metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.insert(name.into(), StoredTensor::from_tensor(t));
    }

    pub fn insert_all<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store {
            self.insert(format!("{prefix}{name}"), t);
        }
    }

    /// All tensors whose names start with `prefix`, with the prefix stripped.
    pub fn extract<T: Scalar>(&self, prefix: &str) -> ParamStore<T> {
        self.tensors
            .iter()
            .filter_map(|(name, st)| {
                name.strip_prefix(prefix)
                    .map(|rest| (rest.to_string(), st.to_tensor()))
            })
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            if k.contains(['=', '\n', ' ']) || v.contains('\n') {
                return Err(Error::data(format!("checkpoint metadata {k:?} cannot be encoded")));
            }
            header.push_str(&format!("meta {k}={v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::data(format!("tensor name {name:?} cannot be encoded")));
            }
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!(
                "tensor {name} {} {} {offset} {}\n",
                t.dtype.name(),
                dims.join(","),
                t.bytes.len()
            ));
            offset += t.bytes.len();
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unterminated header".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(bad(format!("missing `{MAGIC}` magic line")));
        }
        let mut ckpt = Checkpoint::new();
        let mut layout = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| bad(format!("malformed meta line {line:?}")))?;
                ckpt.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let fields: Vec<&str> = rest.split(' ').collect();
                if fields.len() != 5 {
                    return Err(bad(format!("malformed tensor line {line:?}")));
                }
                let dtype = DType::parse(fields[1])
                    .ok_or_else(|| bad(format!("unknown dtype {:?}", fields[1])))?;
                let shape = if fields[2].is_empty() {
                    Vec::new()
                } else {
                    fields[2]
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad shape {:?}", fields[2])))?
                };
                let offset: usize = fields[3]
                    .parse()
                    .map_err(|_| bad(format!("bad offset {:?}", fields[3])))?;
                let len: usize = fields[4]
                    .parse()
                    .map_err(|_| bad(format!("bad length {:?}", fields[4])))?;
                if shape.iter().product::<usize>() * dtype.size() != len {
                    return Err(bad(format!("tensor {} length disagrees with shape", fields[0])));
                }
                layout.push((fields[0].to_string(), dtype, shape, offset, len));
            } else {
                return Err(bad(format!("unexpected header line {line:?}")));
            }
        }
        let data = &bytes[pos..];
        for (name, dtype, shape, offset, len) in layout {
            let slice = data
                .get(offset..offset + len)
                .ok_or_else(|| bad(format!("tensor {name} extends past end of file")))?;
            ckpt.tensors.insert(
                name,
                StoredTensor {
                    dtype,
                    shape,
                    bytes: slice.to_vec(),
                },
            );
        }
        Ok(ckpt)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes, path)
}
