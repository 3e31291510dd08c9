//! Descriptor matrices with their labels, and the on-disk format.
//!
//! ```text
//! fragmix-descriptors 1
//! n 96
//! d 2048
//! labels fragment_id writer_id page_id
//! meta checkpoint_sha256=…
//! end
//! <n·d little-endian f32>
//! <tab-separated label table with header row>
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "fragmix-descriptors 1";
const LABEL_COLUMNS: [&str; 3] = ["fragment_id", "writer_id", "page_id"];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DescriptorRecord {
    pub fragment_id: String,
    pub writer_id: String,
    pub page_id: String,
}

impl DescriptorRecord {
    pub fn new(fragment_id: impl Into<String>, writer_id: impl Into<String>, page_id: impl Into<String>) -> Self {
        DescriptorRecord {
            fragment_id: fragment_id.into(),
            writer_id: writer_id.into(),
            page_id: page_id.into(),
        }
    }
}

/// `N×D` row-major f32 descriptors aligned with `N` records.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    data: Vec<f32>,
    records: Vec<DescriptorRecord>,
    /// Free-form provenance, such as the checkpoint hash or whitening settings.
    pub meta: BTreeMap<String, String>,
}

impl DescriptorSet {
    pub fn new(dim: usize, data: Vec<f32>, records: Vec<DescriptorRecord>) -> Result<Self> {
        if data.len() != dim * records.len() {
            return Err(Error::dim(format!(
                "{} descriptors of dimension {dim} need {} values, got {}",
                records.len(),
                dim * records.len(),
                data.len()
            )));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if r.fragment_id.is_empty() || r.writer_id.is_empty() || r.page_id.is_empty() {
                return Err(Error::data(format!("record {r:?} has an empty id")));
            }
            if [&r.fragment_id, &r.writer_id, &r.page_id]
                .iter()
                .any(|s| s.contains(['\t', '\n', '\r']))
            {
                return Err(Error::data(format!("record {r:?} contains tabs or newlines")));
            }
            if !seen.insert(r.fragment_id.as_str()) {
                return Err(Error::data(format!("duplicate fragment_id {}", r.fragment_id)));
            }
        }
        Ok(DescriptorSet {
            dim,
            data,
            records,
            meta: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn records(&self) -> &[DescriptorRecord] {
        &self.records
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Largest deviation of a row norm from 1.
    pub fn max_norm_deviation(&self) -> f64 {
        (0..self.len())
            .map(|i| {
                let n: f64 = self.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum();
                (n.sqrt() - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Fails unless every row has unit length within `tol`.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        let dev = self.max_norm_deviation();
        if dev > tol {
            return Err(Error::data(format!(
                "descriptor rows are not l2-normalized (max deviation {dev:e})"
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = format!("{MAGIC}\nn {}\nd {}\nlabels {}\n", self.len(), self.dim, LABEL_COLUMNS.join(" "));
        for (k, v) in &self.meta {
            if k.contains(['=', '\n', ' ']) || v.contains('\n') {
                return Err(Error::data(format!("metadata {k:?} cannot be encoded")));
            }
            out.push_str(&format!("meta {k}={v}\n"));
        }
        out.push_str("end\n");
        let mut bytes = out.into_bytes();
        bytes.reserve(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(LABEL_COLUMNS.join("\t").as_bytes());
        bytes.push(b'\n');
        for r in &self.records {
            bytes.extend_from_slice(format!("{}\t{}\t{}\n", r.fragment_id, r.writer_id, r.page_id).as_bytes());
        }
        Ok(bytes)
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(origin, m);
        let mut pos = 0;
        let mut line = || -> Result<String> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unterminated header".into()))?;
            pos += end + 1;
            String::from_utf8(rest[..end].to_vec()).map_err(|_| bad("header is not UTF-8".into()))
        };
        if line()? != MAGIC {
            return Err(bad(format!("missing `{MAGIC}` magic line")));
        }
        let mut field = |name: &str| -> Result<usize> {
            let l = line()?;
            l.strip_prefix(name)
                .and_then(|v| v.strip_prefix(' '))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("expected `{name} <count>`, found {l:?}")))
        };
        let n = field("n")?;
        let d = field("d")?;
        let labels = line()?;
        if labels != format!("labels {}", LABEL_COLUMNS.join(" ")) {
            return Err(bad(format!("unsupported label schema {labels:?}")));
        }
        let mut meta = BTreeMap::new();
        loop {
            let l = line()?;
            if l == "end" {
                break;
            }
            let (k, v) = l
                .strip_prefix("meta ")
                .and_then(|kv| kv.split_once('='))
                .ok_or_else(|| bad(format!("unexpected header line {l:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let matrix_len = n * d * 4;
        let matrix = bytes
            .get(pos..pos + matrix_len)
            .ok_or_else(|| bad("descriptor matrix is truncated".into()))?;
        let data = matrix
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let table = std::str::from_utf8(&bytes[pos + matrix_len..]).map_err(|_| bad("label table is not UTF-8".into()))?;
        let mut rows = table.lines();
        if rows.next() != Some(LABEL_COLUMNS.join("\t").as_str()) {
            return Err(bad("label table header is missing".into()));
        }
        let records = rows
            .map(|r| {
                let f: Vec<&str> = r.split('\t').collect();
                match f.as_slice() {
                    [a, b, c] => Ok(DescriptorRecord::new(*a, *b, *c)),
                    _ => Err(bad(format!("malformed label row {r:?}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if records.len() != n {
            return Err(bad(format!("header announces {n} rows, label table has {}", records.len())));
        }
        let mut set = DescriptorSet::new(d, data, records)?;
        set.meta = meta;
        Ok(set)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        DescriptorSet::decode(&bytes, path)
    }
}
