//! Tab-separated fragment manifests.
//!
//! ```text
//! fragment_id	writer_id	page_id	path
//! w00_p00_f00	writer00	w00_p00	images/w00_p00_f00.png
//! ```
//!
//! Paths are relative to the manifest's directory unless absolute.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::retrieval::DescriptorRecord;

pub const MANIFEST_COLUMNS: [&str; 4] = ["fragment_id", "writer_id", "page_id", "path"];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FragmentRecord {
    pub fragment_id: String,
    pub writer_id: String,
    pub page_id: String,
    pub path: PathBuf,
}

impl FragmentRecord {
    pub fn labels(&self) -> DescriptorRecord {
        DescriptorRecord::new(&self.fragment_id, &self.writer_id, &self.page_id)
    }

    /// The image path, resolved against `base` when relative.
    pub fn resolve(&self, base: &Path) -> PathBuf {
        if self.path.is_absolute() {
            self.path.clone()
        } else {
            base.join(&self.path)
        }
    }
}

/// How missing image files are treated while loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingFiles {
    /// Skip the record and report a warning.
    #[default]
    Warn,
    /// Fail the whole load.
    Strict,
    /// Do not look at the file system.
    Ignore,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<FragmentRecord>,
    /// Directory that relative paths are resolved against.
    pub base: PathBuf,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn image_paths(&self) -> Vec<PathBuf> {
        self.records.iter().map(|r| r.resolve(&self.base)).collect()
    }
}

/// Checks ids for emptiness and uniqueness.
pub fn validate_records(records: &[FragmentRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if r.fragment_id.is_empty() || r.writer_id.is_empty() || r.page_id.is_empty() {
            return Err(Error::data(format!("record {:?} has an empty id", r.fragment_id)));
        }
        if !seen.insert(&r.fragment_id) {
            return Err(Error::data(format!("duplicate fragment_id {}", r.fragment_id)));
        }
    }
    Ok(())
}

pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<FragmentRecord>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::format(origin, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_COLUMNS {
        return Err(Error::format(
            origin,
            format!("expected header {:?}, found {:?}", MANIFEST_COLUMNS.join("\t"), headers.iter().collect::<Vec<_>>()),
        ));
    }
    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::format(origin, format!("row {}: {e}", line + 2)))?;
        let field = |i: usize| row.get(i).unwrap_or("").trim().to_string();
        records.push(FragmentRecord {
            fragment_id: field(0),
            writer_id: field(1),
            page_id: field(2),
            path: PathBuf::from(field(3)),
        });
    }
    validate_records(&records)?;
    Ok(records)
}

pub fn load_manifest(path: &Path, missing: MissingFiles) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = parse_manifest(&text, path)?;
    let mut warnings = Vec::new();
    if missing != MissingFiles::Ignore {
        let mut kept = Vec::with_capacity(records.len());
        for r in records {
            let file = r.resolve(&base);
            if file.is_file() {
                kept.push(r);
            } else if missing == MissingFiles::Strict {
                return Err(Error::data(format!(
                    "image {} for fragment {} does not exist",
                    file.display(),
                    r.fragment_id
                )));
            } else {
                let msg = format!("skipping fragment {}: missing image {}", r.fragment_id, file.display());
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        records = kept;
    }
    Ok(Manifest {
        records,
        base,
        warnings,
    })
}

pub fn format_manifest(records: &[FragmentRecord]) -> String {
    let mut out = MANIFEST_COLUMNS.join("\t");
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.fragment_id,
            r.writer_id,
            r.page_id,
            r.path.display()
        ));
    }
    out
}

pub fn write_manifest(path: &Path, records: &[FragmentRecord]) -> Result<()> {
    validate_records(records)?;
    fs::write(path, format_manifest(records)).map_err(|e| Error::io(path, e))
}
