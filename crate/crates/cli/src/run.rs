//! State shared by all subcommands: merged configuration, seed and output directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use fragmix_core::config::KvDocument;
use fragmix_core::data::{load_manifest, FragmentRecord, Manifest, MissingFiles, Part, SplitSpec};
use fragmix_core::preprocessing::{PreprocessConfig, RasterImage};
use fragmix_core::{ModelConfig, TrainConfig};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

/// Invalid flags or flag combinations; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(String);

impl UsageError {
    pub fn new(msg: impl Into<String>) -> Self {
        UsageError(msg.into())
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const SECTIONS: [&str; 4] = ["model", "train", "preprocess", "run"];

pub struct Context {
    config: KvDocument,
    seed: Option<u64>,
    pub out_dir: PathBuf,
}

impl Context {
    pub fn new(config: Option<&Path>, seed: Option<u64>, out_dir: PathBuf) -> Result<Self> {
        let config = match config {
            Some(p) => KvDocument::load(p)?,
            None => KvDocument::new(),
        };
        for (key, _) in config.iter() {
            let known = key.split_once('.').is_some_and(|(s, _)| SECTIONS.contains(&s));
            if !known {
                return Err(UsageError::new(format!(
                    "configuration key {key} is not under model., train., preprocess. or run."
                ))
                .into());
            }
        }
        fs::create_dir_all(&out_dir).with_context(|| format!("creating output directory {}", out_dir.display()))?;
        Ok(Context { config, seed, out_dir })
    }

    /// Section `name` of the configuration file, without its prefix.
    pub fn section(&self, name: &str) -> KvDocument {
        self.config.section(name)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig::from_kv(&self.section("model"))?)
    }

    /// Training configuration with `--seed` applied.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::from_kv(&self.section("train"))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn preprocess_config(&self) -> Result<PreprocessConfig> {
        Ok(PreprocessConfig::from_kv(&self.section("preprocess"))?)
    }

    /// `--seed`, else `train.seed`, else 0.
    pub fn seed(&self) -> Result<u64> {
        match self.seed {
            Some(s) => Ok(s),
            None => Ok(self.train_config()?.seed),
        }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Writes `run_<command>.conf` holding the resolved configuration.
    pub fn write_run_config(&self, command: &str, resolved: &KvDocument) -> Result<PathBuf> {
        let mut doc = KvDocument::new();
        doc.set("run.command", command);
        doc.merge(resolved);
        let path = self.out(&format!("run_{command}.conf"));
        let text = format!("# resolved configuration of `fragmix {command}`\n{}", doc.to_text());
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn open_manifest(path: &Path, missing: MissingFiles) -> Result<Manifest> {
    let m = load_manifest(path, missing).with_context(|| format!("loading manifest {}", path.display()))?;
    Ok(m)
}

/// Records of `part`, or all records when no split is given.
pub fn select_records(records: &[FragmentRecord], split: Option<&Path>, part: Part) -> Result<Vec<FragmentRecord>> {
    match split {
        None => Ok(records.to_vec()),
        Some(path) => {
            let spec = SplitSpec::read(path)?;
            Ok(spec.select(records, part).into_iter().cloned().collect())
        }
    }
}

/// Reads the images of `records` in parallel, in record order.
pub fn read_images(base: &Path, records: &[FragmentRecord]) -> Result<Vec<RasterImage>> {
    let images = records
        .par_iter()
        .map(|r| RasterImage::load(&r.resolve(base)))
        .collect::<fragmix_core::Result<Vec<_>>>()?;
    Ok(images)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary sibling so an interrupted run never leaves a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))?;
    Ok(())
}
