use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use fragmix_core::config::KvDocument;
use fragmix_core::data::{images_to_tensor, MissingFiles, Part};
use fragmix_core::numerics::Checkpoint;
use fragmix_core::preprocessing::PreprocessConfig;
use fragmix_core::retrieval::extract_descriptors;
use fragmix_core::{DescriptorSet, Model};

use crate::run::{open_manifest, read_images, select_records, sha256_hex, write_atomic, Context};

pub const DESCRIPTOR_FILE: &str = "descriptors.fmd";

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    pub source: Source,
    /// Output file; defaults to descriptors.fmd in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Where descriptors come from when they are computed on the fly.
#[derive(Debug, clap::Args)]
pub struct Source {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split file restricting the fragments to one part.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Part of the split to use.
    #[arg(long, default_value = "test")]
    pub part: Part,
    /// Images per forward pass.
    #[arg(long, default_value_t = 32)]
    pub chunk: usize,
}

/// Preprocessing stored with the checkpoint, overridden by the config file.
fn preprocessing(ctx: &Context, ckpt: &Checkpoint) -> Result<PreprocessConfig> {
    let mut doc = KvDocument::new();
    for (k, v) in &ckpt.meta {
        if let Some(key) = k.strip_prefix("preprocess.") {
            doc.set(key, v);
        }
    }
    doc.merge(&ctx.section("preprocess"));
    Ok(PreprocessConfig::from_kv(&doc)?)
}

pub fn compute(ctx: &Context, checkpoint: &Path, manifest_path: &Path, src: &Source) -> Result<DescriptorSet> {
    let bytes = fs::read(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let ckpt = Checkpoint::decode(&bytes, checkpoint)?;
    let model = Model::<f32>::from_checkpoint(&ckpt)?;
    let pre = preprocessing(ctx, &ckpt)?;
    let manifest = open_manifest(manifest_path, MissingFiles::Warn)?;
    let records = select_records(&manifest.records, src.split.as_deref(), src.part)?;
    if records.is_empty() {
        bail!("no fragments selected from {}", manifest_path.display());
    }
    let images = images_to_tensor::<f32>(&read_images(&manifest.base, &records)?, &pre)?;
    model.check_input(images.shape())?;
    let labels = records.iter().map(|r| r.labels()).collect();
    let mut set = extract_descriptors(&model, &images, labels, src.chunk.max(1))?;
    set.meta.insert("checkpoint_sha256".into(), sha256_hex(&bytes));
    let manifest_bytes = fs::read(manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?;
    set.meta.insert("manifest_sha256".into(), sha256_hex(&manifest_bytes));
    if src.split.is_some() {
        set.meta.insert("split_part".into(), src.part.to_string());
    }
    Ok(set)
}

pub fn run(ctx: &Context, args: &Args) -> Result<()> {
    let src = &args.source;
    let (Some(checkpoint), Some(manifest)) = (&src.checkpoint, &src.manifest) else {
        return Err(crate::run::UsageError::new("extract needs --checkpoint and --manifest").into());
    };
    let output = args.output.clone().unwrap_or_else(|| ctx.out(DESCRIPTOR_FILE));
    let mut echo = KvDocument::new();
    echo.set("run.checkpoint", checkpoint.display());
    echo.set("run.manifest", manifest.display());
    if let Some(s) = &src.split {
        echo.set("run.split", s.display());
        echo.set("run.part", src.part);
    }
    echo.set("run.output", output.display());
    ctx.write_run_config("extract", &echo)?;

    let set = compute(ctx, checkpoint, manifest, src)?;
    write_atomic(&output, &set.encode()?)?;
    println!("{} descriptors of dimension {} -> {}", set.len(), set.dim(), output.display());
    Ok(())
}
