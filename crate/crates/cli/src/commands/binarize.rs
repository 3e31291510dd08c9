use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use fragmix_core::config::KvDocument;
use fragmix_core::data::{write_manifest, FragmentRecord, MissingFiles};
use fragmix_core::preprocessing::{sauvola_binarize, RasterImage, SauvolaParams};
use rayon::prelude::*;

use crate::run::{open_manifest, Context, UsageError};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

#[derive(Debug, clap::Args)]
pub struct Args {
    /// A directory of images or a fragment manifest.
    #[arg(long)]
    input: PathBuf,
    /// Binarization method; `sauvola` is the only one available.
    #[arg(long, default_value = "sauvola")]
    method: String,
    /// Odd window side in pixels.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    k: Option<f64>,
    /// Dynamic range of the local standard deviation.
    #[arg(long)]
    r: Option<f64>,
}

pub fn run(ctx: &Context, args: &Args) -> Result<()> {
    match args.method.as_str() {
        "sauvola" => {}
        "unet" | "u-net" => {
            return Err(UsageError::new(
                "learned (U-Net) binarization is not part of this toolkit; use --method sauvola",
            )
            .into())
        }
        other => return Err(UsageError::new(format!("unknown binarization method {other:?} (expected sauvola)")).into()),
    }
    let mut params = ctx.preprocess_config()?.binarize.unwrap_or_default();
    if let Some(w) = args.window {
        params.window = w;
    }
    if let Some(k) = args.k {
        params.k = k;
    }
    if let Some(r) = args.r {
        params.r = r;
    }
    params.validate()?;

    let mut echo = KvDocument::new();
    echo.set("run.input", args.input.display());
    echo.set("run.method", "sauvola");
    echo.set("preprocess.sauvola_window", params.window);
    echo.set("preprocess.sauvola_k", params.k);
    echo.set("preprocess.sauvola_r", params.r);
    ctx.write_run_config("binarize", &echo)?;

    let written = if args.input.is_dir() {
        binarize_dir(ctx, &args.input, &params)?
    } else {
        binarize_manifest(ctx, &args.input, &params)?
    };
    if written == 0 {
        log::warn!("no images found in {}; nothing written", args.input.display());
    }
    println!("binarized {written} images into {}", ctx.out_dir.display());
    Ok(())
}

fn binarize_one(src: &Path, dst: &Path, params: &SauvolaParams) -> Result<()> {
    if dst.canonicalize().ok().is_some_and(|d| src.canonicalize().ok() == Some(d)) {
        return Err(UsageError::new(format!("refusing to overwrite input {}", src.display())).into());
    }
    let img = RasterImage::load(src)?;
    sauvola_binarize(&img, params)?.save(dst)?;
    Ok(())
}

fn binarize_dir(ctx: &Context, dir: &Path, params: &SauvolaParams) -> Result<usize> {
    let mut inputs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    inputs.sort();
    inputs
        .par_iter()
        .map(|src| {
            let stem = src.file_stem().unwrap_or_default().to_string_lossy();
            binarize_one(src, &ctx.out(&format!("{stem}.pgm")), params)
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(inputs.len())
}

/// Binarizes every fragment of a manifest and writes a manifest for the results.
fn binarize_manifest(ctx: &Context, path: &Path, params: &SauvolaParams) -> Result<usize> {
    let manifest = open_manifest(path, MissingFiles::Warn)?;
    let images = ctx.out("images");
    fs::create_dir_all(&images).with_context(|| format!("creating {}", images.display()))?;
    let records = manifest
        .records
        .par_iter()
        .map(|r| {
            let rel = PathBuf::from(format!("images/{}.pgm", r.fragment_id));
            binarize_one(&r.resolve(&manifest.base), &ctx.out_dir.join(&rel), params)?;
            Ok(FragmentRecord { path: rel, ..r.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    if !records.is_empty() {
        write_manifest(&ctx.out("manifest.tsv"), &records)?;
    }
    Ok(records.len())
}
