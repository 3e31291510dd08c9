use anyhow::Result;
use clap::ValueEnum;
use fragmix_core::config::KvDocument;
use fragmix_core::data::{generate_synthetic_corpus, write_corpus, ImageFormat, SynthConfig};

use crate::run::Context;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Png,
    Ppm,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long, default_value_t = 8)]
    writers: usize,
    #[arg(long, default_value_t = 3)]
    pages: usize,
    /// Fragments cut from every page.
    #[arg(long, default_value_t = 4)]
    fragments: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, value_enum, default_value_t = Format::Png)]
    format: Format,
}

pub fn run(ctx: &Context, args: &Args) -> Result<()> {
    let cfg = SynthConfig {
        num_writers: args.writers,
        pages_per_writer: args.pages,
        fragments_per_page: args.fragments,
        height: args.height,
        width: args.width,
        seed: ctx.seed()?,
    };
    let mut echo = KvDocument::new();
    echo.set("run.seed", cfg.seed);
    echo.set("run.writers", cfg.num_writers);
    echo.set("run.pages", cfg.pages_per_writer);
    echo.set("run.fragments", cfg.fragments_per_page);
    echo.set("run.height", cfg.height);
    echo.set("run.width", cfg.width);
    ctx.write_run_config("synth", &echo)?;

    let corpus = generate_synthetic_corpus(&cfg)?;
    let format = match args.format {
        Format::Png => ImageFormat::Png,
        Format::Ppm => ImageFormat::Pnm,
    };
    let manifest = write_corpus(&ctx.out_dir, &corpus, format)?;
    log::info!("wrote {} fragments", corpus.len());
    println!("{}", manifest.display());
    Ok(())
}
