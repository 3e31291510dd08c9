use std::fs;
use std::path::PathBuf;

use anyhow::{Context as _, Result};
use clap::ValueEnum;
use fragmix_core::config::{format_list, KvDocument};
use fragmix_core::data::{
    make_identification_split, make_kfold_splits, papyrow_folds, parse_folds, MissingFiles, Part,
};

use crate::run::{open_manifest, Context, UsageError};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Kind {
    /// Writer-disjoint folds; each fold trains once and the rest is test.
    Kfold,
    /// Pages of every writer split into train/val/test.
    Identification,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    kind: Kind,
    /// Writer lists, one fold per line, comma separated. Defaults to the
    /// four-fold PapyRow table.
    #[arg(long)]
    folds: Option<PathBuf>,
    /// Train, val and test page fractions for identification splits.
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.2, 0.5])]
    fractions: Vec<f64>,
}

pub fn run(ctx: &Context, args: &Args) -> Result<()> {
    let manifest = open_manifest(&args.manifest, MissingFiles::Ignore)?;
    let mut echo = KvDocument::new();
    echo.set("run.manifest", args.manifest.display());
    match args.kind {
        Kind::Kfold => {
            let folds = match &args.folds {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| format!("reading folds {}", p.display()))?;
                    parse_folds(&text)?
                }
                None => papyrow_folds(),
            };
            echo.set("run.kind", "kfold");
            for (i, f) in folds.iter().enumerate() {
                echo.set(format!("run.fold{}", i + 1), format_list(f));
            }
            ctx.write_run_config("split", &echo)?;
            let specs = make_kfold_splits(&manifest.records, &folds)?;
            for (i, spec) in specs.iter().enumerate() {
                let path = ctx.out(&format!("fold{}.tsv", i + 1));
                spec.write(&path)?;
                println!(
                    "{}: {} train, {} test",
                    path.display(),
                    spec.count(Part::Train),
                    spec.count(Part::Test)
                );
            }
        }
        Kind::Identification => {
            let fractions: [f64; 3] = args
                .fractions
                .as_slice()
                .try_into()
                .map_err(|_| UsageError::new("--fractions needs exactly three values"))?;
            let seed = ctx.seed()?;
            echo.set("run.kind", "identification");
            echo.set("run.seed", seed);
            echo.set("run.fractions", format_list(&fractions));
            ctx.write_run_config("split", &echo)?;
            let (spec, _warnings) = make_identification_split(&manifest.records, fractions, seed)?;
            let path = ctx.out("split.tsv");
            spec.write(&path)?;
            println!(
                "{}: {} train, {} val, {} test",
                path.display(),
                spec.count(Part::Train),
                spec.count(Part::Val),
                spec.count(Part::Test)
            );
        }
    }
    Ok(())
}
