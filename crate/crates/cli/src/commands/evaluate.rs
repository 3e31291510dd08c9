use std::fs;
use std::path::PathBuf;

use anyhow::{Context as _, Result};
use fragmix_core::config::{format_list, KvDocument};
use fragmix_core::retrieval::{evaluate_set, format_table, EvalOptions, WHITEN_EPS};
use fragmix_core::{DescriptorSet, LabelKind};

use super::extract::{self, Source};
use crate::run::{Context, UsageError};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Descriptor file written by `extract`.
    #[arg(long, conflicts_with_all = ["checkpoint", "manifest"])]
    descriptors: Option<PathBuf>,
    #[command(flatten)]
    source: Source,
    /// Rank the raw descriptors.
    #[arg(long)]
    no_whiten: bool,
    /// Whitening dimension, lowered to min(N-1, D) when the gallery is smaller.
    #[arg(long, default_value_t = 256, conflicts_with = "no_whiten")]
    whiten_dim: usize,
    /// Relevance labels to score.
    #[arg(long, value_delimiter = ',', default_values_t = LabelKind::ALL)]
    labels: Vec<LabelKind>,
}

pub fn run(ctx: &Context, args: &Args) -> Result<()> {
    let opts = EvalOptions {
        whiten_dim: (!args.no_whiten).then_some(args.whiten_dim),
        clamp_whiten: true,
        whiten_eps: WHITEN_EPS,
        label_kinds: args.labels.clone(),
    };
    let mut echo = KvDocument::new();
    echo.set("run.whiten", if args.no_whiten { "off" } else { "on" });
    if !args.no_whiten {
        echo.set("run.whiten_dim", args.whiten_dim);
    }
    echo.set("run.labels", format_list(&args.labels));

    let set = match (&args.descriptors, &args.source.checkpoint, &args.source.manifest) {
        (Some(path), _, _) => {
            echo.set("run.descriptors", path.display());
            ctx.write_run_config("evaluate", &echo)?;
            DescriptorSet::read(path)?
        }
        (None, Some(ckpt), Some(manifest)) => {
            echo.set("run.checkpoint", ckpt.display());
            echo.set("run.manifest", manifest.display());
            ctx.write_run_config("evaluate", &echo)?;
            extract::compute(ctx, ckpt, manifest, &args.source)?
        }
        _ => {
            return Err(UsageError::new("evaluate needs --descriptors, or --checkpoint together with --manifest").into())
        }
    };

    let evaluation = evaluate_set(&set, &opts)?;
    for report in &evaluation.reports {
        let path = ctx.out(&format!("report_{}.txt", report.label_kind));
        fs::write(&path, report.to_text()).with_context(|| format!("writing {}", path.display()))?;
    }
    let table = format_table(&evaluation.reports.iter().collect::<Vec<_>>());
    let path = ctx.out("retrieval_table.txt");
    fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    print!("{table}");
    Ok(())
}
