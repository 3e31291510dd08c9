use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use fragmix_core::config::{format_list, KvDocument};
use fragmix_core::data::{images_to_tensor, FragmentRecord, LabelIndex, MissingFiles, Part};
use fragmix_core::numerics::{read_checkpoint, Checkpoint};
use fragmix_core::preprocessing::PreprocessConfig;
use fragmix_core::training::{LabeledImages, LogRecord, TrainState, Trainer};
use fragmix_core::{LossKind, Model};

use crate::run::{open_manifest, read_images, select_records, write_atomic, Context, UsageError};

pub const LAST_CHECKPOINT: &str = "checkpoint_last.ckpt";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.ckpt";
const LOG_FILE: &str = "train_log.jsonl";
const LABELS_KEY: &str = "labels.writers";

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    manifest: PathBuf,
    /// Split file: its train part is fitted, its val part selects the best epoch.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Continue a run from its last checkpoint with the stored configuration.
    #[arg(long, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// cross_entropy or triplet.
    #[arg(long)]
    loss: Option<LossKind>,
    /// Stop once this many epochs are done in total; `--resume` continues later.
    #[arg(long, value_name = "EPOCHS")]
    stop_after: Option<usize>,
}

impl Args {
    fn has_overrides(&self) -> bool {
        self.epochs.is_some() || self.lr.is_some() || self.batch_size.is_some() || self.loss.is_some()
    }
}

/// Adds what extraction needs besides the weights.
pub fn annotate(ckpt: &mut Checkpoint, pre: &PreprocessConfig, labels: &LabelIndex) {
    for (k, v) in pre.to_kv().iter() {
        ckpt.meta.insert(format!("preprocess.{k}"), v.to_string());
    }
    ckpt.meta.insert(LABELS_KEY.into(), format_list(&labels.names()));
}

fn preprocess_from(ckpt: &Checkpoint) -> Result<PreprocessConfig> {
    let mut doc = KvDocument::new();
    for (k, v) in &ckpt.meta {
        if let Some(key) = k.strip_prefix("preprocess.") {
            doc.set(key, v);
        }
    }
    Ok(PreprocessConfig::from_kv(&doc)?)
}

fn labeled(
    base: &std::path::Path,
    records: &[FragmentRecord],
    index: &LabelIndex,
    pre: &PreprocessConfig,
) -> Result<LabeledImages<f32>> {
    let images = images_to_tensor(&read_images(base, records)?, pre)?;
    let labels = records.iter().map(|r| index.get(&r.writer_id).expect("indexed")).collect();
    Ok(LabeledImages::new(images, labels)?)
}

pub fn run(ctx: &Context, args: &Args) -> Result<()> {
    let manifest = open_manifest(&args.manifest, MissingFiles::Warn)?;
    let train_records = select_records(&manifest.records, args.split.as_deref(), Part::Train)?;
    let mut val_records = match &args.split {
        Some(_) => select_records(&manifest.records, args.split.as_deref(), Part::Val)?,
        None => Vec::new(),
    };
    if train_records.is_empty() {
        bail!("no training fragments in {}", args.manifest.display());
    }
    let index = LabelIndex::new(train_records.iter().map(|r| r.writer_id.as_str()));

    let (mut state, cfg, pre) = match &args.resume {
        Some(path) => {
            if args.has_overrides() {
                return Err(UsageError::new(
                    "--resume continues with the configuration stored in the checkpoint; drop --epochs, --lr, --batch-size and --loss",
                )
                .into());
            }
            let ckpt = read_checkpoint(path)?;
            let (state, cfg) = TrainState::<f32>::from_checkpoint(&ckpt)?;
            let stored = ckpt.meta.get(LABELS_KEY).cloned().unwrap_or_default();
            if stored != format_list(&index.names()) {
                bail!("checkpoint {} was trained on writers [{stored}], not on this training set", path.display());
            }
            log::info!("resuming after epoch {} (step {})", state.epochs_done, state.step);
            (state, cfg, preprocess_from(&ckpt)?)
        }
        None => {
            let mut cfg = ctx.train_config()?;
            if let Some(e) = args.epochs {
                cfg.epochs = e;
            }
            if let Some(lr) = args.lr {
                cfg.lr = lr;
            }
            if let Some(b) = args.batch_size {
                cfg.batch_size = b;
            }
            if let Some(l) = args.loss {
                cfg.loss_kind = l;
            }
            cfg.validate()?;
            let mut model_cfg = ctx.model_config()?;
            if cfg.loss_kind == LossKind::CrossEntropy {
                match model_cfg.num_classes {
                    None => model_cfg.num_classes = Some(index.len()),
                    Some(k) if k != index.len() => {
                        return Err(UsageError::new(format!(
                            "model.num_classes={k} but the training set has {} writers",
                            index.len()
                        ))
                        .into())
                    }
                    Some(_) => {}
                }
            }
            let model = Model::new(model_cfg, cfg.seed)?;
            (TrainState::new(model), cfg, ctx.preprocess_config()?)
        }
    };

    let known = val_records.len();
    val_records.retain(|r| index.get(&r.writer_id).is_some());
    if val_records.len() < known {
        log::warn!(
            "dropped {} validation fragments whose writers are absent from training",
            known - val_records.len()
        );
    }
    let val_writers = LabelIndex::new(val_records.iter().map(|r| r.writer_id.as_str())).len();
    if cfg.loss_kind == LossKind::Triplet && val_writers == 1 {
        log::warn!("validation set has fewer than two writers; triplet validation is skipped");
        val_records.clear();
    }

    let mut echo = KvDocument::new();
    echo.extend_prefixed("model", &state.model.config().to_kv());
    echo.extend_prefixed("train", &cfg.to_kv());
    echo.extend_prefixed("preprocess", &pre.to_kv());
    echo.set("run.manifest", args.manifest.display());
    if let Some(s) = &args.split {
        echo.set("run.split", s.display());
    }
    if let Some(r) = &args.resume {
        echo.set("run.resume", r.display());
    }
    echo.set("run.train_fragments", train_records.len());
    echo.set("run.val_fragments", val_records.len());
    echo.set("run.writers", format_list(&index.names()));
    ctx.write_run_config("train", &echo)?;

    let train = labeled(&manifest.base, &train_records, &index, &pre)?;
    let val = if val_records.is_empty() {
        None
    } else {
        Some(labeled(&manifest.base, &val_records, &index, &pre)?)
    };

    let log_path = ctx.out(LOG_FILE);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(file);

    let trainer = Trainer::new(cfg.clone())?;
    let end = args.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in state.epochs_done..end {
        let mut records: Vec<LogRecord> = Vec::new();
        let outcome = trainer.run(&mut state, &train, val.as_ref(), Some(epoch + 1), &mut |r| {
            records.push(r.clone());
            Ok(())
        });
        for r in &records {
            writeln!(log, "{}", r.to_json())?;
        }
        log.flush().with_context(|| format!("writing {}", log_path.display()))?;
        outcome?;

        let mut last = state.to_checkpoint(&cfg);
        annotate(&mut last, &pre, &index);
        write_atomic(&ctx.out(LAST_CHECKPOINT), &last.encode()?)?;
        if state.best.as_ref().is_some_and(|b| b.epoch == epoch) {
            let mut best = state.best_model().to_checkpoint();
            annotate(&mut best, &pre, &index);
            best.meta.insert("train.epoch".into(), epoch.to_string());
            write_atomic(&ctx.out(BEST_CHECKPOINT), &best.encode()?)?;
        }
        let train_loss: Vec<f64> = records.iter().filter(|r| r.split == "train").map(|r| r.loss).collect();
        let mean = train_loss.iter().sum::<f64>() / train_loss.len().max(1) as f64;
        match records.iter().find(|r| r.split == "val") {
            Some(v) => log::info!(
                "epoch {}/{}: train loss {mean:.4}, val loss {:.4}{}",
                epoch + 1,
                cfg.epochs,
                v.loss,
                v.accuracy.map_or(String::new(), |a| format!(", val accuracy {a:.3}"))
            ),
            None => log::info!("epoch {}/{}: train loss {mean:.4}", epoch + 1, cfg.epochs),
        }
    }
    match &state.best {
        Some(b) => println!(
            "{} of {} epochs done; best epoch {} (score {:.4}); checkpoints in {}",
            state.epochs_done,
            cfg.epochs,
            b.epoch + 1,
            b.score,
            ctx.out_dir.display()
        ),
        None => println!("no epoch trained yet; {} of {} done", state.epochs_done, cfg.epochs),
    }
    Ok(())
}
