//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Run with `cargo test -p fragmix-cli --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use fragmix_core::data::{generate_synthetic_corpus, images_to_tensor, write_corpus, ImageFormat, LabelIndex, SynthConfig};
use fragmix_core::model::{mixer, projection, Bindings};
use fragmix_core::numerics::ConvGeometry;
use fragmix_core::preprocessing::{sauvola_binarize, PreprocessConfig, RasterImage, SauvolaParams};
use fragmix_core::retrieval::{
    average_precision, evaluate, fit_whiten, rank_leave_one_out, DescriptorRecord, EvalOptions, WHITEN_EPS,
};
use fragmix_core::training::{accuracy, batch_hard_triplet_loss, lr_at, LabeledImages, Schedule, TrainState, Trainer};
use fragmix_core::{
    Aggregation, DescriptorSet, LabelKind, LossKind, Model, ModelConfig, Tape, Tensor, TrainConfig, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------------------
// 1. gradients

const H: f64 = 1e-5;
const SEEDS: [u64; 5] = [11, 12, 13, 14, 15];

/// Largest relative deviation between tape gradients and central differences
/// of `f`, probing at most `probes` entries per input.
fn fd_max_rel_error<F>(inputs: &[Tensor<f64>], probes: usize, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).expect("backward");
    let value = |values: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let v: Vec<Var> = values.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &v);
        t.value(out).item()
    };
    let mut work = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let n = inputs[i].numel();
        let stride = n.div_ceil(probes).max(1);
        for j in (0..n).step_by(stride) {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + H;
            let up = value(&work);
            work[i].data_mut()[j] = x - H;
            let down = value(&work);
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn signed_away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(0.1..1.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Mean of `y` weighted by fixed random values, so every output entry matters.
fn weighted_mean(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let w = Tensor::randn(tape.shape(y), 1.0, &mut rng(seed ^ 0x9e37));
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.mean(p)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for seed in SEEDS {
        let mut r = rng(seed);
        let a = Tensor::randn(&[4, 5], 1.0, &mut r);
        let b = Tensor::randn(&[5, 3], 1.0, &mut r);
        record(
            "matmul",
            fd_max_rel_error(&[a, b], usize::MAX, |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                weighted_mean(t, y, seed)
            }),
        );

        let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut r);
        record(
            "conv2d",
            fd_max_rel_error(&[x.clone(), w], usize::MAX, |t, v| {
                let y = t.conv2d(v[0], v[1], ConvGeometry::new(1, 1, 1)).unwrap();
                weighted_mean(t, y, seed)
            }),
        );
        let dw = Tensor::randn(&[3, 1, 3, 3], 0.5, &mut r);
        record(
            "conv2d depthwise",
            fd_max_rel_error(&[x, dw], usize::MAX, |t, v| {
                let y = t.conv2d(v[0], v[1], ConvGeometry::new(2, 1, 3)).unwrap();
                weighted_mean(t, y, seed)
            }),
        );

        let x = Tensor::randn(&[2, 8], 1.0, &mut r);
        let g = Tensor::randn(&[8], 1.0, &mut r);
        let be = Tensor::randn(&[8], 1.0, &mut r);
        record(
            "layer_norm",
            fd_max_rel_error(&[x, g, be], usize::MAX, |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1, 1e-5).unwrap();
                weighted_mean(t, y, seed)
            }),
        );

        let x = signed_away_from_zero(&[3, 7], &mut r);
        let sa = Tensor::new(vec![1], vec![r.random_range(0.5..1.5)]).unwrap();
        let sb = Tensor::new(vec![1], vec![r.random_range(-0.5..0.5)]).unwrap();
        record(
            "StarReLU",
            fd_max_rel_error(&[x, sa, sb], usize::MAX, |t, v| {
                let y = mixer::star_relu(t, v[0], v[1], v[2]).unwrap();
                weighted_mean(t, y, seed)
            }),
        );

        let logits = Tensor::randn(&[4, 5], 2.0, &mut r);
        record(
            "softmax",
            fd_max_rel_error(&[logits.clone()], usize::MAX, |t, v| {
                let y = t.softmax(v[0], 1).unwrap();
                weighted_mean(t, y, seed)
            }),
        );
        let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
        record(
            "cross-entropy",
            fd_max_rel_error(&[logits], usize::MAX, |t, v| t.cross_entropy(v[0], &labels).unwrap()),
        );

        let (c, k, n, hw) = (5, 3, 2, 6);
        let names = [
            "projection.channel.weight",
            "projection.channel.bias",
            "projection.spatial.weight",
            "projection.spatial.bias",
        ];
        let inputs = vec![
            Tensor::randn(&[2, c, 2, 3], 1.0, &mut r),
            Tensor::randn(&[k, c, 1, 1], 0.5, &mut r),
            Tensor::randn(&[k], 0.5, &mut r),
            Tensor::randn(&[n, hw], 0.5, &mut r),
            Tensor::randn(&[n], 0.5, &mut r),
        ];
        record(
            "projection",
            fd_max_rel_error(&inputs, usize::MAX, |t, v| {
                let p = Bindings::from_pairs(names.iter().map(|s| s.to_string()).zip(v[1..].iter().copied()));
                let y = projection::forward(t, &p, v[0]).unwrap();
                weighted_mean(t, y, seed)
            }),
        );

        let cfg = ModelConfig {
            input_height: 12,
            input_width: 12,
            backbone_stage_channels: vec![4],
            backbone_blocks_per_stage: vec![1],
            mixer_depth: 1,
            ..ModelConfig::default()
        };
        let model = Model::<f64>::new(cfg.clone(), seed).unwrap();
        let mut block_names = Vec::new();
        let mut inputs = vec![Tensor::randn(&[1, 4, 3, 3], 1.0, &mut r)];
        for (name, t) in model.params() {
            if name.starts_with("mixer.block0.") {
                block_names.push(name.clone());
                let t = if name.contains("scale") {
                    Tensor::randn(t.shape(), 1.0, &mut r)
                } else {
                    t.clone()
                };
                inputs.push(t);
            }
        }
        record(
            "mixer block",
            fd_max_rel_error(&inputs, usize::MAX, |t, v| {
                let p = Bindings::from_pairs(block_names.iter().cloned().zip(v[1..].iter().copied()));
                let y = mixer::block_forward(t, &p, &cfg, 0, v[0]).unwrap();
                weighted_mean(t, y, seed)
            }),
        );

        let cfg = ModelConfig {
            input_height: 8,
            input_width: 8,
            backbone_stage_channels: vec![8],
            backbone_blocks_per_stage: vec![1],
            mixer_depth: 1,
            projection_channels: 4,
            projection_map_dim: 2,
            num_classes: Some(3),
            ..ModelConfig::default()
        };
        let model = Model::<f64>::new(cfg, seed).unwrap();
        let names: Vec<String> = model.params().keys().cloned().collect();
        let params: Vec<Tensor<f64>> = model.params().values().cloned().collect();
        let batch = Tensor::randn(&[3, 3, 8, 8], 1.0, &mut r);
        record(
            "end-to-end",
            fd_max_rel_error(&params, 24, |t, v| {
                let p = Bindings::from_pairs(names.iter().cloned().zip(v.iter().copied()));
                let x = t.constant(batch.clone());
                let out = model.forward(t, &p, x, true, None).unwrap();
                t.cross_entropy(out.logits.unwrap(), &[0, 2, 1]).unwrap()
            }),
        );
    }
    let elapsed = start.elapsed();
    for (name, e) in &worst {
        let tol = if *name == "end-to-end" { 1e-3 } else { 1e-4 };
        ensure!(*e < tol, "{name}: max relative error {e:.2e} ≥ {tol:.0e}");
    }
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Ok(format!("{} ops x 5 seeds; {}", worst.len(), summary.join(", ")))
}

// ---------------------------------------------------------------------------
// 2. shapes

fn shape_fidelity() -> Outcome {
    let cfg = ModelConfig::default();
    ensure!(
        (cfg.input_height, cfg.input_width, cfg.feature_channels()) == (512, 128, 512),
        "default geometry changed"
    );
    ensure!(
        (cfg.projection_channels, cfg.projection_map_dim, cfg.mixer_depth) == (512, 4, 4),
        "default projection/mixer changed"
    );
    let model = Model::<f32>::new(cfg.clone(), 0).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let one = tape.constant(Tensor::randn(&[1, 3, 512, 128], 1.0, &mut rng(1)));
    let out = model.forward(&mut tape, &p, one, false, None).map_err(|e| e.to_string())?;
    ensure!(
        tape.shape(out.mixed) == [1, 512, 16, 4],
        "feature map {:?}",
        tape.shape(out.mixed)
    );
    ensure!(tape.shape(out.descriptor) == [1, 2048], "descriptor {:?}", tape.shape(out.descriptor));
    drop(tape);

    let images = Tensor::randn(&[100, 3, 512, 128], 1.0, &mut rng(2));
    let d = model.descriptors_chunked(&images, 10).map_err(|e| e.to_string())?;
    ensure!(d.shape() == [100, 2048], "descriptor batch {:?}", d.shape());
    let worst = (0..100)
        .map(|i| {
            let n: f64 = d.row(i).iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            (n - 1.0).abs()
        })
        .fold(0.0, f64::max);
    ensure!(worst <= 1e-5, "norm deviation {worst:e}");
    Ok(format!("16x4x512 feature map, 2048-d descriptor, max |norm-1| {worst:.1e} over 100 inputs"))
}

// ---------------------------------------------------------------------------
// 3. identity

fn block_identity() -> Outcome {
    let cfg = ModelConfig {
        input_height: 64,
        input_width: 32,
        backbone_stage_channels: vec![8, 16, 32],
        backbone_blocks_per_stage: vec![1, 1, 1],
        mixer_depth: 4,
        ..ModelConfig::default()
    };
    let deviation = |model: &Model<f32>| -> f32 {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::randn(&[3, 3, 64, 32], 1.0, &mut rng(5)));
        let out = model.forward(&mut tape, &p, x, false, None).unwrap();
        let a = tape.value(out.features).data();
        let b = tape.value(out.mixed).data();
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    };
    let mut model = Model::<f32>::new(cfg, 3).map_err(|e| e.to_string())?;
    let active = deviation(&model);
    ensure!(active > 0.0, "mixer with unit scales is already an identity");
    model.zero_mixer_scales();
    let zeroed = deviation(&model);
    ensure!(zeroed == 0.0, "max abs deviation {zeroed:e}");
    Ok(format!("4 blocks, max abs deviation 0 (was {active:.2} with unit scales)"))
}

// ---------------------------------------------------------------------------
// 4. metrics

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Definitional leave-one-out mAP and Top-1 over queries with a relevant item.
fn oracle_scores(set: &DescriptorSet, kind: LabelKind) -> (f64, f64, usize) {
    let recs = set.records();
    let label = |i: usize| match kind {
        LabelKind::Writer => &recs[i].writer_id,
        LabelKind::Page => &recs[i].page_id,
    };
    let (mut ap_sum, mut top1, mut valid) = (0.0, 0.0, 0);
    for q in 0..set.len() {
        let mut others: Vec<usize> = (0..set.len()).filter(|&j| j != q).collect();
        others.sort_by(|&a, &b| {
            let (sa, sb) = (cosine(set.row(q), set.row(a)), cosine(set.row(q), set.row(b)));
            sb.partial_cmp(&sa).unwrap().then_with(|| recs[a].fragment_id.cmp(&recs[b].fragment_id))
        });
        let relevant = others.iter().filter(|&&j| label(j) == label(q)).count();
        if relevant == 0 {
            continue;
        }
        valid += 1;
        let mut hits = 0;
        let mut precision_sum = 0.0;
        for (rank, &j) in others.iter().enumerate() {
            if label(j) == label(q) {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += precision_sum / relevant as f64;
        if label(others[0]) == label(q) {
            top1 += 1.0;
        }
    }
    if valid == 0 {
        return (0.0, 0.0, 0);
    }
    (ap_sum / valid as f64, top1 / valid as f64, valid)
}

fn metric_oracle() -> Outcome {
    let hand = average_precision(&[true, false, true]).ok_or("no AP for [1,0,1]")?;
    ensure!((hand - 5.0 / 6.0).abs() < 1e-12, "AP([1,0,1]) = {hand}");
    let mut r = rng(44);
    let mut worst: f64 = 0.0;
    for instance in 0..100 {
        let n = r.random_range(2..=30);
        let d = r.random_range(1..=6);
        let mut data: Vec<f32> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        // duplicate rows exercise the tie-break
        for _ in 0..n / 5 {
            let (a, b) = (r.random_range(0..n), r.random_range(0..n));
            let row: Vec<f32> = data[a * d..(a + 1) * d].to_vec();
            data[b * d..(b + 1) * d].copy_from_slice(&row);
        }
        let writers = r.random_range(1..=5);
        let records = (0..n)
            .map(|i| {
                let w = r.random_range(0..writers);
                let p = r.random_range(0..2);
                DescriptorRecord::new(format!("f{:03}", (i * 37) % 101), format!("w{w}"), format!("w{w}p{p}"))
            })
            .collect();
        let set = DescriptorSet::new(d, data, records).map_err(|e| e.to_string())?;
        for kind in LabelKind::ALL {
            let report = rank_leave_one_out(&set, kind).map_err(|e| e.to_string())?;
            let (map, top1, valid) = oracle_scores(&set, kind);
            ensure!(report.valid_queries == valid, "instance {instance} {kind}: valid {} vs {valid}", report.valid_queries);
            let dev = (report.mean_average_precision - map).abs().max((report.top1_accuracy - top1).abs());
            ensure!(dev <= 1e-12, "instance {instance} {kind}: deviation {dev:e}");
            worst = worst.max(dev);
        }
    }
    Ok(format!("100 instances x 2 label kinds, max deviation {worst:.1e}; AP([1,0,1]) = 5/6"))
}

// ---------------------------------------------------------------------------
// 5. whitening

fn whitening() -> Outcome {
    let (n, dim, d) = (500, 64, 16);
    let mut r = rng(55);
    let mixing = Tensor::<f64>::randn(&[dim, dim], 1.0, &mut r);
    let scales: Vec<f64> = (0..dim).map(|i| 3.0 / (1.0 + i as f64)).collect();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let z: Vec<f64> = (0..dim).map(|i| Tensor::<f64>::randn(&[1], scales[i], &mut r).item()).collect();
        for j in 0..dim {
            let v: f64 = (0..dim).map(|i| z[i] * mixing.data()[i * dim + j]).sum::<f64>() + 0.5;
            data.push(v as f32);
        }
    }
    let records = (0..n).map(|i| DescriptorRecord::new(format!("f{i:03}"), "w", "p")).collect();
    let set = DescriptorSet::new(dim, data, records).map_err(|e| e.to_string())?;
    let t = fit_whiten(&set, d, WHITEN_EPS).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| t.project(set.row(i)).unwrap()).collect();
    let mut worst: f64 = 0.0;
    for c in 0..d {
        let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        worst = worst.max((var - 1.0).abs());
    }
    ensure!(worst <= 1e-2, "component variance off by {worst:e}");
    Ok(format!("N=500 D=64 d=16, max |var-1| {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 6. Sauvola

fn naive_sauvola(img: &RasterImage, window: usize, k: f64, r: f64) -> Vec<u8> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let half = (window / 2) as i64;
    let n = (window * window) as u64;
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut s2) = (0u64, 0u64);
            for wy in y - half..=y + half {
                for wx in x - half..=x + half {
                    let v = img.get(wx.clamp(0, w - 1) as usize, wy.clamp(0, h - 1) as usize, 0) as u64;
                    s += v;
                    s2 += v * v;
                }
            }
            let nf = n as f64;
            let mean = s as f64 / nf;
            let std = ((n as u128 * s2 as u128 - s as u128 * s as u128) as f64 / (nf * nf)).sqrt();
            let threshold = mean * (1.0 + k * (std / r - 1.0));
            let px = img.get(x as usize, y as usize, 0) as f64;
            out.push(if px < threshold { 0 } else { 255 });
        }
    }
    out
}

fn sauvola() -> Outcome {
    let mut r = rng(66);
    let mut compared = 0;
    for i in 0..50 {
        let mut data: Vec<u8> = (0..32 * 32).map(|_| r.random_range(120..=255)).collect();
        for _ in 0..r.random_range(1..6) {
            let (y, x0, len) = (r.random_range(0..32), r.random_range(0..24), r.random_range(3..9));
            for x in x0..x0 + len {
                data[y * 32 + x] = r.random_range(0..80);
            }
        }
        let img = RasterImage::gray(32, 32, data).map_err(|e| e.to_string())?;
        for window in [7, 15] {
            for k in [0.2, 0.5] {
                let p = SauvolaParams { window, k, r: 128.0 };
                let fast = sauvola_binarize(&img, &p).map_err(|e| e.to_string())?;
                let slow = naive_sauvola(&img, window, k, 128.0);
                ensure!(fast.data() == slow.as_slice(), "image {i} window {window} k {k} differs");
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} binarizations bit-identical to the windowed oracle"))
}

// ---------------------------------------------------------------------------
// 7. triplet

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut sq = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        sq += d * d;
    }
    sq.sqrt()
}

fn exhaustive_triplet(x: &[f64], dim: usize, labels: &[usize], margin: f64) -> Option<f64> {
    let row = |i: usize| &x[i * dim..(i + 1) * dim];
    let (mut total, mut anchors) = (0.0, 0);
    for a in 0..labels.len() {
        let mut hardest: Option<f64> = None;
        for p in 0..labels.len() {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..labels.len() {
                if labels[q] == labels[a] {
                    continue;
                }
                let v = euclid(row(a), row(p)) - euclid(row(a), row(q)) + margin;
                hardest = Some(hardest.map_or(v, |h: f64| h.max(v)));
            }
        }
        if let Some(h) = hardest {
            total += h.max(0.0);
            anchors += 1;
        }
    }
    (anchors > 0).then(|| total / anchors as f64)
}

fn triplet() -> Outcome {
    let margin = TrainConfig::default().triplet_margin;
    ensure!(margin == 0.15, "default margin {margin}");
    let mut r = rng(77);
    let mut batches = 0;
    while batches < 100 {
        let n = r.random_range(4..=16);
        let dim = r.random_range(2..=8);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let mut x: Vec<f64> = (0..n * dim).map(|_| r.random_range(-1.0..1.0)).collect();
        for row in x.chunks_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let Some(expected) = exhaustive_triplet(&x, dim, &labels, margin) else {
            continue;
        };
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::new(vec![n, dim], x).unwrap());
        let loss = batch_hard_triplet_loss(&mut tape, d, &labels, margin).map_err(|e| e.to_string())?;
        let got = tape.value(loss).item();
        ensure!(got == expected, "batch {batches}: {got} vs oracle {expected}");
        batches += 1;
    }
    Ok(format!("{batches} random batches equal the exhaustive oracle exactly; margin 0.15"))
}

// ---------------------------------------------------------------------------
// 8. synthetic end-to-end

struct RunResult {
    accuracy: f64,
    map: f64,
}

fn synthetic_run(seed: u64, full: bool) -> Result<RunResult, String> {
    let corpus = generate_synthetic_corpus(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let pre = PreprocessConfig {
        height: 32,
        width: 128,
        ..PreprocessConfig::default()
    };
    let images: Vec<RasterImage> = corpus.iter().map(|f| f.image.clone()).collect();
    let x = images_to_tensor::<f32>(&images, &pre).map_err(|e| e.to_string())?;
    let index = LabelIndex::new(corpus.iter().map(|f| f.record.writer_id.as_str()));
    let labels = corpus.iter().map(|f| index.get(&f.record.writer_id).unwrap()).collect();
    let set = LabeledImages::new(x.clone(), labels).map_err(|e| e.to_string())?;
    let model_cfg = ModelConfig {
        input_height: 32,
        input_width: 128,
        backbone_stage_channels: vec![16, 32, 64],
        backbone_blocks_per_stage: vec![1, 1, 1],
        mixer_depth: if full { 2 } else { 0 },
        aggregation: if full { Aggregation::Projection } else { Aggregation::AvgPool },
        projection_channels: 32,
        projection_map_dim: 4,
        num_classes: Some(index.len()),
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 20,
        lr: 2e-3,
        batch_size: 16,
        loss_kind: LossKind::CrossEntropy,
        seed,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(Model::new(model_cfg, seed).map_err(|e| e.to_string())?);
    Trainer::new(cfg)
        .and_then(|t| t.run(&mut state, &set, None, None, &mut |_| Ok(())))
        .map_err(|e| e.to_string())?;
    let acc = accuracy(&state.model, &set, 32).map_err(|e| e.to_string())?;
    let opts = EvalOptions {
        whiten_dim: None,
        label_kinds: vec![LabelKind::Writer],
        ..EvalOptions::default()
    };
    let records = corpus.iter().map(|f| f.record.labels()).collect();
    let eval = evaluate(&state.model, &x, records, &opts, 32).map_err(|e| e.to_string())?;
    Ok(RunResult {
        accuracy: acc,
        map: eval.reports[0].mean_average_precision,
    })
}

fn synthetic_end_to_end() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let full = synthetic_run(seed, true)?;
        let ablated = synthetic_run(seed, false)?;
        ensure!(full.accuracy >= 0.95, "seed {seed}: train accuracy {:.3}", full.accuracy);
        ensure!(full.map >= 0.90, "seed {seed}: writer mAP {:.4}", full.map);
        if full.map >= ablated.map {
            wins += 1;
        }
        lines.push(format!("{:.3}/{:.3}", full.map, ablated.map));
    }
    let elapsed = start.elapsed();
    ensure!(wins >= 4, "full model ahead in only {wins}/5 seeds: {}", lines.join(" "));
    ensure!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    Ok(format!(
        "acc >= 0.95 and mAP >= 0.90 on every seed; full >= ablation in {wins}/5 (mAP full/ablation {})",
        lines.join(" ")
    ))
}

// ---------------------------------------------------------------------------
// 9. scheduler

fn scheduler() -> Outcome {
    let cfg = TrainConfig::default();
    for steps_per_epoch in [1, 17, 51] {
        let s = Schedule::new(&cfg, steps_per_epoch);
        let warm_end = cfg.warmup_epochs * steps_per_epoch - 1;
        let last = cfg.epochs * steps_per_epoch - 1;
        ensure!(s.at(warm_end) == 1e-4, "warmup end {}", s.at(warm_end));
        ensure!(s.at(last) == 1e-5, "last step {}", s.at(last));
        ensure!(lr_at(last, last + 1, &cfg) == 1e-5, "lr_at last step");
        ensure!(lr_at(warm_end, last + 1, &cfg) == 1e-4, "lr_at warmup end");
    }
    Ok("warmup end = 1e-4 and final step = 1e-5 exactly".into())
}

// ---------------------------------------------------------------------------
// 10. determinism

fn fragmix(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fragmix"))
        .args(args)
        .env_remove("FRAGMIX_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "fragmix {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn pipeline(manifest: &Path, config: &Path, dir: &Path) -> Result<(), String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (train, ex, ev) = (dir.join("train"), dir.join("extract"), dir.join("evaluate"));
    let common = ["--seed", "7", "--threads", "1"];
    let ckpt = s(&train.join("checkpoint_best.ckpt"));
    let descriptors = s(&ex.join("descriptors.fmd"));
    fragmix(&[&["train", "--config", &s(config), "--manifest", &s(manifest), "--epochs", "4", "--out-dir", &s(&train)][..], &common].concat())?;
    fragmix(&[&["extract", "--checkpoint", &ckpt, "--manifest", &s(manifest), "--out-dir", &s(&ex)][..], &common].concat())?;
    fragmix(&[&["evaluate", "--descriptors", &descriptors, "--out-dir", &s(&ev)][..], &common].concat())?;
    Ok(())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = generate_synthetic_corpus(&SynthConfig {
        seed: 9,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let manifest = write_corpus(&tmp.path().join("corpus"), &corpus, ImageFormat::Png).map_err(|e| e.to_string())?;
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic-tiny.conf");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&manifest, &config, &a)?;
    pipeline(&manifest, &config, &b)?;
    let files = [
        "train/checkpoint_best.ckpt",
        "extract/descriptors.fmd",
        "evaluate/report_writer.txt",
        "evaluate/report_page.txt",
        "evaluate/retrieval_table.txt",
    ];
    for f in files {
        let (x, y) = (fs::read(a.join(f)), fs::read(b.join(f)));
        let (x, y) = (x.map_err(|e| format!("{f}: {e}"))?, y.map_err(|e| format!("{f}: {e}"))?);
        ensure!(x == y, "{f} differs between runs");
    }
    Ok(format!("train+extract+evaluate twice with --threads 1: {} files byte-identical", files.len()))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_correctness),
        ("shape fidelity", shape_fidelity),
        ("mixer block identity", block_identity),
        ("metric oracle equivalence", metric_oracle),
        ("whitening", whitening),
        ("Sauvola integral images", sauvola),
        ("batch-hard triplet oracle", triplet),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("scheduler boundaries", scheduler),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string() || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                println!("FAIL {n:>2} {name} ({secs:.1}s): {why}");
                failed.push(n);
            }
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
