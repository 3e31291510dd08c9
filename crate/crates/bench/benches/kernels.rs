use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fragmix_bench::{gallery, page_image, random_tensor};
use fragmix_core::numerics::kernels::gemm;
use fragmix_core::numerics::ConvGeometry;
use fragmix_core::preprocessing::{sauvola_binarize, SauvolaParams};
use fragmix_core::retrieval::rank_leave_one_out;
use fragmix_core::{LabelKind, Model, ModelConfig, Tape};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for n in [64, 256, 512] {
        let a = random_tensor(&[n, n], 1);
        let b = random_tensor(&[n, n], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| gemm(n, n, n, black_box(a.data()), black_box(b.data())))
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let x = random_tensor(&[4, 64, 64, 16], 3);
    let w = random_tensor(&[64, 64, 3, 3], 4);
    let dw = random_tensor(&[64, 1, 7, 7], 5);
    c.bench_function("conv2d 3x3 64->64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
            tape.conv2d(xv, wv, ConvGeometry::new(1, 1, 1)).unwrap()
        })
    });
    c.bench_function("conv2d depthwise 7x7", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.constant(dw.clone()));
            tape.conv2d(xv, wv, ConvGeometry::new(1, 3, 64)).unwrap()
        })
    });
}

fn sauvola(c: &mut Criterion) {
    let img = page_image(1024, 1024, 6);
    let p = SauvolaParams::default();
    c.bench_function("sauvola 1024x1024", |b| b.iter(|| sauvola_binarize(black_box(&img), &p).unwrap()));
}

fn ranking(c: &mut Criterion) {
    let set = gallery(50, 20, 256, 7);
    c.bench_function("leave-one-out ranking 1000x256", |b| {
        b.iter(|| rank_leave_one_out(black_box(&set), LabelKind::Writer).unwrap())
    });
}

fn descriptors(c: &mut Criterion) {
    let cfg = ModelConfig {
        input_height: 128,
        input_width: 32,
        backbone_stage_channels: vec![32, 64, 128],
        backbone_blocks_per_stage: vec![1, 1, 1],
        mixer_depth: 2,
        projection_channels: 64,
        projection_map_dim: 4,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::new(cfg, 0).unwrap();
    let images = random_tensor(&[8, 3, 128, 32], 8);
    c.bench_function("descriptors 8x128x32", |b| b.iter(|| model.descriptors_chunked(black_box(&images), 8).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = matmul, conv, sauvola, ranking, descriptors
}
criterion_main!(benches);
