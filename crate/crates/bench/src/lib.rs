//! Input builders shared by the benchmarks.

use fragmix_core::retrieval::DescriptorRecord;
use fragmix_core::preprocessing::RasterImage;
use fragmix_core::{DescriptorSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

pub fn page_image(width: usize, height: usize, seed: u64) -> RasterImage {
    let mut r = rng(seed);
    let data = (0..width * height).map(|_| r.random_range(0..=255u8)).collect();
    RasterImage::gray(width, height, data).expect("valid image")
}

/// Unit-norm descriptors for `writers` writers with `per_writer` fragments each.
pub fn gallery(writers: usize, per_writer: usize, dim: usize, seed: u64) -> DescriptorSet {
    let mut r = rng(seed);
    let n = writers * per_writer;
    let mut data: Vec<f32> = (0..n * dim).map(|_| r.random_range(-1.0..1.0)).collect();
    for row in data.chunks_mut(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let records = (0..n)
        .map(|i| {
            let w = i / per_writer;
            DescriptorRecord::new(format!("f{i:05}"), format!("w{w}"), format!("w{w}p{}", i % 2))
        })
        .collect();
    DescriptorSet::new(dim, data, records).expect("valid gallery")
}
