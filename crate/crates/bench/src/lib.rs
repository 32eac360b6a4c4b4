//! Shared inputs for the benchmarks.

use mgrq_core::harness::synthetic;
use mgrq_core::harness::Split;
use mgrq_core::vit::{quantize_model, QuantizeOptions};
use mgrq_core::{ModelConfig, Tensor, ViTModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// A randomly initialized default-size model, its calibrated 4-bit copy,
/// and `images` synthetic calibration images.
pub fn toy_pair(images: usize) -> (ViTModel, ViTModel, Tensor) {
    let fp = ViTModel::init(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let calib = synthetic(images, Split::Calibration, 2).unwrap().all().unwrap();
    let q = quantize_model(&fp, &[calib.clone()], QuantizeOptions::default()).unwrap();
    (fp, q, calib)
}
