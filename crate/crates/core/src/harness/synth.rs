//! Bundled synthetic texture task.
//!
//! Each 3×32×32 image is a 4×4 grid of 8×8 tiles, every tile holding a
//! sinusoidal grating. One tile is tinted red; the orientation of its
//! grating, in steps of 18°, is the class (ten classes). All other tiles
//! carry gratings at random orientations, so the model has to find the
//! marked tile before it can read the label. Every image also gets a random
//! colour cast larger than the tint, so the marked tile only stands out
//! relative to the rest of its own image.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::harness::dataset::{Dataset, Split};

pub const SYNTH_CLASSES: usize = 10;
pub const SYNTH_SIZE: usize = 32;
pub const SYNTH_CHANNELS: usize = 3;
pub const TRAIN_RECORDS: usize = 5000;
pub const TEST_RECORDS: usize = 1000;

/// Orientation jitter, as a fraction of the spacing between classes.
const JITTER: f64 = 0.4;
/// Side of one tile; every tile holds its own grating.
const TILE: usize = 8;
/// Cycles per tile, drawn per tile.
const FREQUENCY: (f64, f64) = (1.2, 2.0);
const CONTRAST: (f64, f64) = (0.2, 0.35);
/// Red shift that marks the informative tile.
const MARK: f64 = 0.04;
const NOISE_STD: f64 = 0.05;
/// Largest per-image, per-channel colour cast.
const CAST: f64 = 0.25;

fn render(rng: &mut impl Rng, label: usize, out: &mut Vec<u8>) {
    let spacing = PI / SYNTH_CLASSES as f64;
    let tiles = SYNTH_SIZE / TILE;
    let marked = rng.gen_range(0..tiles * tiles);
    let gratings: Vec<(f64, f64, f64, f64)> = (0..tiles * tiles)
        .map(|t| {
            let theta = if t == marked {
                (label as f64 + rng.gen_range(-JITTER..JITTER)) * spacing
            } else {
                rng.gen_range(0.0..PI)
            };
            let k = 2.0 * PI * rng.gen_range(FREQUENCY.0..FREQUENCY.1) / TILE as f64;
            (theta, k, rng.gen_range(0.0..2.0 * PI), rng.gen_range(CONTRAST.0..CONTRAST.1))
        })
        .collect();
    let cast: [f64; SYNTH_CHANNELS] = std::array::from_fn(|_| rng.gen_range(-CAST..CAST));
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    for ch in 0..SYNTH_CHANNELS {
        for y in 0..SYNTH_SIZE {
            for x in 0..SYNTH_SIZE {
                let t = (y / TILE) * tiles + x / TILE;
                let (theta, k, phase, contrast) = gratings[t];
                let u = x as f64 * theta.cos() + y as f64 * theta.sin();
                let mut v = 0.5 + cast[ch] + contrast * (k * u + phase).sin() + noise.sample(rng);
                if t == marked {
                    v += if ch == 0 { MARK } else { -MARK / 2.0 };
                }
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
}

/// `count` seeded records with uniformly drawn labels.
pub fn synthetic(count: usize, split: Split, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count * SYNTH_CHANNELS * SYNTH_SIZE * SYNTH_SIZE);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.gen_range(0..SYNTH_CLASSES);
        render(&mut rng, label, &mut images);
        labels.push(label as u8);
    }
    Dataset::new(
        [SYNTH_CHANNELS, SYNTH_SIZE, SYNTH_SIZE],
        SYNTH_CLASSES,
        split,
        images,
        labels,
    )
}

/// The bundled train and test splits.
pub fn bundled() -> Result<(Dataset, Dataset)> {
    Ok((
        synthetic(TRAIN_RECORDS, Split::Train, 0x7261_696e)?,
        synthetic(TEST_RECORDS, Split::Test, 0x7465_7374)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_well_formed() {
        let a = synthetic(20, Split::Train, 3).unwrap();
        assert_eq!(a, synthetic(20, Split::Train, 3).unwrap());
        assert_ne!(a, synthetic(20, Split::Train, 4).unwrap());
        assert_eq!(a.image_shape(), [3, 32, 32]);
        assert!(a.labels().iter().all(|&l| (l as usize) < SYNTH_CLASSES));
    }
}
