//! Generated stand-in dataset with one visually distinct texture per class.
//!
//! Class `k` is a sinusoidal grating at orientation `45° · (k mod 4)`, with
//! a coarse frequency for the first four classes and a fine one for the
//! rest, plus a class tint, random phase, contrast jitter and pixel noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, ManifestEntry, Split};
use crate::{ClassLabel, Result, IMAGE_LEN, IMAGE_SIZE, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train: 800,
            val: 100,
            test: 100,
            noise_std: 0.06,
            seed: 0,
        }
    }
}

const TINTS: [[f64; 3]; NUM_CLASSES] = [
    [1.0, 0.85, 0.85],
    [0.85, 1.0, 0.85],
    [0.85, 0.85, 1.0],
    [1.0, 1.0, 0.8],
    [0.8, 1.0, 1.0],
    [1.0, 0.8, 1.0],
    [0.9, 0.9, 0.9],
    [1.0, 0.95, 0.85],
];

/// One `224×224×3` example of `class`.
pub fn render_example<R: Rng + ?Sized>(class: ClassLabel, noise_std: f64, rng: &mut R) -> Vec<f32> {
    let k = class.index();
    let theta = (k % 4) as f64 * PI / 4.0;
    let cycles = if k < 4 { 6.0 } else { 14.0 };
    let phase = rng.random_range(0.0..2.0 * PI);
    let contrast = rng.random_range(0.25..0.4);
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    let (c, s) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(IMAGE_LEN);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let u = (x as f64 * c + y as f64 * s) / IMAGE_SIZE as f64;
            let base = 0.5 + contrast * (2.0 * PI * cycles * u + phase).sin();
            for tint in TINTS[k] {
                let v = base * tint + noise.sample(rng);
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

fn split_counts(config: &SyntheticConfig) -> [(Split, usize); 3] {
    [(Split::Train, config.train), (Split::Val, config.val), (Split::Test, config.test)]
}

/// Writes PNGs under `root/<CLASS>/` and returns a manifest with splits
/// already assigned. Within each split classes are dealt round-robin, so
/// per-class counts differ by at most one.
pub fn generate_dataset(root: impl AsRef<Path>, config: &SyntheticConfig) -> Result<DatasetManifest> {
    let root = root.as_ref();
    for class in ClassLabel::ALL {
        fs::create_dir_all(root.join(class.name()))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::new();
    for (split, count) in split_counts(config) {
        for i in 0..count {
            let class = ClassLabel::ALL[i % NUM_CLASSES];
            let pixels = render_example(class, config.noise_std, &mut rng);
            let bytes: Vec<u8> = pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
            let img = RgbImage::from_fn(IMAGE_SIZE as u32, IMAGE_SIZE as u32, |x, y| {
                let o = (y as usize * IMAGE_SIZE + x as usize) * 3;
                Rgb([bytes[o], bytes[o + 1], bytes[o + 2]])
            });
            let path = root.join(class.name()).join(format!("{split}_{i:05}.png"));
            img.save(&path).map_err(|e| crate::Error::Io(std::io::Error::other(e.to_string())))?;
            entries.push(ManifestEntry {
                path,
                class,
                split: Some(split),
            });
        }
    }
    let mut manifest = DatasetManifest::from_entries(entries);
    manifest.seed = config.seed;
    Ok(manifest)
}
