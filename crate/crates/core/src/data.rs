//! Synthetic digit-glyph dataset and its binary file format.
//!
//! File layout (little-endian): `"DND1"`, `u32 count`, `u32 h`, `u32 w`,
//! `u32 classes`, then per sample a `u8` label followed by `h·w` `f32`
//! pixels. Pixels are generated at `f32` precision so that the `f64`
//! tensors in memory round-trip through the file bit for bit.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{seeded, Labeled, SeededRng};
use crate::tensor::Tensor;

pub const SIDE: usize = 12;
pub const NUM_CLASSES: usize = 10;
pub const INPUT_SHAPE: [usize; 3] = [1, SIDE, SIDE];
pub const DATASET_MAGIC: &[u8; 4] = b"DND1";

const GLYPH_FIXTURE: &str = include_str!("../fixtures/glyphs.txt");

/// The ten 12×12 templates, row-major, values in {0, 1}.
pub fn glyph_templates() -> Vec<Vec<f64>> {
    let rows: Vec<&str> = GLYPH_FIXTURE
        .lines()
        .filter(|l| !l.starts_with("# ") && !l.trim().is_empty())
        .collect();
    assert_eq!(rows.len(), NUM_CLASSES * SIDE, "glyph fixture is malformed");
    rows.chunks(SIDE)
        .map(|g| {
            g.iter()
                .flat_map(|r| r.chars().map(|c| if c == '#' { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Bernoulli pixel-flip probability.
    pub noise_p: f64,
    /// Maximum absolute integer shift per axis.
    pub max_shift: usize,
    /// Multiply each image by `U(0.8, 1.0)`.
    pub jitter: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 4000,
            n_test: 1000,
            noise_p: 0.05,
            max_shift: 2,
            jitter: true,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 100 || self.n_test == 0 {
            return Err(Error::Validation(format!(
                "need n_train >= 100 and n_test >= 1 (got {} / {})",
                self.n_train, self.n_test
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_p) {
            return Err(Error::Validation(format!(
                "noise_p {} outside [0, 1]",
                self.noise_p
            )));
        }
        if self.max_shift > 4 {
            return Err(Error::Validation("max_shift must be <= 4".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labeled(&self) -> Labeled<'_> {
        Labeled::new(&self.images, &self.labels)
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Labeled<'_> {
        let n = n.min(self.len());
        Labeled::new(&self.images[..n], &self.labels[..n])
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Draws `n` augmented glyphs with round-robin labels in shuffled order.
    pub fn generate(n: usize, split: Split, cfg: &DatasetConfig, seed: u64) -> Self {
        let templates = glyph_templates();
        let mut rng = seeded(seed);
        let mut labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
        labels.shuffle(&mut rng);
        let images = labels
            .iter()
            .map(|&l| augment(&templates[l], cfg, &mut rng))
            .collect();
        Dataset {
            images,
            labels,
            split,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.len() * (1 + SIDE * SIDE * 4));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [self.len(), SIDE, SIDE, NUM_CLASSES] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (img, &l) in self.images.iter().zip(&self.labels) {
            out.push(l as u8);
            for &p in img.data() {
                out.extend_from_slice(&(p as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], split: Split) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("dataset: {m}"));
        if bytes.len() < 20 || &bytes[..4] != DATASET_MAGIC {
            return Err(bad("bad magic or short header"));
        }
        let word =
            |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (count, h, w, classes) = (word(0), word(1), word(2), word(3));
        let rec = 1 + h * w * 4;
        if bytes.len() != 20 + count * rec {
            return Err(bad("length does not match header"));
        }
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for chunk in bytes[20..].chunks_exact(rec) {
            let label = chunk[0] as usize;
            if label >= classes {
                return Err(bad("label out of range"));
            }
            let px = chunk[1..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            images.push(Tensor::new(vec![1, h, w], px)?);
            labels.push(label);
        }
        Ok(Dataset {
            images,
            labels,
            split,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Dataset::decode(&bytes, split)
    }
}

fn augment(template: &[f64], cfg: &DatasetConfig, rng: &mut SeededRng) -> Tensor {
    let s = cfg.max_shift as i64;
    let (dy, dx) = if s > 0 {
        (rng.random_range(-s..=s), rng.random_range(-s..=s))
    } else {
        (0, 0)
    };
    let scale = if cfg.jitter {
        rng.random_range(0.8..1.0)
    } else {
        1.0
    };
    let mut px = vec![0.0; SIDE * SIDE];
    for y in 0..SIDE as i64 {
        for x in 0..SIDE as i64 {
            let (sy, sx) = (y - dy, x - dx);
            let v = if (0..SIDE as i64).contains(&sy) && (0..SIDE as i64).contains(&sx) {
                template[(sy as usize) * SIDE + sx as usize]
            } else {
                0.0
            };
            px[(y as usize) * SIDE + x as usize] = v * scale;
        }
    }
    if cfg.noise_p > 0.0 {
        for v in px.iter_mut() {
            if rng.random_bool(cfg.noise_p) {
                *v = 1.0 - *v;
            }
        }
    }
    for v in px.iter_mut() {
        *v = *v as f32 as f64;
    }
    Tensor::new(INPUT_SHAPE.to_vec(), px).expect("fixed shape")
}

/// Train and test splits drawn from disjoint seed streams.
pub fn gen_synthetic_dataset(cfg: &DatasetConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let train = Dataset::generate(cfg.n_train, Split::Train, cfg, derive_seed(seed, "train"));
    let test = Dataset::generate(cfg.n_test, Split::Test, cfg, derive_seed(seed, "test"));
    Ok((train, test))
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a label into an independent stream seed.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    // FNV-1a over the label, then SplitMix64 over the combination
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(root ^ splitmix64(h))
}
