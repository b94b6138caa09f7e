//! Deterministic synthetic shape images for the toy CNN.
//!
//! Four classes on a 16×16 grayscale canvas: horizontal bar, vertical bar,
//! cross and blob. The `shifted` split renders the same shapes over a raised,
//! noisier background with distractor strokes and speckle, a stand-in for
//! moving to a new deployment domain.
//!
//! Sample `i` of `(seed, split)` depends only on those three values, so
//! datasets of different lengths share their common prefix.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 16;
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Shifted,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Shifted => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Shifted => "shifted",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "shifted" => Ok(Split::Shifted),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    /// Row-major `16×16` pixels in `[0, 1]`.
    pub image: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl SyntheticDataset {
    pub fn generate(seed: u64, split: Split, count: usize) -> Self {
        SyntheticDataset {
            seed,
            split,
            samples: (0..count).map(|i| sample(seed, split, i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    mix(mix(mix(seed) ^ split.tag()) ^ index as u64)
}

/// Sample `index` of the `(seed, split)` stream. Labels cycle through the
/// classes so every prefix of length `4m` is exactly balanced.
pub fn sample(seed: u64, split: Split, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, split, index));
    let label = index % NUM_CLASSES;
    let shifted = split == Split::Shifted;
    let mut canvas = Canvas::new();

    let contrast = if shifted {
        rng.random_range(0.55..0.9)
    } else {
        rng.random_range(0.7..1.0)
    };
    match label {
        0 => horizontal_bar(&mut canvas, &mut rng, contrast),
        1 => vertical_bar(&mut canvas, &mut rng, contrast),
        2 => cross(&mut canvas, &mut rng, contrast),
        _ => blob(&mut canvas, &mut rng, contrast),
    }

    let (offset, noise_std) = if shifted {
        (rng.random_range(0.15..0.35), 0.1)
    } else {
        (0.0, 0.05)
    };
    if shifted {
        for _ in 0..rng.random_range(0..=1) {
            distractor_stroke(&mut canvas, &mut rng);
        }
        for _ in 0..rng.random_range(3..8) {
            let (i, j) = (rng.random_range(0..IMAGE_SIZE), rng.random_range(0..IMAGE_SIZE));
            canvas.add(i, j, rng.random_range(0.3..0.7));
        }
    }
    let noise = Normal::new(0.0, noise_std).expect("valid std");
    let image = canvas
        .px
        .iter()
        .map(|v| (v + offset + noise.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    Sample { index, image, label }
}

struct Canvas {
    px: Vec<f64>,
}

impl Canvas {
    fn new() -> Self {
        Canvas {
            px: vec![0.0; IMAGE_SIZE * IMAGE_SIZE],
        }
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let p = &mut self.px[i * IMAGE_SIZE + j];
        *p = p.max(v);
    }

    fn rect(&mut self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, v: f64) {
        for i in rows {
            for j in cols.clone() {
                self.add(i, j, v);
            }
        }
    }
}

fn bar_extent<R: Rng>(rng: &mut R) -> (usize, usize, usize, usize) {
    let thickness = rng.random_range(2..=3);
    let pos = rng.random_range(2..IMAGE_SIZE - 2 - thickness);
    let start = rng.random_range(1..4);
    let end = rng.random_range(IMAGE_SIZE - 3..IMAGE_SIZE);
    (pos, thickness, start, end)
}

fn horizontal_bar<R: Rng>(c: &mut Canvas, rng: &mut R, v: f64) {
    let (pos, t, start, end) = bar_extent(rng);
    c.rect(pos..pos + t, start..end, v);
}

fn vertical_bar<R: Rng>(c: &mut Canvas, rng: &mut R, v: f64) {
    let (pos, t, start, end) = bar_extent(rng);
    c.rect(start..end, pos..pos + t, v);
}

fn cross<R: Rng>(c: &mut Canvas, rng: &mut R, v: f64) {
    let ci: usize = rng.random_range(5..11);
    let cj: usize = rng.random_range(5..11);
    let arm = rng.random_range(4..6);
    c.rect(
        ci - 1..ci + 1,
        cj.saturating_sub(arm)..(cj + arm).min(IMAGE_SIZE),
        v,
    );
    c.rect(
        ci.saturating_sub(arm)..(ci + arm).min(IMAGE_SIZE),
        cj - 1..cj + 1,
        v,
    );
}

fn blob<R: Rng>(c: &mut Canvas, rng: &mut R, v: f64) {
    let ci = rng.random_range(4.0..12.0);
    let cj = rng.random_range(4.0..12.0);
    let sigma: f64 = rng.random_range(1.5..2.5);
    for i in 0..IMAGE_SIZE {
        for j in 0..IMAGE_SIZE {
            let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
            c.add(i, j, v * (-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
}

/// Short one-pixel line in a random direction.
fn distractor_stroke<R: Rng>(c: &mut Canvas, rng: &mut R) {
    let len = rng.random_range(4..8);
    let v = rng.random_range(0.35..0.7);
    let i0 = rng.random_range(0..IMAGE_SIZE);
    let j0 = rng.random_range(0..IMAGE_SIZE);
    let (di, dj): (isize, isize) = match rng.random_range(0..4) {
        0 => (0, 1),
        1 => (1, 0),
        2 => (1, 1),
        _ => (1, -1),
    };
    for s in 0..len as isize {
        let i = i0 as isize + di * s;
        let j = j0 as isize + dj * s;
        if (0..IMAGE_SIZE as isize).contains(&i) && (0..IMAGE_SIZE as isize).contains(&j) {
            c.add(i as usize, j as usize, v);
        }
    }
}
