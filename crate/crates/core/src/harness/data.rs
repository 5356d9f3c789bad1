//! Seeded synthetic image classification.
//!
//! Each class owns a colour and a stripe pattern. A sample is a square
//! patch of its class on a grey background, placed at a random position with
//! a random amplitude, optionally with Gaussian pixel noise. At zero noise
//! the per-channel means (minus the background) separate the classes
//! linearly.
//!
//! The background is grey rather than black: an all-zero patch embeds to a
//! zero-variance token, where layernorm's slope is `1/√eps` and stacked
//! norms make plain gradient descent diverge.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: f64 = 0.5;

const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 0.5, 0.0],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub classes: usize,
    pub size: usize,
    pub samples_per_class: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            classes: 4,
            size: 64,
            samples_per_class: 8,
            noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `(N, S, S, 3)`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if !(2..=PALETTE.len()).contains(&self.classes) {
            return Err(Error::Config(format!(
                "class count must be 2..=8, got {}",
                self.classes
            )));
        }
        if self.size < 8 || self.samples_per_class == 0 || self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::Config("size ≥ 8, samples ≥ 1 and noise ≥ 0 required".into()));
        }
        Ok(())
    }

    /// Draws the dataset; samples are interleaved by class.
    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let s = self.size;
        let side = s / 4;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("finite std");
        let n = self.classes * self.samples_per_class;
        let mut data = vec![BACKGROUND; n * s * s * 3];
        let mut labels = Vec::with_capacity(n);
        for sample in 0..n {
            let class = sample % self.classes;
            labels.push(class);
            let top = rng.random_range(0..=s - side);
            let left = rng.random_range(0..=s - side);
            let amp = rng.random_range(0.8..1.2);
            let img = &mut data[sample * s * s * 3..][..s * s * 3];
            for i in top..top + side {
                for j in left..left + side {
                    let (di, dj) = (i - top, j - left);
                    let on = match class % 4 {
                        0 => true,
                        1 => (di / 2) % 2 == 0,
                        2 => (dj / 2) % 2 == 0,
                        _ => (di / 2 + dj / 2) % 2 == 0,
                    };
                    if on {
                        for (ch, col) in PALETTE[class].iter().enumerate() {
                            img[(i * s + j) * 3 + ch] = amp * col;
                        }
                    }
                }
            }
            if self.noise > 0.0 {
                for v in img.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
        }
        Ok(Dataset {
            images: Tensor::new(vec![n, s, s, 3], data)?,
            labels,
        })
    }
}

/// Nearest-neighbour upscaling of `(N, S, S, C)` images by an integer factor.
pub fn upscale_nearest(images: &Tensor, factor: usize) -> Result<Tensor> {
    let s = images.shape();
    let [n, h, w, c] = *s else {
        return Err(Error::invalid("upscale", format!("expected (N, H, W, C), got {s:?}")));
    };
    if factor == 0 {
        return Err(Error::Config("upscale factor must be positive".into()));
    }
    let (ho, wo) = (h * factor, w * factor);
    let src = images.data();
    let mut out = Vec::with_capacity(n * ho * wo * c);
    for b in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let at = ((b * h + i / factor) * w + j / factor) * c;
                out.extend_from_slice(&src[at..at + c]);
            }
        }
    }
    Tensor::new(vec![n, ho, wo, c], out)
}
