//! Training and evaluation images.
//!
//! The built-in source draws procedural grayscale textures: a smooth
//! gradient background overlaid with Gaussian blobs, an oriented grating and
//! a few flat rectangles. Images from a directory of PGM/PPM files can be
//! mixed in; colour files are reduced to luma and random patches are cropped.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::read_image;
use crate::metrics::luma;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One procedural `[1, size, size]` texture with values in `[0, 1]`.
pub fn synthetic_image(rng: &mut Rng, size: usize) -> Tensor<f32> {
    let s = size as f64;
    let mut img = vec![0.0f64; size * size];

    let (g0, gx, gy) = (rng.range(0.2, 0.8), rng.range(-0.4, 0.4), rng.range(-0.4, 0.4));
    for (i, v) in img.iter_mut().enumerate() {
        let (y, x) = ((i / size) as f64 / s - 0.5, (i % size) as f64 / s - 0.5);
        *v = g0 + gx * x + gy * y;
    }

    for _ in 0..1 + rng.below(4) {
        let (cx, cy) = (rng.range(0.0, s), rng.range(0.0, s));
        let sigma = rng.range(0.05, 0.25) * s;
        let amp = rng.range(-0.5, 0.5);
        for (i, v) in img.iter_mut().enumerate() {
            let (dy, dx) = ((i / size) as f64 - cy, (i % size) as f64 - cx);
            *v += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }

    if rng.uniform() < 0.7 {
        let period = rng.range(4.0, 24.0);
        let theta = rng.range(0.0, PI);
        let phase = rng.range(0.0, 2.0 * PI);
        let amp = rng.range(0.05, 0.25);
        let (c, sn) = (theta.cos(), theta.sin());
        for (i, v) in img.iter_mut().enumerate() {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            *v += amp * (2.0 * PI * (c * x + sn * y) / period + phase).sin();
        }
    }

    for _ in 0..rng.below(4) {
        let (w, h) = (rng.range(0.1, 0.5) * s, rng.range(0.1, 0.5) * s);
        let (x0, y0) = (rng.range(-0.1 * s, s), rng.range(-0.1 * s, s));
        let level = rng.range(0.0, 1.0);
        let mix = rng.range(0.5, 1.0);
        for (i, v) in img.iter_mut().enumerate() {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            if x >= x0 && x < x0 + w && y >= y0 && y < y0 + h {
                *v = (1.0 - mix) * *v + mix * level;
            }
        }
    }

    Tensor::new(vec![1, size, size], img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()).expect("square image")
}

/// Grayscale images available for patch cropping.
#[derive(Clone, Debug, Default)]
pub struct ImagePool {
    images: Vec<Tensor<f32>>,
}

impl ImagePool {
    /// Loads every `.pgm`/`.ppm` file in `dir`, sorted by name.
    pub fn load_dir(dir: impl AsRef<Path>, min_size: usize) -> Result<Self> {
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm")))
            .collect();
        paths.sort();
        let mut images = Vec::new();
        for p in paths {
            let img = read_image(&p)?;
            let img = if img.shape()[0] == 3 { luma(&img)? } else { img };
            if img.shape()[1] >= min_size && img.shape()[2] >= min_size {
                images.push(img);
            }
        }
        if images.is_empty() {
            return Err(Error::Config(format!("no PGM/PPM image of at least {min_size}x{min_size} found")));
        }
        Ok(ImagePool { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// A random `size×size` crop of a random image.
    pub fn crop(&self, rng: &mut Rng, size: usize) -> Tensor<f32> {
        let img = &self.images[rng.below(self.images.len())];
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let (y0, x0) = (rng.below(h - size + 1), rng.below(w - size + 1));
        Tensor::from_fn(&[1, size, size], |i| img.data()[(y0 + i / size) * w + x0 + i % size])
    }
}

/// Source of training patches.
#[derive(Clone, Debug)]
pub struct Dataset {
    size: usize,
    pool: Option<ImagePool>,
}

impl Dataset {
    pub fn synthetic(size: usize) -> Self {
        Dataset { size, pool: None }
    }

    /// Half of the drawn patches come from `pool`, half are procedural.
    pub fn with_pool(size: usize, pool: ImagePool) -> Self {
        Dataset { size, pool: Some(pool) }
    }

    pub fn patch_size(&self) -> usize {
        self.size
    }

    pub fn draw(&self, rng: &mut Rng) -> Tensor<f32> {
        match &self.pool {
            Some(pool) if rng.uniform() < 0.5 => pool.crop(rng, self.size),
            _ => synthetic_image(rng, self.size),
        }
    }

    /// Deterministic held-out set drawn from its own stream.
    pub fn held_out(&self, seed: u64, count: usize) -> Vec<Tensor<f32>> {
        let mut rng = Rng::derive(seed, "held-out");
        (0..count).map(|_| self.draw(&mut rng)).collect()
    }
}
