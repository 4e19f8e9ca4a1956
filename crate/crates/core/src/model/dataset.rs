//! Procedural texture classes standing in for natural-image categories.
//!
//! Every class is a pattern family (stripes, blobs, checkerboard, rings,
//! dot grid, crossing bars) rendered with random foreground and background
//! colours, orientation, scale and position, plus mild pixel noise. Colour is
//! uninformative, so the classes are not separable by a linear read-out of
//! pixel values. Each image draws from its own ChaCha stream keyed by its
//! index, so generation is deterministic and order-independent.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
const FAMILIES: usize = 6;
const NOISE_STD: f32 = 0.03;
const MIN_CONTRAST: f32 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub num_classes: usize,
    pub per_class: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Image ids of one class within one split, ascending.
    pub fn class_indices(&self, class: usize, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class && self.splits[i] == split)
            .collect()
    }
}

/// Number of held-out images per class: one in five, rounded down.
pub fn test_count(per_class: usize) -> usize {
    per_class / 5
}

/// Generates `per_class` images for each of `num_classes` classes.
///
/// Images are ordered class-major; within a class the last fifth is the test
/// split.
///
/// # Panics
/// If `num_classes < 2` or `per_class == 0`.
pub fn generate_dataset(seed: u64, num_classes: usize, per_class: usize) -> Dataset {
    assert!(num_classes >= 2, "at least two classes are required");
    assert!(per_class >= 1, "at least one image per class is required");
    let n_test = test_count(per_class);
    let mut images = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    let mut splits = Vec::with_capacity(images.capacity());
    for class in 0..num_classes {
        for i in 0..per_class {
            let id = (class * per_class + i) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            images.push(render(class, &mut rng));
            labels.push(class);
            splits.push(if i >= per_class - n_test { Split::Test } else { Split::Train });
        }
    }
    Dataset {
        images,
        labels,
        splits,
        num_classes,
        per_class,
        seed,
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn color_pair(rng: &mut ChaCha8Rng) -> ([f32; 3], [f32; 3]) {
    loop {
        let fg = random_color(rng);
        let bg = random_color(rng);
        let dist = fg.iter().zip(&bg).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt();
        if dist >= MIN_CONTRAST {
            return (fg, bg);
        }
    }
}

/// Pattern intensity in `[0, 1]` at pixel centre `(x, y)`.
fn pattern(class: usize, rng: &mut ChaCha8Rng) -> Box<dyn Fn(f32, f32) -> f32> {
    let variant = (class / FAMILIES) as f32;
    let size = IMAGE_SIZE as f32;
    let theta = rng.random_range(0.0..PI);
    let (c, s) = (theta.cos(), theta.sin());
    let phase = rng.random_range(0.0..2.0 * PI);
    match class % FAMILIES {
        0 => {
            let period = rng.random_range(4.0..9.0) + 2.0 * variant;
            Box::new(move |x, y| 0.5 + 0.5 * (2.0 * PI * (x * c + y * s) / period + phase).sin())
        }
        1 => {
            let count = rng.random_range(3..7);
            let blobs: Vec<(f32, f32, f32)> = (0..count)
                .map(|_| {
                    (
                        rng.random_range(3.0..size - 3.0),
                        rng.random_range(3.0..size - 3.0),
                        rng.random_range(2.0..4.0) + variant,
                    )
                })
                .collect();
            Box::new(move |x, y| {
                blobs
                    .iter()
                    .map(|&(bx, by, r)| (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * r * r)).exp())
                    .fold(0.0, f32::max)
            })
        }
        2 => {
            let cell = rng.random_range(3.0..7.0) + 2.0 * variant;
            let (ox, oy) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
            let tilt = rng.random_range(-0.4..0.4f32);
            let (tc, ts) = (tilt.cos(), tilt.sin());
            Box::new(move |x, y| {
                let u = x * tc + y * ts + ox;
                let v = -x * ts + y * tc + oy;
                let parity = ((u / cell).floor() + (v / cell).floor()).rem_euclid(2.0);
                if parity < 0.5 {
                    1.0
                } else {
                    0.0
                }
            })
        }
        3 => {
            let (cx, cy) = (rng.random_range(6.0..size - 6.0), rng.random_range(6.0..size - 6.0));
            let period = rng.random_range(4.0..8.0) + 2.0 * variant;
            Box::new(move |x, y| {
                let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                0.5 + 0.5 * (2.0 * PI * r / period + phase).cos()
            })
        }
        4 => {
            let spacing = rng.random_range(5.0..9.0) + 2.0 * variant;
            let radius = rng.random_range(1.2..2.2);
            let (ox, oy) = (rng.random_range(0.0..spacing), rng.random_range(0.0..spacing));
            Box::new(move |x, y| {
                let dx = (x + ox).rem_euclid(spacing) - spacing / 2.0;
                let dy = (y + oy).rem_euclid(spacing) - spacing / 2.0;
                if dx * dx + dy * dy <= radius * radius {
                    1.0
                } else {
                    0.0
                }
            })
        }
        _ => {
            let (px, py) = (rng.random_range(8.0..size - 8.0), rng.random_range(8.0..size - 8.0));
            let half = rng.random_range(1.5..3.0) + variant;
            Box::new(move |x, y| {
                let u = (x - px) * c + (y - py) * s;
                let v = -(x - px) * s + (y - py) * c;
                if u.abs() <= half || v.abs() <= half {
                    1.0
                } else {
                    0.0
                }
            })
        }
    }
}

fn render(class: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (fg, bg) = color_pair(rng);
    let f = pattern(class, rng);
    let noise = Normal::new(0.0f32, NOISE_STD).expect("positive std");
    let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let m = f(x as f32 + 0.5, y as f32 + 0.5).clamp(0.0, 1.0);
            for ch in 0..IMAGE_CHANNELS {
                let v = bg[ch] * (1.0 - m) + fg[ch] * m + noise.sample(rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(&[IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS], data).expect("finite pixels")
}
