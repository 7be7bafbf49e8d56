//! Procedural class-conditional image sets.
//!
//! Every image is a class-specific foreground pattern, jittered in position
//! and scale, over a dim noisy background. Item `i` has label
//! `i mod num_classes` and is generated from its own ChaCha stream, so the
//! set is balanced and reproducible item by item.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Solid geometric shapes.
    #[default]
    Shapes,
    /// Oriented stripe patches of class-specific frequency.
    Textures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub channels: usize,
    pub kind: GeneratorKind,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 10,
            per_class: 64,
            side: 64,
            channels: 3,
            kind: GeneratorKind::Shapes,
        }
    }
}

impl DatasetSpec {
    /// 8 classes × 64 samples of 64×64 RGB shapes.
    pub fn micro(seed: u64) -> Self {
        Self {
            seed,
            num_classes: 8,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generated images (`side×side×channels`, values roughly in `[0, 1]`) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    images: Vec<Tensor<f32>>,
    labels: Vec<usize>,
}

const BACKGROUND: f32 = 0.2;
const NOISE_STD: f64 = 0.04;

/// Distinct foreground colour per class, cycling through a fixed palette.
fn class_colour(class: usize, channels: usize) -> Vec<f32> {
    const PALETTE: [[f32; 3]; 5] = [
        [0.95, 0.85, 0.3],
        [0.3, 0.9, 0.95],
        [0.95, 0.4, 0.8],
        [0.6, 0.95, 0.45],
        [0.9, 0.9, 0.9],
    ];
    let c = PALETTE[class % PALETTE.len()];
    (0..channels).map(|k| c[k % 3]).collect()
}

/// Whether the point `(u, v)`, in shape-local coordinates scaled to
/// `[-1, 1]²`, lies inside the foreground of `shape`.
fn inside_shape(shape: usize, u: f32, v: f32) -> bool {
    let r2 = u * u + v * v;
    match shape % 10 {
        0 => r2 <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => (-0.8..=0.8).contains(&v) && u.abs() <= (v + 0.8) * 0.6,
        3 => v.abs() <= 0.3,
        4 => u.abs() <= 0.3,
        5 => u.abs() <= 0.25 || v.abs() <= 0.25,
        6 => (0.45..=1.0).contains(&r2),
        7 => (u - v).abs() <= 0.35,
        8 => (u.abs() <= 0.8 && v.abs() <= 0.8) && !(u.abs() <= 0.45 && v.abs() <= 0.45),
        _ => (u + v).abs() <= 0.35 || (u - v).abs() <= 0.35,
    }
}

fn generate_item(spec: &DatasetSpec, index: usize) -> (Tensor<f32>, usize) {
    let label = index % spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (side, ch) = (spec.side, spec.channels);
    let s = side as f32;
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");

    let half = s * rng.gen_range(0.22..0.3);
    let cx = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let colour = class_colour(label, ch);
    let (freq, angle) = (
        1.5 + (label % 5) as f32,
        std::f32::consts::PI * (label / 5) as f32 / 2.0 + 0.3,
    );
    let phase = rng.gen_range(0.0..std::f32::consts::TAU);

    let mut data = Vec::with_capacity(side * side * ch);
    for y in 0..side {
        for x in 0..side {
            let u = (x as f32 + 0.5 - cx) / half;
            let v = (y as f32 + 0.5 - cy) / half;
            let fg = match spec.kind {
                GeneratorKind::Shapes => inside_shape(label, u, v).then_some(1.0),
                GeneratorKind::Textures => (u * u + v * v <= 1.0).then(|| {
                    let t = u * angle.cos() + v * angle.sin();
                    0.5 + 0.5 * (freq * std::f32::consts::PI * t + phase).sin()
                }),
            };
            for k in 0..ch {
                let base = match fg {
                    Some(w) => BACKGROUND + w * (colour[k] - BACKGROUND),
                    None => BACKGROUND,
                };
                data.push(base + noise.sample(&mut rng) as f32);
            }
        }
    }
    (Tensor::from_parts(vec![side, side, ch], data), label)
}

impl SyntheticDataset {
    pub fn generate(spec: DatasetSpec) -> Result<Self> {
        if spec.num_classes == 0 || spec.per_class == 0 || spec.side == 0 || spec.channels == 0 {
            return Err(Error::Config(format!("empty dataset spec {spec:?}")));
        }
        let (images, labels) = (0..spec.len())
            .into_par_iter()
            .map(|i| generate_item(&spec, i))
            .unzip();
        Ok(Self {
            spec,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_f32(&self, i: usize) -> &Tensor<f32> {
        &self.images[i]
    }

    pub fn image<T: Scalar>(&self, i: usize) -> Tensor<T> {
        self.images[i].cast()
    }

    /// Pixel-wise mean image of one class.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.images[0].numel()];
        let mut count = 0;
        for (img, _) in self.images.iter().zip(&self.labels).filter(|(_, &l)| l == class) {
            for (a, &v) in acc.iter_mut().zip(img.data()) {
                *a += v as f64;
            }
            count += 1;
        }
        acc.iter_mut().for_each(|a| *a /= count.max(1) as f64);
        acc
    }

    /// SHA-256 over labels and the little-endian pixel bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (img, &l) in self.images.iter().zip(&self.labels) {
            h.update((l as u64).to_le_bytes());
            for v in img.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
