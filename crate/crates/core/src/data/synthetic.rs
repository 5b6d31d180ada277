use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Split};
use crate::augment::kernels::{hsv_to_rgb, to_u8};
use crate::augment::Image;
use crate::seed;
use crate::{Error, Result};

const CLASS_STREAM: u64 = 0xc1a5;
const INSTANCE_STREAM: u64 = 0x1b57;

/// Colored shapes over an oriented stripe texture.
///
/// Each class fixes a shape, a hue pair and a stripe orientation and frequency.
/// Instances jitter position, size, hue, stripe phase and add pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Width of the per-instance hue offset, in turns; 1 makes hue carry no class information.
    pub hue_jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            per_class: 50,
            image_size: 32,
            seed: 0,
            hue_jitter: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc,
    Square,
    Ring,
    Cross,
    Triangle,
    Diamond,
    HBar,
    VBar,
}

const SHAPES: [Shape; 8] = [
    Shape::Disc,
    Shape::Square,
    Shape::Ring,
    Shape::Cross,
    Shape::Triangle,
    Shape::Diamond,
    Shape::HBar,
    Shape::VBar,
];

impl Shape {
    fn contains(self, x: f64, y: f64, r: f64) -> bool {
        let (ax, ay) = (x.abs(), y.abs());
        match self {
            Shape::Disc => x * x + y * y <= r * r,
            Shape::Square => ax.max(ay) <= r * 0.85,
            Shape::Ring => {
                let d = (x * x + y * y).sqrt();
                d <= r && d >= r * 0.55
            }
            Shape::Cross => (ax <= r * 0.3 && ay <= r) || (ay <= r * 0.3 && ax <= r),
            Shape::Triangle => y <= r * 0.7 && y >= -r && ax <= (y + r) * 0.6,
            Shape::Diamond => ax + ay <= r,
            Shape::HBar => ay <= r * 0.35 && ax <= r * 1.2,
            Shape::VBar => ax <= r * 0.35 && ay <= r * 1.2,
        }
    }
}

struct ClassLatent {
    shape: Shape,
    hue: f64,
    angle: f64,
    frequency: f64,
    radius: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.per_class == 0 {
            return Err(Error::Config("synthetic counts must be ≥ 1".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config(format!(
                "synthetic image_size must be ≥ 4, got {}",
                self.image_size
            )));
        }
        Ok(())
    }

    fn class_latent(&self, c: usize) -> ClassLatent {
        let mut rng = seed::rng(self.seed, &[CLASS_STREAM, c as u64]);
        let k = self.num_classes as f64;
        let offset = rng.random_range(0..SHAPES.len());
        ClassLatent {
            shape: SHAPES[(c + offset) % SHAPES.len()],
            hue: (c as f64 + rng.random_range(0.0..0.5)) / k,
            angle: PI * (c as f64 + rng.random_range(0.0..0.5)) / k,
            frequency: rng.random_range(1.5..4.0),
            radius: rng.random_range(0.35..0.55),
        }
    }

    fn render(&self, latent: &ClassLatent, split: Split, c: usize, i: usize) -> Image {
        let mut rng = seed::rng(self.seed, &[INSTANCE_STREAM, split.tag(), c as u64, i as u64]);
        let cx = rng.random_range(-0.2..0.2);
        let cy = rng.random_range(-0.2..0.2);
        let r = latent.radius * rng.random_range(0.8..1.2);
        let hue = latent.hue + self.hue_jitter * rng.random_range(-0.5..0.5);
        let phase = rng.random_range(0.0..2.0 * PI);
        let value = rng.random_range(0.85..1.0);
        let (ca, sa) = (latent.angle.cos(), latent.angle.sin());
        let s = self.image_size;
        let mut pixels = Vec::with_capacity(s * s * 3);
        for py in 0..s {
            for px in 0..s {
                let u = 2.0 * (px as f64 + 0.5) / s as f64 - 1.0;
                let v = 2.0 * (py as f64 + 0.5) / s as f64 - 1.0;
                let (h, sat, val) = if latent.shape.contains(u - cx, v - cy, r) {
                    (hue, 0.8, 0.95 * value)
                } else {
                    let stripe = 0.5 + 0.5 * (2.0 * PI * latent.frequency * (u * ca + v * sa) + phase).sin();
                    (hue + 0.5, 0.5, (0.2 + 0.35 * stripe) * value)
                };
                let (rr, gg, bb) = hsv_to_rgb(h as f32, sat as f32, (val * 255.0) as f32);
                for ch in [rr, gg, bb] {
                    pixels.push(to_u8(ch + rng.random_range(-10.0..10.0)));
                }
            }
        }
        Image::new(s, s, pixels).expect("sized buffer")
    }
}

/// Deterministic class-structured images; labels run `0×per_class, 1×per_class, …`.
pub fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut images = Vec::with_capacity(spec.num_classes * spec.per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for c in 0..spec.num_classes {
        let latent = spec.class_latent(c);
        for i in 0..spec.per_class {
            images.push(spec.render(&latent, split, c, i));
            labels.push(c);
        }
    }
    LabeledDataset::new(images, labels, spec.num_classes, split)
}
