//! Procedural texture families standing in for scene categories.
//!
//! Each class owns a base colour, an oriented stripe pattern and a blob field
//! tinted with a secondary colour. Samples of a class share those parameters
//! and differ by translation, brightness and additive noise.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{derive_seed, indexed_rng, Rng};

const NOISE_SIGMA: f64 = 0.05;
const MAX_SHIFT: i64 = 2;
const BRIGHTNESS_JITTER: f64 = 0.10;

#[derive(Clone, Debug)]
struct TextureFamily {
    base: [f64; 3],
    accent: [f64; 3],
    stripe_angle: f64,
    stripe_period: f64,
    stripe_phase: f64,
    stripe_contrast: f64,
    blob_freq: f64,
    blob_phase: (f64, f64),
    blob_weight: f64,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl TextureFamily {
    fn sample(rng: &mut Rng) -> Self {
        let hue = rng.gen::<f64>();
        let accent_hue = hue + rng.gen_range(0.25..0.75);
        Self {
            base: hsv_to_rgb(hue, rng.gen_range(0.45..0.9), rng.gen_range(0.5..0.85)),
            accent: hsv_to_rgb(accent_hue, rng.gen_range(0.3..0.9), rng.gen_range(0.3..0.95)),
            stripe_angle: rng.gen_range(0.0..PI),
            stripe_period: rng.gen_range(4.0..11.0),
            stripe_phase: rng.gen_range(0.0..2.0 * PI),
            stripe_contrast: rng.gen_range(0.2..0.5),
            blob_freq: rng.gen_range(1.0..3.5),
            blob_phase: (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)),
            blob_weight: rng.gen_range(0.25..0.6),
        }
    }

    fn render(&self, h: usize, w: usize, rng: &mut Rng) -> Tensor<f32> {
        let dx = rng.gen_range(-MAX_SHIFT..=MAX_SHIFT) as f64;
        let dy = rng.gen_range(-MAX_SHIFT..=MAX_SHIFT) as f64;
        let brightness = 1.0 + rng.gen_range(-BRIGHTNESS_JITTER..=BRIGHTNESS_JITTER);
        let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
        let (ca, sa) = (self.stripe_angle.cos(), self.stripe_angle.sin());
        let plane = h * w;
        let mut data = vec![0f32; 3 * plane];
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 + dx, y as f64 + dy);
                let stripe = 0.5
                    + 0.5 * (2.0 * PI * (fx * ca + fy * sa) / self.stripe_period + self.stripe_phase).sin();
                let blob = (2.0 * PI * self.blob_freq * fx / w as f64 + self.blob_phase.0).sin()
                    * (2.0 * PI * self.blob_freq * fy / h as f64 + self.blob_phase.1).sin();
                let mask = ((blob - 0.2) * 2.5).clamp(0.0, 1.0) * self.blob_weight;
                let shade = 1.0 - self.stripe_contrast + self.stripe_contrast * stripe;
                for c in 0..3 {
                    let v = (1.0 - mask) * self.base[c] * shade + mask * self.accent[c];
                    let v = v * brightness + noise.sample(rng);
                    data[c * plane + y * w + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        Tensor::from_parts(vec![3, h, w], data)
    }
}

/// Deterministic synthetic dataset of `num_classes` texture families with
/// `per_class` samples each, images of shape `[3,H,W]`. Class names are
/// `class_00`, `class_01`, ...
pub fn generate_synthetic(num_classes: usize, per_class: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
    }
    if per_class < 2 {
        return Err(Error::invalid(format!("need at least 2 samples per class, got {per_class}")));
    }
    if shape[0] != 3 || shape[1] == 0 || shape[2] == 0 {
        return Err(Error::invalid(format!("image shape must be [3,H,W], got {shape:?}")));
    }
    let family_seed = derive_seed(seed, "synthetic.family");
    let sample_seed = derive_seed(seed, "synthetic.sample");
    let width = num_classes.saturating_sub(1).to_string().len().max(2);
    let mut classes = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let family = TextureFamily::sample(&mut indexed_rng(family_seed, k as u64));
        let name = format!("class_{k:0width$}");
        let images = (0..per_class)
            .map(|i| {
                let mut rng = indexed_rng(sample_seed, (k * per_class + i) as u64);
                (format!("{name}/{i:05}"), family.render(shape[1], shape[2], &mut rng))
            })
            .collect();
        classes.push((name, images));
    }
    Dataset::from_classes(classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }

    #[test]
    fn preconditions() {
        assert!(generate_synthetic(1, 5, [3, 8, 8], 0).is_err());
        assert!(generate_synthetic(3, 1, [3, 8, 8], 0).is_err());
        assert!(generate_synthetic(3, 2, [1, 8, 8], 0).is_err());
    }

    #[test]
    fn shapes_and_range() {
        let d = generate_synthetic(3, 4, [3, 16, 8], 1).unwrap();
        assert_eq!(d.samples().len(), 12);
        assert_eq!(d.image_shape(), [3, 16, 8]);
        assert!(d.samples().iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
