//! Synthetic ultrasound-like images with exact instance masks.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{remove_overlap, Bitmask, Category, CocoDataset, DataError, GrayImage, ImageRecord, InstanceAnnotation};

pub const HYPERECHOIC: u64 = 1;
pub const HYPOECHOIC: u64 = 2;

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    pub min_lesions: usize,
    pub max_lesions: usize,
    /// Semi-axis range as a fraction of the image size.
    pub min_axis: f64,
    pub max_axis: f64,
    /// Standard deviation of the multiplicative speckle.
    pub speckle: f64,
    /// Probability that a lesion is bright (hyperechoic).
    pub bright_prob: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            min_lesions: 1,
            max_lesions: 3,
            min_axis: 0.09,
            max_axis: 0.2,
            speckle: 0.25,
            bright_prob: 0.5,
        }
    }
}

struct Lesion {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    bright: bool,
}

impl Lesion {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Sector-shaped field of view with the apex above the image.
fn fan_mask(size: usize) -> Bitmask {
    let s = size as f64;
    let (ax, ay) = (s / 2.0, -0.15 * s);
    let half = 38f64.to_radians();
    let (r0, r1) = (0.3 * s, 1.1 * s);
    Bitmask::from_fn(size, size, |r, c| {
        let (dx, dy) = (c as f64 + 0.5 - ax, r as f64 + 0.5 - ay);
        let rad = (dx * dx + dy * dy).sqrt();
        dx.atan2(dy).abs() <= half && (r0..=r1).contains(&rad)
    })
}

pub fn synth_generate(n_images: usize, image_size: usize, seed: u64) -> Result<CocoDataset, DataError> {
    synth_generate_with(n_images, image_size, seed, &SynthOptions::default())
}

/// Generates `n_images` square grayscale images. Odd-indexed images carry a
/// fan-shaped field border. Pixels are quantized to 8 bits so they survive a
/// PNG round trip unchanged.
pub fn synth_generate_with(
    n_images: usize,
    image_size: usize,
    seed: u64,
    opts: &SynthOptions,
) -> Result<CocoDataset, DataError> {
    if n_images == 0 || image_size < 8 {
        return Err(DataError::InvalidSynth);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, opts.speckle).expect("valid std");
    let s = image_size as f64;
    let mut ds = CocoDataset {
        categories: vec![
            Category {
                id: HYPERECHOIC,
                name: "hyperechoic_lesion".into(),
            },
            Category {
                id: HYPOECHOIC,
                name: "hypoechoic_lesion".into(),
            },
        ],
        ..Default::default()
    };
    let mut next_ann = 1;
    for i in 0..n_images {
        let image_id = i as u64 + 1;
        let fan = (i % 2 == 1).then(|| fan_mask(image_size));
        let n_lesions = rng.random_range(opts.min_lesions..=opts.max_lesions);
        let lesions: Vec<Lesion> = (0..n_lesions)
            .map(|_| Lesion {
                cx: rng.random_range(0.3..0.7) * s,
                cy: rng.random_range(0.35..0.72) * s,
                a: rng.random_range(opts.min_axis..opts.max_axis) * s,
                b: rng.random_range(opts.min_axis..opts.max_axis) * s,
                angle: rng.random_range(0.0..std::f64::consts::PI),
                bright: rng.random_bool(opts.bright_prob),
            })
            .collect();
        let raw: Vec<Bitmask> = lesions
            .iter()
            .map(|l| {
                Bitmask::from_fn(image_size, image_size, |r, c| {
                    l.contains(c as f64 + 0.5, r as f64 + 0.5)
                        && fan.as_ref().is_none_or(|f| f.get(r, c))
                })
            })
            .collect();
        let masks = remove_overlap(&raw)?;

        let (fx, fy, phase) = (
            rng.random_range(1.0..3.0),
            rng.random_range(1.0..3.0),
            rng.random_range(0.0..std::f64::consts::TAU),
        );
        let mut pixels = vec![0.0f32; image_size * image_size];
        for r in 0..image_size {
            for c in 0..image_size {
                let idx = r * image_size + c;
                if fan.as_ref().is_some_and(|f| !f.get(r, c)) {
                    continue;
                }
                let (u, v) = (c as f64 / s, r as f64 / s);
                let mut base = 0.32 + 0.06 * (std::f64::consts::TAU * fx * u + phase).sin()
                    * (std::f64::consts::TAU * fy * v).cos();
                for (l, m) in lesions.iter().zip(&masks) {
                    if m.get(r, c) {
                        base = if l.bright { 0.82 } else { 0.06 };
                    }
                }
                let speckled = base * (1.0 + noise.sample(&mut rng)).max(0.0);
                pixels[idx] = ((speckled.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
            }
        }
        let image = GrayImage::new(image_size, image_size, pixels)?;
        for (l, m) in lesions.iter().zip(&masks) {
            if m.is_empty() {
                warn!("synthetic lesion fully occluded in image {image_id}; dropped");
                continue;
            }
            let cat = if l.bright { HYPERECHOIC } else { HYPOECHOIC };
            ds.annotations
                .push(InstanceAnnotation::from_mask(next_ann, image_id, cat, m)?);
            next_ann += 1;
        }
        ds.images.push(ImageRecord {
            id: image_id,
            file_name: format!("synth_{image_id:05}.png"),
            width: image_size,
            height: image_size,
            source: None,
            pixels: Some(image),
        });
    }
    Ok(ds)
}
