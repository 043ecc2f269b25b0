//! Prompt geometry: simulated training prompts and the canonical evaluation
//! prompts (interior centre point, ground-truth box).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{tight_bbox, Bitmask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("cannot derive a prompt from an empty mask")]
    EmptyMask,
    #[error("prompt {0:?} lies outside a {1}x{2} image")]
    OutOfBounds(Prompt, usize, usize),
    #[error("box prompt {0:?} has non-positive extent")]
    DegenerateBox(BoxPrompt),
    #[error("prompt list is empty")]
    Empty,
}

/// Pixel coordinates: `x` along columns, `y` along rows; pixel `(r, c)` has
/// its centre at `(c + 0.5, r + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BoxPrompt {
    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Prompt {
    Point(Point),
    Box(BoxPrompt),
}

impl Prompt {
    pub fn point(x: f32, y: f32) -> Self {
        Prompt::Point(Point { x, y })
    }

    pub fn bbox(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Prompt::Box(BoxPrompt { x1, y1, x2, y2 })
    }

    /// Checks the bounds and ordering invariants against a `width × height` image.
    pub fn validate(&self, width: usize, height: usize) -> Result<(), PromptError> {
        let (w, h) = (width as f32, height as f32);
        let inside = |x: f32, y: f32| x.is_finite() && y.is_finite() && (0.0..=w).contains(&x) && (0.0..=h).contains(&y);
        match *self {
            Prompt::Point(p) => {
                if !inside(p.x, p.y) {
                    return Err(PromptError::OutOfBounds(*self, width, height));
                }
            }
            Prompt::Box(b) => {
                if !inside(b.x1, b.y1) || !inside(b.x2, b.y2) {
                    return Err(PromptError::OutOfBounds(*self, width, height));
                }
                if !(b.x1 < b.x2 && b.y1 < b.y2) {
                    return Err(PromptError::DegenerateBox(b));
                }
            }
        }
        Ok(())
    }

    /// Applies `x ↦ x·sx`, `y ↦ y·sy` to every coordinate.
    pub fn scaled(&self, sx: f32, sy: f32) -> Prompt {
        match *self {
            Prompt::Point(p) => Prompt::point(p.x * sx, p.y * sy),
            Prompt::Box(b) => Prompt::bbox(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy),
        }
    }

    pub fn is_point(&self) -> bool {
        matches!(self, Prompt::Point(_))
    }
}

/// Tight box of the mask in corner form.
pub fn gt_box(mask: &Bitmask) -> Result<BoxPrompt, PromptError> {
    let [x, y, w, h] = tight_bbox(mask).map_err(|_| PromptError::EmptyMask)?;
    Ok(BoxPrompt {
        x1: x,
        y1: y,
        x2: x + w,
        y2: y + h,
    })
}

/// Box with each corner coordinate displaced by an independent uniform draw
/// in `±max_frac` of the box width (x) or height (y). No clamping.
pub fn displace_box<R: Rng + ?Sized>(gt: BoxPrompt, rng: &mut R, max_frac: f32) -> BoxPrompt {
    let (ax, ay) = (max_frac * gt.width(), max_frac * gt.height());
    let mut jitter = |a: f32| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
    BoxPrompt {
        x1: gt.x1 + jitter(ax),
        y1: gt.y1 + jitter(ay),
        x2: gt.x2 + jitter(ax),
        y2: gt.y2 + jitter(ay),
    }
}

/// Noised ground-truth box: displaced, clamped to the image, then reordered.
/// Degenerate boxes come back unchanged.
pub fn noise_box<R: Rng + ?Sized>(
    gt: BoxPrompt,
    image_w: usize,
    image_h: usize,
    rng: &mut R,
    max_frac: f32,
) -> BoxPrompt {
    if !(gt.width() > 0.0 && gt.height() > 0.0) {
        return gt;
    }
    let d = displace_box(gt, rng, max_frac);
    let (w, h) = (image_w as f32, image_h as f32);
    let (x1, x2) = (d.x1.clamp(0.0, w), d.x2.clamp(0.0, w));
    let (y1, y2) = (d.y1.clamp(0.0, h), d.y2.clamp(0.0, h));
    let b = BoxPrompt {
        x1: x1.min(x2),
        y1: y1.min(y2),
        x2: x1.max(x2),
        y2: y1.max(y2),
    };
    if b.width() > 0.0 && b.height() > 0.0 {
        b
    } else {
        gt
    }
}

pub const BOX_NOISE_FRACTION: f32 = 0.05;

/// With probability ½ a point uniform over the foreground pixels (at the pixel
/// centre), otherwise a noised ground-truth box.
pub fn sample_training_prompt<R: Rng + ?Sized>(
    mask: &Bitmask,
    image_w: usize,
    image_h: usize,
    rng: &mut R,
) -> Result<Prompt, PromptError> {
    let area = mask.area();
    if area == 0 {
        return Err(PromptError::EmptyMask);
    }
    if rng.random_bool(0.5) {
        let k = rng.random_range(0..area);
        let (r, c) = mask.foreground().nth(k).expect("k < area");
        Ok(Prompt::point(c as f32 + 0.5, r as f32 + 0.5))
    } else {
        let gt = gt_box(mask)?;
        Ok(Prompt::Box(noise_box(gt, image_w, image_h, rng, BOX_NOISE_FRACTION)))
    }
}

/// City-block distance from each pixel to the nearest background pixel, by a
/// forward and a backward sweep. Pixels beyond the grid count as background.
pub fn distance_transform_l1(mask: &Bitmask) -> Vec<u32> {
    let (h, w) = (mask.height(), mask.width());
    let inf = (h + w + 2) as u32;
    let mut d: Vec<u32> = mask.data().iter().map(|&v| if v != 0 { inf } else { 0 }).collect();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if d[i] == 0 {
                continue;
            }
            let up = if r > 0 { d[i - w] } else { 0 };
            let left = if c > 0 { d[i - 1] } else { 0 };
            d[i] = d[i].min(up + 1).min(left + 1);
        }
    }
    for r in (0..h).rev() {
        for c in (0..w).rev() {
            let i = r * w + c;
            if d[i] == 0 {
                continue;
            }
            let down = if r + 1 < h { d[i + w] } else { 0 };
            let right = if c + 1 < w { d[i + 1] } else { 0 };
            d[i] = d[i].min(down + 1).min(right + 1);
        }
    }
    d
}

/// Foreground pixel `(row, col)` maximizing the L1 distance transform; ties go
/// to the smallest row, then the smallest column.
pub fn center_pixel(mask: &Bitmask) -> Result<(usize, usize), PromptError> {
    let d = distance_transform_l1(mask);
    let (i, best) = d
        .iter()
        .enumerate()
        .fold((0, 0), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    if best == 0 {
        return Err(PromptError::EmptyMask);
    }
    Ok((i / mask.width(), i % mask.width()))
}

/// Interior representative point of the mask, at the centre of [`center_pixel`].
pub fn center_point(mask: &Bitmask) -> Result<Point, PromptError> {
    let (r, c) = center_pixel(mask)?;
    Ok(Point {
        x: c as f32 + 0.5,
        y: r as f32 + 0.5,
    })
}
