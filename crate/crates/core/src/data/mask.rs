use serde::{Deserialize, Serialize};

use super::DataError;

/// Binary mask, row-major, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Bitmask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Bitmask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self, DataError> {
        if data.len() != height * width {
            return Err(DataError::MaskSize {
                expected: [height, width],
                got: data.len(),
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(DataError::NotBinary);
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for r in 0..height {
            for c in 0..width {
                m.data[r * width + c] = f(r, c) as u8;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Foreground pixels as `(row, col)`, row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| (i / self.width, i % self.width))
    }

    pub fn intersection_area(&self, other: &Bitmask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a != 0 && b != 0)
            .count()
    }

    pub fn union_area(&self, other: &Bitmask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a != 0 || b != 0)
            .count()
    }

    pub fn hflip(&self) -> Bitmask {
        Bitmask::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }
}

/// COCO run-length encoding over the column-major pixel scan. The first
/// count is a zero-run and may be 0.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

impl Rle {
    pub fn validate(&self) -> Result<(), DataError> {
        let [h, w] = self.size;
        let total: u64 = self.counts.iter().sum();
        if total != (h * w) as u64 {
            return Err(DataError::RleLength {
                size: self.size,
                total,
            });
        }
        if self.counts.iter().skip(1).any(|&c| c == 0) {
            return Err(DataError::RleZeroRun);
        }
        Ok(())
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }
}

pub fn rle_encode(mask: &Bitmask) -> Rle {
    let (h, w) = (mask.height, mask.width);
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u64;
    for c in 0..w {
        for r in 0..h {
            let v = mask.data[r * w + c];
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle {
        size: [h, w],
        counts,
    }
}

pub fn rle_decode(rle: &Rle) -> Result<Bitmask, DataError> {
    rle.validate()?;
    let [h, w] = rle.size;
    let mut mask = Bitmask::new(h, w);
    let mut pos = 0usize;
    for (i, &count) in rle.counts.iter().enumerate() {
        let on = (i % 2 == 1) as u8;
        for p in pos..pos + count as usize {
            // column-major position p → (row p % h, col p / h)
            mask.data[(p % h) * w + p / h] = on;
        }
        pos += count as usize;
    }
    Ok(mask)
}

/// Tight box `[x, y, w, h]` in pixels, x/y at the leading pixel edge.
pub fn tight_bbox(mask: &Bitmask) -> Result<[f32; 4], DataError> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (r, c) in mask.foreground() {
        bounds = Some(match bounds {
            None => (r, r, c, c),
            Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
        });
    }
    let (r0, r1, c0, c1) = bounds.ok_or(DataError::EmptyMask)?;
    Ok([
        c0 as f32,
        r0 as f32,
        (c1 - c0 + 1) as f32,
        (r1 - r0 + 1) as f32,
    ])
}

/// Resolves overlapping pixels in favour of the earliest mask. Outputs are
/// pairwise disjoint and each is a subset of its input.
pub fn remove_overlap(masks: &[Bitmask]) -> Result<Vec<Bitmask>, DataError> {
    let Some(first) = masks.first() else {
        return Ok(Vec::new());
    };
    let size = first.size();
    let mut claimed = vec![false; first.data.len()];
    let mut out = Vec::with_capacity(masks.len());
    for m in masks {
        if m.size() != size {
            return Err(DataError::MaskSize {
                expected: size,
                got: m.data.len(),
            });
        }
        let mut kept = m.clone();
        for (i, v) in kept.data.iter_mut().enumerate() {
            if *v != 0 {
                if claimed[i] {
                    *v = 0;
                } else {
                    claimed[i] = true;
                }
            }
        }
        out.push(kept);
    }
    Ok(out)
}
