use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage as Luma8Image, ImageFormat};

use super::{Bitmask, DataError};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, DataError> {
        if pixels.len() != width * height {
            return Err(DataError::PixelCount {
                width,
                height,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn hflip(&self) -> GrayImage {
        let mut out = self.clone();
        for (dst, src) in out
            .pixels
            .chunks_exact_mut(self.width)
            .zip(self.pixels.chunks_exact(self.width))
        {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        out
    }

    /// Bilinear resampling with half-pixel centres (edges clamped).
    pub fn resize_bilinear(&self, width: usize, height: usize) -> GrayImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let pixels = resample_bilinear(&self.pixels, self.width, self.height, width, height);
        GrayImage {
            width,
            height,
            pixels,
        }
    }

    /// Zero-extends on the bottom and right to `width × height`.
    pub fn pad(&self, width: usize, height: usize) -> GrayImage {
        let mut out = GrayImage::zeros(width.max(self.width), height.max(self.height));
        for r in 0..self.height {
            out.pixels[r * out.width..r * out.width + self.width]
                .copy_from_slice(&self.pixels[r * self.width..(r + 1) * self.width]);
        }
        out
    }
}

/// Bilinear resampling of a row-major grid of values.
pub fn resample_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    let sx = sw as f32 / dw as f32;
    let sy = sh as f32 / dh as f32;
    let axis = |i: usize, scale: f32, n: usize| {
        let p = ((i as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (p.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f32)
    };
    let cols: Vec<_> = (0..dw).map(|c| axis(c, sx, sw)).collect();
    let mut out = Vec::with_capacity(dw * dh);
    for r in 0..dh {
        let (r0, r1, fy) = axis(r, sy, sh);
        for &(c0, c1, fx) in &cols {
            let top = src[r0 * sw + c0] * (1.0 - fx) + src[r0 * sw + c1] * fx;
            let bot = src[r1 * sw + c0] * (1.0 - fx) + src[r1 * sw + c1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Nearest-neighbour mask resampling with half-pixel centres.
pub fn resize_mask_nearest(mask: &Bitmask, width: usize, height: usize) -> Bitmask {
    let sx = mask.width() as f64 / width as f64;
    let sy = mask.height() as f64 / height as f64;
    Bitmask::from_fn(height, width, |r, c| {
        let sr = (((r as f64 + 0.5) * sy) as usize).min(mask.height() - 1);
        let sc = (((c as f64 + 0.5) * sx) as usize).min(mask.width() - 1);
        mask.get(sr, sc)
    })
}

pub fn pad_mask(mask: &Bitmask, width: usize, height: usize) -> Bitmask {
    Bitmask::from_fn(height, width, |r, c| {
        r < mask.height() && c < mask.width() && mask.get(r, c)
    })
}

/// Decodes an 8-bit PNG. RGB(A) is converted by luminance
/// `0.299 R + 0.587 G + 0.114 B`.
pub fn decode_png(bytes: &[u8]) -> Result<GrayImage, DataError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| DataError::Image(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLumaA8(g) => g.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                (0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32) / 255.0
            })
            .collect(),
    };
    GrayImage::new(w, h, pixels)
}

pub fn load_png(path: &Path) -> Result<GrayImage, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
    decode_png(&bytes)
}

/// Raw 8-bit grayscale values of a PNG (label images are read this way).
pub fn load_png_u8(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let img = image::open(path).map_err(|e| DataError::Image(format!("{}: {e}", path.display())))?;
    let g = img.to_luma8();
    Ok((g.width() as usize, g.height() as usize, g.into_raw()))
}

pub fn encode_png_u8(width: usize, height: usize, values: Vec<u8>) -> Result<Vec<u8>, DataError> {
    let img = Luma8Image::from_raw(width as u32, height as u32, values)
        .ok_or(DataError::PixelCount {
            width,
            height,
            got: 0,
        })?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| DataError::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>, DataError> {
    let values = img
        .pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    encode_png_u8(img.width, img.height, values)
}

/// Writes a mask as an 8-bit PNG with foreground 255.
pub fn encode_mask_png(mask: &Bitmask) -> Result<Vec<u8>, DataError> {
    encode_png_u8(
        mask.width(),
        mask.height(),
        mask.data().iter().map(|&v| v * 255).collect(),
    )
}
