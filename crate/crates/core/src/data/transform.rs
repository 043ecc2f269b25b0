//! Geometric preprocessing applied to images together with their annotations.

use log::warn;

use super::image::{pad_mask, resize_mask_nearest};
use super::{DataError, GrayImage, InstanceAnnotation, Segmentation};

/// Target extents after scaling the longest side to `target`.
pub fn longest_side_dims(width: usize, height: usize, target: usize) -> (usize, usize, f64) {
    let scale = target as f64 / width.max(height) as f64;
    let w = ((width as f64 * scale).round() as usize).max(1);
    let h = ((height as f64 * scale).round() as usize).max(1);
    (w, h, scale)
}

/// Re-derives an annotation's RLE, bbox and area from a new mask, or `None`
/// when the mask became empty.
fn rebuild(a: &InstanceAnnotation, mask: &super::Bitmask) -> Result<Option<InstanceAnnotation>, DataError> {
    if mask.is_empty() {
        warn!("annotation {} is empty after transform; dropped", a.id);
        return Ok(None);
    }
    let mut out = InstanceAnnotation::from_mask(a.id, a.image_id, a.category_id, mask)?;
    out.iscrowd = a.iscrowd;
    Ok(Some(out))
}

/// Aspect-preserving resize so that `max(h, w) == target`. Pixels are
/// resampled bilinearly, RLE masks by nearest neighbour; polygon vertices are
/// scaled by the same factor. Boxes and areas are recomputed from the masks.
pub fn resize_longest(
    image: &GrayImage,
    annotations: &[InstanceAnnotation],
    target: usize,
) -> Result<(GrayImage, Vec<InstanceAnnotation>), DataError> {
    if target == 0 {
        return Err(DataError::InvalidTarget);
    }
    let (w, h, scale) = longest_side_dims(image.width(), image.height(), target);
    if (w, h) == (image.width(), image.height()) {
        return Ok((image.clone(), annotations.to_vec()));
    }
    let resized = image.resize_bilinear(w, h);
    let mut out = Vec::with_capacity(annotations.len());
    for a in annotations {
        let rebuilt = match &a.segmentation {
            Segmentation::Rle(_) => {
                let mask = a.mask(image.height(), image.width())?;
                rebuild(a, &resize_mask_nearest(&mask, w, h))?
            }
            Segmentation::Polygons(polys) => {
                let polys: Vec<Vec<f64>> = polys
                    .iter()
                    .map(|p| p.iter().map(|v| v * scale).collect())
                    .collect();
                let mask = super::polygon_to_mask(&polys, h, w)?;
                rebuild(a, &mask)?.map(|mut r| {
                    r.segmentation = Segmentation::Polygons(polys);
                    r
                })
            }
        };
        out.extend(rebuilt);
    }
    Ok((resized, out))
}

/// Mirrors the image and every annotation about the vertical axis.
pub fn hflip(
    image: &GrayImage,
    annotations: &[InstanceAnnotation],
) -> Result<(GrayImage, Vec<InstanceAnnotation>), DataError> {
    let w = image.width() as f64;
    let mut out = Vec::with_capacity(annotations.len());
    for a in annotations {
        let mask = a.mask(image.height(), image.width())?.hflip();
        let mut flipped = a.clone();
        match &mut flipped.segmentation {
            Segmentation::Rle(rle) => *rle = super::rle_encode(&mask),
            Segmentation::Polygons(polys) => {
                for p in polys.iter_mut() {
                    for x in p.iter_mut().step_by(2) {
                        *x = w - *x;
                    }
                }
            }
        }
        let [x, y, bw, bh] = a.bbox;
        flipped.bbox = [image.width() as f32 - x - bw, y, bw, bh];
        out.push(flipped);
    }
    Ok((image.hflip(), out))
}

/// Zero-pads bottom/right to a `size × size` square; masks are extended to match.
pub fn pad_to_square(
    image: &GrayImage,
    annotations: &[InstanceAnnotation],
    size: usize,
) -> Result<(GrayImage, Vec<InstanceAnnotation>), DataError> {
    if image.width() > size || image.height() > size {
        return Err(DataError::InvalidTarget);
    }
    let padded = image.pad(size, size);
    let mut out = Vec::with_capacity(annotations.len());
    for a in annotations {
        let mut p = a.clone();
        if let Segmentation::Rle(_) = a.segmentation {
            let mask = pad_mask(&a.mask(image.height(), image.width())?, size, size);
            p.segmentation = Segmentation::Rle(super::rle_encode(&mask));
        }
        out.push(p);
    }
    Ok((padded, out))
}
