//! COCO-format dataset model, mask codecs and image preprocessing.

mod coco;
pub mod image;
mod mask;
mod polygon;
mod split;
pub mod synth;
mod transform;

pub use coco::{parse_coco, write_coco, Category, CocoDataset, ImageRecord, InstanceAnnotation, Segmentation};
pub use image::{decode_png, encode_mask_png, encode_png, load_png, GrayImage};
pub use mask::{remove_overlap, rle_decode, rle_encode, tight_bbox, Bitmask, Rle};
pub use polygon::{point_in_polygon, polygon_to_mask};
pub use split::split_train_val;
pub use synth::{synth_generate, synth_generate_with, SynthOptions};
pub use transform::{hflip, longest_side_dims, pad_to_square, resize_longest};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("malformed COCO JSON: {0}")]
    Json(String),
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },
    #[error("annotation {annotation} references missing image {image_id}")]
    DanglingImage { annotation: u64, image_id: u64 },
    #[error("annotation {annotation} references missing category {category_id}")]
    DanglingCategory { annotation: u64, category_id: u64 },
    #[error("annotation {annotation} bbox {bbox:?} lies outside its image")]
    BboxOutOfBounds { annotation: u64, bbox: [f32; 4] },
    #[error("annotation {annotation}: RLE size {rle:?} differs from image size {image:?}")]
    RleSize {
        annotation: u64,
        rle: [usize; 2],
        image: [usize; 2],
    },
    #[error("RLE counts sum to {total}, expected {}", size[0] * size[1])]
    RleLength { size: [usize; 2], total: u64 },
    #[error("RLE has an interior zero-length run")]
    RleZeroRun,
    #[error("mask has {got} pixels, expected {expected:?}")]
    MaskSize { expected: [usize; 2], got: usize },
    #[error("mask values must be 0 or 1")]
    NotBinary,
    #[error("mask is empty")]
    EmptyMask,
    #[error("polygon needs at least 3 vertices, got {0}")]
    PolygonVertices(usize),
    #[error("annotation {annotation}: bbox/area disagree with its mask")]
    GeometryMismatch { annotation: u64 },
    #[error("image {width}x{height} does not match {got} pixels")]
    PixelCount {
        width: usize,
        height: usize,
        got: usize,
    },
    #[error("image decode failed: {0}")]
    Image(String),
    #[error("io: {0}")]
    Io(String),
    #[error("target size must fit the image and be positive")]
    InvalidTarget,
    #[error("validation fraction must be in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("synthetic generation needs n_images >= 1 and size >= 8")]
    InvalidSynth,
}
