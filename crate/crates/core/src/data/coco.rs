use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{polygon_to_mask, rle_decode, rle_encode, tight_bbox, Bitmask, DataError, GrayImage, Rle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    /// Originating dataset, used for stratified splitting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(skip)]
    pub pixels: Option<GrayImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Rle(Rle),
    Polygons(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f32; 4],
    pub area: f32,
    pub iscrowd: u8,
}

impl InstanceAnnotation {
    /// Builds an RLE annotation whose bbox and area are derived from `mask`.
    pub fn from_mask(id: u64, image_id: u64, category_id: u64, mask: &Bitmask) -> Result<Self, DataError> {
        Ok(Self {
            id,
            image_id,
            category_id,
            segmentation: Segmentation::Rle(rle_encode(mask)),
            bbox: tight_bbox(mask)?,
            area: mask.area() as f32,
            iscrowd: 0,
        })
    }

    pub fn mask(&self, height: usize, width: usize) -> Result<Bitmask, DataError> {
        match &self.segmentation {
            Segmentation::Rle(rle) => {
                if rle.size != [height, width] {
                    return Err(DataError::RleSize {
                        annotation: self.id,
                        rle: rle.size,
                        image: [height, width],
                    });
                }
                rle_decode(rle)
            }
            Segmentation::Polygons(polys) => polygon_to_mask(polys, height, width),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<InstanceAnnotation>,
    pub categories: Vec<Category>,
}

impl CocoDataset {
    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn annotations_for(&self, image_id: u64) -> impl Iterator<Item = &InstanceAnnotation> {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }

    /// Same dataset with loaded pixels dropped.
    pub fn without_pixels(&self) -> CocoDataset {
        let mut ds = self.clone();
        ds.images.iter_mut().for_each(|i| i.pixels = None);
        ds
    }

    /// Referential integrity, id uniqueness, bbox bounds and RLE validity.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut images = HashMap::new();
        for img in &self.images {
            if images.insert(img.id, img).is_some() {
                return Err(DataError::DuplicateId {
                    kind: "image",
                    id: img.id,
                });
            }
        }
        let mut cats = HashSet::new();
        for c in &self.categories {
            if !cats.insert(c.id) {
                return Err(DataError::DuplicateId {
                    kind: "category",
                    id: c.id,
                });
            }
        }
        let mut anns = HashSet::new();
        for a in &self.annotations {
            if !anns.insert(a.id) {
                return Err(DataError::DuplicateId {
                    kind: "annotation",
                    id: a.id,
                });
            }
            let img = images.get(&a.image_id).ok_or(DataError::DanglingImage {
                annotation: a.id,
                image_id: a.image_id,
            })?;
            if !cats.contains(&a.category_id) {
                return Err(DataError::DanglingCategory {
                    annotation: a.id,
                    category_id: a.category_id,
                });
            }
            let [x, y, w, h] = a.bbox;
            let slack = 1e-3;
            if x < -slack
                || y < -slack
                || w < 0.0
                || h < 0.0
                || x + w > img.width as f32 + slack
                || y + h > img.height as f32 + slack
            {
                return Err(DataError::BboxOutOfBounds {
                    annotation: a.id,
                    bbox: a.bbox,
                });
            }
            if let Segmentation::Rle(rle) = &a.segmentation {
                if rle.size != [img.height, img.width] {
                    return Err(DataError::RleSize {
                        annotation: a.id,
                        rle: rle.size,
                        image: [img.height, img.width],
                    });
                }
                rle.validate()?;
            }
        }
        Ok(())
    }

    /// Checks that every bbox is the tight box of its mask and every area its pixel count.
    pub fn check_geometry(&self) -> Result<(), DataError> {
        for a in &self.annotations {
            let img = self.image(a.image_id).ok_or(DataError::DanglingImage {
                annotation: a.id,
                image_id: a.image_id,
            })?;
            let mask = a.mask(img.height, img.width)?;
            let bbox = tight_bbox(&mask)?;
            if bbox != a.bbox || mask.area() as f32 != a.area {
                return Err(DataError::GeometryMismatch { annotation: a.id });
            }
        }
        Ok(())
    }
}

pub fn parse_coco(json: &[u8]) -> Result<CocoDataset, DataError> {
    let ds: CocoDataset = serde_json::from_slice(json).map_err(|e| DataError::Json(e.to_string()))?;
    ds.validate()?;
    Ok(ds)
}

/// Compact JSON with keys in declaration order; identical input gives identical bytes.
pub fn write_coco(ds: &CocoDataset) -> Vec<u8> {
    serde_json::to_vec(ds).expect("dataset serialization is infallible")
}
