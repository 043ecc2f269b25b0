use super::{ImageEmbedding, MaskPrediction, ModelError, PromptModel};
use crate::data::image::resample_bilinear;
use crate::data::{longest_side_dims, Bitmask, GrayImage};
use crate::numerics::Tensor;
use crate::prompts::Prompt;

/// An image brought to the model's square input, with the geometry needed
/// to map prompts in and masks back out.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub pixels: Vec<f32>,
    pub size: usize,
    pub orig_width: usize,
    pub orig_height: usize,
    pub resized_width: usize,
    pub resized_height: usize,
}

impl Preprocessed {
    /// Longest-side resize to `size`, then zero padding on the bottom/right.
    pub fn new(image: &GrayImage, size: usize) -> Self {
        let (rw, rh, _) = longest_side_dims(image.width(), image.height(), size);
        let padded = image.resize_bilinear(rw, rh).pad(size, size);
        Self {
            pixels: padded.into_pixels(),
            size,
            orig_width: image.width(),
            orig_height: image.height(),
            resized_width: rw,
            resized_height: rh,
        }
    }

    fn scale(&self) -> (f32, f32) {
        (
            self.resized_width as f32 / self.orig_width as f32,
            self.resized_height as f32 / self.orig_height as f32,
        )
    }

    /// Maps a prompt from original-image pixels into model-input pixels.
    pub fn to_model(&self, p: &Prompt) -> Prompt {
        let (sx, sy) = self.scale();
        let lim = self.size as f32;
        match p.scaled(sx, sy) {
            Prompt::Point(q) => Prompt::point(q.x.clamp(0.0, lim), q.y.clamp(0.0, lim)),
            Prompt::Box(b) => Prompt::bbox(b.x1.clamp(0.0, lim), b.y1.clamp(0.0, lim), b.x2.clamp(0.0, lim), b.y2.clamp(0.0, lim)),
        }
    }

    /// Inverse of [`Self::to_model`] for prompts inside the resized region.
    pub fn to_original(&self, p: &Prompt) -> Prompt {
        let (sx, sy) = self.scale();
        p.scaled(1.0 / sx, 1.0 / sy)
    }

    /// Low-resolution logits `[m, m]` → binary mask at the original resolution:
    /// bilinear to the input size, crop the padding, bilinear to the original
    /// extent, threshold at 0.
    pub fn logits_to_mask(&self, logits: &Tensor) -> Bitmask {
        let m = logits.shape()[0];
        let full = resample_bilinear(logits.data(), m, m, self.size, self.size);
        let (rw, rh) = (self.resized_width, self.resized_height);
        let cropped: Vec<f32> = if (rw, rh) == (self.size, self.size) {
            full
        } else {
            (0..rh).flat_map(|r| full[r * self.size..r * self.size + rw].iter().copied()).collect()
        };
        let out = if (rw, rh) == (self.orig_width, self.orig_height) {
            cropped
        } else {
            resample_bilinear(&cropped, rw, rh, self.orig_width, self.orig_height)
        };
        Bitmask::from_fn(self.orig_height, self.orig_width, |r, c| out[r * self.orig_width + c] > 0.0)
    }
}

/// Final output of [`PromptModel::predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask: Bitmask,
    pub iou: f32,
    /// Chosen output token.
    pub index: usize,
    pub low_res_logits: Tensor,
}

impl PromptModel {
    pub fn preprocess(&self, image: &GrayImage) -> Preprocessed {
        Preprocessed::new(image, self.config.image_size)
    }

    /// Prediction against a cached embedding; prompts in original-image pixels.
    pub fn predict_embedded(
        &self,
        emb: &ImageEmbedding,
        pre: &Preprocessed,
        prompts: &[Prompt],
        multimask: bool,
        refine_steps: usize,
    ) -> Result<Prediction, ModelError> {
        for p in prompts {
            p.validate(pre.orig_width, pre.orig_height)?;
        }
        let mapped: Vec<Prompt> = prompts.iter().map(|p| pre.to_model(p)).collect();
        let pred: MaskPrediction = self.decode_prompts(emb, &mapped, multimask, refine_steps)?;
        let logits = pred.best_logits().clone();
        Ok(Prediction {
            mask: pre.logits_to_mask(&logits),
            iou: pred.iou_pred[pred.best_index],
            index: pred.best_index,
            low_res_logits: logits,
        })
    }

    /// End-to-end inference: one encoder pass, `1 + refine_steps` decodes.
    pub fn predict(
        &self,
        image: &GrayImage,
        prompts: &[Prompt],
        multimask: bool,
        refine_steps: usize,
    ) -> Result<Prediction, ModelError> {
        let pre = self.preprocess(image);
        let emb = self.encode_image(&pre.pixels)?;
        self.predict_embedded(&emb, &pre, prompts, multimask, refine_steps)
    }
}
