//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ultrasam_core::data::{synth_generate, Bitmask, CocoDataset};
use ultrasam_core::eval::{Detection, GroundTruth, Region};
use ultrasam_core::model::{ModelConfig, PromptModel};
use ultrasam_core::Tensor;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([rows, cols], |_| rng.random_range(-1.0..1.0))
}

/// A blob-like mask: a disc plus scattered speckle, so runs vary in length.
pub fn blob_mask(size: usize, seed: u64) -> Bitmask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = size as f64 / 2.0;
    let r2 = (size as f64 / 3.0).powi(2);
    Bitmask::from_fn(size, size, |r, col| {
        let (dx, dy) = (col as f64 - c, r as f64 - c);
        (dx * dx + dy * dy <= r2) ^ rng.random_bool(0.02)
    })
}

pub fn toy_model() -> PromptModel {
    PromptModel::new(ModelConfig::toy(), 0).expect("toy config is valid")
}

pub fn toy_dataset(n: usize) -> CocoDataset {
    synth_generate(n, 64, 0).expect("valid synth parameters")
}

/// Detections that perturb each ground truth box, plus the ground truths.
pub fn box_eval_case(n: usize, seed: u64) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dets = Vec::with_capacity(n);
    let mut gts = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = (rng.random_range(0.0..200.0f32), rng.random_range(0.0..200.0f32));
        let b = [x, y, x + 40.0, y + 30.0];
        let j = rng.random_range(-6.0..6.0f32);
        gts.push(GroundTruth {
            image_id: (i % 10) as u64,
            category_id: 1 + (i % 3) as u64,
            region: Region::Box(b),
        });
        dets.push(Detection {
            image_id: (i % 10) as u64,
            category_id: 1 + (i % 3) as u64,
            score: rng.random_range(0.0..1.0),
            region: Region::Box([b[0] + j, b[1], b[2] + j, b[3] - j.abs()]),
        });
    }
    (dets, gts)
}
