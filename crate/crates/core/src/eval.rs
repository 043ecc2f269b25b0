//! COCO-style mAP for prompt-based predictions and macro classification metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Bitmask, CocoDataset, DataError, GrayImage};
use crate::model::{ImageEmbedding, ModelError, Preprocessed, PromptModel};
use crate::prompts::{center_point, gt_box, Prompt, PromptError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("cannot compare a {0} with a {1}")]
    KindMismatch(&'static str, &'static str),
    #[error("mask sizes differ: {0:?} vs {1:?}")]
    MaskSize([usize; 2], [usize; 2]),
    #[error("{0} predictions against {1} labels")]
    Length(usize, usize),
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
    #[error("image {0} has no pixel data")]
    MissingPixels(u64),
    #[error("dataset has no instances to evaluate")]
    NoInstances,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// A predicted or ground-truth region. Boxes are `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Mask(Bitmask),
    Box([f32; 4]),
}

impl Region {
    fn kind(&self) -> &'static str {
        match self {
            Region::Mask(_) => "mask",
            Region::Box(_) => "box",
        }
    }
}

/// `|A∩B| / |A∪B|`, with an empty union defined as 0.
pub fn iou(a: &Region, b: &Region) -> Result<f64, EvalError> {
    match (a, b) {
        (Region::Mask(a), Region::Mask(b)) => {
            if a.size() != b.size() {
                return Err(EvalError::MaskSize(a.size(), b.size()));
            }
            let (mut inter, mut union) = (0usize, 0usize);
            for (&x, &y) in a.data().iter().zip(b.data()) {
                inter += (x & y) as usize;
                union += (x | y) as usize;
            }
            Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
        }
        (Region::Box(a), Region::Box(b)) => {
            let area = |r: &[f32; 4]| ((r[2] - r[0]).max(0.0) as f64) * ((r[3] - r[1]).max(0.0) as f64);
            let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0) as f64;
            let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0) as f64;
            let inter = iw * ih;
            let union = area(a) + area(b) - inter;
            Ok(if union <= 0.0 { 0.0 } else { inter / union })
        }
        _ => Err(EvalError::KindMismatch(a.kind(), b.kind())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub score: f32,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub category_id: u64,
    pub region: Region,
}

/// `0.50, 0.55, …, 0.95`, built as `(50 + 5i) / 100`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Detections kept per image and category, as in the COCO "all" setting.
pub const MAX_DETECTIONS: usize = 100;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub ground_truths: usize,
    pub detections: usize,
    /// Matched detections at IoU 0.50.
    pub true_positives: usize,
    pub false_positives: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub map50: f64,
    /// AP averaged over categories, keyed by threshold printed to two decimals.
    pub per_threshold_ap: BTreeMap<String, f64>,
    pub counts: MatchCounts,
}

/// 101-point interpolated AP of one ranked list. `tp[i]` says whether the
/// i-th ranked detection matched.
fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            t += 1;
        } else {
            f += 1;
        }
        precision.push(t as f64 / (t + f) as f64);
        recall.push(t as f64 / n_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let k = recall.partition_point(|&x| x < level);
        if k < precision.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

/// Greedy matching of score-ranked detections at one threshold. Returns the
/// match flag of each entry of `order`.
fn match_at(
    order: &[usize],
    dets: &[Detection],
    gts_by_image: &BTreeMap<u64, Vec<usize>>,
    ious: &BTreeMap<(usize, usize), f64>,
    thr: f64,
    n_gts: usize,
) -> Vec<bool> {
    let mut used = vec![false; n_gts];
    order
        .iter()
        .map(|&d| {
            let mut best: Option<(usize, f64)> = None;
            for &g in gts_by_image.get(&dets[d].image_id).into_iter().flatten() {
                if used[g] {
                    continue;
                }
                let v = ious[&(d, g)];
                // Equal IoU prefers the later ground truth, as pycocotools does.
                if v >= thr && best.is_none_or(|(_, b)| v >= b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
            }
            best.is_some()
        })
        .collect()
}

/// COCO-style mean AP over `thresholds`, averaged over the categories that
/// have ground truth. Detections are ranked globally by descending score,
/// ties in input order.
pub fn coco_map(dets: &[Detection], gts: &[GroundTruth], thresholds: &[f64]) -> Result<EvalReport, EvalError> {
    let cats: Vec<u64> = {
        let mut c: Vec<u64> = gts.iter().map(|g| g.category_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut per_thr = vec![0.0; thresholds.len()];
    let mut counts = MatchCounts {
        ground_truths: gts.len(),
        ..Default::default()
    };
    for &cat in &cats {
        let g_idx: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].category_id == cat).collect();
        let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].category_id == cat).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        let mut kept: BTreeMap<u64, usize> = BTreeMap::new();
        order.retain(|&d| {
            let n = kept.entry(dets[d].image_id).or_default();
            *n += 1;
            *n <= MAX_DETECTIONS
        });

        let cat_gts: Vec<GroundTruth> = g_idx.iter().map(|&i| gts[i].clone()).collect();
        let mut gts_by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (j, g) in cat_gts.iter().enumerate() {
            gts_by_image.entry(g.image_id).or_default().push(j);
        }
        let mut ious = BTreeMap::new();
        for &d in &order {
            for &j in gts_by_image.get(&dets[d].image_id).into_iter().flatten() {
                ious.insert((d, j), iou(&dets[d].region, &cat_gts[j].region)?);
            }
        }
        counts.detections += order.len();
        for (k, &thr) in thresholds.iter().enumerate() {
            let tp = match_at(&order, dets, &gts_by_image, &ious, thr, cat_gts.len());
            per_thr[k] += interpolated_ap(&tp, cat_gts.len());
            if thr == 0.5 {
                let hits = tp.iter().filter(|&&t| t).count();
                counts.true_positives += hits;
                counts.false_positives += tp.len() - hits;
            }
        }
    }
    if !cats.is_empty() {
        per_thr.iter_mut().for_each(|v| *v /= cats.len() as f64);
    }
    let map = if per_thr.is_empty() { 0.0 } else { per_thr.iter().sum::<f64>() / per_thr.len() as f64 };
    let map50 = thresholds.iter().position(|&t| t == 0.5).map(|k| per_thr[k]).unwrap_or(0.0);
    Ok(EvalReport {
        map,
        map50,
        per_threshold_ap: thresholds.iter().zip(&per_thr).map(|(t, ap)| (format!("{t:.2}"), *ap)).collect(),
        counts,
    })
}

/// Canonical evaluation prompt for each ground-truth instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    CenterPoint,
    GtBox,
}

impl PromptMode {
    pub fn prompt(self, mask: &Bitmask) -> Result<Prompt, PromptError> {
        match self {
            PromptMode::CenterPoint => center_point(mask).map(Prompt::Point),
            PromptMode::GtBox => gt_box(mask).map(Prompt::Box),
        }
    }
}

/// Anything that maps an image plus prompts to one mask and a confidence.
pub trait Segmenter {
    type Session;
    fn open(&self, image: &GrayImage) -> Result<Self::Session, EvalError>;
    fn segment(&self, session: &Self::Session, prompts: &[Prompt], refine_steps: usize) -> Result<(Bitmask, f32), EvalError>;
}

impl Segmenter for PromptModel {
    type Session = (Preprocessed, ImageEmbedding);

    fn open(&self, image: &GrayImage) -> Result<Self::Session, EvalError> {
        let pre = self.preprocess(image);
        let emb = self.encode_image(&pre.pixels)?;
        Ok((pre, emb))
    }

    fn segment(&self, (pre, emb): &Self::Session, prompts: &[Prompt], refine_steps: usize) -> Result<(Bitmask, f32), EvalError> {
        let p = self.predict_embedded(emb, pre, prompts, true, refine_steps)?;
        Ok((p.mask, p.iou))
    }
}

/// Prompts every ground-truth instance with its canonical prompt and scores
/// the resulting masks with [`coco_map`]. Score is the predicted IoU.
pub fn prompt_eval<S: Segmenter>(
    model: &S,
    ds: &CocoDataset,
    mode: PromptMode,
    refine_steps: usize,
) -> Result<(EvalReport, Vec<Detection>), EvalError> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for img in &ds.images {
        let anns: Vec<_> = ds.annotations_for(img.id).collect();
        if anns.is_empty() {
            continue;
        }
        let pixels = img.pixels.as_ref().ok_or(EvalError::MissingPixels(img.id))?;
        let session = model.open(pixels)?;
        for a in anns {
            let mask = a.mask(img.height, img.width)?;
            let prompt = mode.prompt(&mask)?;
            let (pred, score) = model.segment(&session, &[prompt], refine_steps)?;
            dets.push(Detection {
                image_id: img.id,
                category_id: a.category_id,
                score,
                region: Region::Mask(pred),
            });
            gts.push(GroundTruth {
                image_id: img.id,
                category_id: a.category_id,
                region: Region::Mask(mask),
            });
        }
    }
    if gts.is_empty() {
        return Err(EvalError::NoInstances);
    }
    Ok((coco_map(&dets, &gts, &coco_thresholds())?, dets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-class precision/recall/F1 (0/0 := 0) and their unweighted mean over
/// the classes that occur in `truth`.
pub fn classification_metrics(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<ClassificationReport, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Length(pred.len(), truth.len()));
    }
    if let Some(&label) = pred.iter().chain(truth).find(|&&l| l >= n_classes) {
        return Err(EvalError::Label { label, n_classes });
    }
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count();
        let predicted = pred.iter().filter(|&&p| p == c).count();
        let support = truth.iter().filter(|&&t| t == c).count();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        per_class.push(ClassMetrics {
            class: c,
            precision,
            recall,
            f1,
            support,
        });
    }
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64
        }
    };
    Ok(ClassificationReport {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        per_class,
    })
}
