//! Prompt-simulated fine-tuning: batch assembly, warmup + milestone schedule,
//! AdamW updates, validation, checkpoints and resumable state.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::image::{pad_mask, resize_mask_nearest};
use crate::data::{longest_side_dims, Bitmask, CocoDataset, DataError, GrayImage};
use crate::eval::{prompt_eval, EvalError, PromptMode};
use crate::losses::{classification_focal_loss, instance_loss_graph, LossError, LossWeights};
use crate::model::{
    decode_passes, encode_graph, is_frozen, save_checkpoint, Ctx, ModelError, Preprocessed, PromptModel,
};
use crate::numerics::{adamw_step, AdamW, AdamWState, Graph, Tensor, TensorError, Var};
use crate::prompts::{sample_training_prompt, Prompt, PromptError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training split has no images with instances")]
    EmptySplit,
    #[error("image {0} has no pixel data")]
    MissingPixels(u64),
    #[error("non-finite loss at iter {iter} (lr {lr}): focal {focal}, dice {dice}, iou {iou}")]
    NonFinite {
        iter: usize,
        lr: f32,
        focal: f32,
        dice: f32,
        iou: f32,
    },
    #[error("parameter {0} became non-finite")]
    NonFiniteParameter(String),
    #[error("training already finished ({0} iterations)")]
    Finished(usize),
    #[error("train state: {0}")]
    State(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub base_lr: f32,
    pub warmup_iters: usize,
    pub milestones: Vec<usize>,
    pub decay_factor: f32,
    pub batch_size: usize,
    pub flip_prob: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Validate (and maybe checkpoint) every this many iterations; 0 disables.
    pub val_every: usize,
    /// Instances prompted per sampled image; `None` uses all of them.
    pub prompts_per_image: Option<usize>,
    /// Refinement decodes after the first; each pass is supervised.
    pub refine_steps: usize,
    pub adamw: AdamW,
}

impl TrainConfig {
    /// The published schedule: 30k iterations, warmup 500, ÷10 at 20,000 and 28,888.
    pub fn paper() -> Self {
        Self {
            total_iters: 30_000,
            base_lr: 1e-4,
            warmup_iters: 500,
            milestones: vec![20_000, 28_888],
            decay_factor: 0.1,
            batch_size: 8,
            flip_prob: 0.5,
            seed: 0,
            loss_weights: LossWeights::default(),
            val_every: 1_000,
            prompts_per_image: None,
            refine_steps: 1,
            adamw: AdamW::default(),
        }
    }

    /// Desk-scale overfit schedule for the toy model.
    pub fn toy() -> Self {
        Self {
            total_iters: 2_000,
            base_lr: 5e-4,
            warmup_iters: 0,
            milestones: vec![1_500],
            decay_factor: 0.1,
            batch_size: 8,
            flip_prob: 0.0,
            seed: 0,
            loss_weights: LossWeights::default(),
            val_every: 500,
            prompts_per_image: None,
            refine_steps: 1,
            adamw: AdamW {
                weight_decay: 0.0,
                ..AdamW::default()
            },
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.total_iters == 0 || self.batch_size == 0 {
            return fail("total_iters and batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail(format!("decay_factor must be in (0, 1], got {}", self.decay_factor));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.total_iters) {
            return fail(format!("milestones {:?} must be below total_iters {}", self.milestones, self.total_iters));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        if self.prompts_per_image == Some(0) {
            return fail("prompts_per_image must be positive".into());
        }
        self.loss_weights.validate()?;
        Ok(())
    }
}

/// Linear warmup from 0, then `base_lr · decay^k` with `k` the milestones reached.
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> f32 {
    if iter < cfg.warmup_iters {
        return cfg.base_lr * (iter as f32 / cfg.warmup_iters as f32);
    }
    cfg.milestones
        .iter()
        .filter(|&&m| iter >= m)
        .fold(cfg.base_lr, |lr, _| lr * cfg.decay_factor)
}

/// Per-step losses; the split terms are weighted, batch-averaged contributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f32,
    pub loss_total: f32,
    pub loss_focal: f32,
    pub loss_dice: f32,
    pub loss_iou: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub iter: usize,
    pub map_point: f64,
    pub map50_point: f64,
    pub map_box: f64,
    pub map50_box: f64,
}

impl ValRecord {
    /// Model-selection score: mean of point- and box-prompt mAP.
    pub fn metric(&self) -> f64 {
        0.5 * (self.map_point + self.map_box)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iter: usize,
    pub optimizer: BTreeMap<String, AdamWState>,
    /// Root of the per-iteration random streams.
    pub seed: u64,
    pub best_val_metric: Option<f64>,
    pub loss_history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(model: &PromptModel, cfg: &TrainConfig) -> Self {
        let optimizer = model
            .params
            .iter()
            .filter(|(name, _)| !is_frozen(name))
            .map(|(name, t)| (name.clone(), AdamWState::new(t.len(), cfg.adamw)))
            .collect();
        Self {
            iter: 0,
            optimizer,
            seed: cfg.seed,
            best_val_metric: None,
            loss_history: Vec::new(),
        }
    }

    /// Random stream for iteration `iter`: independent of how the run got
    /// there, so a resumed run draws the same batches.
    pub fn rng_for(&self, iter: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(iter as u64);
        rng
    }
}

// ---- state persistence ----

const STATE_MAGIC: &[u8; 8] = b"USAMSTAT";
const STATE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StateHeader {
    iter: usize,
    seed: u64,
    best_val_metric: Option<f64>,
    loss_history: Vec<LossRecord>,
    /// name → (step_count, hyper, length), in name order.
    moments: Vec<(String, u64, AdamW, usize)>,
}

/// Header JSON, then each parameter's first and second moments as f32 LE.
pub fn write_state(state: &TrainState) -> Vec<u8> {
    let header = StateHeader {
        iter: state.iter,
        seed: state.seed,
        best_val_metric: state.best_val_metric,
        loss_history: state.loss_history.clone(),
        moments: state
            .optimizer
            .iter()
            .map(|(n, s)| (n.clone(), s.step_count, s.hyper, s.m.len()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for s in state.optimizer.values() {
        for v in s.m.iter().chain(&s.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_state(bytes: &[u8]) -> Result<TrainState, TrainError> {
    let bad = |m: &str| TrainError::State(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != STATE_MAGIC {
        return Err(bad("not a train state file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != STATE_VERSION {
        return Err(TrainError::State(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
    let header: StateHeader = serde_json::from_slice(json).map_err(|e| TrainError::State(e.to_string()))?;
    let mut floats = bytes[20 + len..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut optimizer = BTreeMap::new();
    for (name, step_count, hyper, n) in header.moments {
        let m: Vec<f32> = floats.by_ref().take(n).collect();
        let v: Vec<f32> = floats.by_ref().take(n).collect();
        if m.len() != n || v.len() != n {
            return Err(TrainError::State(format!("truncated moments for {name}")));
        }
        optimizer.insert(name, AdamWState { step_count, m, v, hyper });
    }
    if floats.next().is_some() {
        return Err(bad("trailing bytes"));
    }
    Ok(TrainState {
        iter: header.iter,
        optimizer,
        seed: header.seed,
        best_val_metric: header.best_val_metric,
        loss_history: header.loss_history,
    })
}

fn save_state(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, write_state(state))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<TrainState, TrainError> {
    read_state(&std::fs::read(path)?)
}

// ---- batches ----

/// One source image with its instance masks at the original resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image_id: u64,
    pub image: GrayImage,
    pub masks: Vec<Bitmask>,
}

/// Decodes every image's masks. Images without instances are skipped.
pub fn prepare_samples(ds: &CocoDataset) -> Result<Vec<TrainSample>, TrainError> {
    let mut out = Vec::new();
    for img in &ds.images {
        let masks = ds
            .annotations_for(img.id)
            .map(|a| a.mask(img.height, img.width))
            .collect::<Result<Vec<_>, _>>()?;
        if masks.is_empty() {
            warn!("image {} has no instances; skipped", img.id);
            continue;
        }
        let image = img.pixels.clone().ok_or(TrainError::MissingPixels(img.id))?;
        out.push(TrainSample {
            image_id: img.id,
            image,
            masks,
        });
    }
    if out.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchInstance {
    /// Simulated prompt in model-input pixels.
    pub prompt: Prompt,
    /// Ground truth at the mask-logit resolution.
    pub target: Bitmask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub image_id: u64,
    pub flipped: bool,
    /// `image_size²` model-input pixels.
    pub pixels: Vec<f32>,
    pub instances: Vec<BatchInstance>,
}

/// Geometry shared by batch assembly: model input side and mask-logit side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchShape {
    pub image_size: usize,
    pub mask_size: usize,
}

/// Samples `batch_size` images with replacement, flips each with
/// probability `flip_prob`, resizes and pads to the model input, and draws
/// one simulated prompt per selected instance.
pub fn assemble_batch<R: Rng + ?Sized>(
    samples: &[TrainSample],
    batch_size: usize,
    rng: &mut R,
    flip_prob: f64,
    shape: BatchShape,
    prompts_per_image: Option<usize>,
) -> Result<Vec<BatchItem>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let size = shape.image_size;
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let s = &samples[rng.random_range(0..samples.len())];
        let flipped = flip_prob > 0.0 && rng.random_bool(flip_prob);
        let image = if flipped { s.image.hflip() } else { s.image.clone() };
        let pre = Preprocessed::new(&image, size);
        let (rw, rh, _) = longest_side_dims(image.width(), image.height(), size);

        let picked: Vec<usize> = match prompts_per_image {
            Some(k) if k < s.masks.len() => {
                let mut idx = sample(rng, s.masks.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..s.masks.len()).collect(),
        };
        let mut instances = Vec::with_capacity(picked.len());
        for i in picked {
            let mask = if flipped { s.masks[i].hflip() } else { s.masks[i].clone() };
            let mask = pad_mask(&resize_mask_nearest(&mask, rw, rh), size, size);
            if mask.is_empty() {
                warn!("instance {i} of image {} vanished at input resolution", s.image_id);
                continue;
            }
            let prompt = sample_training_prompt(&mask, size, size, rng)?;
            let target = resize_mask_nearest(&mask, shape.mask_size, shape.mask_size);
            instances.push(BatchInstance { prompt, target });
        }
        batch.push(BatchItem {
            image_id: s.image_id,
            flipped,
            pixels: pre.pixels,
            instances,
        });
    }
    Ok(batch)
}

// ---- optimization ----

fn apply_updates(
    model: &mut PromptModel,
    g: &mut Graph,
    bindings: &BTreeMap<String, Var>,
    state: &mut TrainState,
    lr: f32,
) -> Result<(), TrainError> {
    for (name, &v) in bindings {
        let Some(grad) = g.take_grad(v) else { continue };
        let opt = state
            .optimizer
            .get_mut(name)
            .ok_or_else(|| TrainError::State(format!("no optimizer state for {name}")))?;
        let param = model.params.get_mut(name).expect("bound parameters exist");
        adamw_step(name, param.data_mut(), &grad, opt, lr)?;
        if !param.is_finite() {
            return Err(TrainError::NonFiniteParameter(name.clone()));
        }
    }
    Ok(())
}

/// Summed loss of every instance on one image, with weighted term sums.
struct ImageLoss {
    total: Option<Var>,
    terms: [f64; 3],
}

fn image_loss(
    model: &PromptModel,
    ctx: &mut Ctx,
    item: &BatchItem,
    cfg: &TrainConfig,
) -> Result<ImageLoss, TrainError> {
    let mc = &model.config;
    let mut out = ImageLoss {
        total: None,
        terms: [0.0; 3],
    };
    if item.instances.is_empty() {
        return Ok(out);
    }
    let pixels = ctx.g.constant(Tensor::new([1, mc.image_size, mc.image_size], item.pixels.clone())?);
    let tokens = encode_graph(ctx, mc, pixels)?;
    let pass_weight = 1.0 / (1 + cfg.refine_steps) as f32;
    for inst in &item.instances {
        let passes = decode_passes(ctx, mc, tokens, &[inst.prompt], cfg.refine_steps, true)?;
        for pass in passes {
            let (l, d) = instance_loss_graph(ctx.g, pass.masks, pass.iou, &inst.target, &cfg.loss_weights)?;
            let l = ctx.g.scale(l, pass_weight);
            out.total = Some(match out.total {
                Some(t) => ctx.g.add(t, l)?,
                None => l,
            });
            let w = pass_weight as f64;
            out.terms[0] += w * d.focal as f64;
            out.terms[1] += w * d.dice as f64;
            out.terms[2] += w * d.iou as f64;
        }
    }
    Ok(out)
}

/// One optimization step on `batch`: loss summed over instances (passes
/// averaged) and averaged over images, backward, AdamW at `lr_at(iter)`.
///
/// A zero learning rate (the first warmup step) records the loss but leaves
/// parameters and optimizer moments untouched.
pub fn train_step(
    model: &mut PromptModel,
    batch: &[BatchItem],
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<LossRecord, TrainError> {
    if state.iter >= cfg.total_iters {
        return Err(TrainError::Finished(cfg.total_iters));
    }
    let lr = lr_at(cfg, state.iter);
    let mut g = Graph::new();
    let mut ctx = model.ctx(&mut g, true);
    let mut total: Option<Var> = None;
    let mut terms = [0.0f64; 3];
    for item in batch {
        let l = image_loss(model, &mut ctx, item, cfg)?;
        if let Some(v) = l.total {
            total = Some(match total {
                Some(t) => ctx.g.add(t, v)?,
                None => v,
            });
        }
        terms.iter_mut().zip(l.terms).for_each(|(a, b)| *a += b);
    }
    let bindings = ctx.into_bindings();
    let n = batch.len().max(1) as f32;
    let [focal, dice, iou] = terms.map(|t| (t / n as f64) as f32);
    let iter = state.iter;
    let record_for = |total: f32| LossRecord {
        iter,
        lr,
        loss_total: total,
        loss_focal: focal,
        loss_dice: dice,
        loss_iou: iou,
    };
    let record = match total {
        Some(t) => {
            let loss = g.scale(t, 1.0 / n);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    iter: state.iter,
                    lr,
                    focal,
                    dice,
                    iou,
                });
            }
            if lr > 0.0 {
                g.backward(loss)?;
                apply_updates(model, &mut g, &bindings, state, lr)?;
            }
            record_for(value)
        }
        None => {
            warn!("iter {}: batch has no instances", state.iter);
            record_for(0.0)
        }
    };
    state.loss_history.push(record);
    state.iter += 1;
    Ok(record)
}

/// Point- and box-prompt mAP of `model` on `ds`.
pub fn validate(model: &PromptModel, ds: &CocoDataset, iter: usize, refine_steps: usize) -> Result<ValRecord, TrainError> {
    let (p, _) = prompt_eval(model, ds, PromptMode::CenterPoint, refine_steps)?;
    let (b, _) = prompt_eval(model, ds, PromptMode::GtBox, refine_steps)?;
    Ok(ValRecord {
        iter,
        map_point: p.map,
        map50_point: p.map50,
        map_box: b.map,
        map50_box: b.map50,
    })
}

#[derive(Debug, Clone, Default)]
pub struct LoopOptions<'a> {
    /// Checkpoints, state and the JSON-lines log go here when set.
    pub out_dir: Option<&'a Path>,
    /// Validation split; validation is skipped without one.
    pub val: Option<&'a CocoDataset>,
    /// Continue from a saved state instead of starting at iteration 0.
    pub resume: Option<TrainState>,
    /// Stop (and write the final checkpoint) once this iteration is reached.
    pub stop_at: Option<usize>,
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const FINAL_STATE: &str = "final.state";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

pub struct TrainOutcome {
    pub model: PromptModel,
    pub state: TrainState,
    pub validations: Vec<ValRecord>,
}

fn log_line<T: Serialize>(log: &mut Option<BufWriter<File>>, value: &T) -> Result<(), TrainError> {
    if let Some(w) = log {
        serde_json::to_writer(&mut *w, value).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Runs the schedule from the current (or resumed) iteration.
pub fn train_loop(
    mut model: PromptModel,
    train: &CocoDataset,
    cfg: &TrainConfig,
    opts: LoopOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let samples = prepare_samples(train)?;
    let mut state = opts.resume.unwrap_or_else(|| TrainState::new(&model, cfg));
    let shape = BatchShape {
        image_size: model.config.image_size,
        mask_size: model.config.mask_size(),
    };
    let path = |name: &str| -> Option<PathBuf> { opts.out_dir.map(|d| d.join(name)) };
    if let Some(dir) = opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log = match path(TRAIN_LOG) {
        Some(p) => {
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(state.iter > 0)
                .write(true)
                .truncate(state.iter == 0)
                .open(p)?;
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let stop = opts.stop_at.unwrap_or(cfg.total_iters).min(cfg.total_iters);
    let mut validations = Vec::new();
    while state.iter < stop {
        let mut rng = state.rng_for(state.iter);
        let batch = assemble_batch(&samples, cfg.batch_size, &mut rng, cfg.flip_prob, shape, cfg.prompts_per_image)?;
        let rec = train_step(&mut model, &batch, &mut state, cfg)?;
        log_line(&mut log, &rec)?;
        if rec.iter % 50 == 0 {
            info!("iter {} lr {:.2e} loss {:.4}", rec.iter, rec.lr, rec.loss_total);
        }
        if let Some(val) = opts.val {
            if cfg.val_every > 0 && state.iter % cfg.val_every == 0 {
                let v = validate(&model, val, state.iter, cfg.refine_steps)?;
                info!("iter {} val map point {:.3} box {:.3}", v.iter, v.map_point, v.map_box);
                log_line(&mut log, &v)?;
                if state.best_val_metric.is_none_or(|b| v.metric() > b) {
                    state.best_val_metric = Some(v.metric());
                    if let Some(p) = path(BEST_CHECKPOINT) {
                        save_checkpoint(&model, &p)?;
                    }
                }
                validations.push(v);
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(p) = path(FINAL_CHECKPOINT) {
        save_checkpoint(&model, &p)?;
    }
    if let Some(p) = path(FINAL_STATE) {
        save_state(&state, &p)?;
    }
    Ok(TrainOutcome {
        model,
        state,
        validations,
    })
}

// ---- classification head ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub iters: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub focal_alpha: f32,
    pub focal_gamma: f32,
    /// Train only the linear head on frozen encoder features.
    pub freeze_encoder: bool,
    pub adamw: AdamW,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            freeze_encoder: false,
            adamw: AdamW::default(),
        }
    }
}

/// One labelled image at the model input size.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub label: usize,
}

/// Fits the mean-pool + linear head (and, unless frozen, the encoder) with
/// sigmoid focal loss on one-hot labels. Returns the per-step losses.
pub fn train_classifier(
    model: &mut PromptModel,
    data: &[LabeledImage],
    cfg: &ClassifierTrainConfig,
) -> Result<Vec<f32>, TrainError> {
    let n_classes = model.config.n_classes.ok_or(ModelError::NoClassifier)?;
    if data.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    if let Some(bad) = data.iter().find(|d| d.label >= n_classes) {
        return Err(LossError::Label {
            label: bad.label,
            n_classes,
        }
        .into());
    }
    let size = model.config.image_size;
    let mut state: BTreeMap<String, AdamWState> = BTreeMap::new();
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(iter as u64);
        let picks: Vec<&LabeledImage> = (0..cfg.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let mut g = Graph::new();
        let mut ctx = model.ctx(&mut g, true);
        let mut rows = Vec::with_capacity(picks.len());
        for p in &picks {
            let x = ctx.g.constant(Tensor::new([1, size, size], p.pixels.clone())?);
            let tokens = encode_graph(&mut ctx, &model.config, x)?;
            let tokens = if cfg.freeze_encoder { ctx.g.detach(tokens) } else { tokens };
            let pooled = ctx.g.mean_rows(tokens)?;
            rows.push(ctx.linear("classifier", pooled)?);
        }
        let logits = ctx.g.concat_rows(&rows)?;
        let labels: Vec<usize> = picks.iter().map(|p| p.label).collect();
        let loss = classification_focal_loss(ctx.g, logits, &labels, cfg.focal_alpha, cfg.focal_gamma)?;
        let bindings = ctx.into_bindings();
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                iter,
                lr: cfg.lr,
                focal: value,
                dice: 0.0,
                iou: 0.0,
            });
        }
        g.backward(loss)?;
        for (name, &v) in &bindings {
            let Some(grad) = g.take_grad(v) else { continue };
            let param = model.params.get_mut(name).expect("bound parameters exist");
            let opt = state
                .entry(name.clone())
                .or_insert_with(|| AdamWState::new(param.len(), cfg.adamw));
            adamw_step(name, param.data_mut(), &grad, opt, cfg.lr)?;
        }
        losses.push(value);
    }
    Ok(losses)
}

/// Argmax class of each image.
pub fn predict_classes(model: &PromptModel, images: &[LabeledImage]) -> Result<Vec<usize>, TrainError> {
    images
        .iter()
        .map(|im| Ok(crate::model::argmax(&model.classify(&im.pixels)?)))
        .collect()
}
