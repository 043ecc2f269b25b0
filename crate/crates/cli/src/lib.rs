//! Subcommands of the `ultrasam` binary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::{Map, Value};

use ultrasam_core::data::{
    encode_mask_png, encode_png, load_png, parse_coco, remove_overlap, split_train_val, synth_generate, write_coco, Bitmask, Category,
    CocoDataset, ImageRecord, InstanceAnnotation,
};
use ultrasam_core::eval::{prompt_eval, EvalReport, PromptMode};
use ultrasam_core::model::{load_checkpoint, read_checkpoint, ModelConfig, PromptModel};
use ultrasam_core::prompts::Prompt;
use ultrasam_core::training::{train_loop, LoopOptions, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ultrasam", version, about = "Promptable ultrasound segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic lesion dataset (PNGs plus COCO annotations).
    Synth(SynthArgs),
    /// Convert label-mask folders or polygon COCO files to normalized COCO.
    Convert(ConvertArgs),
    /// Train the promptable model.
    Train(TrainArgs),
    /// Prompt-based mAP of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Segment one image from a single prompt.
    Predict(PredictArgs),
    /// Run the HTTP annotation service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(8..))]
    pub size: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConvertFormat {
    /// `--masks` is a folder of 8-bit label PNGs named like the images.
    BinaryMasks,
    /// `--masks` is a COCO JSON file (polygons or RLE).
    Coco,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ConvertFormat::BinaryMasks)]
    pub format: ConvertFormat,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// COCO annotation file; image paths resolve against its folder.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Flat JSON object of TrainConfig / ModelConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the toy presets instead of the paper-scale ones.
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Held-out fraction for validation; 0 validates on the training data.
    #[arg(long, default_value_t = 0.0)]
    pub val_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PromptArg {
    #[value(name = "center_point")]
    CenterPoint,
    #[value(name = "gt_box")]
    GtBox,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub prompt: PromptArg,
    #[arg(long, default_value_t = 1)]
    pub refine_steps: usize,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("prompt").required(true).multiple(false).args(["point", "bbox"]))]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// `X,Y` in image pixels.
    #[arg(long, value_parser = parse_point)]
    pub point: Option<[f32; 2]>,
    /// `X1,Y1,X2,Y2` in image pixels.
    #[arg(long = "box", value_parser = parse_box)]
    pub bbox: Option<[f32; 4]>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub refine_steps: usize,
    #[arg(long)]
    pub single_mask: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8823)]
    pub port: u16,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_sessions: u64,
    /// Static client bundle served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f32; N], String> {
    let v: Vec<f32> = s
        .split(',')
        .map(|t| t.trim().parse::<f32>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f32>| format!("expected {N} comma-separated numbers, got {}", v.len()))
}

fn parse_point(s: &str) -> Result<[f32; 2], String> {
    parse_floats(s)
}

fn parse_box(s: &str) -> Result<[f32; 4], String> {
    parse_floats(s)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Convert(a) => cmd_convert(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Predict(a) => {
            let iou = cmd_predict(&a)?;
            println!("{iou:.4}");
            Ok(())
        }
        Command::Serve(a) => cmd_serve(&a),
    }
}

const IMAGES_DIR: &str = "images";
const ANNOTATIONS_FILE: &str = "annotations.json";

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let ds = synth_generate(a.n as usize, a.size as usize, a.seed)?;
    let img_dir = a.out.join(IMAGES_DIR);
    fs::create_dir_all(&img_dir).with_context(|| format!("creating {}", img_dir.display()))?;
    let mut doc = ds.clone();
    for (rec, out) in ds.images.iter().zip(&mut doc.images) {
        let px = rec.pixels.as_ref().expect("synthetic images carry pixels");
        let path = img_dir.join(&rec.file_name);
        fs::write(&path, encode_png(px)?).with_context(|| format!("writing {}", path.display()))?;
        out.file_name = format!("{IMAGES_DIR}/{}", rec.file_name);
    }
    let ann = a.out.join(ANNOTATIONS_FILE);
    fs::write(&ann, write_coco(&doc)).with_context(|| format!("writing {}", ann.display()))?;
    info!("wrote {} images and {} instances to {}", doc.images.len(), doc.annotations.len(), a.out.display());
    Ok(())
}

/// Parses a COCO file and loads every image's pixels from paths relative to
/// the file's folder.
pub fn load_dataset(path: &Path) -> Result<CocoDataset> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut ds = parse_coco(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    let root = path.parent().unwrap_or(Path::new("."));
    for rec in &mut ds.images {
        let p = root.join(&rec.file_name);
        let img = load_png(&p).with_context(|| format!("loading {}", p.display()))?;
        if (img.width(), img.height()) != (rec.width, rec.height) {
            bail!("{}: {}x{} on disk, {}x{} in {}", p.display(), img.width(), img.height(), rec.width, rec.height, path.display());
        }
        rec.pixels = Some(img);
    }
    Ok(ds)
}

fn png_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            let name = path.file_name().and_then(|n| n.to_str()).ok_or_else(|| anyhow!("non-UTF-8 file name in {}", dir.display()))?;
            out.insert(name.to_string(), path);
        }
    }
    Ok(out)
}

/// One category per label value found, one instance per label per image.
pub fn convert_label_masks(images: &Path, masks: &Path) -> Result<CocoDataset> {
    let imgs = png_files(images)?;
    let msks = png_files(masks)?;
    let mut problems = Vec::new();
    for name in msks.keys().filter(|n| !imgs.contains_key(*n)) {
        problems.push(format!("orphan mask {name}: no image of that name"));
    }
    for name in imgs.keys().filter(|n| !msks.contains_key(*n)) {
        problems.push(format!("image {name} has no mask"));
    }
    let mut ds = CocoDataset::default();
    let mut labels_seen = BTreeSet::new();
    for (i, (name, path)) in imgs.iter().enumerate() {
        let Some(mpath) = msks.get(name) else { continue };
        let img = load_png(path).with_context(|| format!("loading {}", path.display()))?;
        let (mw, mh, values) = ultrasam_core::data::image::load_png_u8(mpath).with_context(|| format!("loading {}", mpath.display()))?;
        if (mw, mh) != (img.width(), img.height()) {
            problems.push(format!("{name}: mask {mw}x{mh} does not match image {}x{}", img.width(), img.height()));
            continue;
        }
        let image_id = i as u64 + 1;
        ds.images.push(ImageRecord {
            id: image_id,
            file_name: name.clone(),
            width: mw,
            height: mh,
            source: None,
            pixels: None,
        });
        let labels: BTreeSet<u8> = values.iter().copied().filter(|&v| v > 0).collect();
        let layers: Vec<Bitmask> = labels
            .iter()
            .map(|&k| Bitmask::from_vec(mh, mw, values.iter().map(|&v| u8::from(v == k)).collect()))
            .collect::<Result<_, _>>()?;
        for (&k, mask) in labels.iter().zip(remove_overlap(&layers)?) {
            if mask.is_empty() {
                continue;
            }
            let id = ds.annotations.len() as u64 + 1;
            ds.annotations.push(InstanceAnnotation::from_mask(id, image_id, k as u64, &mask)?);
            labels_seen.insert(k);
        }
    }
    if !problems.is_empty() {
        bail!("{} problem(s): {}", problems.len(), problems.join("; "));
    }
    ds.categories = labels_seen
        .into_iter()
        .map(|k| Category {
            id: k as u64,
            name: format!("label_{k}"),
        })
        .collect();
    ds.validate()?;
    Ok(ds)
}

/// Rasterizes every annotation to RLE, removes overlaps in annotation order
/// and recomputes bbox/area. Images must exist with the recorded size.
pub fn normalize_coco(images: &Path, coco: &Path) -> Result<CocoDataset> {
    let src = parse_coco(&fs::read(coco).with_context(|| format!("reading {}", coco.display()))?)?;
    src.validate()?;
    let mut problems = Vec::new();
    for rec in &src.images {
        let p = images.join(&rec.file_name);
        match ultrasam_core::data::image::load_png_u8(&p) {
            Ok((w, h, _)) if (w, h) != (rec.width, rec.height) => {
                problems.push(format!("{}: image is {w}x{h}, annotations say {}x{}", rec.file_name, rec.width, rec.height))
            }
            Ok(_) => {}
            Err(e) => problems.push(format!("{}: {e}", rec.file_name)),
        }
    }
    if !problems.is_empty() {
        bail!("{} problem(s): {}", problems.len(), problems.join("; "));
    }
    let mut out = CocoDataset {
        images: src.images.clone(),
        annotations: Vec::new(),
        categories: src.categories.clone(),
    };
    for rec in &src.images {
        let anns: Vec<&InstanceAnnotation> = src.annotations_for(rec.id).collect();
        let masks: Vec<Bitmask> = anns.iter().map(|a| a.mask(rec.height, rec.width)).collect::<Result<_, _>>()?;
        for (a, m) in anns.iter().zip(remove_overlap(&masks)?) {
            if m.is_empty() {
                warn!("annotation {} vanished after overlap removal", a.id);
                continue;
            }
            out.annotations.push(InstanceAnnotation::from_mask(a.id, rec.id, a.category_id, &m)?);
        }
    }
    out.validate()?;
    out.check_geometry()?;
    Ok(out)
}

pub fn cmd_convert(a: &ConvertArgs) -> Result<()> {
    let ds = match a.format {
        ConvertFormat::BinaryMasks => convert_label_masks(&a.images, &a.masks)?,
        ConvertFormat::Coco => normalize_coco(&a.images, &a.masks)?,
    };
    fs::write(&a.out, write_coco(&ds)).with_context(|| format!("writing {}", a.out.display()))?;
    info!("wrote {} images and {} instances to {}", ds.images.len(), ds.annotations.len(), a.out.display());
    Ok(())
}

/// Presets overlaid with a flat JSON object whose keys are TrainConfig or
/// ModelConfig field names. Unknown keys are rejected.
pub fn resolve_configs(toy: bool, overrides: Option<&Value>) -> Result<(ModelConfig, TrainConfig)> {
    let (model, train) = if toy {
        (ModelConfig::toy(), TrainConfig::toy())
    } else {
        (ModelConfig::paper(), TrainConfig::paper())
    };
    let Some(overrides) = overrides else {
        return Ok((model, train));
    };
    let obj = overrides.as_object().ok_or_else(|| anyhow!("config must be a JSON object"))?;
    let mut m = to_object(&model)?;
    let mut t = to_object(&train)?;
    for (k, v) in obj {
        if t.contains_key(k) {
            t.insert(k.clone(), v.clone());
        } else if m.contains_key(k) {
            m.insert(k.clone(), v.clone());
        } else {
            bail!("unknown config key {k:?}");
        }
    }
    let model: ModelConfig = serde_json::from_value(Value::Object(m)).context("model config")?;
    let train: TrainConfig = serde_json::from_value(Value::Object(t)).context("train config")?;
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

fn to_object<T: serde::Serialize>(v: &T) -> Result<Map<String, Value>> {
    match serde_json::to_value(v)? {
        Value::Object(m) => Ok(m),
        _ => unreachable!("configs serialize to objects"),
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let overrides = a
        .config
        .as_ref()
        .map(|p| -> Result<Value> {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))
        })
        .transpose()?;
    let (model_cfg, mut cfg) = resolve_configs(a.toy, overrides.as_ref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(iters) = a.iters {
        cfg.total_iters = iters;
        cfg.validate()?;
    }
    let ds = load_dataset(&a.data)?;
    let (train, val) = if a.val_fraction > 0.0 {
        split_train_val(&ds, a.val_fraction, cfg.seed)?
    } else {
        (ds.clone(), ds)
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let model = PromptModel::new(model_cfg, cfg.seed)?;
    info!(
        "training {} parameters on {} images for {} iterations",
        model.num_parameters(),
        train.images.len(),
        cfg.total_iters
    );
    let out = train_loop(
        model,
        &train,
        &cfg,
        LoopOptions {
            out_dir: Some(&a.out),
            val: Some(&val),
            ..Default::default()
        },
    )?;
    if let Some(v) = out.validations.last() {
        info!(
            "final validation: point mAP {:.1} / mAP@50 {:.1}, box mAP {:.1} / mAP@50 {:.1}",
            100.0 * v.map_point,
            100.0 * v.map50_point,
            100.0 * v.map_box,
            100.0 * v.map50_box
        );
    }
    Ok(())
}

/// Report in percent, rounded to one decimal.
pub fn percent_report(r: &EvalReport) -> Value {
    let pct = |x: f64| (1000.0 * x).round() / 10.0;
    let per: Map<String, Value> = r.per_threshold_ap.iter().map(|(k, v)| (k.clone(), Value::from(pct(*v)))).collect();
    serde_json::json!({
        "map": pct(r.map),
        "map50": pct(r.map50),
        "per_threshold_ap": per,
        "counts": r.counts,
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Value> {
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ds = load_dataset(&a.data)?;
    let mode = match a.prompt {
        PromptArg::CenterPoint => PromptMode::CenterPoint,
        PromptArg::GtBox => PromptMode::GtBox,
    };
    let (report, _) = prompt_eval(&model, &ds, mode, a.refine_steps)?;
    Ok(percent_report(&report))
}

pub fn cmd_predict(a: &PredictArgs) -> Result<f32> {
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let image = load_png(&a.image).with_context(|| format!("loading {}", a.image.display()))?;
    let prompt = match (a.point, a.bbox) {
        (Some([x, y]), None) => Prompt::point(x, y),
        (None, Some([x1, y1, x2, y2])) => Prompt::bbox(x1, y1, x2, y2),
        _ => bail!("exactly one of --point or --box is required"),
    };
    let pred = model.predict(&image, &[prompt], !a.single_mask, a.refine_steps)?;
    fs::write(&a.out, encode_mask_png(&pred.mask)?).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(pred.iou)
}

pub fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let bytes = fs::read(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let model = read_checkpoint(&bytes).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let hash = ultrasam_service::checkpoint_hash(&bytes);
    let cfg = ultrasam_service::ServiceConfig {
        port: a.port,
        workers: a.workers as usize,
        max_sessions: a.max_sessions as usize,
        static_dir: a.static_dir.clone(),
        ..Default::default()
    };
    if let Some(dir) = &cfg.static_dir {
        if !dir.is_dir() {
            bail!("static dir {} does not exist", dir.display());
        }
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(ultrasam_service::serve(model, hash, cfg))?;
    Ok(())
}
