use std::f32::consts::TAU;

use super::{Ctx, ModelConfig, ModelError, PromptModel, PE_FREQS};
use crate::numerics::{Graph, Tensor, Var};
use crate::prompts::{Prompt, PromptError};

/// Encoder output: `s²` tokens of width `d`, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub tokens: Tensor,
    pub grid: usize,
}

impl ImageEmbedding {
    /// Channel-first `[d, s, s]` view.
    pub fn to_grid(&self) -> Tensor {
        let (n, d) = self.tokens.dims2().expect("rank 2");
        let src = self.tokens.data();
        Tensor::from_fn([d, self.grid, self.grid], |i| src[(i % n) * d + i / n])
    }
}

pub(crate) fn check_pixels(cfg: &ModelConfig, shape: &[usize]) -> Result<(), ModelError> {
    let expected = vec![cfg.channels, cfg.image_size, cfg.image_size];
    if shape != expected.as_slice() {
        return Err(ModelError::InputSize {
            expected,
            got: shape.to_vec(),
        });
    }
    Ok(())
}

/// Pre-norm ViT block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
pub(crate) fn encoder_block(ctx: &mut Ctx, cfg: &ModelConfig, i: usize, x: Var) -> Result<Var, ModelError> {
    let b = format!("encoder.blocks.{i}");
    let h = ctx.norm(&format!("{b}.ln1"), x)?;
    let a = ctx.attention(&format!("{b}.attn"), h, h, h, cfg.encoder_heads)?;
    let x = ctx.g.add(x, a)?;
    let h = ctx.norm(&format!("{b}.ln2"), x)?;
    let m = ctx.mlp(&format!("{b}.mlp"), h, 2)?;
    Ok(ctx.g.add(x, m)?)
}

/// `pixels: [c, S, S]` → tokens `[s², d]`.
pub(crate) fn encode_graph(ctx: &mut Ctx, cfg: &ModelConfig, pixels: Var) -> Result<Var, ModelError> {
    check_pixels(cfg, ctx.g.shape(pixels))?;
    let w = ctx.p("encoder.patch.w")?;
    let b = ctx.p("encoder.patch.b")?;
    let mut x = ctx.g.patch_embed(pixels, cfg.patch, w, b)?;
    let pos = ctx.p("encoder.pos")?;
    x = ctx.g.add(x, pos)?;
    for i in 0..cfg.encoder_depth {
        x = encoder_block(ctx, cfg, i, x)?;
    }
    let x = ctx.linear("encoder.neck", x)?;
    ctx.norm("encoder.neck_ln", x)
}

/// Random Fourier features of coordinates already scaled to `[0, 1]`:
/// `c ↦ 2c − 1`, project by the frequency matrix, take `[sin | cos]` of `2π·`.
pub fn fourier_features(freqs: &Tensor, coords: &[[f32; 2]]) -> Tensor {
    let f = freqs.shape()[1];
    let g = freqs.data();
    let mut out = vec![0.0; coords.len() * 2 * f];
    for (n, &[x, y]) in coords.iter().enumerate() {
        let (u, v) = (2.0 * x - 1.0, 2.0 * y - 1.0);
        for j in 0..f {
            let a = TAU * (u * g[j] + v * g[f + j]);
            out[n * 2 * f + j] = a.sin();
            out[n * 2 * f + f + j] = a.cos();
        }
    }
    Tensor::new([coords.len(), 2 * f], out).expect("consistent length")
}

/// Positional encoding of every embedding cell centre, `[s², d]`.
pub(crate) fn image_pe(freqs: &Tensor, s: usize) -> Tensor {
    let coords: Vec<[f32; 2]> = (0..s * s)
        .map(|i| [((i % s) as f32 + 0.5) / s as f32, ((i / s) as f32 + 0.5) / s as f32])
        .collect();
    fourier_features(freqs, &coords)
}

/// Sparse tokens `[k, d]` for one instance's prompt set, in model-input pixels.
pub(crate) fn encode_prompts_graph(ctx: &mut Ctx, cfg: &ModelConfig, prompts: &[Prompt]) -> Result<Var, ModelError> {
    if prompts.is_empty() {
        return Err(PromptError::Empty.into());
    }
    let size = cfg.image_size as f32;
    let mut coords = Vec::new();
    let mut kinds = Vec::new();
    for p in prompts {
        p.validate(cfg.image_size, cfg.image_size)?;
        match *p {
            Prompt::Point(pt) => {
                coords.push([pt.x / size, pt.y / size]);
                kinds.push("prompt.point_fg");
            }
            Prompt::Box(b) => {
                coords.push([b.x1 / size, b.y1 / size]);
                kinds.push("prompt.box_tl");
                coords.push([b.x2 / size, b.y2 / size]);
                kinds.push("prompt.box_br");
            }
        }
    }
    let freqs = ctx.p(PE_FREQS)?;
    let pe = fourier_features(ctx.g.value(freqs), &coords);
    let pe = ctx.g.constant(pe);
    let mut rows = Vec::with_capacity(kinds.len());
    for kind in kinds {
        rows.push(ctx.p(kind)?);
    }
    let types = ctx.g.concat_rows(&rows)?;
    Ok(ctx.g.add(pe, types)?)
}

impl PromptModel {
    fn pixels_tensor(&self, pixels: &[f32]) -> Result<Tensor, ModelError> {
        let s = self.config.image_size;
        Tensor::new([1, s, s], pixels.to_vec()).map_err(|_| ModelError::InputSize {
            expected: vec![1, s, s],
            got: vec![pixels.len()],
        })
    }

    /// Runs the image encoder on `image_size²` row-major pixels.
    pub fn encode_image(&self, pixels: &[f32]) -> Result<ImageEmbedding, ModelError> {
        let t = self.pixels_tensor(pixels)?;
        let mut g = Graph::new();
        let mut ctx = self.ctx(&mut g, false);
        let x = ctx.g.constant(t);
        let out = encode_graph(&mut ctx, &self.config, x)?;
        Ok(ImageEmbedding {
            tokens: g.value(out).clone(),
            grid: self.config.grid(),
        })
    }

    /// Sparse prompt tokens `[k, d]`.
    pub fn encode_prompts(&self, prompts: &[Prompt]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let mut ctx = self.ctx(&mut g, false);
        let out = encode_prompts_graph(&mut ctx, &self.config, prompts)?;
        Ok(g.value(out).clone())
    }

    /// Class logits from mean-pooled encoder tokens.
    pub fn classify(&self, pixels: &[f32]) -> Result<Vec<f32>, ModelError> {
        let t = self.pixels_tensor(pixels)?;
        let mut g = Graph::new();
        let mut ctx = self.ctx(&mut g, false);
        let x = ctx.g.constant(t);
        let out = classify_graph(&mut ctx, &self.config, x)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// Mean over tokens followed by one linear map, `[1, n_classes]`.
pub(crate) fn classify_tokens(ctx: &mut Ctx, cfg: &ModelConfig, tokens: Var) -> Result<Var, ModelError> {
    if cfg.n_classes.is_none() {
        return Err(ModelError::NoClassifier);
    }
    let pooled = ctx.g.mean_rows(tokens)?;
    ctx.linear("classifier", pooled)
}

pub(crate) fn classify_graph(ctx: &mut Ctx, cfg: &ModelConfig, pixels: Var) -> Result<Var, ModelError> {
    if cfg.n_classes.is_none() {
        return Err(ModelError::NoClassifier);
    }
    let tokens = encode_graph(ctx, cfg, pixels)?;
    classify_tokens(ctx, cfg, tokens)
}
