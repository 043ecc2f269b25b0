use super::encoder::{encode_prompts_graph, image_pe};
use super::{Ctx, ImageEmbedding, ModelConfig, ModelError, PromptModel, PE_FREQS};
use crate::numerics::{Graph, Tensor, Var};
use crate::prompts::Prompt;

/// Decoder output for one prompt set.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction {
    /// One `[m, m]` logit grid per candidate, `m = 4·s`.
    pub mask_logits: Vec<Tensor>,
    /// Predicted IoU per candidate, squashed into `[0, 1]`.
    pub iou_pred: Vec<f32>,
    pub best_index: usize,
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl MaskPrediction {
    fn from_values(masks: &Tensor, iou: &Tensor, m: usize) -> Self {
        let iou_pred = iou.data().to_vec();
        let mask_logits = masks
            .data()
            .chunks_exact(m * m)
            .map(|c| Tensor::new([m, m], c.to_vec()).expect("m² chunk"))
            .collect();
        Self {
            best_index: argmax(&iou_pred),
            mask_logits,
            iou_pred,
        }
    }

    /// Keeps only the designated single-mask output (token 0).
    pub fn single_mask(self) -> Self {
        Self {
            mask_logits: self.mask_logits.into_iter().take(1).collect(),
            iou_pred: self.iou_pred[..1].to_vec(),
            best_index: 0,
        }
    }

    pub fn best_logits(&self) -> &Tensor {
        &self.mask_logits[self.best_index]
    }
}

/// Graph handles of one decode: `masks: [T, m²]`, `iou: [1, T]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DecodeVars {
    pub masks: Var,
    pub iou: Var,
}

impl DecodeVars {
    pub fn best_index(&self, g: &Graph) -> usize {
        argmax(g.value(self.iou).data())
    }
}

/// Strided encoder from mask logits `[m²]` (any shape) to tokens `[s², d]`.
fn mask_downscale(ctx: &mut Ctx, cfg: &ModelConfig, logits: Var) -> Result<Var, ModelError> {
    let (m, s) = (cfg.mask_size(), cfg.grid());
    let x = ctx.g.reshape(logits, [1, m, m])?;
    let x = ctx.g.patchify(x, 2)?;
    let x = ctx.linear("mask_down.conv1", x)?;
    let x = ctx.norm("mask_down.ln1", x)?;
    let x = ctx.g.gelu(x);
    let x = ctx.g.transpose(x)?;
    let x = ctx.g.reshape(x, [cfg.mask_in_chans(), 2 * s, 2 * s])?;
    let x = ctx.g.patchify(x, 2)?;
    let x = ctx.linear("mask_down.conv2", x)?;
    let x = ctx.norm("mask_down.ln2", x)?;
    let x = ctx.g.gelu(x);
    ctx.linear("mask_down.proj", x)
}

/// One two-way block. Queries self-attend, attend to the image, pass an MLP,
/// then the image attends back to the queries. Post-norm throughout.
fn two_way_layer(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    i: usize,
    queries: Var,
    keys: Var,
    query_pe: Var,
    key_pe: Var,
) -> Result<(Var, Var), ModelError> {
    let l = format!("decoder.layers.{i}");
    let heads = cfg.decoder_heads;

    let queries = if i == 0 {
        ctx.attention(&format!("{l}.self_attn"), queries, queries, queries, heads)?
    } else {
        let q = ctx.g.add(queries, query_pe)?;
        let a = ctx.attention(&format!("{l}.self_attn"), q, q, queries, heads)?;
        ctx.g.add(queries, a)?
    };
    let queries = ctx.norm(&format!("{l}.norm1"), queries)?;

    let q = ctx.g.add(queries, query_pe)?;
    let k = ctx.g.add(keys, key_pe)?;
    let a = ctx.attention(&format!("{l}.cross_t2i"), q, k, keys, heads)?;
    let queries = ctx.g.add(queries, a)?;
    let queries = ctx.norm(&format!("{l}.norm2"), queries)?;

    let m = ctx.mlp(&format!("{l}.mlp"), queries, 2)?;
    let queries = ctx.g.add(queries, m)?;
    let queries = ctx.norm(&format!("{l}.norm3"), queries)?;

    let q = ctx.g.add(queries, query_pe)?;
    let a = ctx.attention(&format!("{l}.cross_i2t"), k, q, queries, heads)?;
    let keys = ctx.g.add(keys, a)?;
    let keys = ctx.norm(&format!("{l}.norm4"), keys)?;
    Ok((queries, keys))
}

/// Full mask decoder. `image_tokens: [s², d]`, `sparse: [k, d]`, optional
/// previous logits with `m²` elements.
pub(crate) fn decode_graph(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    image_tokens: Var,
    sparse: Var,
    prev_logits: Option<Var>,
) -> Result<DecodeVars, ModelError> {
    let (s, d, t) = (cfg.grid(), cfg.embed_dim, cfg.num_mask_tokens);
    let expect = |got: &[usize], want: Vec<usize>| {
        if got != want.as_slice() {
            Err(ModelError::InputSize {
                expected: want,
                got: got.to_vec(),
            })
        } else {
            Ok(())
        }
    };
    expect(ctx.g.shape(image_tokens), vec![s * s, d])?;
    let sparse_shape = ctx.g.shape(sparse).to_vec();
    if sparse_shape.len() != 2 || sparse_shape[1] != d || sparse_shape[0] == 0 {
        return Err(ModelError::InputSize {
            expected: vec![sparse_shape.first().copied().unwrap_or(1).max(1), d],
            got: sparse_shape,
        });
    }

    let mut src = image_tokens;
    if let Some(prev) = prev_logits {
        let m = cfg.mask_size();
        if ctx.g.value(prev).len() != m * m {
            return Err(ModelError::InputSize {
                expected: vec![m, m],
                got: ctx.g.shape(prev).to_vec(),
            });
        }
        let dense = mask_downscale(ctx, cfg, prev)?;
        src = ctx.g.add(src, dense)?;
    }
    let freqs = ctx.p(PE_FREQS)?;
    let pe = image_pe(ctx.g.value(freqs), s);
    let key_pe = ctx.g.constant(pe);

    let iou_token = ctx.p("decoder.iou_token")?;
    let mask_tokens = ctx.p("decoder.mask_tokens")?;
    let tokens = ctx.g.concat_rows(&[iou_token, mask_tokens, sparse])?;

    let (mut queries, mut keys) = (tokens, src);
    for i in 0..cfg.decoder_depth {
        (queries, keys) = two_way_layer(ctx, cfg, i, queries, keys, tokens, key_pe)?;
    }
    let q = ctx.g.add(queries, tokens)?;
    let k = ctx.g.add(keys, key_pe)?;
    let a = ctx.attention("decoder.final_attn", q, k, keys, cfg.decoder_heads)?;
    let queries = ctx.g.add(queries, a)?;
    let queries = ctx.norm("decoder.final_norm", queries)?;

    // 4× upscaling of the image tokens: d → d/4 → d/8 channels.
    let w1 = ctx.p("decoder.upscale1.w")?;
    let b1 = ctx.p("decoder.upscale1.b")?;
    let up = ctx.g.upsample_2x_tokens(keys, s, s, w1, b1)?;
    let up = ctx.norm("decoder.upscale_ln", up)?;
    let up = ctx.g.gelu(up);
    let w2 = ctx.p("decoder.upscale2.w")?;
    let b2 = ctx.p("decoder.upscale2.b")?;
    let up = ctx.g.upsample_2x_tokens(up, 2 * s, 2 * s, w2, b2)?;
    let up = ctx.g.gelu(up);

    let mut hyper = Vec::with_capacity(t);
    for k in 0..t {
        let tok = ctx.g.slice_rows(queries, 1 + k, 2 + k)?;
        hyper.push(ctx.mlp(&format!("decoder.hyper.{k}"), tok, 3)?);
    }
    let hyper = ctx.g.concat_rows(&hyper)?;
    let masks = ctx.g.matmul_bt(hyper, up)?;

    let iou_tok = ctx.g.slice_rows(queries, 0, 1)?;
    let iou = ctx.mlp("decoder.iou_head", iou_tok, 3)?;
    let iou = ctx.g.sigmoid(iou);
    Ok(DecodeVars { masks, iou })
}

/// Encodes `prompts` and decodes `1 + refine_steps` times, feeding back the
/// detached best-scoring logits of the previous pass.
pub(crate) fn decode_passes(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    image_tokens: Var,
    prompts: &[Prompt],
    refine_steps: usize,
    multimask: bool,
) -> Result<Vec<DecodeVars>, ModelError> {
    let sparse = encode_prompts_graph(ctx, cfg, prompts)?;
    let mut passes: Vec<DecodeVars> = Vec::with_capacity(1 + refine_steps);
    let mut prev = None;
    for _ in 0..=refine_steps {
        let out = decode_graph(ctx, cfg, image_tokens, sparse, prev)?;
        let idx = if multimask { out.best_index(ctx.g) } else { 0 };
        let m2 = ctx.g.shape(out.masks)[1];
        let row = ctx.g.value(out.masks).data()[idx * m2..(idx + 1) * m2].to_vec();
        prev = Some(ctx.g.constant(Tensor::new([1, m2], row)?));
        passes.push(out);
    }
    Ok(passes)
}

impl PromptModel {
    /// Decodes sparse tokens against an image embedding, optionally with the
    /// previous pass's mask logits.
    pub fn decode(
        &self,
        emb: &ImageEmbedding,
        sparse: &Tensor,
        prev_mask_logits: Option<&Tensor>,
    ) -> Result<MaskPrediction, ModelError> {
        let mut g = Graph::new();
        let mut ctx = self.ctx(&mut g, false);
        let tokens = ctx.g.constant(emb.tokens.clone());
        let sparse = ctx.g.constant(sparse.clone());
        let prev = prev_mask_logits.map(|p| ctx.g.constant(p.clone()));
        let out = decode_graph(&mut ctx, &self.config, tokens, sparse, prev)?;
        let m = self.config.mask_size();
        Ok(MaskPrediction::from_values(g.value(out.masks), g.value(out.iou), m))
    }

    /// Prompt encoding plus `1 + refine_steps` decodes on a cached embedding.
    pub fn decode_prompts(
        &self,
        emb: &ImageEmbedding,
        prompts: &[Prompt],
        multimask: bool,
        refine_steps: usize,
    ) -> Result<MaskPrediction, ModelError> {
        let mut g = Graph::new();
        let mut ctx = self.ctx(&mut g, false);
        let tokens = ctx.g.constant(emb.tokens.clone());
        let passes = decode_passes(&mut ctx, &self.config, tokens, prompts, refine_steps, multimask)?;
        let last = *passes.last().expect("at least one pass");
        let pred = MaskPrediction::from_values(g.value(last.masks), g.value(last.iou), self.config.mask_size());
        Ok(if multimask { pred } else { pred.single_mask() })
    }
}
