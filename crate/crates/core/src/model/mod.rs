//! Promptable segmentation network: ViT image encoder, Fourier prompt
//! encoder, two-way transformer mask decoder with IoU head, a mask-feedback
//! refinement path and an optional classification head.

mod checkpoint;
mod decoder;
mod encoder;
mod gradient;
mod params;
mod predict;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decoder::{argmax, MaskPrediction};
pub use encoder::{fourier_features, ImageEmbedding};
pub use gradient::full_model_grad_check;
pub use params::{check_params, init_params, is_frozen, param_specs, Init, ParamSpec, ParamStore, PE_FREQS};
pub use predict::{Prediction, Preprocessed};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Graph, Tensor, TensorError, Var};
use crate::prompts::PromptError;

pub(crate) use decoder::decode_passes;
pub(crate) use encoder::encode_graph;

#[cfg(test)]
mod tests;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input is {got:?}, model expects {expected:?}")]
    InputSize { expected: Vec<usize>, got: Vec<usize> },
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("unexpected parameter {0}")]
    UnknownParameter(String),
    #[error("parameter {name} has shape {got:?}, config implies {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("model has no classification head")]
    NoClassifier,
    #[error("checkpoint version error: {0}")]
    Version(String),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("checkpoint config block: {0}")]
    CheckpointConfig(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub encoder_mlp_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_dim: usize,
    /// Multimask outputs plus the single-mask token.
    pub num_mask_tokens: usize,
    /// Columns of the Gaussian frequency matrix; sin and cos halves give `2·pe_num_freqs == embed_dim`.
    pub pe_num_freqs: usize,
    /// Width reduction of the decoder's cross-attention.
    pub attn_downsample: usize,
    pub channels: usize,
    #[serde(default)]
    pub n_classes: Option<usize>,
}

impl ModelConfig {
    /// Desk-scale configuration: 64 px images, 8 px patches, width 64.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            embed_dim: 64,
            encoder_depth: 2,
            encoder_heads: 4,
            encoder_mlp_dim: 256,
            decoder_depth: 2,
            decoder_heads: 4,
            decoder_mlp_dim: 256,
            num_mask_tokens: 4,
            pe_num_freqs: 32,
            attn_downsample: 2,
            channels: 1,
            n_classes: None,
        }
    }

    /// ViT-b sized configuration at 1024 px. Expressible, not trained here.
    pub fn paper() -> Self {
        Self {
            image_size: 1024,
            patch: 16,
            embed_dim: 768,
            encoder_depth: 12,
            encoder_heads: 12,
            encoder_mlp_dim: 3072,
            decoder_depth: 2,
            decoder_heads: 8,
            decoder_mlp_dim: 2048,
            num_mask_tokens: 4,
            pe_num_freqs: 384,
            attn_downsample: 2,
            channels: 1,
            n_classes: None,
        }
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.n_classes = Some(n);
        self
    }

    /// Tokens per side of the image embedding.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Side of the low-resolution mask logits (4× the embedding grid).
    pub fn mask_size(&self) -> usize {
        4 * self.grid()
    }

    /// Channels after the first stride-2 stage of the mask-downscale encoder.
    /// Kept at 4 or more so its layer norm is not degenerate.
    pub fn mask_in_chans(&self) -> usize {
        (self.embed_dim / 16).max(4)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let d = self.embed_dim;
        let fail = |m: String| Err(ModelError::Config(m));
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return fail(format!("image_size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if d == 0 || d % 16 != 0 {
            return fail(format!("embed_dim {d} must be a positive multiple of 16"));
        }
        if self.encoder_heads == 0 || d % self.encoder_heads != 0 {
            return fail(format!("embed_dim {d} not divisible by encoder_heads {}", self.encoder_heads));
        }
        if self.attn_downsample == 0 || d % self.attn_downsample != 0 {
            return fail(format!("embed_dim {d} not divisible by attn_downsample {}", self.attn_downsample));
        }
        let cross = d / self.attn_downsample;
        if self.decoder_heads == 0 || d % self.decoder_heads != 0 || cross % self.decoder_heads != 0 {
            return fail(format!("decoder_heads {} must divide {d} and {cross}", self.decoder_heads));
        }
        if self.num_mask_tokens < 2 {
            return fail("num_mask_tokens must be at least 2".into());
        }
        if 2 * self.pe_num_freqs != d {
            return fail(format!("2·pe_num_freqs ({}) must equal embed_dim {d}", 2 * self.pe_num_freqs));
        }
        if self.channels != 1 {
            return fail("only single-channel input is supported".into());
        }
        if self.encoder_mlp_dim == 0 || self.decoder_mlp_dim == 0 {
            return fail("mlp widths must be positive".into());
        }
        if self.n_classes == Some(0) {
            return fail("n_classes must be positive".into());
        }
        Ok(())
    }
}

/// Configuration plus its named parameters. Immutable during inference.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl PromptModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(Self { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Binds parameters lazily onto `g`. With `trainable`, every non-frozen
    /// parameter becomes a gradient-tracked leaf.
    pub fn ctx<'a>(&'a self, g: &'a mut Graph, trainable: bool) -> Ctx<'a> {
        Ctx {
            g,
            params: &self.params,
            bound: BTreeMap::new(),
            trainable,
        }
    }
}

/// A forward pass in progress: the graph plus the parameter leaves created on it.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    params: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'a> Ctx<'a> {
    /// Uses pre-made leaves for some parameters (gradient checks bind these).
    pub fn with_bindings(mut self, bound: BTreeMap<String, Var>) -> Self {
        self.bound = bound;
        self
    }

    pub fn p(&mut self, name: &str) -> Result<Var, ModelError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| ModelError::MissingParameter(name.to_string()))?;
        let v = self.g.leaf(t.clone(), self.trainable && !is_frozen(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter leaves bound so far, by name.
    pub fn bindings(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn into_bindings(self) -> BTreeMap<String, Var> {
        self.bound
    }

    pub(crate) fn linear(&mut self, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.g.linear(x, w, b)?)
    }

    pub(crate) fn norm(&mut self, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let gain = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.g.layer_norm(x, gain, b, 1e-5)?)
    }

    /// Projected multi-head attention; inner width is set by the q weight.
    pub(crate) fn attention(&mut self, prefix: &str, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, ModelError> {
        let q = self.linear(&format!("{prefix}.q"), q)?;
        let k = self.linear(&format!("{prefix}.k"), k)?;
        let v = self.linear(&format!("{prefix}.v"), v)?;
        let out = self.g.attention(q, k, v, heads)?;
        self.linear(&format!("{prefix}.o"), out)
    }

    /// `layers` linear maps with GELU between them.
    pub(crate) fn mlp(&mut self, prefix: &str, x: Var, layers: usize) -> Result<Var, ModelError> {
        let mut h = x;
        for i in 0..layers {
            h = self.linear(&format!("{prefix}.fc{i}"), h)?;
            if i + 1 < layers {
                h = self.g.gelu(h);
            }
        }
        Ok(h)
    }
}
