use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{ModelConfig, ModelError};
use crate::numerics::Tensor;

/// Named parameter tensors, iterated in sorted name order.
pub type ParamStore = BTreeMap<String, Tensor>;

/// Name of the fixed positional-frequency matrix; never trained.
pub const PE_FREQS: &str = "prompt.pe_freqs";

pub fn is_frozen(name: &str) -> bool {
    name == PE_FREQS
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
    /// Plain Gaussian with the given standard deviation.
    Gaussian(f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.0.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.add(format!("{prefix}.w"), &[fan_in, fan_out], Init::TruncNormal);
        self.add(format!("{prefix}.b"), &[fan_out], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, dim: usize) {
        self.add(format!("{prefix}.g"), &[dim], Init::Ones);
        self.add(format!("{prefix}.b"), &[dim], Init::Zeros);
    }

    fn attention(&mut self, prefix: &str, dim: usize, inner: usize) {
        for p in ["q", "k", "v"] {
            self.linear(&format!("{prefix}.{p}"), dim, inner);
        }
        self.linear(&format!("{prefix}.o"), inner, dim);
    }

    fn mlp(&mut self, prefix: &str, dims: &[usize]) {
        for (i, io) in dims.windows(2).enumerate() {
            self.linear(&format!("{prefix}.fc{i}"), io[0], io[1]);
        }
    }
}

/// Every parameter the configuration implies, with its shape and initializer.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let s = cfg.grid();
    let t = cfg.num_mask_tokens;
    let mut p = Specs(Vec::new());

    p.linear("encoder.patch", cfg.channels * cfg.patch * cfg.patch, d);
    p.add("encoder.pos", &[s * s, d], Init::TruncNormal);
    for i in 0..cfg.encoder_depth {
        let b = format!("encoder.blocks.{i}");
        p.norm(&format!("{b}.ln1"), d);
        p.attention(&format!("{b}.attn"), d, d);
        p.norm(&format!("{b}.ln2"), d);
        p.mlp(&format!("{b}.mlp"), &[d, cfg.encoder_mlp_dim, d]);
    }
    p.linear("encoder.neck", d, d);
    p.norm("encoder.neck_ln", d);

    p.add(PE_FREQS, &[2, cfg.pe_num_freqs], Init::Gaussian(1.0));
    for name in ["prompt.point_fg", "prompt.box_tl", "prompt.box_br"] {
        p.add(name, &[1, d], Init::TruncNormal);
    }

    let cross = d / cfg.attn_downsample;
    p.add("decoder.iou_token", &[1, d], Init::TruncNormal);
    p.add("decoder.mask_tokens", &[t, d], Init::TruncNormal);
    for i in 0..cfg.decoder_depth {
        let l = format!("decoder.layers.{i}");
        p.attention(&format!("{l}.self_attn"), d, d);
        p.norm(&format!("{l}.norm1"), d);
        p.attention(&format!("{l}.cross_t2i"), d, cross);
        p.norm(&format!("{l}.norm2"), d);
        p.mlp(&format!("{l}.mlp"), &[d, cfg.decoder_mlp_dim, d]);
        p.norm(&format!("{l}.norm3"), d);
        p.attention(&format!("{l}.cross_i2t"), d, cross);
        p.norm(&format!("{l}.norm4"), d);
    }
    p.attention("decoder.final_attn", d, cross);
    p.norm("decoder.final_norm", d);
    p.add("decoder.upscale1.w", &[d, d], Init::TruncNormal); // 4 offsets × d/4 channels
    p.add("decoder.upscale1.b", &[d / 4], Init::Zeros);
    p.norm("decoder.upscale_ln", d / 4);
    p.add("decoder.upscale2.w", &[d / 4, d / 2], Init::TruncNormal); // 4 offsets × d/8
    p.add("decoder.upscale2.b", &[d / 8], Init::Zeros);
    for k in 0..t {
        p.mlp(&format!("decoder.hyper.{k}"), &[d, d, d, d / 8]);
    }
    p.mlp("decoder.iou_head", &[d, d, d, t]);

    let c1 = cfg.mask_in_chans();
    p.linear("mask_down.conv1", 4, c1);
    p.norm("mask_down.ln1", c1);
    p.linear("mask_down.conv2", 4 * c1, d / 4);
    p.norm("mask_down.ln2", d / 4);
    p.add("mask_down.proj.w", &[d / 4, d], Init::Zeros);
    p.add("mask_down.proj.b", &[d], Init::Zeros);

    if let Some(n) = cfg.n_classes {
        p.linear("classifier", d, n);
    }
    p.0
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    loop {
        let z: f32 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Fresh parameters: truncated normal (std 0.02, cut at 2σ) for projections
/// and embeddings, zeros for biases, ones for norm gains.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_specs(cfg) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f32> = match spec.init {
            Init::TruncNormal => (0..n).map(|_| trunc_normal(&mut rng, 0.02)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Gaussian(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        if store.insert(spec.name.clone(), Tensor::new(spec.shape, data)?).is_some() {
            return Err(ModelError::Config(format!("duplicate parameter {}", spec.name)));
        }
    }
    Ok(store)
}

/// Checks that `store` holds exactly the parameters `cfg` implies.
pub fn check_params(cfg: &ModelConfig, store: &ParamStore) -> Result<(), ModelError> {
    let specs = param_specs(cfg);
    for spec in &specs {
        let t = store
            .get(&spec.name)
            .ok_or_else(|| ModelError::MissingParameter(spec.name.clone()))?;
        if t.shape() != spec.shape.as_slice() {
            return Err(ModelError::ParamShape {
                name: spec.name.clone(),
                expected: spec.shape.clone(),
                got: t.shape().to_vec(),
            });
        }
    }
    if store.len() != specs.len() {
        let known: std::collections::HashSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        let extra = store.keys().find(|k| !known.contains(k.as_str())).expect("extra key");
        return Err(ModelError::UnknownParameter(extra.clone()));
    }
    Ok(())
}
