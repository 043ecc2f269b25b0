//! Finite-difference verification of the whole network.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::decoder::decode_graph;
use super::encoder::{classify_tokens, encode_graph, encode_prompts_graph};
use super::{is_frozen, ModelConfig, ModelError, PromptModel};
use crate::numerics::{grad_check, GradCheck, GradCheckReport, Graph, Tensor, Var};
use crate::prompts::Prompt;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f32, mean: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| mean + std * rng.sample::<f32, _>(StandardNormal))
}

/// Gradient check of encoder → prompt encoder → decode (plain and with a
/// fixed previous-mask input) → classifier when configured, against a random
/// linear functional of every output.
///
/// Parameters are redrawn at a larger scale than training initialization so
/// that every path, including the zero-initialized refinement projection,
/// carries signal. Returns the checked parameter names alongside the report.
/// In f32 a deep graph needs `h` around 1e-2 with the five-point stencil;
/// see [`GradCheck::five_point`]. At larger redraw scales the rounding noise
/// of the toy-width model alone reaches the 1e-3 tolerance.
pub fn full_model_grad_check(
    cfg: &ModelConfig,
    seed: u64,
    opts: &GradCheck,
) -> Result<(Vec<String>, GradCheckReport), ModelError> {
    let mut model = PromptModel::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in model.params.iter_mut() {
        if is_frozen(name) {
            continue;
        }
        let mean = if name.ends_with(".g") { 1.0 } else { 0.0 };
        *t = normal(&mut rng, t.shape(), 0.2, mean);
    }
    let (s, m, t) = (cfg.image_size, cfg.mask_size(), cfg.num_mask_tokens);
    let pixels = Tensor::from_fn([1, s, s], |_| rng.random_range(0.0..1.0));
    let prev = normal(&mut rng, &[1, m * m], 4.0, 0.0);
    let n_out = (t * m * m) as f32;
    let w_masks = [
        normal(&mut rng, &[t, m * m], 1.0 / n_out.sqrt(), 0.0),
        normal(&mut rng, &[t, m * m], 1.0 / n_out.sqrt(), 0.0),
    ];
    let w_iou = [normal(&mut rng, &[1, t], 1.0, 0.0), normal(&mut rng, &[1, t], 1.0, 0.0)];
    let w_cls = cfg.n_classes.map(|n| normal(&mut rng, &[1, n], 1.0, 0.0));
    let sf = s as f32;
    let prompts = [
        Prompt::point(0.3 * sf, 0.6 * sf),
        Prompt::bbox(0.2 * sf, 0.25 * sf, 0.7 * sf, 0.8 * sf),
    ];

    let names: Vec<String> = model.params.keys().filter(|n| !is_frozen(n)).cloned().collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| model.params[n].clone()).collect();
    let f = |g: &mut Graph, vars: &[Var]| -> Result<Var, ModelError> {
        let bound: BTreeMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
        let mut ctx = model.ctx(g, false).with_bindings(bound);
        let px = ctx.g.constant(pixels.clone());
        let tokens = encode_graph(&mut ctx, cfg, px)?;
        let sparse = encode_prompts_graph(&mut ctx, cfg, &prompts)?;
        let prev_v = ctx.g.constant(prev.clone());
        let mut terms = Vec::new();
        for (pass, prev_in) in [None, Some(prev_v)].into_iter().enumerate() {
            let out = decode_graph(&mut ctx, cfg, tokens, sparse, prev_in)?;
            let wm = ctx.g.constant(w_masks[pass].clone());
            let wi = ctx.g.constant(w_iou[pass].clone());
            let a = ctx.g.mul(out.masks, wm)?;
            terms.push(ctx.g.sum(a));
            let b = ctx.g.mul(out.iou, wi)?;
            terms.push(ctx.g.sum(b));
        }
        if let Some(wc) = &w_cls {
            let logits = classify_tokens(&mut ctx, cfg, tokens)?;
            let wc = ctx.g.constant(wc.clone());
            let c = ctx.g.mul(logits, wc)?;
            terms.push(ctx.g.sum(c));
        }
        let mut total = terms[0];
        for &x in &terms[1..] {
            total = ctx.g.add(total, x)?;
        }
        Ok(total)
    };
    let report = grad_check(f, &inputs, opts)?;
    Ok((names, report))
}
