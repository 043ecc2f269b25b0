use std::time::Instant;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use super::encoder::classify_tokens;
use crate::data::GrayImage;
use crate::numerics::{grad_check, GradCheck};
use crate::prompts::Prompt;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch: 4,
        embed_dim: 32,
        encoder_depth: 2,
        encoder_heads: 2,
        encoder_mlp_dim: 64,
        decoder_depth: 2,
        decoder_heads: 2,
        decoder_mlp_dim: 64,
        num_mask_tokens: 4,
        pe_num_freqs: 16,
        attn_downsample: 2,
        channels: 1,
        n_classes: Some(2),
    }
}

fn random_pixels(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

fn toy() -> PromptModel {
    PromptModel::new(ModelConfig::toy(), 3).unwrap()
}

#[test]
fn toy_shapes() {
    let m = toy();
    let emb = m.encode_image(&random_pixels(64 * 64, 1)).unwrap();
    assert_eq!(emb.to_grid().shape(), &[64, 8, 8]);
    let one = m.encode_prompts(&[Prompt::point(10.0, 20.0)]).unwrap();
    assert_eq!(one.shape(), &[1, 64]);
    let bx = m.encode_prompts(&[Prompt::bbox(1.0, 2.0, 30.0, 40.0)]).unwrap();
    assert_eq!(bx.shape(), &[2, 64]);
    let pred = m.decode(&emb, &bx, None).unwrap();
    assert_eq!(pred.mask_logits.len(), 4);
    assert_eq!(pred.iou_pred.len(), 4);
    assert!(pred.mask_logits.iter().all(|t| t.shape() == [32, 32]));
    assert!(pred.iou_pred.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn grid_view_matches_tokens() {
    let m = toy();
    let emb = m.encode_image(&random_pixels(64 * 64, 2)).unwrap();
    let grid = emb.to_grid();
    // token (r=2, c=5), channel 7
    assert_eq!(grid.data()[7 * 64 + 2 * 8 + 5], emb.tokens.data()[(2 * 8 + 5) * 64 + 7]);
}

#[test]
fn encoder_is_deterministic_and_size_checked() {
    let m = toy();
    let px = random_pixels(64 * 64, 4);
    assert_eq!(m.encode_image(&px).unwrap(), m.encode_image(&px).unwrap());
    assert!(matches!(m.encode_image(&px[..100]), Err(ModelError::InputSize { .. })));
}

#[test]
fn identical_points_give_identical_tokens() {
    let m = toy();
    let t = m.encode_prompts(&[Prompt::point(7.5, 9.5), Prompt::point(7.5, 9.5)]).unwrap();
    assert_eq!(t.data()[..64], t.data()[64..]);
    assert!(m.encode_prompts(&[]).is_err());
    assert!(m.encode_prompts(&[Prompt::point(70.0, 1.0)]).is_err());
}

#[test]
fn refinement_starts_as_identity() {
    let m = toy();
    let emb = m.encode_image(&random_pixels(64 * 64, 5)).unwrap();
    let sparse = m.encode_prompts(&[Prompt::point(30.0, 30.0)]).unwrap();
    let plain = m.decode(&emb, &sparse, None).unwrap();
    let zeros = Tensor::zeros([32, 32]);
    let refined = m.decode(&emb, &sparse, Some(&zeros)).unwrap();
    let noisy = Tensor::from_fn([32, 32], |i| (i as f32 * 0.37).sin() * 5.0);
    let refined_noisy = m.decode(&emb, &sparse, Some(&noisy)).unwrap();
    for other in [&refined, &refined_noisy] {
        for (a, b) in plain.mask_logits.iter().zip(&other.mask_logits) {
            assert!(a.max_abs_diff(b) <= 1e-6);
        }
        for (a, b) in plain.iou_pred.iter().zip(&other.iou_pred) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn refine_steps_keep_shapes_and_selection_is_argmax() {
    let m = toy();
    let img = GrayImage::new(64, 64, random_pixels(64 * 64, 6)).unwrap();
    let prompts = [Prompt::bbox(10.0, 12.0, 40.0, 44.0)];
    let p0 = m.predict(&img, &prompts, true, 0).unwrap();
    let p1 = m.predict(&img, &prompts, true, 1).unwrap();
    assert_eq!(p0.mask.size(), p1.mask.size());
    assert_eq!(p0.mask.size(), [64, 64]);
    let emb = m.encode_image(&m.preprocess(&img).pixels).unwrap();
    let pred = m.decode_prompts(&emb, &prompts, true, 1).unwrap();
    assert_eq!(pred.best_index, argmax(&pred.iou_pred));
    assert_eq!(p1.index, pred.best_index);
    let single = m.predict(&img, &prompts, false, 1).unwrap();
    assert_eq!(single.index, 0);
    assert_eq!(m.decode_prompts(&emb, &prompts, false, 0).unwrap().mask_logits.len(), 1);
}

#[test]
fn argmax_ties_go_low() {
    assert_eq!(argmax(&[0.2, 0.7, 0.7, 0.1]), 1);
    assert_eq!(argmax(&[0.5; 4]), 0);
}

#[test]
fn predict_maps_back_to_original_resolution() {
    let m = toy();
    let img = GrayImage::new(100, 50, random_pixels(5000, 7)).unwrap();
    let pre = m.preprocess(&img);
    assert_eq!((pre.resized_width, pre.resized_height), (64, 32));
    let p = m.predict(&img, &[Prompt::point(50.0, 25.0)], true, 1).unwrap();
    assert_eq!(p.mask.size(), [50, 100]);
    assert_eq!(pre.to_model(&Prompt::point(50.0, 25.0)), Prompt::point(32.0, 16.0));
}

#[test]
fn logits_to_mask_thresholds_at_zero() {
    let img = GrayImage::zeros(64, 64);
    let pre = Preprocessed::new(&img, 64);
    let logits = Tensor::from_fn([32, 32], |i| if i % 32 < 16 { 1.0 } else { -1.0 });
    let mask = pre.logits_to_mask(&logits);
    assert!(mask.get(10, 30) && !mask.get(10, 33));
}

#[test]
fn classify_shapes_and_bias() {
    let mut m = PromptModel::new(ModelConfig::toy().with_classes(2), 1).unwrap();
    let px = random_pixels(64 * 64, 8);
    assert_eq!(m.classify(&px).unwrap().len(), 2);
    m.params.insert("classifier.w".into(), Tensor::zeros([64, 2]));
    m.params.insert("classifier.b".into(), Tensor::new([2], vec![0.25, -1.5]).unwrap());
    assert_eq!(m.classify(&px).unwrap(), vec![0.25, -1.5]);
    assert_eq!(toy().classify(&px), Err(ModelError::NoClassifier));
}

#[test]
fn pooled_classifier_ignores_token_order() {
    let m = PromptModel::new(ModelConfig::toy().with_classes(3), 2).unwrap();
    let cfg = &m.config;
    let tokens = Tensor::from_fn([64, 64], |i| ((i * 7919) % 101) as f32 / 50.0 - 1.0);
    let mut perm: Vec<usize> = (0..64).collect();
    perm.reverse();
    perm.swap(3, 40);
    let permuted = Tensor::from_fn([64, 64], |i| tokens.data()[perm[i / 64] * 64 + i % 64]);
    let run = |t: &Tensor| {
        let mut g = Graph::new();
        let mut ctx = m.ctx(&mut g, false);
        let x = ctx.g.constant(t.clone());
        let out = classify_tokens(&mut ctx, cfg, x).unwrap();
        g.value(out).clone()
    };
    assert!(run(&tokens).max_abs_diff(&run(&permuted)) <= 1e-6);
}

#[test]
fn config_validation() {
    assert!(ModelConfig::toy().validate().is_ok());
    assert!(ModelConfig::paper().validate().is_ok());
    let bad = ModelConfig { patch: 7, ..ModelConfig::toy() };
    assert!(bad.validate().is_err());
    let bad = ModelConfig { encoder_heads: 3, ..ModelConfig::toy() };
    assert!(bad.validate().is_err());
    let bad = ModelConfig { num_mask_tokens: 1, ..ModelConfig::toy() };
    assert!(bad.validate().is_err());
}

#[test]
fn parameter_names_unique_and_shapes_match() {
    let m = PromptModel::new(small_cfg(), 0).unwrap();
    let specs = param_specs(&m.config);
    assert_eq!(specs.len(), m.params.len());
    check_params(&m.config, &m.params).unwrap();
    assert!(m.params["mask_down.proj.w"].data().iter().all(|&v| v == 0.0));
    assert!(m.params["decoder.layers.0.norm1.g"].data().iter().all(|&v| v == 1.0));
    let pw = m.params["encoder.patch.w"].data();
    assert!(pw.iter().all(|v| v.abs() <= 0.04));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let m = PromptModel::new(small_cfg(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, m.config);
    for (name, t) in &m.params {
        let b = &back.params[name];
        assert_eq!(t.shape(), b.shape());
        assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn checkpoint_diagnostics_are_distinct() {
    let m = PromptModel::new(small_cfg(), 9).unwrap();
    let bytes = write_checkpoint(&m);

    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(read_checkpoint(&wrong_magic), Err(ModelError::Version(_))));

    let mut wrong_version = bytes.clone();
    wrong_version[8] = 9;
    assert!(matches!(read_checkpoint(&wrong_version), Err(ModelError::Version(_))));

    assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(ModelError::Truncated(_))));

    let mut missing = m.clone();
    missing.params.remove("decoder.iou_token");
    let err = read_checkpoint(&write_checkpoint(&missing)).unwrap_err();
    assert_eq!(err, ModelError::MissingParameter("decoder.iou_token".into()));
    assert!(err.to_string().contains("decoder.iou_token"));

    let mut reshaped = m.clone();
    reshaped.params.insert("decoder.iou_token".into(), Tensor::zeros([2, 32]));
    assert!(matches!(
        read_checkpoint(&write_checkpoint(&reshaped)),
        Err(ModelError::ParamShape { .. })
    ));
}

#[test]
fn encoder_block_gradients() {
    let cfg = small_cfg();
    let m = PromptModel::new(cfg.clone(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut names: Vec<String> = m.params.keys().filter(|n| n.starts_with("encoder.blocks.0.")).cloned().collect();
    names.sort();
    let mut inputs: Vec<Tensor> = names
        .iter()
        .map(|n| {
            let t = &m.params[n];
            let mean = if n.ends_with(".g") { 1.0 } else { 0.0 };
            Tensor::from_fn(t.shape().to_vec(), |_| mean + rng.random_range(-0.4..0.4))
        })
        .collect();
    inputs.push(Tensor::from_fn([16, 32], |_| rng.random_range(-1.0..1.0)));
    let w = Tensor::from_fn([16, 32], |_| rng.random_range(-0.2..0.2));
    let report = grad_check(
        |g: &mut Graph, vars: &[Var]| -> Result<Var, ModelError> {
            let bound = names.iter().cloned().zip(vars.iter().copied()).collect();
            let mut ctx = m.ctx(g, false).with_bindings(bound);
            let x = *vars.last().unwrap();
            let y = super::encoder::encoder_block(&mut ctx, &cfg, 0, x)?;
            let w = ctx.g.constant(w.clone());
            let p = ctx.g.mul(y, w)?;
            Ok(ctx.g.sum(p))
        },
        &inputs,
        &GradCheck {
            max_coords: Some(60),
            h: 2e-2,
            five_point: true,
            ..GradCheck::default()
        },
    )
    .unwrap();
    assert!(report.passed, "worst {:?}", report.max_rel_err);
}

#[test]
fn full_model_gradients() {
    let start = Instant::now();
    let (names, report) = full_model_grad_check(
        &small_cfg(),
        21,
        &GradCheck {
            max_coords: Some(50),
            h: 2e-2,
            five_point: true,
            ..GradCheck::default()
        },
    )
    .unwrap();
    let failures: Vec<_> = names
        .iter()
        .zip(&report.max_rel_err)
        .filter(|(_, e)| **e > 1e-3)
        .collect();
    assert!(report.passed, "failing tensors: {failures:?}");
    eprintln!(
        "full-model grad check: {} coords, worst {:.2e}, {:?}",
        report.coords_checked,
        report.worst(),
        start.elapsed()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn shape_contract(patch in prop::sample::select(vec![2usize, 4]), grid in 2usize..5, d_mult in 1usize..3, t in 2usize..5, heads in prop::sample::select(vec![1usize, 2])) {
        let d = 16 * d_mult;
        let cfg = ModelConfig {
            image_size: patch * grid,
            patch,
            embed_dim: d,
            encoder_depth: 1,
            encoder_heads: heads,
            encoder_mlp_dim: 2 * d,
            decoder_depth: 1,
            decoder_heads: heads,
            decoder_mlp_dim: 2 * d,
            num_mask_tokens: t,
            pe_num_freqs: d / 2,
            attn_downsample: 2,
            channels: 1,
            n_classes: Some(3),
        };
        let m = PromptModel::new(cfg.clone(), 1).unwrap();
        let s = cfg.image_size;
        let emb = m.encode_image(&random_pixels(s * s, 3)).unwrap();
        let grid_t = emb.to_grid();
        prop_assert_eq!(grid_t.shape(), &[d, grid, grid][..]);
        let sparse = m.encode_prompts(&[Prompt::point(1.0, 1.0), Prompt::bbox(0.0, 0.0, s as f32, s as f32)]).unwrap();
        prop_assert_eq!(sparse.shape(), &[3, d][..]);
        let pred = m.decode(&emb, &sparse, Some(&Tensor::zeros([4 * grid, 4 * grid]))).unwrap();
        prop_assert_eq!(pred.mask_logits.len(), t);
        prop_assert_eq!(pred.mask_logits[0].shape(), &[4 * grid, 4 * grid][..]);
        prop_assert_eq!(m.classify(&random_pixels(s * s, 4)).unwrap().len(), 3);
    }
}
