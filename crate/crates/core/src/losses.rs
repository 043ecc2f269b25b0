//! Segmentation and IoU-regression losses, plus the focal classification loss.
//!
//! Each loss is a fused graph node: value and input gradient are computed in
//! f64 in one pass and attached with [`Graph::scalar_fn`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Bitmask;
use crate::model::{argmax, MaskPrediction};
use crate::numerics::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what}: {left} values against {right}")]
    Length {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("focal gamma must be non-negative, got {0}")]
    Gamma(f32),
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_focal: f32,
    pub w_dice: f32,
    pub w_iou: f32,
    pub focal_alpha: f32,
    pub focal_gamma: f32,
}

impl Default for LossWeights {
    /// 20:1 focal to dice and unit IoU weight, as in SAM.
    fn default() -> Self {
        Self {
            w_focal: 20.0,
            w_dice: 1.0,
            w_iou: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let ws = [self.w_focal, self.w_dice, self.w_iou];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LossError::Weights(format!("weights must be finite and >= 0, got {ws:?}")));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(LossError::Weights(format!("focal_alpha {} outside [0, 1]", self.focal_alpha)));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(LossError::Gamma(self.focal_gamma));
        }
        Ok(())
    }
}

fn check_len(what: &'static str, left: usize, right: usize) -> Result<(), LossError> {
    if left != right {
        return Err(LossError::Length { what, left, right });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean sigmoid focal loss and its gradient w.r.t. the logits.
///
/// Writing `z = ±x` so that `p_t = σ(z)`, the per-pixel term is
/// `α_t · σ(−z)^γ · softplus(−z)`, whose derivative in `z` is
/// `−α_t σ(−z)^γ (γ σ(z) softplus(−z) + σ(−z))`. No `log(p)` is ever formed.
pub fn focal_values(logits: &[f32], target: &[u8], alpha: f32, gamma: f32) -> Result<(f64, Vec<f32>), LossError> {
    check_len("focal_loss", logits.len(), target.len())?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(LossError::Gamma(gamma));
    }
    let (alpha, gamma) = (alpha as f64, gamma as f64);
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &t) in logits.iter().zip(target) {
        let (sign, a) = if t != 0 { (1.0, alpha) } else { (-1.0, 1.0 - alpha) };
        let z = sign * x as f64;
        let q = sigmoid(-z);
        let sp = softplus(-z);
        let w = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
        total += a * w * sp;
        let dz = -a * w * (gamma * (1.0 - q) * sp + q);
        grad.push((sign * dz / n) as f32);
    }
    Ok((total / n, grad))
}

/// Soft Dice loss with additive smoothing, and its gradient w.r.t. the logits.
pub fn dice_values(logits: &[f32], target: &[u8], smooth: f32) -> Result<(f64, Vec<f32>), LossError> {
    check_len("dice_loss", logits.len(), target.len())?;
    let s = smooth as f64;
    let p: Vec<f64> = logits.iter().map(|&x| sigmoid(x as f64)).collect();
    let (mut inter, mut sum_p, mut sum_t) = (0.0, 0.0, 0.0);
    for (&pi, &t) in p.iter().zip(target) {
        let t = t as f64;
        inter += pi * t;
        sum_p += pi;
        sum_t += t;
    }
    let num = 2.0 * inter + s;
    let den = sum_p + sum_t + s;
    let grad = p
        .iter()
        .zip(target)
        .map(|(&pi, &t)| {
            let dp = -(2.0 * t as f64 * den - num) / (den * den);
            (dp * pi * (1.0 - pi)) as f32
        })
        .collect();
    Ok((1.0 - num / den, grad))
}

/// Mean sigmoid focal loss over all elements of `logits`.
pub fn focal_loss(g: &mut Graph, logits: Var, target: &[u8], alpha: f32, gamma: f32) -> Result<Var, LossError> {
    let (value, grad) = focal_values(g.value(logits).data(), target, alpha, gamma)?;
    Ok(g.scalar_fn(logits, value as f32, grad)?)
}

/// `1 − (2Σpt + smooth) / (Σp + Σt + smooth)`, `p = σ(logits)`.
pub fn dice_loss(g: &mut Graph, logits: Var, target: &[u8], smooth: f32) -> Result<Var, LossError> {
    let (value, grad) = dice_values(g.value(logits).data(), target, smooth)?;
    Ok(g.scalar_fn(logits, value as f32, grad)?)
}

/// Mean absolute difference between predicted and actual IoU per token.
pub fn l1_iou_loss(g: &mut Graph, iou_pred: Var, actual: &[f32]) -> Result<Var, LossError> {
    let pred = g.value(iou_pred).data();
    check_len("l1_iou_loss", pred.len(), actual.len())?;
    let n = pred.len().max(1) as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(actual)
        .map(|(&p, &a)| {
            let d = p as f64 - a as f64;
            value += d.abs();
            if d == 0.0 { 0.0 } else { (d.signum() / n) as f32 }
        })
        .collect();
    Ok(g.scalar_fn(iou_pred, (value / n) as f32, grad)?)
}

/// IoU of the thresholded logits (`> 0`) against the target; empty union gives 0.
pub fn logit_iou(logits: &[f32], target: &[u8]) -> f32 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &t) in logits.iter().zip(target) {
        let p = x > 0.0;
        let t = t != 0;
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f32 / union as f32
    }
}

/// Per-instance loss breakdown. `focal`, `dice` and `iou` are the weighted
/// contributions, so `total == focal + dice + iou`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceLoss {
    pub total: f32,
    pub focal: f32,
    pub dice: f32,
    pub iou: f32,
    /// Token whose segmentation loss was smallest (lowest index on ties).
    pub chosen: usize,
    /// Weighted focal + dice of every token.
    pub seg_per_token: Vec<f32>,
    /// Realized IoU of every token at logit resolution.
    pub actual_iou: Vec<f32>,
}

/// Instance loss on graph outputs `masks: [T, m²]`, `iou: [1, T]` against a
/// target already at logit resolution.
///
/// Segmentation is supervised through the best candidate only; the IoU head
/// is regressed on every candidate.
pub fn instance_loss_graph(
    g: &mut Graph,
    masks: Var,
    iou: Var,
    target: &Bitmask,
    w: &LossWeights,
) -> Result<(Var, InstanceLoss), LossError> {
    w.validate()?;
    let (t, m2) = g.value(masks).dims2()?;
    check_len("instance_loss target", m2, target.data().len())?;
    check_len("instance_loss iou", t, g.value(iou).len())?;
    let tgt = target.data();

    let mut seg = Vec::with_capacity(t);
    let mut terms = Vec::with_capacity(t);
    let mut actual = Vec::with_capacity(t);
    for row in g.value(masks).data().chunks_exact(m2) {
        let (f, _) = focal_values(row, tgt, w.focal_alpha, w.focal_gamma)?;
        let (d, _) = dice_values(row, tgt, 1.0)?;
        let (f, d) = (w.w_focal as f64 * f, w.w_dice as f64 * d);
        terms.push((f, d));
        seg.push((f + d) as f32);
        actual.push(logit_iou(row, tgt));
    }
    let chosen = argmax(&seg.iter().map(|v| -v).collect::<Vec<_>>());

    let row = g.slice_rows(masks, chosen, chosen + 1)?;
    let f = focal_loss(g, row, tgt, w.focal_alpha, w.focal_gamma)?;
    let d = dice_loss(g, row, tgt, 1.0)?;
    let f = g.scale(f, w.w_focal);
    let d = g.scale(d, w.w_dice);
    let l = l1_iou_loss(g, iou, &actual)?;
    let l = g.scale(l, w.w_iou);
    let total = g.add(f, d)?;
    let total = g.add(total, l)?;

    let (fv, dv) = terms[chosen];
    let iou_term = g.value(l).item();
    let diag = InstanceLoss {
        total: g.value(total).item(),
        focal: fv as f32,
        dice: dv as f32,
        iou: iou_term,
        chosen,
        seg_per_token: seg,
        actual_iou: actual,
    };
    Ok((total, diag))
}

/// [`instance_loss_graph`] evaluated on a finished prediction.
pub fn instance_loss(pred: &MaskPrediction, target: &Bitmask, w: &LossWeights) -> Result<InstanceLoss, LossError> {
    let t = pred.mask_logits.len();
    let m2 = pred.mask_logits.first().map(Tensor::len).unwrap_or(0);
    let data: Vec<f32> = pred.mask_logits.iter().flat_map(|m| m.data().iter().copied()).collect();
    let mut g = Graph::new();
    let masks = g.constant(Tensor::new([t, m2], data)?);
    let iou = g.constant(Tensor::new([1, pred.iou_pred.len()], pred.iou_pred.clone())?);
    Ok(instance_loss_graph(&mut g, masks, iou, target, w)?.1)
}

/// Sigmoid focal loss on classifier logits `[B, C]` against one-hot labels.
pub fn classification_focal_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    alpha: f32,
    gamma: f32,
) -> Result<Var, LossError> {
    let (b, c) = g.value(logits).dims2()?;
    check_len("classification labels", b, labels.len())?;
    let mut onehot = vec![0u8; b * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(LossError::Label { label: l, n_classes: c });
        }
        onehot[i * c + l] = 1;
    }
    focal_loss(g, logits, &onehot, alpha, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheck};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct textbook forms, no log-sum-exp tricks.
    fn naive_bce(x: f32, t: u8) -> f64 {
        let p = 1.0 / (1.0 + (-(x as f64)).exp());
        if t == 1 {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        }
    }

    fn naive_focal(x: f32, t: u8, alpha: f64, gamma: f64) -> f64 {
        let p = 1.0 / (1.0 + (-(x as f64)).exp());
        let (pt, at) = if t == 1 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
        -at * (1.0 - pt).powf(gamma) * pt.ln()
    }

    fn scalar(g: &mut Graph, v: Var) -> f32 {
        g.value(v).item()
    }

    #[test]
    fn focal_hand_value() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([1, 1], vec![0.0]).unwrap());
        let l = focal_loss(&mut g, x, &[1], 0.25, 2.0).unwrap();
        let want = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((scalar(&mut g, l) as f64 - want).abs() < 1e-7);
        assert!((want - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn focal_confident_prediction_is_free() {
        let t = [1u8, 0, 1, 0];
        let x = [20.0, -20.0, 20.0, -20.0];
        let (v, _) = focal_values(&x, &t, 0.25, 2.0).unwrap();
        assert!(v < 1e-6);
    }

    #[test]
    fn focal_rejects_negative_gamma() {
        assert_eq!(focal_values(&[0.0], &[1], 0.25, -1.0), Err(LossError::Gamma(-1.0)));
        assert!(focal_values(&[0.0, 1.0], &[1], 0.25, 2.0).is_err());
    }

    #[test]
    fn focal_no_overflow_at_extreme_logits() {
        let (v, g) = focal_values(&[1e4, -1e4], &[0, 1], 0.25, 2.0).unwrap();
        assert!(v.is_finite() && g.iter().all(|x| x.is_finite()));
        assert!((v - 0.5 * (0.75 * 1e4 + 0.25 * 1e4)).abs() < 1e-6 * 1e4);
    }

    proptest! {
        #[test]
        fn focal_gamma0_alpha_half_is_half_bce(
            xs in prop::collection::vec(-8.0f32..8.0, 1..40),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<u8> = xs.iter().map(|_| rng.random_bool(0.5) as u8).collect();
            let (v, _) = focal_values(&xs, &t, 0.5, 0.0).unwrap();
            let bce: f64 = xs.iter().zip(&t).map(|(&x, &t)| naive_bce(x, t)).sum::<f64>() / xs.len() as f64;
            prop_assert!((v - 0.5 * bce).abs() < 1e-6);
        }

        #[test]
        fn focal_matches_textbook_form(
            xs in prop::collection::vec(-8.0f32..8.0, 1..40),
            alpha in 0.0f64..1.0,
            gamma in 0.0f64..4.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<u8> = xs.iter().map(|_| rng.random_bool(0.5) as u8).collect();
            let (v, _) = focal_values(&xs, &t, alpha as f32, gamma as f32).unwrap();
            let want: f64 = xs.iter().zip(&t)
                .map(|(&x, &t)| naive_focal(x, t, alpha as f32 as f64, gamma as f32 as f64))
                .sum::<f64>() / xs.len() as f64;
            prop_assert!((v - want).abs() < 1e-6);
        }

        #[test]
        fn dice_in_unit_interval(
            xs in prop::collection::vec(-30.0f32..30.0, 1..50),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<u8> = xs.iter().map(|_| rng.random_bool(0.3) as u8).collect();
            let (v, _) = dice_values(&xs, &t, 1.0).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn dice_exact_match_is_zero() {
        let t = [1u8, 0, 1, 1, 0];
        let x: Vec<f32> = t.iter().map(|&t| if t == 1 { 100.0 } else { -100.0 }).collect();
        let (v, _) = dice_values(&x, &t, 1.0).unwrap();
        assert!(v.abs() < 1e-6);
    }

    #[test]
    fn dice_all_on_all_off() {
        for n in [1usize, 5, 64] {
            let x = vec![100.0; n];
            let (v, _) = dice_values(&x, &vec![0; n], 1.0).unwrap();
            assert!((v - n as f64 / (n as f64 + 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn dice_monotone_toward_target_on_one_pixel() {
        let mut prev = f64::INFINITY;
        for i in -20..=20 {
            let (v, _) = dice_values(&[i as f32 * 0.5], &[1], 1.0).unwrap();
            assert!(v < prev, "dice must decrease as p -> 1");
            prev = v;
        }
        let mut prev = f64::INFINITY;
        for i in -20..=20 {
            let (v, _) = dice_values(&[-i as f32 * 0.5], &[0], 1.0).unwrap();
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn l1_iou_examples() {
        let cases: [(&[f32], &[f32], f32); 3] = [(&[0.7], &[0.5], 0.2), (&[0.3, 0.3], &[0.3, 0.3], 0.0), (&[0.0, 1.0], &[1.0, 0.0], 1.0)];
        for (p, a, want) in cases {
            let mut g = Graph::new();
            let v = g.constant(Tensor::new([1, p.len()], p.to_vec()).unwrap());
            let l = l1_iou_loss(&mut g, v, a).unwrap();
            assert!((scalar(&mut g, l) - want).abs() < 1e-6);
        }
        let mut g = Graph::new();
        let v = g.constant(Tensor::new([1, 2], vec![0.0, 1.0]).unwrap());
        assert!(matches!(l1_iou_loss(&mut g, v, &[1.0]), Err(LossError::Length { .. })));
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn losses_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Vec<u8> = (0..24).map(|_| rng.random_bool(0.4) as u8).collect();
        let x = rand_tensor(&mut rng, &[4, 6], 3.0);
        let opts = GradCheck::default();
        for gamma in [0.0, 0.5, 2.0] {
            let r = grad_check(
                |g: &mut Graph, v: &[Var]| {
                    let l = focal_loss(g, v[0], &t, 0.25, gamma)?;
                    Ok::<_, LossError>(g.scale(l, 10.0))
                },
                std::slice::from_ref(&x),
                &opts,
            )
            .unwrap();
            assert!(r.passed, "focal gamma {gamma}: {:?}", r.max_rel_err);
        }
        let r = grad_check(
            |g: &mut Graph, v: &[Var]| {
                let l = dice_loss(g, v[0], &t, 1.0)?;
                Ok::<_, LossError>(g.scale(l, 10.0))
            },
            std::slice::from_ref(&x),
            &opts,
        )
        .unwrap();
        assert!(r.passed, "dice: {:?}", r.max_rel_err);

        let pred = Tensor::new([1, 4], vec![0.1, 0.45, 0.8, 0.33]).unwrap();
        let actual = [0.3, 0.2, 0.5, 0.9];
        let r = grad_check(|g: &mut Graph, v: &[Var]| l1_iou_loss(g, v[0], &actual), &[pred], &opts).unwrap();
        assert!(r.passed, "l1: {:?}", r.max_rel_err);

        let labels = [1usize, 0, 2, 1];
        let r = grad_check(
            |g: &mut Graph, v: &[Var]| classification_focal_loss(g, v[0], &labels, 0.25, 2.0),
            &[rand_tensor(&mut rng, &[4, 3], 2.0)],
            &opts,
        )
        .unwrap();
        assert!(r.passed, "classification: {:?}", r.max_rel_err);
    }

    #[test]
    fn instance_loss_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let target = Bitmask::from_fn(4, 4, |r, c| r + c < 4);
        let masks = rand_tensor(&mut rng, &[3, 16], 2.0);
        let iou = Tensor::new([1, 3], vec![0.2, 0.6, 0.9]).unwrap();
        let w = LossWeights::default();
        let r = grad_check(
            |g: &mut Graph, v: &[Var]| Ok::<_, LossError>(instance_loss_graph(g, v[0], v[1], &target, &w)?.0),
            &[masks, iou],
            &GradCheck::default(),
        )
        .unwrap();
        assert!(r.passed, "{:?}", r.max_rel_err);
    }

    fn prediction(masks: Vec<Vec<f32>>, iou: Vec<f32>, side: usize) -> MaskPrediction {
        MaskPrediction {
            mask_logits: masks.into_iter().map(|m| Tensor::new([side, side], m).unwrap()).collect(),
            best_index: argmax(&iou),
            iou_pred: iou,
        }
    }

    #[test]
    fn identical_candidates_choose_index_zero() {
        let target = Bitmask::from_fn(4, 4, |r, _| r < 2);
        let m: Vec<f32> = (0..16).map(|i| (i as f32 - 7.0) * 0.3).collect();
        let p = prediction(vec![m.clone(); 4], vec![0.5; 4], 4);
        assert_eq!(instance_loss(&p, &target, &LossWeights::default()).unwrap().chosen, 0);
    }

    #[test]
    fn perfect_candidate_is_chosen() {
        let target = Bitmask::from_fn(4, 4, |r, c| r >= 1 && c >= 1);
        let perfect: Vec<f32> = target.data().iter().map(|&t| if t == 1 { 20.0 } else { -20.0 }).collect();
        let bad: Vec<f32> = perfect.iter().map(|v| -v).collect();
        let noisy: Vec<f32> = (0..16).map(|i| ((i * 7) % 5) as f32 - 2.0).collect();
        let p = prediction(vec![bad, noisy, perfect, vec![0.0; 16]], vec![0.1, 0.2, 0.3, 0.4], 4);
        let l = instance_loss(&p, &target, &LossWeights::default()).unwrap();
        assert_eq!(l.chosen, 2);
        assert!(l.focal + l.dice < 1e-3);
        assert_eq!(l.actual_iou[2], 1.0);
        assert_eq!(l.actual_iou[0], 0.0);
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let target = Bitmask::from_fn(4, 4, |r, c| r == c);
        let w = LossWeights {
            w_focal: 0.0,
            w_dice: 0.0,
            w_iou: 0.0,
            ..LossWeights::default()
        };
        let p = prediction(vec![vec![1.0; 16], vec![-3.0; 16]], vec![0.9, 0.1], 4);
        assert_eq!(instance_loss(&p, &target, &w).unwrap().total, 0.0);
    }

    #[test]
    fn weights_are_validated() {
        let w = LossWeights {
            w_dice: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(w.validate(), Err(LossError::Weights(_))));
        let w = LossWeights {
            focal_gamma: -0.5,
            ..LossWeights::default()
        };
        assert_eq!(w.validate(), Err(LossError::Gamma(-0.5)));
    }

    proptest! {
        #[test]
        fn instance_loss_permutation_covariant(seed in any::<u64>(), shift in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = 4;
            let target = Bitmask::from_fn(4, 4, |_, _| rng.random_bool(0.5));
            let masks: Vec<Vec<f32>> = (0..t).map(|_| (0..16).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
            let iou: Vec<f32> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
            let perm: Vec<usize> = (0..t).map(|i| (i + shift) % t).collect();
            let w = LossWeights::default();
            let a = instance_loss(&prediction(masks.clone(), iou.clone(), 4), &target, &w).unwrap();
            let b = instance_loss(
                &prediction(perm.iter().map(|&i| masks[i].clone()).collect(), perm.iter().map(|&i| iou[i]).collect(), 4),
                &target,
                &w,
            ).unwrap();
            prop_assert_eq!(perm[b.chosen], a.chosen);
            prop_assert!((a.total - b.total).abs() < 1e-6);
        }
    }
}
