//! Training losses (weighted BCE + Dice and the kernel-generation
//! composites) and the evaluation Dice metric.
//!
//! Segmentation masks are multi-label: each of the three classes (inner
//! wall, outer wall, tumor) is an independent binary channel, so every loss
//! here is a per-class binary loss aggregated over channels.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Annotation classes, in data channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    InnerWall = 0,
    OuterWall = 1,
    Tumor = 2,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::InnerWall, Class::OuterWall, Class::Tumor];

    pub fn name(self) -> &'static str {
        match self {
            Class::InnerWall => "inner_wall",
            Class::OuterWall => "outer_wall",
            Class::Tumor => "tumor",
        }
    }
}

/// Loss mixing and per-class weights.
///
/// `class_weights` (w_c) and `positive_weights` (p_c) are stored in data
/// channel order (inner wall, outer wall, tumor). The defaults carry the
/// clinical values w = {4.1, 1.4, 8.7} and p = {25.7, 8.2, 55.0} given for
/// (outer, inner, tumor) respectively, reordered to channel order here.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub alpha: f64,
    pub class_weights: Vec<f64>,
    pub positive_weights: Vec<f64>,
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights {
            alpha: 0.1,
            class_weights: vec![1.4, 4.1, 8.7],
            positive_weights: vec![8.2, 25.7, 55.0],
        }
    }
}

impl ClassWeights {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("ClassWeights", "alpha must be in [0, 1]"));
        }
        if self.class_weights.len() != channels || self.positive_weights.len() != channels {
            return Err(Error::shape(
                "ClassWeights",
                format!("{} channels expected", channels),
            ));
        }
        if self.class_weights.iter().chain(&self.positive_weights).any(|&w| w <= 0.0) {
            return Err(Error::invalid("ClassWeights", "weights must be positive"));
        }
        Ok(())
    }
}

/// Default Dice smoothing; keeps empty-class slices finite.
pub const DICE_SMOOTH: f64 = 1.0;
/// Probability clamp inside the weighted BCE.
pub const WBCE_CLAMP: f64 = 1e-7;

fn check_same_shape<E: Element>(tape: &Tape<E>, pred: Var, target: &Tensor<E>, what: &'static str) -> Result<()> {
    let ps = tape.shape(pred);
    if ps != target.shape() {
        return Err(Error::shape(what, format!("pred {:?} vs target {:?}", ps, target.shape())));
    }
    if ps.len() < 3 {
        return Err(Error::shape(what, format!("need [N,C,spatial...], got {:?}", ps)));
    }
    Ok(())
}

/// Smoothed soft Dice loss, `1 - (2*sum(y*p) + eps) / (sum(y) + sum(p) + eps)`
/// per (sample, class), averaged over samples and classes.
pub fn dice_loss<E: Element>(tape: &Tape<E>, pred: Var, target: &Tensor<E>, smooth: f64) -> Result<Var> {
    check_same_shape(tape, pred, target, "dice_loss")?;
    let y = tape.constant(target.clone());
    let eps = E::from_f64(smooth);
    let inter = tape.mul(pred, y)?;
    let inter_nc = tape.sum_spatial(inter)?;
    let pred_nc = tape.sum_spatial(pred)?;
    let targ_nc = tape.sum_spatial(y)?;
    let num = tape.affine(inter_nc, E::from_f64(2.0), eps);
    let den_sum = tape.add(pred_nc, targ_nc)?;
    let den = tape.affine(den_sum, E::ONE, eps);
    let ratio = tape.div(num, den)?;
    let per_nc = tape.affine(ratio, -E::ONE, E::ONE);
    Ok(tape.mean_all(per_nc))
}

/// Weighted binary cross entropy:
/// `-sum_c w_c * mean_pixels[p_c * y log p + (1 - y) log(1 - p)]`,
/// with the prediction clamped to [1e-7, 1 - 1e-7].
pub fn wbce<E: Element>(tape: &Tape<E>, pred: Var, target: &Tensor<E>, weights: &ClassWeights) -> Result<Var> {
    check_same_shape(tape, pred, target, "wbce")?;
    let shape = tape.shape(pred);
    let channels = shape[1];
    weights.validate(channels)?;
    let pixels = shape[0] * shape[2..].iter().product::<usize>();

    let y = tape.constant(target.clone());
    let clamp_lo = E::from_f64(WBCE_CLAMP);
    let clamp_hi = E::from_f64(1.0 - WBCE_CLAMP);
    let p = tape.clamp(pred, clamp_lo, clamp_hi);

    // positive term: p_c * w_c * y * log(p)
    let log_p = tape.ln(p);
    let pos = tape.mul(y, log_p)?;
    let wp: Vec<E> = weights
        .class_weights
        .iter()
        .zip(&weights.positive_weights)
        .map(|(&w, &pw)| E::from_f64(w * pw))
        .collect();
    let pos_scaled = tape.scale_channels(pos, &wp)?;

    // negative term: w_c * (1 - y) * log(1 - p)
    let one_minus_y = tape.affine(y, -E::ONE, E::ONE);
    let one_minus_p = tape.affine(p, -E::ONE, E::ONE);
    let log_1p = tape.ln(one_minus_p);
    let neg = tape.mul(one_minus_y, log_1p)?;
    let wn: Vec<E> = weights.class_weights.iter().map(|&w| E::from_f64(w)).collect();
    let neg_scaled = tape.scale_channels(neg, &wn)?;

    let total = tape.add(pos_scaled, neg_scaled)?;
    let sum = tape.sum_all(total);
    Ok(tape.affine(sum, E::from_f64(-1.0 / pixels as f64), E::ZERO))
}

/// `alpha * WBCE + (1 - alpha) * DICE`.
pub fn combined_loss<E: Element>(
    tape: &Tape<E>,
    pred: Var,
    target: &Tensor<E>,
    weights: &ClassWeights,
) -> Result<Var> {
    let bce = wbce(tape, pred, target, weights)?;
    let dice = dice_loss(tape, pred, target, DICE_SMOOTH)?;
    let a = E::from_f64(weights.alpha);
    let lhs = tape.affine(bce, a, E::ZERO);
    let rhs = tape.affine(dice, E::ONE - a, E::ZERO);
    tape.add(lhs, rhs)
}

/// Composite loss mode for the kernel-generating models.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum A1LossMode {
    /// Main prediction only.
    L1,
    /// L1 plus the per-kernel auxiliary mask loss, averaged over kernels.
    L2,
    /// L1 plus the auxiliary loss on the softmax-weighted kernel sum.
    L3,
}

impl std::str::FromStr for A1LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L1" | "l1" => Ok(A1LossMode::L1),
            "L2" | "l2" => Ok(A1LossMode::L2),
            "L3" | "l3" => Ok(A1LossMode::L3),
            other => Err(Error::Config(format!("unknown loss mode `{}`", other))),
        }
    }
}

fn repeat_channel<E: Element>(t: &Tensor<E>, times: usize) -> Result<Tensor<E>> {
    let shape = t.shape();
    if shape.len() < 2 || shape[1] != 1 {
        return Err(Error::shape("repeat_channel", format!("{:?}", shape)));
    }
    let inner: usize = shape[2..].iter().product();
    let mut out = Vec::with_capacity(t.numel() * times);
    for n in 0..shape[0] {
        let chunk = &t.data()[n * inner..(n + 1) * inner];
        for _ in 0..times {
            out.extend_from_slice(chunk);
        }
    }
    let mut os = shape.to_vec();
    os[1] = times;
    Tensor::from_vec(os, out)
}

/// Composite losses for kernel generation. `main_loss` is the combined loss
/// of the main prediction; the kernels emitted by the generator network
/// ([N, K32, k, k], raw values) are squashed by a sigmoid before being
/// compared to the outer-wall mask resized to kernel scale.
///
/// Mode L3 weighs the kernels by `softmax(channel_logits)` before the
/// comparison; pass the logits var so it can learn.
pub fn a1_losses<E: Element>(
    tape: &Tape<E>,
    main_pred: Var,
    target: &Tensor<E>,
    weights: &ClassWeights,
    tiny_kernels: Var,
    target_ow_small: &Tensor<E>,
    channel_logits: Option<Var>,
    mode: A1LossMode,
) -> Result<Var> {
    let l1 = combined_loss(tape, main_pred, target, weights)?;
    let ow = Class::OuterWall as usize;
    let (w_ow, p_ow) = (weights.class_weights[ow], weights.positive_weights[ow]);
    match mode {
        A1LossMode::L1 => Ok(l1),
        A1LossMode::L2 => {
            let k = tape.shape(tiny_kernels)[1];
            let probs = tape.sigmoid(tiny_kernels);
            let target_rep = repeat_channel(target_ow_small, k)?;
            // mean over the K kernels == per-channel weights w/K
            let aux_weights = ClassWeights {
                alpha: weights.alpha,
                class_weights: vec![w_ow / k as f64; k],
                positive_weights: vec![p_ow; k],
            };
            let aux = combined_loss(tape, probs, &target_rep, &aux_weights)?;
            tape.add(l1, aux)
        }
        A1LossMode::L3 => {
            let logits = channel_logits.ok_or_else(|| {
                Error::invalid("a1_losses", "mode L3 needs learnable channel logits")
            })?;
            let coeff = tape.softmax_vec(logits)?;
            let mix = tape.channel_weighted_sum(tiny_kernels, coeff)?;
            let probs = tape.sigmoid(mix);
            let aux_weights = ClassWeights {
                alpha: weights.alpha,
                class_weights: vec![w_ow],
                positive_weights: vec![p_ow],
            };
            let aux = combined_loss(tape, probs, target_ow_small, &aux_weights)?;
            tape.add(l1, aux)
        }
    }
}

/// Hard Dice per class: binarize at `threshold`, `2|A n B| / (|A| + |B|)`,
/// with empty-vs-empty defined as 1.0. Inputs are [N, C, spatial...] (or any
/// rank >= 3 with the class axis at 1).
pub fn dice_metric<E: Element>(pred_prob: &Tensor<E>, target: &Tensor<E>, threshold: f64) -> Result<Vec<f64>> {
    if pred_prob.shape() != target.shape() || pred_prob.rank() < 3 {
        return Err(Error::shape(
            "dice_metric",
            format!("{:?} vs {:?}", pred_prob.shape(), target.shape()),
        ));
    }
    let shape = pred_prob.shape();
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut inter = vec![0u64; c];
    let mut pred_count = vec![0u64; c];
    let mut targ_count = vec![0u64; c];
    let pv = pred_prob.data();
    let tv = target.data();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * inner;
            for i in 0..inner {
                let p = pv[base + i].to_f64() >= threshold;
                let t = tv[base + i].to_f64() >= 0.5;
                inter[ci] += (p && t) as u64;
                pred_count[ci] += p as u64;
                targ_count[ci] += t as u64;
            }
        }
    }
    Ok((0..c)
        .map(|ci| {
            let denom = pred_count[ci] + targ_count[ci];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[ci] as f64 / denom as f64
            }
        })
        .collect())
}
