//! Segmentation loss: Lovász-Softmax over every pixel plus a weighted
//! Lovász-Softmax over the band around the ground-truth boundary.
//!
//! ```text
//! loss = lovasz(P) + w · lovasz(B),   B = dilate(mask) − erode(mask)
//! ```

mod lovasz;
mod morphology;

pub use lovasz::{cross_entropy_with_grad, lovasz_grad, lovasz_softmax, lovasz_softmax_with_grad, ClassRule};
pub use morphology::{boundary_mask, morph_dilate, morph_erode, BinaryMask, StructuringElement};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Surrogate used for both terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Lovasz,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub boundary_weight: f64,
    pub se_side: StructuringElement,
    pub class_rule: ClassRule,
    pub kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            boundary_weight: 1.0,
            se_side: StructuringElement::default(),
            class_rule: ClassRule::ClassesPresent,
            kind: LossKind::Lovasz,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.boundary_weight.is_finite() && self.boundary_weight >= 0.0,
            "boundary_weight must be a nonnegative number, got {}",
            self.boundary_weight
        );
        Ok(())
    }
}

/// Flattened `N·H·W` class indices from per-item binary masks.
pub fn labels_from_masks(masks: &[BinaryMask]) -> Vec<usize> {
    masks.iter().flat_map(|m| m.data().iter().map(|&v| v as usize)).collect()
}

fn term<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    set: Option<&[BinaryMask]>,
    cfg: &LossConfig,
) -> Result<(T, Vec<T>)> {
    match cfg.kind {
        LossKind::Lovasz => lovasz_softmax_with_grad(probs, labels, set, cfg.class_rule),
        LossKind::CrossEntropy => cross_entropy_with_grad(probs, labels, set),
    }
}

/// Loss value and gradient with respect to the softmax probabilities.
pub fn composite_from_probs<T: Scalar>(
    probs: &Tensor<T>,
    masks: &[BinaryMask],
    cfg: &LossConfig,
) -> Result<(T, Vec<T>)> {
    cfg.validate()?;
    let s = probs.shape();
    ensure!(masks.len() == s.n, "{} masks for a batch of {}", masks.len(), s.n);
    for m in masks {
        ensure!(
            m.height() == s.h && m.width() == s.w,
            "mask {}x{} does not match logits {}x{}",
            m.height(),
            m.width(),
            s.h,
            s.w
        );
    }
    let labels = labels_from_masks(masks);
    let (mut value, mut grad) = term(probs, &labels, None, cfg)?;
    if cfg.boundary_weight > 0.0 {
        let bands: Vec<BinaryMask> = masks.iter().map(|m| boundary_mask(m, cfg.se_side)).collect();
        let (bv, bg) = term(probs, &labels, Some(&bands), cfg)?;
        let w = T::lit(cfg.boundary_weight);
        value += w * bv;
        for (g, b) in grad.iter_mut().zip(bg) {
            *g += w * b;
        }
    }
    Ok((value, grad))
}

/// Loss value of raw logits without recording anything.
pub fn composite_loss_value<T: Scalar>(logits: &Tensor<T>, masks: &[BinaryMask], cfg: &LossConfig) -> Result<T> {
    let probs = kernels::softmax_channels(logits)?;
    Ok(composite_from_probs(&probs, masks, cfg)?.0)
}

/// Records softmax and the loss on the tape; the boundary bands are treated
/// as constants.
pub fn composite_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    masks: &[BinaryMask],
    cfg: &LossConfig,
) -> Result<Var> {
    let probs = tape.softmax(logits)?;
    let (value, grad) = composite_from_probs(tape.value(probs), masks, cfg)?;
    tape.scalar_with_grads(value, vec![(probs, grad)])
}
