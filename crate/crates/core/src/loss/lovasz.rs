//! Lovász-Softmax: the convex surrogate of the per-class Jaccard loss built
//! from its Lovász extension.
//!
//! For class `c` over the selected pixels, errors are `1 − p_i(c)` where the
//! label is `c` and `p_i(c)` elsewhere. Sorted in decreasing order (ties by
//! pixel index), each error is weighted by the step of the Jaccard loss
//! evaluated on the growing prefix of the sorted ground truth. The loss is
//! piecewise linear in the probabilities, so the weights double as the exact
//! gradient almost everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Tensor};

use super::BinaryMask;

/// Which per-class losses are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassRule {
    /// Classes that occur among the selected ground-truth pixels.
    #[default]
    ClassesPresent,
    AllClasses,
}

/// Jaccard-extension weights for ground truth already sorted by decreasing
/// error.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut inter_lost = 0.0;
    let mut outside = 0.0;
    let mut prev = 0.0;
    gt_sorted
        .iter()
        .map(|&g| {
            if g {
                inter_lost += 1.0;
            } else {
                outside += 1.0;
            }
            let jaccard = 1.0 - (gts - inter_lost) / (gts + outside);
            let step = jaccard - prev;
            prev = jaccard;
            step
        })
        .collect()
}

/// Checks shapes, normalization and label range. `labels` is `N·H·W` long.
fn validate<T: Scalar>(probs: &Tensor<T>, labels: &[usize], pixel_set: Option<&[BinaryMask]>) -> Result<()> {
    let s = probs.shape();
    ensure!(
        labels.len() == s.n * s.plane(),
        "{} labels for probabilities of shape {s}",
        labels.len()
    );
    ensure!(
        labels.iter().all(|&l| l < s.c),
        "label out of range for {} classes",
        s.c
    );
    for n in 0..s.n {
        for p in 0..s.plane() {
            let total: f64 = (0..s.c).map(|c| probs.plane(n, c)[p].as_f64()).sum();
            ensure!(
                (total - 1.0).abs() <= 1e-4,
                "probabilities at item {n}, pixel {p} sum to {total}"
            );
        }
    }
    if let Some(sets) = pixel_set {
        ensure!(sets.len() == s.n, "{} pixel sets for a batch of {}", sets.len(), s.n);
        for m in sets {
            ensure!(
                m.height() == s.h && m.width() == s.w,
                "pixel set {}x{} does not match {}x{}",
                m.height(),
                m.width(),
                s.h,
                s.w
            );
        }
    }
    Ok(())
}

/// Loss value and its gradient with respect to `probs`. The batch is
/// flattened into one pixel population; `pixel_set`, when given, keeps only
/// the marked pixels of each item. An empty selection yields zero.
pub fn lovasz_softmax_with_grad<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    pixel_set: Option<&[BinaryMask]>,
    rule: ClassRule,
) -> Result<(T, Vec<T>)> {
    validate(probs, labels, pixel_set)?;
    let s = probs.shape();
    let plane = s.plane();
    let selected: Vec<(usize, usize)> = (0..s.n)
        .flat_map(|n| (0..plane).map(move |p| (n, p)))
        .filter(|&(n, p)| pixel_set.is_none_or(|sets| sets[n].data()[p] == 1))
        .collect();

    let mut grad = vec![T::zero(); s.numel()];
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut per_class: Vec<(usize, Vec<usize>, Vec<f64>)> = Vec::new();
    for c in 0..s.c {
        let fg: Vec<bool> = selected.iter().map(|&(n, p)| labels[n * plane + p] == c).collect();
        let present = fg.iter().any(|&f| f);
        if selected.is_empty() || (rule == ClassRule::ClassesPresent && !present) {
            continue;
        }
        let errors: Vec<f64> = selected
            .iter()
            .zip(&fg)
            .map(|(&(n, p), &f)| {
                let pc = probs.plane(n, c)[p].as_f64();
                if f {
                    1.0 - pc
                } else {
                    pc
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..errors.len()).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        let gt_sorted: Vec<bool> = order.iter().map(|&i| fg[i]).collect();
        let weights = lovasz_grad(&gt_sorted);
        total += order.iter().zip(&weights).map(|(&i, w)| errors[i] * w).sum::<f64>();
        counted += 1;
        per_class.push((c, order, weights));
    }
    if counted == 0 {
        return Ok((T::zero(), grad));
    }
    let scale = 1.0 / counted as f64;
    for (c, order, weights) in per_class {
        for (&i, w) in order.iter().zip(&weights) {
            let (n, p) = selected[i];
            let sign = if labels[n * plane + p] == c { -1.0 } else { 1.0 };
            grad[s.index(n, c, 0, 0) + p] += T::lit(sign * w * scale);
        }
    }
    Ok((T::lit(total * scale), grad))
}

pub fn lovasz_softmax<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    pixel_set: Option<&[BinaryMask]>,
    rule: ClassRule,
) -> Result<T> {
    Ok(lovasz_softmax_with_grad(probs, labels, pixel_set, rule)?.0)
}

/// Mean negative log-probability of the labelled class over the selected
/// pixels, with its gradient. The ablation baseline for the Lovász terms.
pub fn cross_entropy_with_grad<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    pixel_set: Option<&[BinaryMask]>,
) -> Result<(T, Vec<T>)> {
    validate(probs, labels, pixel_set)?;
    let s = probs.shape();
    let plane = s.plane();
    let mut grad = vec![T::zero(); s.numel()];
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        for p in 0..plane {
            if pixel_set.is_some_and(|sets| sets[n].data()[p] == 0) {
                continue;
            }
            let idx = s.index(n, labels[n * plane + p], 0, 0) + p;
            let pc = probs.data()[idx].as_f64().max(1e-12);
            total -= pc.ln();
            grad[idx] = T::lit(-1.0 / pc);
            count += 1;
        }
    }
    if count == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::lit(1.0 / count as f64);
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((T::lit(total / count as f64), grad))
}
