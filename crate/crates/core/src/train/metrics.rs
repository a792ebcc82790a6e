//! mIoU: per image, mean over classes of `|P ∩ G| / |P ∪ G|` (a class absent
//! from both prediction and ground truth scores 1), then mean over images.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Age, Dataset, Gender, Normalization, Race, Sample};
use crate::error::{ensure, Result};
use crate::loss::BinaryMask;
use crate::network::{ExtremeC3Net, Head};
use crate::tensor::Tensor;

/// Per-pixel argmax over channels of item 0; ties go to the lower class.
pub fn argmax_labels(logits: &Tensor<f32>, item: usize) -> Vec<usize> {
    let s = logits.shape();
    (0..s.plane())
        .map(|p| {
            let mut best = 0;
            for c in 1..s.c {
                if logits.plane(item, c)[p] > logits.plane(item, best)[p] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Class IoUs of one image.
pub fn image_class_iou(pred: &[usize], gt: &[usize], num_classes: usize) -> Vec<f64> {
    assert_eq!(pred.len(), gt.len());
    (0..num_classes)
        .map(|c| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &g) in pred.iter().zip(gt) {
                let (a, b) = (p == c, g == c);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect()
}

pub fn mask_labels(mask: &BinaryMask) -> Vec<usize> {
    mask.data().iter().map(|&v| v as usize).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub class_iou: Vec<f64>,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    /// `Race`, `Gender` or `Age`.
    pub attribute: String,
    pub group: String,
    pub count: usize,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub miou: f64,
    /// Mean over images of each class's IoU; their mean is `miou`.
    pub class_iou: Vec<f64>,
    pub images: Vec<ImageScore>,
    pub groups: Vec<GroupRow>,
}

impl EvalResult {
    pub fn from_scores(images: Vec<ImageScore>) -> Result<Self> {
        ensure!(!images.is_empty(), "cannot evaluate an empty dataset");
        let k = images[0].class_iou.len();
        let n = images.len() as f64;
        let class_iou: Vec<f64> = (0..k)
            .map(|c| images.iter().map(|s| s.class_iou[c]).sum::<f64>() / n)
            .collect();
        let miou = images.iter().map(|s| s.miou).sum::<f64>() / n;
        Ok(EvalResult {
            miou,
            class_iou,
            images,
            groups: Vec::new(),
        })
    }

    pub fn group(&self, attribute: &str, group: &str) -> Option<&GroupRow> {
        self.groups
            .iter()
            .find(|g| g.attribute == attribute && g.group == group)
    }
}

pub fn score_image(id: &str, logits: &Tensor<f32>, item: usize, mask: &BinaryMask) -> ImageScore {
    let class_iou = image_class_iou(&argmax_labels(logits, item), &mask_labels(mask), logits.shape().c);
    let miou = class_iou.iter().sum::<f64>() / class_iou.len() as f64;
    ImageScore {
        id: id.to_string(),
        class_iou,
        miou,
    }
}

/// Eval-mode scores for every sample, computed in parallel; order follows
/// the dataset.
pub fn evaluate_miou(net: &ExtremeC3Net, dataset: &Dataset, norm: &Normalization) -> Result<EvalResult> {
    evaluate_samples(net, &dataset.samples, norm)
}

pub fn evaluate_samples(net: &ExtremeC3Net, samples: &[Sample], norm: &Normalization) -> Result<EvalResult> {
    evaluate_head(net, samples, norm, Head::Full)
}

/// [`evaluate_samples`] scoring the given head's logits.
pub fn evaluate_head(net: &ExtremeC3Net, samples: &[Sample], norm: &Normalization, head: Head) -> Result<EvalResult> {
    ensure!(!samples.is_empty(), "cannot evaluate an empty dataset");
    let scores = samples
        .par_iter()
        .map(|s| {
            let (x, masks) = make_batch(&[s], norm)?;
            let logits = net.infer(&x, head)?;
            Ok(score_image(&s.id, &logits, 0, &masks[0]))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_scores(scores)
}

/// Adds Race / Gender / Age rows. Samples without attributes only count in
/// the overall value; unrecognised values form an `unknown` group.
pub fn group_rows(result: &EvalResult, dataset: &Dataset) -> Vec<GroupRow> {
    let mut buckets: BTreeMap<(usize, usize, String), (usize, f64)> = BTreeMap::new();
    for (score, sample) in result.images.iter().zip(&dataset.samples) {
        let Some(a) = sample.attributes else { continue };
        let keys = [
            (0, rank(Race::KNOWN, &a.race), a.race.to_string()),
            (1, rank(Gender::KNOWN, &a.gender), a.gender.to_string()),
            (2, rank(Age::KNOWN, &a.age), a.age.to_string()),
        ];
        for key in keys {
            let e = buckets.entry(key).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += score.miou;
        }
    }
    const NAMES: [&str; 3] = ["Race", "Gender", "Age"];
    buckets
        .into_iter()
        .map(|((dim, _, group), (count, total))| GroupRow {
            attribute: NAMES[dim].to_string(),
            group: capitalize(&group),
            count,
            miou: total / count as f64,
        })
        .collect()
}

fn rank<T: PartialEq>(known: &[T], v: &T) -> usize {
    known.iter().position(|k| k == v).unwrap_or(known.len())
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// [`evaluate_miou`] plus the per-attribute rows.
pub fn grouped_miou(net: &ExtremeC3Net, dataset: &Dataset, norm: &Normalization) -> Result<EvalResult> {
    let mut r = evaluate_miou(net, dataset, norm)?;
    r.groups = group_rows(&r, dataset);
    Ok(r)
}

/// Attribute table: one row per group with its image count, then the
/// overall line.
pub fn render_group_table(result: &EvalResult) -> String {
    let mut s = String::new();
    writeln!(s, "{:<10} {:<10} {:>7} {:>8}", "Attribute", "Group", "Images", "mIoU").unwrap();
    let mut last = "";
    for g in &result.groups {
        let label = if g.attribute == last { "" } else { g.attribute.as_str() };
        last = &g.attribute;
        writeln!(s, "{:<10} {:<10} {:>7} {:>8.4}", label, g.group, g.count, g.miou).unwrap();
    }
    writeln!(s, "{:<10} {:<10} {:>7} {:>8.4}", "Overall", "", result.images.len(), result.miou).unwrap();
    s
}
