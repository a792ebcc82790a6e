//! Portrait crops from face boxes: the box is grown sideways and (mostly)
//! downwards to take in the upper body, clamped to the image, and the crop
//! is resized to the training resolution.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{ensure, Result};
use crate::loss::BinaryMask;
use crate::tensor::{Shape, Tensor};

/// Face bounding box in pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceBox {
    pub id: String,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Growth on each side as a fraction of the box's own width (left/right) or
/// height (up/down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropRatios {
    pub left: f64,
    pub right: f64,
    pub up: f64,
    pub down: f64,
}

impl Default for CropRatios {
    /// 2.2× the box width, half a box above, three boxes below.
    fn default() -> Self {
        CropRatios {
            left: 0.6,
            right: 0.6,
            up: 0.5,
            down: 3.0,
        }
    }
}

impl CropRatios {
    pub const ZERO: CropRatios = CropRatios {
        left: 0.0,
        right: 0.0,
        up: 0.0,
        down: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        ensure!(
            [self.left, self.right, self.up, self.down]
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0),
            "crop ratios must be nonnegative"
        );
        Ok(())
    }
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }
}

/// Expanded box clamped to an `h×w` image. Fails if the box itself is empty
/// or leaves the image.
pub fn expanded_box(b: &FaceBox, ratios: &CropRatios, h: usize, w: usize) -> Result<Rect> {
    ratios.validate()?;
    ensure!(b.w > 0 && b.h > 0, "face box `{}` is empty", b.id);
    ensure!(
        b.x + b.w <= w && b.y + b.h <= h,
        "face box `{}` ({}, {}, {}, {}) lies outside the {w}x{h} image",
        b.id,
        b.x,
        b.y,
        b.w,
        b.h
    );
    let (bw, bh) = (b.w as f64, b.h as f64);
    let x0 = (b.x as f64 - ratios.left * bw).floor().max(0.0) as usize;
    let y0 = (b.y as f64 - ratios.up * bh).floor().max(0.0) as usize;
    let x1 = ((b.x + b.w) as f64 + ratios.right * bw).ceil().min(w as f64) as usize;
    let y1 = ((b.y + b.h) as f64 + ratios.down * bh).ceil().min(h as f64) as usize;
    Ok(Rect { y0, x0, y1, x1 })
}

/// Cuts the same rectangle out of image and mask.
pub fn crop(sample: &Sample, r: Rect) -> Result<Sample> {
    ensure!(
        r.y0 < r.y1 && r.x0 < r.x1 && r.y1 <= sample.height() && r.x1 <= sample.width(),
        "crop rectangle {r:?} does not fit the image"
    );
    let image = Tensor::from_fn(Shape::new(1, 3, r.height(), r.width())?, |_, c, y, x| {
        sample.image.at(0, c, r.y0 + y, r.x0 + x)
    });
    let mask = BinaryMask::from_fn(r.height(), r.width(), |y, x| sample.mask.get(r.y0 + y, r.x0 + x));
    Ok(Sample {
        image,
        mask,
        ..sample.clone()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    pub sample: Sample,
    pub crop: Rect,
    /// The cropped mask has no foreground; worth a manual look.
    pub needs_review: bool,
}

/// Expands `b`, crops image and mask identically, and resizes to `out` when
/// given.
pub fn face_crop_generate(
    sample: &Sample,
    b: &FaceBox,
    ratios: &CropRatios,
    out: Option<(usize, usize)>,
) -> Result<GeneratedSample> {
    let rect = expanded_box(b, ratios, sample.height(), sample.width())?;
    let mut cropped = crop(sample, rect)?;
    if let Some((h, w)) = out {
        cropped = cropped.resized(h, w)?;
    }
    let needs_review = cropped.mask.is_empty();
    if needs_review {
        warn!("crop of `{}` has an empty mask", sample.id);
    }
    Ok(GeneratedSample {
        sample: cropped,
        crop: rect,
        needs_review,
    })
}

/// Reads `id,x,y,w,h`.
pub fn load_boxes(path: &Path) -> Result<Vec<FaceBox>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(Into::into))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> Sample {
        let img = Tensor::from_fn(Shape::new(1, 3, h, w).unwrap(), |_, c, y, x| (c * 1000 + y * w + x) as f32);
        Sample::new("s", img, BinaryMask::from_fn(h, w, |y, x| (y + x) % 3 == 0)).unwrap()
    }

    fn face(x: usize, y: usize, w: usize, h: usize) -> FaceBox {
        FaceBox { id: "s".into(), x, y, w, h }
    }

    #[test]
    fn zero_ratio_is_raw_box() {
        let s = sample(40, 30);
        let g = face_crop_generate(&s, &face(5, 6, 10, 8), &CropRatios::ZERO, None).unwrap();
        assert_eq!(g.crop, Rect { y0: 6, x0: 5, y1: 14, x1: 15 });
        assert_eq!(g.sample.image.at(0, 2, 0, 0), s.image.at(0, 2, 6, 5));
    }

    #[test]
    fn default_expansion_in_open_space() {
        let r = expanded_box(&face(100, 50, 20, 20), &CropRatios::default(), 400, 400).unwrap();
        assert_eq!(r, Rect { y0: 40, x0: 88, y1: 130, x1: 132 });
    }

    #[test]
    fn border_box_is_clamped() {
        let s = sample(40, 30);
        let g = face_crop_generate(&s, &face(0, 30, 10, 10), &CropRatios::default(), Some((16, 16))).unwrap();
        assert_eq!(g.crop, Rect { y0: 25, x0: 0, y1: 40, x1: 16 });
        assert_eq!((g.sample.height(), g.sample.width()), (16, 16));
    }

    #[test]
    fn outside_box_fails() {
        assert!(expanded_box(&face(25, 0, 10, 10), &CropRatios::default(), 40, 30).is_err());
        assert!(expanded_box(&face(0, 0, 0, 10), &CropRatios::default(), 40, 30).is_err());
    }

    #[test]
    fn empty_mask_is_flagged() {
        let mut s = sample(20, 20);
        s.mask = BinaryMask::zeros(20, 20);
        assert!(face_crop_generate(&s, &face(5, 5, 4, 4), &CropRatios::default(), None).unwrap().needs_review);
    }
}
