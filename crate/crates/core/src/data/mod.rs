//! Portrait dataset loading, augmentation and face-box crop generation.
//!
//! On-disk layout:
//!
//! ```text
//! root/images/<id>.png      RGB
//! root/masks/<id>.png       8-bit, 0 = background, 255 = foreground
//! root/attributes.csv       optional, header `id,race,gender,age`
//! root/boxes.csv            optional, header `id,x,y,w,h`
//! ```

mod attributes;
mod augment;
mod face_crop;
pub mod image_io;
pub mod synthetic;

pub use attributes::{load_attributes, Age, Attributes, Gender, Race};
pub use augment::{apply_params, augment, augment_seed, draw_params, AugmentConfig, AugmentParams, Range};
pub use face_crop::{face_crop_generate, load_boxes, CropRatios, FaceBox, GeneratedSample};

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::loss::BinaryMask;
use crate::tensor::{Shape, Tensor};

/// One image with its ground truth. The image is `1×3×H×W` in `[0, 1]`;
/// standardization happens when batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
    pub attributes: Option<Attributes>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: BinaryMask) -> Result<Self> {
        let s = image.shape();
        ensure!(s.n == 1 && s.c == 3, "sample image must be 1x3xHxW, got {s}");
        ensure!(
            (mask.height(), mask.width()) == (s.h, s.w),
            "mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            s.h,
            s.w
        );
        Ok(Sample {
            id: id.into(),
            image,
            mask,
            attributes: None,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }

    /// Bilinear for the image, nearest for the mask.
    pub fn resized(&self, h: usize, w: usize) -> Result<Sample> {
        Ok(Sample {
            image: image_io::resize_image(&self.image, h, w)?,
            mask: image_io::resize_mask(&self.mask, h, w)?,
            ..self.clone()
        })
    }
}

/// Per-channel standardization applied when batching.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.std.iter().all(|&s| s > 0.0 && s.is_finite()),
            "normalization std must be positive"
        );
        Ok(())
    }
}

/// Stacks samples of one size into a standardized `N×3×H×W` batch and the
/// matching masks.
pub fn make_batch(samples: &[&Sample], norm: &Normalization) -> Result<(Tensor<f32>, Vec<BinaryMask>)> {
    ensure!(!samples.is_empty(), "cannot batch zero samples");
    norm.validate()?;
    let (h, w) = (samples[0].height(), samples[0].width());
    ensure!(
        samples.iter().all(|s| (s.height(), s.width()) == (h, w)),
        "samples in a batch must share a size"
    );
    let shape = Shape::new(samples.len(), 3, h, w)?;
    let batch = Tensor::from_fn(shape, |n, c, y, x| {
        (samples[n].image.at(0, c, y, x) - norm.mean[c]) / norm.std[c]
    });
    Ok((batch, samples.iter().map(|s| s.mask.clone()).collect()))
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Ids skipped while loading, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>) -> Self {
        Dataset {
            samples,
            skipped: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Every sample resized to `h×w`.
    pub fn resized(&self, h: usize, w: usize) -> Result<Dataset> {
        Ok(Dataset {
            samples: self.samples.iter().map(|s| s.resized(h, w)).collect::<Result<_>>()?,
            skipped: self.skipped.clone(),
        })
    }

    /// Attaches attribute labels by id; ids not in the dataset are ignored.
    pub fn attach_attributes(&mut self, attrs: &HashMap<String, Attributes>) {
        for s in &mut self.samples {
            if let Some(a) = attrs.get(&s.id) {
                s.attributes = Some(*a);
            }
        }
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Loads every `images/*.png` with a matching `masks/*.png`, sorted by id.
/// Unpaired or unreadable files are logged and listed in
/// [`Dataset::skipped`]. `attributes.csv`, if present, is attached.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let images = png_stems(&root.join("images"))?;
    let masks = png_stems(&root.join("masks"))?;
    let mut ds = Dataset::default();
    let skip = |ds: &mut Dataset, id: &str, why: String| {
        warn!("skipping `{id}`: {why}");
        ds.skipped.push((id.to_string(), why));
    };
    for (id, img_path) in &images {
        let Some(mask_path) = masks.get(id) else {
            skip(&mut ds, id, "no matching mask".into());
            continue;
        };
        let loaded = image_io::read_rgb(img_path)
            .and_then(|img| Ok((img, image_io::read_mask(mask_path)?)))
            .and_then(|(img, mask)| Sample::new(id.clone(), img, mask));
        match loaded {
            Ok(s) => ds.samples.push(s),
            Err(e) => skip(&mut ds, id, e.to_string()),
        }
    }
    for id in masks.keys().filter(|id| !images.contains_key(*id)) {
        skip(&mut ds, id, "mask without image".into());
    }
    ensure!(!ds.samples.is_empty(), "no usable image/mask pairs under {}", root.display());
    let attr_path = root.join("attributes.csv");
    if attr_path.exists() {
        ds.attach_attributes(&load_attributes(&attr_path)?);
    }
    Ok(ds)
}
