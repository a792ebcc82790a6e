//! Deformation and texture augmentation.
//!
//! Deformations (flip, rotation, rescale, translation) are folded into one
//! inverse affine map and applied to image (bilinear) and mask (nearest)
//! together, resampling straight to the output size. Texture changes touch
//! the image only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image_io::bilinear_at;
use super::Sample;
use crate::error::{ensure, Result};
use crate::loss::BinaryMask;
use crate::tensor::{Shape, Tensor};

const MAX_ATTEMPTS: usize = 10;

/// Closed interval `[lo, hi]`, written as a two-element array in config files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

impl From<[f64; 2]> for Range {
    fn from([lo, hi]: [f64; 2]) -> Self {
        Range { lo, hi }
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.lo, r.hi]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub hflip_prob: f64,
    pub rotation: bool,
    /// Degrees.
    pub rotation_range: Range,
    pub resize: bool,
    pub resize_range: Range,
    pub translate: bool,
    /// Fraction of the image size.
    pub translate_range: Range,

    /// Probability of each enabled texture transform firing.
    pub texture_prob: f64,
    pub noise: bool,
    /// Standard deviation on the 8-bit scale.
    pub noise_sigma: f64,
    pub blur: bool,
    pub blur_kernels: Vec<usize>,
    pub color: bool,
    pub color_range: Range,
    pub brightness: bool,
    pub brightness_range: Range,
    pub contrast: bool,
    pub contrast_range: Range,
    pub sharpness: bool,
    pub sharpness_range: Range,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip: true,
            hflip_prob: 0.5,
            rotation: true,
            rotation_range: Range::new(-45.0, 45.0),
            resize: true,
            resize_range: Range::new(0.5, 1.5),
            translate: true,
            translate_range: Range::new(-0.25, 0.25),
            texture_prob: 0.5,
            noise: true,
            noise_sigma: 10.0,
            blur: true,
            blur_kernels: vec![3, 5],
            color: true,
            color_range: Range::new(0.4, 1.7),
            brightness: true,
            brightness_range: Range::new(0.4, 1.7),
            contrast: true,
            contrast_range: Range::new(0.6, 1.5),
            sharpness: true,
            sharpness_range: Range::new(0.8, 1.3),
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        AugmentConfig {
            hflip: false,
            rotation: false,
            resize: false,
            translate: false,
            noise: false,
            blur: false,
            color: false,
            brightness: false,
            contrast: false,
            sharpness: false,
            ..Default::default()
        }
    }

    pub fn deformation_only(&self) -> Self {
        AugmentConfig {
            noise: false,
            blur: false,
            color: false,
            brightness: false,
            contrast: false,
            sharpness: false,
            ..self.clone()
        }
    }

    pub fn texture_only(&self) -> Self {
        AugmentConfig {
            hflip: false,
            rotation: false,
            resize: false,
            translate: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [("hflip_prob", self.hflip_prob), ("texture_prob", self.texture_prob)];
        for (name, p) in probs {
            ensure!((0.0..=1.0).contains(&p), "{name} must lie in [0, 1], got {p}");
        }
        let ranges = [
            ("rotation_range", self.rotation_range),
            ("resize_range", self.resize_range),
            ("translate_range", self.translate_range),
            ("color_range", self.color_range),
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
            ("sharpness_range", self.sharpness_range),
        ];
        for (name, r) in ranges {
            ensure!(r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi, "{name} is not a valid interval");
        }
        ensure!(self.resize_range.lo > 0.0, "resize_range must be positive");
        ensure!(self.noise_sigma >= 0.0, "noise_sigma must be nonnegative");
        ensure!(
            !self.blur || (!self.blur_kernels.is_empty() && self.blur_kernels.iter().all(|k| k % 2 == 1)),
            "blur_kernels must be a nonempty list of odd sizes"
        );
        Ok(())
    }
}

/// One concrete draw. Texture entries are `None` when that transform did not
/// fire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip: bool,
    pub rotation_deg: f64,
    pub scale: f64,
    pub translate_x: f64,
    pub translate_y: f64,
    pub color: Option<f64>,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub sharpness: Option<f64>,
    pub blur_kernel: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub noise_seed: u64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            flip: false,
            rotation_deg: 0.0,
            scale: 1.0,
            translate_x: 0.0,
            translate_y: 0.0,
            color: None,
            brightness: None,
            contrast: None,
            sharpness: None,
            blur_kernel: None,
            noise_sigma: None,
            noise_seed: 0,
        }
    }

    fn with_identity_geometry(self) -> Self {
        AugmentParams {
            flip: false,
            rotation_deg: 0.0,
            scale: 1.0,
            translate_x: 0.0,
            translate_y: 0.0,
            ..self
        }
    }
}

pub fn draw_params<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> AugmentParams {
    let mut p = AugmentParams::identity();
    if cfg.hflip {
        p.flip = rng.random_bool(cfg.hflip_prob);
    }
    if cfg.rotation {
        p.rotation_deg = cfg.rotation_range.draw(rng);
    }
    if cfg.resize {
        p.scale = cfg.resize_range.draw(rng);
    }
    if cfg.translate {
        p.translate_x = cfg.translate_range.draw(rng);
        p.translate_y = cfg.translate_range.draw(rng);
    }
    let fire = |on: bool, rng: &mut R| on && rng.random_bool(cfg.texture_prob);
    if fire(cfg.color, rng) {
        p.color = Some(cfg.color_range.draw(rng));
    }
    if fire(cfg.brightness, rng) {
        p.brightness = Some(cfg.brightness_range.draw(rng));
    }
    if fire(cfg.contrast, rng) {
        p.contrast = Some(cfg.contrast_range.draw(rng));
    }
    if fire(cfg.sharpness, rng) {
        p.sharpness = Some(cfg.sharpness_range.draw(rng));
    }
    if fire(cfg.blur, rng) {
        p.blur_kernel = Some(cfg.blur_kernels[rng.random_range(0..cfg.blur_kernels.len())]);
    }
    if fire(cfg.noise, rng) {
        p.noise_sigma = Some(cfg.noise_sigma);
    }
    p.noise_seed = rng.random();
    p
}

/// Seed for one sample in one epoch. Depends only on its arguments, so the
/// number of workers never changes what a sample sees.
pub fn augment_seed(global: u64, epoch: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(global) ^ epoch) ^ index)
}

/// Output pixel → source pixel coordinates.
struct Warp {
    in_h: f64,
    in_w: f64,
    sy: f64,
    sx: f64,
    cos: f64,
    sin: f64,
    scale: f64,
    tx: f64,
    ty: f64,
    flip: bool,
}

impl Warp {
    fn new(p: &AugmentParams, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let theta = p.rotation_deg.to_radians();
        Warp {
            in_h: in_h as f64,
            in_w: in_w as f64,
            sy: in_h as f64 / out_h as f64,
            sx: in_w as f64 / out_w as f64,
            cos: theta.cos(),
            sin: theta.sin(),
            scale: p.scale,
            tx: p.translate_x * in_w as f64,
            ty: p.translate_y * in_h as f64,
            flip: p.flip,
        }
    }

    fn source(&self, y: usize, x: usize) -> (f64, f64) {
        let oy = (y as f64 + 0.5) * self.sy - self.in_h / 2.0 - self.ty;
        let ox = (x as f64 + 0.5) * self.sx - self.in_w / 2.0 - self.tx;
        let (oy, ox) = (oy / self.scale, ox / self.scale);
        let ry = -self.sin * ox + self.cos * oy;
        let mut rx = self.cos * ox + self.sin * oy;
        if self.flip {
            rx = -rx;
        }
        (ry + self.in_h / 2.0 - 0.5, rx + self.in_w / 2.0 - 0.5)
    }
}

fn nearest(v: f64, n: usize) -> Option<usize> {
    let i = (v + 0.5).floor();
    (i >= 0.0 && i < n as f64).then_some(i as usize)
}

/// Resamples image and mask through the deformation part of `p`. Returns
/// `None` when no output pixel lands inside the source.
fn deform(sample: &Sample, p: &AugmentParams, out_h: usize, out_w: usize) -> Result<Option<(Tensor<f32>, BinaryMask)>> {
    let (h, w) = (sample.height(), sample.width());
    let warp = Warp::new(p, h, w, out_h, out_w);
    let coords: Vec<(f64, f64)> = (0..out_h)
        .flat_map(|y| (0..out_w).map(move |x| (y, x)))
        .map(|(y, x)| warp.source(y, x))
        .collect();
    let inside = |&(sy, sx): &(f64, f64)| sy > -1.0 && sy < h as f64 && sx > -1.0 && sx < w as f64;
    if !coords.iter().any(inside) {
        return Ok(None);
    }
    let mut data = Vec::with_capacity(3 * coords.len());
    for c in 0..3 {
        let plane = sample.image.plane(0, c);
        data.extend(coords.iter().map(|&(sy, sx)| bilinear_at(plane, h, w, sy, sx)));
    }
    let image = Tensor::from_vec(Shape::new(1, 3, out_h, out_w)?, data)?;
    let mask_data = coords
        .iter()
        .map(|&(sy, sx)| match (nearest(sy, h), nearest(sx, w)) {
            (Some(y), Some(x)) => sample.mask.get(y, x) as u8,
            _ => 0,
        })
        .collect();
    Ok(Some((image, BinaryMask::new(out_h, out_w, mask_data)?)))
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn blend(base: &[f32], img: &mut [f32], f: f32) {
    for (v, b) in img.iter_mut().zip(base) {
        *v = b + f * (*v - b);
    }
}

fn separable_filter(img: &mut Tensor<f32>, taps: &[f32]) {
    let s = img.shape();
    let r = taps.len() / 2;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    for c in 0..s.c {
        let plane = img.plane(0, c).to_vec();
        let mut tmp = vec![0.0f32; plane.len()];
        for y in 0..s.h {
            for x in 0..s.w {
                tmp[y * s.w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * plane[y * s.w + clamp(x as isize + k as isize - r as isize, s.w)])
                    .sum();
            }
        }
        let start = s.index(0, c, 0, 0);
        let out = &mut img.data_mut()[start..start + s.plane()];
        for y in 0..s.h {
            for x in 0..s.w {
                out[y * s.w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * tmp[clamp(y as isize + k as isize - r as isize, s.h) * s.w + x])
                    .sum();
            }
        }
    }
}

fn gaussian_taps(k: usize) -> Vec<f32> {
    let sigma = 0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let r = (k / 2) as f64;
    let raw: Vec<f64> = (0..k).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// 3×3 smoothing `[1 1 1; 1 5 1; 1 1 1] / 13` on interior pixels; the border
/// is left as is.
fn smooth(img: &Tensor<f32>) -> Tensor<f32> {
    let s = img.shape();
    let mut out = img.clone();
    if s.h < 3 || s.w < 3 {
        return out;
    }
    for c in 0..s.c {
        let p = img.plane(0, c);
        for y in 1..s.h - 1 {
            for x in 1..s.w - 1 {
                let mut acc = 4.0 * p[y * s.w + x];
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += p[(y + dy - 1) * s.w + x + dx - 1];
                    }
                }
                out.set(0, c, y, x, acc / 13.0);
            }
        }
    }
    out
}

fn apply_texture(img: &mut Tensor<f32>, p: &AugmentParams) {
    let plane = img.shape().plane();
    let gray = |img: &Tensor<f32>| -> Vec<f32> {
        let d = img.data();
        (0..plane).map(|i| luma(d[i], d[plane + i], d[2 * plane + i])).collect()
    };
    if let Some(f) = p.color {
        let g = gray(img);
        for c in 0..3 {
            blend(&g, &mut img.data_mut()[c * plane..(c + 1) * plane], f as f32);
        }
    }
    if let Some(f) = p.brightness {
        img.data_mut().iter_mut().for_each(|v| *v *= f as f32);
    }
    if let Some(f) = p.contrast {
        let mean = gray(img).iter().sum::<f32>() / plane as f32;
        img.data_mut().iter_mut().for_each(|v| *v = mean + f as f32 * (*v - mean));
    }
    if let Some(f) = p.sharpness {
        let base = smooth(img);
        blend(base.data(), img.data_mut(), f as f32);
    }
    if let Some(k) = p.blur_kernel {
        separable_filter(img, &gaussian_taps(k));
    }
    if let Some(sigma) = p.noise_sigma {
        let normal = Normal::new(0.0, sigma / 255.0).expect("sigma is nonnegative");
        let mut rng = ChaCha8Rng::seed_from_u64(p.noise_seed);
        img.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng) as f32);
    }
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn has_texture(p: &AugmentParams) -> bool {
    p.color.is_some()
        || p.brightness.is_some()
        || p.contrast.is_some()
        || p.sharpness.is_some()
        || p.blur_kernel.is_some()
        || p.noise_sigma.is_some()
}

/// Applies fixed parameters, resampling to `out_h×out_w`. A geometry that
/// misses the source entirely falls back to the identity warp.
pub fn apply_params(sample: &Sample, p: &AugmentParams, out_h: usize, out_w: usize) -> Result<Sample> {
    let (mut image, mask) = match deform(sample, p, out_h, out_w)? {
        Some(v) => v,
        None => deform(sample, &p.clone().with_identity_geometry(), out_h, out_w)?.expect("identity covers the image"),
    };
    if has_texture(p) {
        apply_texture(&mut image, p);
    }
    Ok(Sample {
        image,
        mask,
        ..sample.clone()
    })
}

/// Augments one sample, fully determined by `seed`. Geometry draws that miss
/// the image are redrawn up to ten times before falling back to the identity.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, seed: u64, out_h: usize, out_w: usize) -> Result<(Sample, AugmentParams)> {
    cfg.validate()?;
    ensure!(out_h > 0 && out_w > 0, "output size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = draw_params(cfg, &mut rng);
    for _ in 1..MAX_ATTEMPTS {
        if deform(sample, &params, out_h, out_w)?.is_some() {
            break;
        }
        params = draw_params(cfg, &mut rng);
    }
    if deform(sample, &params, out_h, out_w)?.is_none() {
        params = params.with_identity_geometry();
    }
    Ok((apply_params(sample, &params, out_h, out_w)?, params))
}
