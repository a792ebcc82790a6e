//! PNG reading and writing, plus resampling of images and masks.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::loss::BinaryMask;
use crate::tensor::{Shape, Tensor};

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads any supported image as RGB, scaled to `[0, 1]`, shape `1×3×H×W`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let shape = Shape::new(1, 3, h as usize, w as usize)?;
    Ok(Tensor::from_fn(shape, |_, c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

/// Reads an 8-bit mask; values `>= 128` are foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    BinaryMask::from_gray8(h as usize, w as usize, img.as_raw())
}

/// Writes item 0 of a `[0, 1]` RGB tensor, clamping and rounding.
pub fn write_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    let img = RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| {
            (image.at(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    img.save(path).map_err(|e| image_error(path, e))
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.to_gray8())
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| image_error(path, e))
}

/// Samples a single plane at fractional pixel coordinates. Taps outside the
/// plane read as 0. Zero-weight taps are skipped so sampling exactly at a
/// pixel centre returns that pixel bit for bit.
pub(crate) fn bilinear_at(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f32 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = (sy - y0) as f32;
    let fx = (sx - x0) as f32;
    let mut acc = 0.0f32;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        if wy == 0.0 {
            continue;
        }
        let yy = y0 + dy;
        if yy < 0.0 || yy >= h as f64 {
            continue;
        }
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            if wx == 0.0 {
                continue;
            }
            let xx = x0 + dx;
            if xx < 0.0 || xx >= w as f64 {
                continue;
            }
            acc += wy * wx * plane[yy as usize * w + xx as usize];
        }
    }
    acc
}

/// Half-pixel-centre coordinate of output index `i` in an input of `n_in`
/// pixels, for an output of `n_out`.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, n_in as f64 - 1.0)
}

/// Bilinear resize of every channel, edge-clamped.
pub fn resize_image(image: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if (s.h, s.w) == (h, w) {
        return Ok(image.clone());
    }
    let shape = Shape::new(s.n, s.c, h, w)?;
    Ok(Tensor::from_fn(shape, |n, c, y, x| {
        bilinear_at(image.plane(n, c), s.h, s.w, source_coord(y, s.h, h), source_coord(x, s.w, w))
    }))
}

/// Nearest-neighbour resize; the result stays binary.
pub fn resize_mask(mask: &BinaryMask, h: usize, w: usize) -> Result<BinaryMask> {
    if (mask.height(), mask.width()) == (h, w) {
        return Ok(mask.clone());
    }
    crate::error::ensure!(h > 0 && w > 0, "resize target must be positive");
    let near = |i: usize, n_in: usize, n_out: usize| ((i * 2 + 1) * n_in / (n_out * 2)).min(n_in - 1);
    Ok(BinaryMask::from_fn(h, w, |y, x| {
        mask.get(near(y, mask.height(), h), near(x, mask.width(), w))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_constant_stays_constant() {
        let img = Tensor::full(Shape::new(1, 3, 5, 7).unwrap(), 0.25f32);
        let out = resize_image(&img, 9, 4).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn mask_nearest_doubling() {
        let m = BinaryMask::from_fn(2, 2, |y, x| y == x);
        let big = resize_mask(&m, 4, 4).unwrap();
        assert_eq!(big, BinaryMask::from_fn(4, 4, |y, x| y / 2 == x / 2));
        assert_eq!(resize_mask(&big, 2, 2).unwrap(), m);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(Shape::new(1, 3, 4, 5).unwrap(), |_, c, y, x| ((c + y * 5 + x) * 10) as f32 / 255.0);
        let p = dir.path().join("a.png");
        write_rgb(&p, &img).unwrap();
        assert!(read_rgb(&p).unwrap().max_abs_diff(&img) < 1e-6);
        let m = BinaryMask::from_fn(4, 5, |y, x| (x + y) % 2 == 0);
        let q = dir.path().join("m.png");
        write_mask(&q, &m).unwrap();
        assert_eq!(read_mask(&q).unwrap(), m);
        assert!(matches!(read_rgb(&dir.path().join("none.png")), Err(Error::Image { .. })));
    }
}
