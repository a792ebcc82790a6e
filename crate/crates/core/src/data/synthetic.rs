//! Seeded synthetic portraits: a bright ellipse on a darker textured
//! background. Used for smoke runs, fixtures and overfitting checks.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{image_io, Dataset, Sample};
use crate::error::{Error, Result};
use crate::loss::BinaryMask;
use crate::tensor::{Shape, Tensor};

/// `n` samples of `h×w`, ids `ellipse_000`, `ellipse_001`, ...
pub fn ellipses(n: usize, h: usize, w: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, 3, h, w)?;
    (0..n)
        .map(|i| {
            let cy = rng.random_range(0.35..0.65) * h as f64;
            let cx = rng.random_range(0.35..0.65) * w as f64;
            let ry = rng.random_range(0.2..0.35) * h as f64;
            let rx = rng.random_range(0.15..0.3) * w as f64;
            let fg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.6..0.95));
            let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.35));
            let inside = |y: usize, x: usize| {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            };
            let image = Tensor::from_fn(shape, |_, c, y, x| {
                if inside(y, x) {
                    fg[c]
                } else {
                    bg[c] + 0.05 * (((x / 4 + y / 4) % 2) as f32)
                }
            });
            let mask = BinaryMask::from_fn(h, w, inside);
            Sample::new(format!("ellipse_{i:03}"), image, mask)
        })
        .collect()
}

/// Writes `images/`, `masks/` and, when any sample carries attributes,
/// `attributes.csv` under `root`.
pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    for dir in ["images", "masks"] {
        let p = root.join(dir);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in &ds.samples {
        image_io::write_rgb(&root.join("images").join(format!("{}.png", s.id)), &s.image)?;
        image_io::write_mask(&root.join("masks").join(format!("{}.png", s.id)), &s.mask)?;
    }
    if ds.samples.iter().any(|s| s.attributes.is_some()) {
        let path = root.join("attributes.csv");
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut text = String::from("id,race,gender,age\n");
        for s in &ds.samples {
            if let Some(a) = s.attributes {
                text.push_str(&format!("{},{},{},{}\n", s.id, a.race, a.gender, a.age));
            }
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
