//! Binary masks and square-window morphology. Pixels outside the image count
//! as 0 for both dilation and erosion, so erosion eats in from the border.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// `H×W` mask with values in `{0, 1}`, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "mask extent must be positive, got {height}x{width}");
        ensure!(
            data.len() == height * width,
            "mask data has {} values, {height}x{width} needs {}",
            data.len(),
            height * width
        );
        ensure!(data.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        Ok(BinaryMask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask { height, width, data: vec![1; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        BinaryMask { height, width, data }
    }

    /// Values `>= 128` become foreground.
    pub fn from_gray8(height: usize, width: usize, gray: &[u8]) -> Result<Self> {
        Self::new(height, width, gray.iter().map(|&v| (v >= 128) as u8).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn invert(&self) -> Self {
        BinaryMask {
            data: self.data.iter().map(|&v| 1 - v).collect(),
            ..self.clone()
        }
    }

    /// 0 → 0, 1 → 255.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v * 255).collect()
    }
}

/// Square all-ones window of odd side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct StructuringElement {
    side: usize,
}

impl StructuringElement {
    pub fn square(side: usize) -> Result<Self> {
        ensure!(side % 2 == 1, "structuring element side must be odd, got {side}");
        Ok(StructuringElement { side })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn radius(&self) -> usize {
        self.side / 2
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        StructuringElement { side: 7 }
    }
}

impl TryFrom<usize> for StructuringElement {
    type Error = crate::error::Error;

    fn try_from(side: usize) -> Result<Self> {
        Self::square(side)
    }
}

impl From<StructuringElement> for usize {
    fn from(se: StructuringElement) -> usize {
        se.side
    }
}

/// Number of ones inside the window centred on every pixel, via a summed-area
/// table.
fn window_counts(mask: &BinaryMask, r: usize) -> Vec<usize> {
    let (h, w) = (mask.height, mask.width);
    let mut sat = vec![0usize; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0;
        for x in 0..w {
            row += mask.data[y * w + x] as usize;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            out.push(
                sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
                    - sat[y0 * (w + 1) + x1]
                    - sat[y1 * (w + 1) + x0],
            );
        }
    }
    out
}

pub fn morph_dilate(mask: &BinaryMask, se: StructuringElement) -> BinaryMask {
    let counts = window_counts(mask, se.radius());
    BinaryMask {
        data: counts.iter().map(|&c| (c > 0) as u8).collect(),
        ..mask.clone()
    }
}

pub fn morph_erode(mask: &BinaryMask, se: StructuringElement) -> BinaryMask {
    let full = se.side * se.side;
    let counts = window_counts(mask, se.radius());
    BinaryMask {
        data: counts.iter().map(|&c| (c == full) as u8).collect(),
        ..mask.clone()
    }
}

/// The band `dilate(mask) − erode(mask)`.
pub fn boundary_mask(mask: &BinaryMask, se: StructuringElement) -> BinaryMask {
    let d = morph_dilate(mask, se);
    let e = morph_erode(mask, se);
    BinaryMask {
        data: d.data.iter().zip(&e.data).map(|(a, b)| a - b).collect(),
        ..mask.clone()
    }
}
