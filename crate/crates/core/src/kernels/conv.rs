//! 2-D convolution (cross-correlation, zero padding) with groups, stride and
//! dilation.
//!
//! Two execution paths share one contract. Depthwise kernels, and every
//! kernel when the scalar type asks for canonical ordering, run as direct
//! loops that accumulate each output over `(ci, ky, kx)` in order. Everything
//! else lowers to im2col + GEMM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Geometry of a convolution kernel. Weight layout is `(Co, Ci/g, Kh, Kw)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Kernel {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub bias: bool,
}

impl Kernel {
    /// Plain `k×k` convolution with "same"-style padding `k/2` and no bias.
    pub fn square(in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Self {
        Kernel {
            in_channels,
            out_channels,
            kh: k,
            kw: k,
            groups: 1,
            stride: (stride, stride),
            padding: (k / 2, k / 2),
            dilation: (1, 1),
            bias: false,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::square(in_channels, out_channels, 1, 1)
    }

    /// Depthwise `kh×kw` kernel over `channels`, stride 1, padding chosen so the
    /// spatial size is preserved.
    pub fn depthwise(channels: usize, kh: usize, kw: usize, dilation: usize) -> Self {
        Kernel {
            in_channels: channels,
            out_channels: channels,
            kh,
            kw,
            groups: channels,
            stride: (1, 1),
            padding: (dilation * (kh / 2), dilation * (kw / 2)),
            dilation: (dilation, dilation),
            bias: false,
        }
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == (1, 1) && self.padding == (0, 0)
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_per_group() * self.kh * self.kw
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_per_group(), self.kh, self.kw]
    }

    pub fn fan_in(&self) -> usize {
        self.in_per_group() * self.kh * self.kw
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.in_channels > 0 && self.out_channels > 0 && self.kh > 0 && self.kw > 0,
            "kernel extents must be positive: {self:?}"
        );
        ensure!(self.groups > 0, "groups must be positive");
        ensure!(
            self.in_channels % self.groups == 0 && self.out_channels % self.groups == 0,
            "channels ({} -> {}) not divisible by groups {}",
            self.in_channels,
            self.out_channels,
            self.groups
        );
        ensure!(
            self.stride.0 >= 1 && self.stride.1 >= 1,
            "stride must be at least 1"
        );
        ensure!(
            self.dilation.0 >= 1 && self.dilation.1 >= 1,
            "dilation must be at least 1"
        );
        Ok(())
    }

    /// Output spatial extent for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ho = out_extent(h, self.kh, self.stride.0, self.padding.0, self.dilation.0);
        let wo = out_extent(w, self.kw, self.stride.1, self.padding.1, self.dilation.1);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(invalid!(
                "convolution {}x{} (dilation {:?}, padding {:?}) produces an empty output on a {h}x{w} input",
                self.kh,
                self.kw,
                self.dilation,
                self.padding
            )),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        ensure!(
            input.c == self.in_channels,
            "input has {} channels, kernel expects {}",
            input.c,
            self.in_channels
        );
        let (h, w) = self.output_hw(input.h, input.w)?;
        Ok(Shape {
            n: input.n,
            c: self.out_channels,
            h,
            w,
        })
    }
}

fn out_extent(len: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = (len + 2 * pad) as isize - (dil * (k - 1)) as isize - 1;
    if span < 0 {
        None
    } else {
        Some(span as usize / stride + 1)
    }
}

/// Output indices `o` for which `o * stride + offset` lands inside `0..in_len`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

fn check_weights<T>(k: &Kernel, weight: &[T], bias: Option<&[T]>) -> Result<()> {
    ensure!(
        weight.len() == k.weight_len(),
        "weight has {} values, kernel {:?} needs {}",
        weight.len(),
        k.weight_shape(),
        k.weight_len()
    );
    match bias {
        Some(b) => ensure!(
            k.bias && b.len() == k.out_channels,
            "bias length {} does not match kernel (bias={}, Co={})",
            b.len(),
            k.bias,
            k.out_channels
        ),
        None => ensure!(!k.bias, "kernel declares a bias but none was supplied"),
    }
    Ok(())
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &Kernel,
    weight: &[T],
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    let out_shape = k.output_shape(x.shape())?;
    check_weights(k, weight, bias)?;
    let in_shape = x.shape();
    let mut out = Tensor::zeros(out_shape);
    let direct = T::CANONICAL_ORDER || k.is_depthwise();
    out.data_mut()
        .par_chunks_mut(out_shape.item())
        .zip(x.data().par_chunks(in_shape.item()))
        .for_each(|(y, xi)| {
            if direct {
                direct_forward_item(xi, in_shape, k, weight, y, out_shape);
            } else {
                gemm_forward_item(xi, in_shape, k, weight, y, out_shape);
            }
            if let Some(b) = bias {
                for (plane, &bv) in y.chunks_mut(out_shape.plane()).zip(b) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Ok(out)
}

fn direct_forward_item<T: Scalar>(
    x: &[T],
    xs: Shape,
    k: &Kernel,
    weight: &[T],
    y: &mut [T],
    ys: Shape,
) {
    let cig = k.in_per_group();
    let cog = k.out_per_group();
    let (sh, sw) = k.stride;
    let (dh, dw) = k.dilation;
    let (ph, pw) = k.padding;
    for co in 0..k.out_channels {
        let g = co / cog;
        let yp = &mut y[co * ys.plane()..(co + 1) * ys.plane()];
        for cil in 0..cig {
            let ci = g * cig + cil;
            let xp = &x[ci * xs.plane()..(ci + 1) * xs.plane()];
            for ky in 0..k.kh {
                let oy_off = (ky * dh) as isize - ph as isize;
                let (oy0, oy1) = valid_range(ys.h, xs.h, sh, oy_off);
                for kx in 0..k.kw {
                    let wv = weight[((co * cig + cil) * k.kh + ky) * k.kw + kx];
                    let ox_off = (kx * dw) as isize - pw as isize;
                    let (ox0, ox1) = valid_range(ys.w, xs.w, sw, ox_off);
                    for oy in oy0..oy1 {
                        let iy = (oy * sh) as isize + oy_off;
                        let xrow = &xp[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                        let yrow = &mut yp[oy * ys.w..(oy + 1) * ys.w];
                        if ox0 == ox1 {
                            continue;
                        }
                        if sw == 1 {
                            let ix0 = (ox0 as isize + ox_off) as usize;
                            for (yv, &xv) in yrow[ox0..ox1].iter_mut().zip(&xrow[ix0..]) {
                                *yv += wv * xv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ((ox * sw) as isize + ox_off) as usize;
                                yrow[ox] += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Lowers the input patches of group `g` into a `(cig·kh·kw) × (ho·wo)` matrix.
fn im2col<T: Scalar>(x: &[T], xs: Shape, k: &Kernel, g: usize, ys: Shape, col: &mut [T]) {
    let cig = k.in_per_group();
    let p = ys.plane();
    let (sh, sw) = k.stride;
    let (dh, dw) = k.dilation;
    let (ph, pw) = k.padding;
    col.iter_mut().for_each(|v| *v = T::zero());
    for cil in 0..cig {
        let ci = g * cig + cil;
        let xp = &x[ci * xs.plane()..(ci + 1) * xs.plane()];
        for ky in 0..k.kh {
            let oy_off = (ky * dh) as isize - ph as isize;
            let (oy0, oy1) = valid_range(ys.h, xs.h, sh, oy_off);
            for kx in 0..k.kw {
                let row = (cil * k.kh + ky) * k.kw + kx;
                let crow = &mut col[row * p..(row + 1) * p];
                let ox_off = (kx * dw) as isize - pw as isize;
                let (ox0, ox1) = valid_range(ys.w, xs.w, sw, ox_off);
                for oy in oy0..oy1 {
                    let iy = ((oy * sh) as isize + oy_off) as usize;
                    for ox in ox0..ox1 {
                        let ix = ((ox * sw) as isize + ox_off) as usize;
                        crow[oy * ys.w + ox] = xp[iy * xs.w + ix];
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], xs: Shape, k: &Kernel, g: usize, ys: Shape, gx: &mut [T]) {
    let cig = k.in_per_group();
    let p = ys.plane();
    let (sh, sw) = k.stride;
    let (dh, dw) = k.dilation;
    let (ph, pw) = k.padding;
    for cil in 0..cig {
        let ci = g * cig + cil;
        let gp = &mut gx[ci * xs.plane()..(ci + 1) * xs.plane()];
        for ky in 0..k.kh {
            let oy_off = (ky * dh) as isize - ph as isize;
            let (oy0, oy1) = valid_range(ys.h, xs.h, sh, oy_off);
            for kx in 0..k.kw {
                let row = (cil * k.kh + ky) * k.kw + kx;
                let crow = &col[row * p..(row + 1) * p];
                let ox_off = (kx * dw) as isize - pw as isize;
                let (ox0, ox1) = valid_range(ys.w, xs.w, sw, ox_off);
                for oy in oy0..oy1 {
                    let iy = ((oy * sh) as isize + oy_off) as usize;
                    for ox in ox0..ox1 {
                        let ix = ((ox * sw) as isize + ox_off) as usize;
                        gp[iy * xs.w + ix] += crow[oy * ys.w + ox];
                    }
                }
            }
        }
    }
}

fn gemm_forward_item<T: Scalar>(
    x: &[T],
    xs: Shape,
    k: &Kernel,
    weight: &[T],
    y: &mut [T],
    ys: Shape,
) {
    let cig = k.in_per_group();
    let cog = k.out_per_group();
    let kk = cig * k.kh * k.kw;
    let p = ys.plane();
    let mut col = if k.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * p]
    };
    for g in 0..k.groups {
        let b: &[T] = if k.is_pointwise() {
            &x[g * cig * xs.plane()..(g + 1) * cig * xs.plane()]
        } else {
            im2col(x, xs, k, g, ys, &mut col);
            &col
        };
        let a = &weight[g * cog * kk..(g + 1) * cog * kk];
        let c = &mut y[g * cog * p..(g + 1) * cog * p];
        T::gemm(
            cog,
            kk,
            p,
            T::one(),
            a,
            kk as isize,
            1,
            b,
            p as isize,
            1,
            T::zero(),
            c,
            p as isize,
            1,
        );
    }
}

/// Gradients of a convolution with respect to its inputs.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

/// Backward pass. `need_input` skips the input gradient when the input is a
/// constant (the network image, for instance).
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Kernel,
    weight: &[T],
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let ys = k.output_shape(xs)?;
    ensure!(
        grad_out.shape() == ys,
        "upstream gradient shape {} does not match conv output {ys}",
        grad_out.shape()
    );
    ensure!(
        weight.len() == k.weight_len(),
        "weight has {} values, kernel needs {}",
        weight.len(),
        k.weight_len()
    );
    let direct = T::CANONICAL_ORDER || k.is_depthwise();

    let mut gx = if need_input {
        Some(Tensor::zeros(xs))
    } else {
        None
    };
    let wlen = k.weight_len();

    // Per-item weight gradients are reduced in batch order afterwards, so the
    // result does not depend on how rayon schedules the items.
    let partials: Vec<Vec<T>> = match gx.as_mut() {
        Some(gx) => gx
            .data_mut()
            .par_chunks_mut(xs.item())
            .zip(x.data().par_chunks(xs.item()))
            .zip(grad_out.data().par_chunks(ys.item()))
            .map(|((gxi, xi), gyi)| {
                let mut gw = vec![T::zero(); wlen];
                backward_item(xi, xs, k, weight, gyi, ys, Some(gxi), &mut gw, direct);
                gw
            })
            .collect(),
        None => x
            .data()
            .par_chunks(xs.item())
            .zip(grad_out.data().par_chunks(ys.item()))
            .map(|(xi, gyi)| {
                let mut gw = vec![T::zero(); wlen];
                backward_item(xi, xs, k, weight, gyi, ys, None, &mut gw, direct);
                gw
            })
            .collect(),
    };
    let mut gw = vec![T::zero(); wlen];
    for part in &partials {
        for (a, &b) in gw.iter_mut().zip(part) {
            *a += b;
        }
    }

    let gb = k.bias.then(|| {
        let mut gb = vec![T::zero(); k.out_channels];
        for n in 0..ys.n {
            for (co, slot) in gb.iter_mut().enumerate() {
                *slot += grad_out.plane(n, co).iter().copied().sum::<T>();
            }
        }
        gb
    });

    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

#[allow(clippy::too_many_arguments)]
fn backward_item<T: Scalar>(
    x: &[T],
    xs: Shape,
    k: &Kernel,
    weight: &[T],
    gy: &[T],
    ys: Shape,
    gx: Option<&mut [T]>,
    gw: &mut [T],
    direct: bool,
) {
    if direct {
        direct_backward_item(x, xs, k, weight, gy, ys, gx, gw);
    } else {
        gemm_backward_item(x, xs, k, weight, gy, ys, gx, gw);
    }
}

#[allow(clippy::too_many_arguments)]
fn direct_backward_item<T: Scalar>(
    x: &[T],
    xs: Shape,
    k: &Kernel,
    weight: &[T],
    gy: &[T],
    ys: Shape,
    mut gx: Option<&mut [T]>,
    gw: &mut [T],
) {
    let cig = k.in_per_group();
    let cog = k.out_per_group();
    let (sh, sw) = k.stride;
    let (dh, dw) = k.dilation;
    let (ph, pw) = k.padding;
    for co in 0..k.out_channels {
        let g = co / cog;
        let gyp = &gy[co * ys.plane()..(co + 1) * ys.plane()];
        for cil in 0..cig {
            let ci = g * cig + cil;
            let xp = &x[ci * xs.plane()..(ci + 1) * xs.plane()];
            for ky in 0..k.kh {
                let oy_off = (ky * dh) as isize - ph as isize;
                let (oy0, oy1) = valid_range(ys.h, xs.h, sh, oy_off);
                for kx in 0..k.kw {
                    let widx = ((co * cig + cil) * k.kh + ky) * k.kw + kx;
                    let wv = weight[widx];
                    let ox_off = (kx * dw) as isize - pw as isize;
                    let (ox0, ox1) = valid_range(ys.w, xs.w, sw, ox_off);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = ((oy * sh) as isize + oy_off) as usize;
                        let grow = &gyp[oy * ys.w..(oy + 1) * ys.w];
                        for ox in ox0..ox1 {
                            let ix = ((ox * sw) as isize + ox_off) as usize;
                            acc += xp[iy * xs.w + ix] * grow[ox];
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let gxp = &mut gx[ci * xs.plane()..(ci + 1) * xs.plane()];
                            for ox in ox0..ox1 {
                                let ix = ((ox * sw) as isize + ox_off) as usize;
                                gxp[iy * xs.w + ix] += wv * grow[ox];
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_backward_item<T: Scalar>(
    x: &[T],
    xs: Shape,
    k: &Kernel,
    weight: &[T],
    gy: &[T],
    ys: Shape,
    mut gx: Option<&mut [T]>,
    gw: &mut [T],
) {
    let cig = k.in_per_group();
    let cog = k.out_per_group();
    let kk = cig * k.kh * k.kw;
    let p = ys.plane();
    let pointwise = k.is_pointwise();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); kk * p]
    };
    let mut gcol = if gx.is_some() && !pointwise {
        vec![T::zero(); kk * p]
    } else {
        Vec::new()
    };
    for g in 0..k.groups {
        let b: &[T] = if pointwise {
            &x[g * cig * xs.plane()..(g + 1) * cig * xs.plane()]
        } else {
            im2col(x, xs, k, g, ys, &mut col);
            &col
        };
        let gyg = &gy[g * cog * p..(g + 1) * cog * p];
        // dW_g = dY_g · colᵀ
        T::gemm(
            cog,
            p,
            kk,
            T::one(),
            gyg,
            p as isize,
            1,
            b,
            1,
            p as isize,
            T::one(),
            &mut gw[g * cog * kk..(g + 1) * cog * kk],
            kk as isize,
            1,
        );
        if let Some(gx) = gx.as_deref_mut() {
            let wg = &weight[g * cog * kk..(g + 1) * cog * kk];
            if pointwise {
                // dX_g = W_gᵀ · dY_g, written straight into the input planes.
                let dst = &mut gx[g * cig * xs.plane()..(g + 1) * cig * xs.plane()];
                T::gemm(
                    kk,
                    cog,
                    p,
                    T::one(),
                    wg,
                    1,
                    kk as isize,
                    gyg,
                    p as isize,
                    1,
                    T::one(),
                    dst,
                    p as isize,
                    1,
                );
            } else {
                T::gemm(
                    kk,
                    cog,
                    p,
                    T::one(),
                    wg,
                    1,
                    kk as isize,
                    gyg,
                    p as isize,
                    1,
                    T::zero(),
                    &mut gcol,
                    p as isize,
                    1,
                );
                col2im(&gcol, xs, k, g, ys, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: Shape) -> Tensor<f64> {
        Tensor::full(shape, 1.0)
    }

    #[test]
    fn box_sum_center_and_corner() {
        let x = ones(Shape::new(1, 1, 3, 3).unwrap());
        let k = Kernel::square(1, 1, 3, 1);
        let y = conv2d_forward(&x, &k, &[1.0; 9], None).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(0, 0, r, c), 4.0);
        }
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn depthwise_channels_are_independent() {
        let s = Shape::new(1, 4, 5, 5).unwrap();
        let x = Tensor::from_fn(s, |_, c, y, x| (c * 25 + y * 5 + x) as f64 * 0.1);
        let k = Kernel::depthwise(4, 3, 3, 1);
        let w: Vec<f64> = (0..4).flat_map(|c| [c as f64; 9]).collect();
        let y = conv2d_forward(&x, &k, &w, None).unwrap();
        let boxk = Kernel::square(1, 1, 3, 1);
        for c in 0..4 {
            let xc = Tensor::from_vec(Shape::new(1, 1, 5, 5).unwrap(), x.plane(0, c).to_vec()).unwrap();
            let boxed = conv2d_forward(&xc, &boxk, &[1.0; 9], None).unwrap();
            for (a, b) in y.plane(0, c).iter().zip(boxed.data()) {
                assert!((a - c as f64 * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_extent_formula() {
        let k = Kernel {
            dilation: (2, 3),
            padding: (1, 0),
            stride: (2, 1),
            ..Kernel::square(2, 2, 3, 1)
        };
        let out = k.output_shape(Shape::new(1, 2, 9, 10).unwrap()).unwrap();
        // (9 + 2 - 2*2 - 1)/2 + 1 = 4, (10 - 3*2 - 1)/1 + 1 = 4
        assert_eq!((out.h, out.w), (4, 4));
    }

    #[test]
    fn empty_output_is_rejected() {
        let k = Kernel {
            padding: (0, 0),
            ..Kernel::square(1, 1, 5, 1)
        };
        let x = ones(Shape::new(1, 1, 3, 3).unwrap());
        assert!(conv2d_forward(&x, &k, &[0.0; 25], None).is_err());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let k = Kernel::square(2, 1, 3, 1);
        let x = ones(Shape::new(1, 3, 4, 4).unwrap());
        assert!(conv2d_forward(&x, &k, &[0.0; 18], None).is_err());
    }

    #[test]
    fn gemm_path_agrees_with_direct_path() {
        let s = Shape::new(2, 6, 7, 6).unwrap();
        let x64 = Tensor::from_fn(s, |n, c, y, x| ((n * 31 + c * 7 + y * 3 + x) % 11) as f64 * 0.1 - 0.5);
        for k in [
            Kernel::square(6, 4, 3, 2),
            Kernel::pointwise(6, 5).with_bias(true),
            Kernel {
                groups: 2,
                dilation: (2, 1),
                padding: (2, 1),
                ..Kernel::square(6, 4, 3, 1)
            },
        ] {
            let w: Vec<f64> = (0..k.weight_len()).map(|i| ((i * 13) % 7) as f64 * 0.2 - 0.6).collect();
            let b: Vec<f64> = (0..k.out_channels).map(|i| i as f64 * 0.1).collect();
            let bias = k.bias.then_some(&b[..]);
            let direct = conv2d_forward(&x64, &k, &w, bias).unwrap();
            let x32 = x64.cast::<f32>();
            let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
            let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
            let fast = conv2d_forward(&x32, &k, &w32, k.bias.then_some(&b32[..])).unwrap();
            assert!(direct.max_abs_diff(&fast.cast()) < 1e-5);

            let gy = Tensor::from_fn(direct.shape(), |n, c, y, x| ((n + c * 3 + y * 5 + x) % 5) as f64 - 2.0);
            let gd = conv2d_backward(&x64, &k, &w, &gy, true).unwrap();
            let gf = conv2d_backward(&x32, &k, &w32, &gy.cast(), true).unwrap();
            assert!(gd.input.unwrap().max_abs_diff(&gf.input.unwrap().cast()) < 1e-4);
            for (a, b) in gd.weight.iter().zip(&gf.weight) {
                assert!((a - *b as f64).abs() < 1e-3, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn dilation_wider_than_the_map_keeps_only_the_centre_tap() {
        let s = Shape::new(1, 2, 4, 4).unwrap();
        let x = Tensor::from_fn(s, |_, c, y, x| (c * 16 + y * 4 + x) as f64);
        let k = Kernel::depthwise(2, 3, 3, 5);
        let w: Vec<f64> = (0..18).map(|i| i as f64 + 1.0).collect();
        let y = conv2d_forward(&x, &k, &w, None).unwrap();
        assert_eq!(y, x.map(|v| v * if v < 16.0 { 5.0 } else { 14.0 }));
    }

    #[test]
    fn valid_range_covers_exact_interior() {
        // stride 2, offset -1, input 5, output 3: ix = 2o - 1 -> o in 1..3
        assert_eq!(valid_range(3, 5, 2, -1), (1, 3));
        assert_eq!(valid_range(4, 4, 1, 2), (0, 2));
        assert_eq!(valid_range(4, 2, 1, 5), (0, 0));
        // Every tap lands left of the input: empty, wherever it sits.
        let (lo, hi) = valid_range(2, 2, 1, -3);
        assert_eq!(lo, hi);
    }
}
