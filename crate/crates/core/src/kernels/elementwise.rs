//! PReLU, pooling, bilinear upsampling, channel softmax, add and concat.

use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub fn prelu_forward<T: Scalar>(x: &Tensor<T>, alpha: &[T]) -> Result<Tensor<T>> {
    let s = x.shape();
    ensure!(
        alpha.len() == s.c,
        "prelu has {} slopes for {} channels",
        alpha.len(),
        s.c
    );
    let mut out = x.clone();
    for n in 0..s.n {
        for (c, &a) in alpha.iter().enumerate() {
            let start = s.index(n, c, 0, 0);
            for v in &mut out.data_mut()[start..start + s.plane()] {
                if *v < T::zero() {
                    *v = a * *v;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(d/dx, d/dalpha)`.
pub fn prelu_backward<T: Scalar>(x: &Tensor<T>, alpha: &[T], grad_out: &[T]) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let mut gx = grad_out.to_vec();
    let mut ga = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let start = s.index(n, c, 0, 0);
            for i in start..start + s.plane() {
                let v = x.data()[i];
                if v < T::zero() {
                    gx[i] = alpha[c] * grad_out[i];
                    ga[c] += v * grad_out[i];
                }
            }
        }
    }
    (gx, ga)
}

pub fn avg_pool_output(input: Shape, window: usize, stride: usize) -> Result<Shape> {
    ensure!(window >= 1 && stride >= 1, "pool window and stride must be at least 1");
    ensure!(
        window <= input.h && window <= input.w,
        "pool window {window} larger than input {}x{}",
        input.h,
        input.w
    );
    Ok(Shape {
        h: (input.h - window) / stride + 1,
        w: (input.w - window) / stride + 1,
        ..input
    })
}

pub fn avg_pool_forward<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let os = avg_pool_output(s, window, stride)?;
    let norm = T::lit(1.0 / (window * window) as f64);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let xp = x.plane(n, c);
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = T::zero();
                    for ky in 0..window {
                        let row = (oy * stride + ky) * s.w + ox * stride;
                        for &v in &xp[row..row + window] {
                            acc += v;
                        }
                    }
                    out.set(n, c, oy, ox, acc * norm);
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward<T: Scalar>(
    input: Shape,
    window: usize,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Vec<T> {
    let os = grad_out.shape();
    let norm = T::lit(1.0 / (window * window) as f64);
    let mut gx = vec![T::zero(); input.numel()];
    for n in 0..input.n {
        for c in 0..input.c {
            let base = input.index(n, c, 0, 0);
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let g = grad_out.at(n, c, oy, ox) * norm;
                    for ky in 0..window {
                        let row = base + (oy * stride + ky) * input.w + ox * stride;
                        for v in &mut gx[row..row + window] {
                            *v += g;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// One axis of the align-corners=false interpolation map: for every output
/// index, the two source taps and the weight of the second one.
#[derive(Clone, Debug)]
pub struct AxisMap {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisMap {
    /// Source coordinate `(i + 0.5) / factor - 0.5`, clamped at zero.
    pub fn new(in_len: usize, factor: usize) -> Self {
        let out_len = in_len * factor;
        let mut m = AxisMap {
            lo: Vec::with_capacity(out_len),
            hi: Vec::with_capacity(out_len),
            frac: Vec::with_capacity(out_len),
        };
        for i in 0..out_len {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            m.lo.push(lo);
            m.hi.push(hi);
            m.frac.push(src - lo as f64);
        }
        m
    }
}

pub fn check_upsample_factor(factor: usize) -> Result<()> {
    ensure!(
        factor == 2 || factor == 4,
        "bilinear upsampling supports factors 2 and 4, got {factor}"
    );
    Ok(())
}

pub fn upsample_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_upsample_factor(factor)?;
    let s = x.shape();
    let os = Shape {
        h: s.h * factor,
        w: s.w * factor,
        ..s
    };
    let my = AxisMap::new(s.h, factor);
    let mx = AxisMap::new(s.w, factor);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let xp = x.plane(n, c);
            let base = os.index(n, c, 0, 0);
            for oy in 0..os.h {
                let fy = T::lit(my.frac[oy]);
                let r0 = &xp[my.lo[oy] * s.w..(my.lo[oy] + 1) * s.w];
                let r1 = &xp[my.hi[oy] * s.w..(my.hi[oy] + 1) * s.w];
                for ox in 0..os.w {
                    let fx = T::lit(mx.frac[ox]);
                    let (a, b) = (mx.lo[ox], mx.hi[ox]);
                    let top = r0[a] + fx * (r0[b] - r0[a]);
                    let bot = r1[a] + fx * (r1[b] - r1[a]);
                    out.data_mut()[base + oy * os.w + ox] = top + fy * (bot - top);
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of the interpolation map.
pub fn upsample_backward<T: Scalar>(input: Shape, factor: usize, grad_out: &Tensor<T>) -> Vec<T> {
    let os = grad_out.shape();
    let my = AxisMap::new(input.h, factor);
    let mx = AxisMap::new(input.w, factor);
    let mut gx = vec![T::zero(); input.numel()];
    for n in 0..input.n {
        for c in 0..input.c {
            let base = input.index(n, c, 0, 0);
            let gp = grad_out.plane(n, c);
            for oy in 0..os.h {
                let fy = T::lit(my.frac[oy]);
                let (r0, r1) = (base + my.lo[oy] * input.w, base + my.hi[oy] * input.w);
                for ox in 0..os.w {
                    let g = gp[oy * os.w + ox];
                    let fx = T::lit(mx.frac[ox]);
                    let (a, b) = (mx.lo[ox], mx.hi[ox]);
                    let gt = g * (T::one() - fy);
                    let gb = g * fy;
                    gx[r0 + a] += gt * (T::one() - fx);
                    gx[r0 + b] += gt * fx;
                    gx[r1 + a] += gb * (T::one() - fx);
                    gx[r1 + b] += gb * fx;
                }
            }
        }
    }
    gx
}

/// Per-pixel softmax across channels, stabilized by subtracting the max.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    ensure!(s.c >= 2, "softmax needs at least two channels, got {}", s.c);
    let mut out = Tensor::zeros(s);
    let plane = s.plane();
    for n in 0..s.n {
        let xi = x.item(n);
        let base = n * s.item();
        for p in 0..plane {
            let mut mx = T::neg_infinity();
            for c in 0..s.c {
                mx = mx.max(xi[c * plane + p]);
            }
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (xi[c * plane + p] - mx).exp();
                out.data_mut()[base + c * plane + p] = e;
                z += e;
            }
            for c in 0..s.c {
                out.data_mut()[base + c * plane + p] /= z;
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of the channel softmax given its output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    let s = y.shape();
    let plane = s.plane();
    let mut gx = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        let base = n * s.item();
        for p in 0..plane {
            let mut dot = T::zero();
            for c in 0..s.c {
                let i = base + c * plane + p;
                dot += y.data()[i] * grad_out[i];
            }
            for c in 0..s.c {
                let i = base + c * plane + p;
                gx[i] = y.data()[i] * (grad_out[i] - dot);
            }
        }
    }
    gx
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure!(
        a.shape() == b.shape(),
        "elementwise add of mismatched shapes {} and {}",
        a.shape(),
        b.shape()
    );
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

pub fn concat_output(parts: &[Shape]) -> Result<Shape> {
    ensure!(!parts.is_empty(), "concat needs at least one part");
    let first = parts[0];
    for p in parts {
        ensure!(
            p.n == first.n && p.h == first.h && p.w == first.w,
            "concat parts disagree on batch/spatial extent: {} vs {}",
            p,
            first
        );
    }
    Ok(first.with_channels(parts.iter().map(|p| p.c).sum()))
}

pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shapes: Vec<Shape> = parts.iter().map(|t| t.shape()).collect();
    let os = concat_output(&shapes)?;
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..os.n {
        for part in parts {
            data.extend_from_slice(part.item(n));
        }
    }
    Tensor::from_vec(os, data)
}

/// Splits an upstream gradient back into the channel ranges of the parts.
pub fn concat_backward<T: Scalar>(parts: &[Shape], grad_out: &Tensor<T>) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = parts.iter().map(|p| Vec::with_capacity(p.numel())).collect();
    let os = grad_out.shape();
    for n in 0..os.n {
        let gi = grad_out.item(n);
        let mut offset = 0;
        for (dst, p) in out.iter_mut().zip(parts) {
            dst.extend_from_slice(&gi[offset..offset + p.item()]);
            offset += p.item();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, vals.len()).unwrap(), vals.to_vec()).unwrap()
    }

    #[test]
    fn prelu_definition() {
        let x = row(&[-2.0, 3.0]);
        let y = prelu_forward(&x, &[0.25]).unwrap();
        assert_eq!(y.data(), &[-0.5, 3.0]);
        assert_eq!(prelu_forward(&x, &[1.0]).unwrap(), x);
        let (gx, ga) = prelu_backward(&x, &[0.25], &[1.0, 1.0]);
        assert_eq!(gx, vec![0.25, 1.0]);
        assert_eq!(ga, vec![-2.0]);
    }

    #[test]
    fn mean_pool_of_two_by_two() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2).unwrap(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = avg_pool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[2.5]);
        assert!(avg_pool_forward(&x, 3, 1).is_err());
    }

    #[test]
    fn ramp_upsamples_by_stated_sampling() {
        let x = row(&[0.0, 1.0]);
        // Upsample only along width by treating height 1: the row axis maps to itself.
        let y = upsample_forward(&x, 2).unwrap();
        assert_eq!(y.shape().w, 4);
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn unsupported_factor() {
        assert!(upsample_forward(&row(&[1.0]), 3).is_err());
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let s = Shape::new(1, 2, 1, 2).unwrap();
        let x = Tensor::<f64>::from_vec(s, vec![0.0, 10.0, 0.0, 12.5]).unwrap();
        let y = softmax_channels(&x).unwrap();
        assert_eq!(y.at(0, 0, 0, 0), 0.5);
        let shifted = Tensor::from_vec(s, vec![-3.0, 10.0, -3.0, 12.5]).unwrap();
        let z = softmax_channels(&shifted).unwrap();
        assert!((y.at(0, 0, 0, 1) - z.at(0, 0, 0, 1)).abs() < 1e-15);
        assert!(softmax_channels(&row(&[1.0])).is_err());
    }

    #[test]
    fn concat_matches_channel_arithmetic() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 24, 8, 8).unwrap());
        let b = Tensor::<f64>::full(Shape::new(1, 3, 8, 8).unwrap(), 1.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape().c, 27);
        assert_eq!(c.at(0, 24, 0, 0), 1.0);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let bad = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 8).unwrap());
        assert!(concat_channels(&[&a, &bad]).is_err());
    }
}
