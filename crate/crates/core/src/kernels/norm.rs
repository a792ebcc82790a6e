//! Per-channel batch normalization.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean and (unbiased) variance tracked across training batches.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// Exponential moving average update with the given momentum.
    pub fn update(&mut self, batch_mean: &[T], batch_var_unbiased: &[T], momentum: T) {
        let keep = T::one() - momentum;
        for (r, &m) in self.mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + momentum * m;
        }
        for (r, &v) in self.var.iter_mut().zip(batch_var_unbiased) {
            *r = keep * *r + momentum * v;
        }
    }
}

/// Values a train-mode forward keeps for the backward pass and for the
/// running-statistics update.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub mode: Mode,
    /// Normalized input `x̂`.
    pub xhat: Vec<T>,
    /// `1 / sqrt(var + eps)` per channel.
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance, used for the running estimate.
    pub batch_var_unbiased: Vec<T>,
}

fn check(x: Shape, gamma: &[impl Copy], beta: &[impl Copy]) -> Result<()> {
    ensure!(
        gamma.len() == x.c && beta.len() == x.c,
        "batch norm affine lengths ({}, {}) do not match {} channels",
        gamma.len(),
        beta.len(),
        x.c
    );
    Ok(())
}

pub fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: &RunningStats<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let s = x.shape();
    check(s, gamma, beta)?;
    ensure!(
        running.mean.len() == s.c && running.var.len() == s.c,
        "running statistics have {} channels, input has {}",
        running.mean.len(),
        s.c
    );
    let count = s.n * s.plane();
    let eps = T::lit(BN_EPS);
    let (mean, var_biased, var_unbiased) = match mode {
        Mode::Train => {
            let cnt = T::lit(count as f64);
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            for c in 0..s.c {
                let mut acc = T::zero();
                for n in 0..s.n {
                    acc += x.plane(n, c).iter().copied().sum::<T>();
                }
                let m = acc / cnt;
                let mut sq = T::zero();
                for n in 0..s.n {
                    for &v in x.plane(n, c) {
                        let d = v - m;
                        sq += d * d;
                    }
                }
                mean[c] = m;
                var[c] = sq;
            }
            let unbiased = var
                .iter()
                .map(|&v| {
                    if count > 1 {
                        v / T::lit((count - 1) as f64)
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let biased = var.iter().map(|&v| v / cnt).collect();
            (mean, biased, unbiased)
        }
        Mode::Eval => (running.mean.clone(), running.var.clone(), running.var.clone()),
    };
    let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); s.numel()];
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let start = s.index(n, c, 0, 0);
            let (m, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for i in start..start + s.plane() {
                let h = (x.data()[i] - m) * is;
                xhat[i] = h;
                out.data_mut()[i] = g * h + b;
            }
        }
    }
    Ok((
        out,
        BnSaved {
            mode,
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: var_unbiased,
        },
    ))
}

pub struct BnGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    shape: Shape,
    gamma: &[T],
    saved: &BnSaved<T>,
    grad_out: &[T],
) -> BnGrads<T> {
    let s = shape;
    let cnt = T::lit((s.n * s.plane()) as f64);
    let mut ggamma = vec![T::zero(); s.c];
    let mut gbeta = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let start = s.index(n, c, 0, 0);
            for i in start..start + s.plane() {
                gbeta[c] += grad_out[i];
                ggamma[c] += grad_out[i] * saved.xhat[i];
            }
        }
    }
    let mut gx = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let start = s.index(n, c, 0, 0);
            let scale = gamma[c] * saved.inv_std[c];
            match saved.mode {
                Mode::Train => {
                    let mean_g = gbeta[c] / cnt;
                    let mean_gx = ggamma[c] / cnt;
                    for i in start..start + s.plane() {
                        gx[i] = scale * (grad_out[i] - mean_g - saved.xhat[i] * mean_gx);
                    }
                }
                Mode::Eval => {
                    for i in start..start + s.plane() {
                        gx[i] = scale * grad_out[i];
                    }
                }
            }
        }
    }
    BnGrads {
        input: gx,
        gamma: ggamma,
        beta: gbeta,
    }
}
