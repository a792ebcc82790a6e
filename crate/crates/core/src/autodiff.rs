//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value. Nodes whose
//! inputs need gradients also keep a backward rule; [`Tape::backward`] walks
//! the nodes in reverse recording order and accumulates gradients into their
//! inputs.

use crate::error::{ensure, Error, Result};
use crate::kernels::{self, BnSaved, Kernel, Mode, RunningStats};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        kernel: Kernel,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    PRelu {
        x: Var,
        alpha: Var,
    },
    AvgPool {
        x: Var,
        window: usize,
        stride: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Softmax {
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    /// Scalar output whose derivative with respect to each input was computed
    /// during the forward pass.
    ScalarWithGrads {
        inputs: Vec<(Var, Vec<T>)>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Conv { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm2d",
            Op::PRelu { .. } => "prelu",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::Add { .. } => "elementwise_add",
            Op::Concat { .. } => "channel_concat",
            Op::Softmax { .. } => "softmax_channels",
            Op::Scale { .. } => "scale",
            Op::ScalarWithGrads { .. } => "scalar",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

/// Recording context for one forward/backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward rules. Values are still stored so
    /// the same graph code can run for inference.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_some()).count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: requires_grad && self.grad_enabled,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: requires_grad.then_some(op),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `w` holds the weight as a `(Co, Ci/g, Kh, Kw)` tensor, `b` a length-`Co`
    /// bias stored as `(1, Co, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, kernel: Kernel) -> Result<Var> {
        let ws = self.shape(w);
        ensure!(
            ws.to_array() == kernel.weight_shape(),
            "weight tensor {ws} does not match kernel {:?}",
            kernel.weight_shape()
        );
        let out = kernels::conv2d_forward(
            self.value(x),
            &kernel,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv { x, w, b, kernel }, &inputs)
    }

    /// Batch normalization. In train mode the batch mean and unbiased variance
    /// are returned so the caller can update its running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        mode: Mode,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let (out, saved) = kernels::batch_norm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            running,
            mode,
        )?;
        let stats = (mode == Mode::Train)
            .then(|| (saved.batch_mean.clone(), saved.batch_var_unbiased.clone()));
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let out = kernels::prelu_forward(self.value(x), self.value(alpha).data())?;
        self.push(out, Op::PRelu { x, alpha }, &[x, alpha])
    }

    pub fn avg_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let out = kernels::avg_pool_forward(self.value(x), window, stride)?;
        self.push(out, Op::AvgPool { x, window, stride }, &[x])
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_forward(self.value(x), factor)?;
        self.push(out, Op::Upsample { x, factor }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&values)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_channels(self.value(x))?;
        self.push(out, Op::Softmax { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).sum();
        let ones = vec![T::one(); self.value(x).data().len()];
        self.scalar_with_grads(value, vec![(x, ones)])
    }

    /// Records a scalar whose local derivative with respect to each input is
    /// already known. Used by the losses, whose gradients fall out of the
    /// forward computation.
    pub fn scalar_with_grads(&mut self, value: T, inputs: Vec<(Var, Vec<T>)>) -> Result<Var> {
        for (v, g) in &inputs {
            ensure!(
                g.len() == self.value(*v).data().len(),
                "local gradient length {} does not match input {}",
                g.len(),
                self.shape(*v)
            );
        }
        let vars: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
        self.push(Tensor::scalar(value), Op::ScalarWithGrads { inputs }, &vars)
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    /// Populates gradients of `loss` for every reachable node that requires
    /// them. Gradients accumulate across repeated calls and repeated uses.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.value(loss).data().len() == 1,
            "backward needs a scalar loss, got shape {}",
            self.shape(loss)
        );
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let Some(op) = self.nodes[i].op.take() else {
                self.nodes[i].grad = Some(grad);
                continue;
            };
            let result = self.propagate(i, &op, &grad);
            self.nodes[i].op = Some(op);
            self.nodes[i].grad = Some(grad);
            result?;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, op: &Op<T>, grad: &[T]) -> Result<()> {
        let out_shape = self.nodes[i].value.shape();
        match op {
            Op::Conv { x, w, b, kernel } => {
                let gy = Tensor::from_vec(out_shape, grad.to_vec())?;
                let grads = kernels::conv2d_backward(
                    self.value(*x),
                    kernel,
                    self.value(*w).data(),
                    &gy,
                    self.requires_grad(*x),
                )?;
                if let Some(gx) = grads.input {
                    self.accumulate(*x, gx.into_vec());
                }
                self.accumulate(*w, grads.weight);
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    self.accumulate(*b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let g = kernels::batch_norm_backward(
                    self.shape(*x),
                    self.value(*gamma).data(),
                    saved,
                    grad,
                );
                self.accumulate(*x, g.input);
                self.accumulate(*gamma, g.gamma);
                self.accumulate(*beta, g.beta);
            }
            Op::PRelu { x, alpha } => {
                let (gx, ga) = kernels::prelu_backward(self.value(*x), self.value(*alpha).data(), grad);
                self.accumulate(*x, gx);
                self.accumulate(*alpha, ga);
            }
            Op::AvgPool { x, window, stride } => {
                let gy = Tensor::from_vec(out_shape, grad.to_vec())?;
                let gx = kernels::avg_pool_backward(self.shape(*x), *window, *stride, &gy);
                self.accumulate(*x, gx);
            }
            Op::Upsample { x, factor } => {
                let gy = Tensor::from_vec(out_shape, grad.to_vec())?;
                let gx = kernels::upsample_backward(self.shape(*x), *factor, &gy);
                self.accumulate(*x, gx);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, grad.to_vec());
                self.accumulate(*b, grad.to_vec());
            }
            Op::Concat { parts } => {
                let shapes: Vec<Shape> = parts.iter().map(|p| self.shape(*p)).collect();
                let gy = Tensor::from_vec(out_shape, grad.to_vec())?;
                for (p, g) in parts.iter().zip(kernels::concat_backward(&shapes, &gy)) {
                    self.accumulate(*p, g);
                }
            }
            Op::Softmax { x } => {
                let gx = kernels::softmax_backward(&self.nodes[i].value, grad);
                self.accumulate(*x, gx);
            }
            Op::Scale { x, factor } => {
                self.accumulate(*x, grad.iter().map(|&g| g * *factor).collect());
            }
            Op::ScalarWithGrads { inputs } => {
                let g = grad[0];
                for (v, local) in inputs {
                    self.accumulate(*v, local.iter().map(|&l| l * g).collect());
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let s = Shape::new(shape.0, shape.1, shape.2, shape.3).unwrap();
        Tensor::from_vec(s, (0..s.numel()).map(f).collect()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t((1, 2, 2, 2), |i| i as f64), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn reuse_accumulates_both_paths() {
        let mut tape = Tape::new();
        let x = tape.leaf(t((1, 1, 2, 2), |i| i as f64 - 1.5), true);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn add_routes_grad_to_both_inputs() {
        let mut tape = Tape::new();
        let a = tape.leaf(t((1, 1, 1, 3), |i| i as f64), true);
        let b = tape.leaf(t((1, 1, 1, 3), |i| -(i as f64)), true);
        let c = tape.add(a, b).unwrap();
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
        let s = tape.scale(c, 3.0).unwrap();
        let s = tape.sum(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0; 3]);
        assert_eq!(tape.grad(b).unwrap(), &[3.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t((1, 1, 1, 2), |i| i as f64), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(t((1, 2, 2, 2), |i| i as f64), true);
        let y = tape.softmax(x).unwrap();
        let _ = tape.sum(y).unwrap();
        assert_eq!(tape.recorded_ops(), 0);
        assert!(!tape.requires_grad(x));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t((1, 1, 2, 2), |i| i as f64));
        let w = tape.leaf(t((1, 1, 1, 1), |_| 2.0), true);
        let y = tape.conv2d(x, w, None, Kernel::pointwise(1, 1)).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn non_finite_values_are_caught() {
        let mut tape = Tape::new();
        let x = tape.leaf(t((1, 1, 1, 2), |_| f64::MAX), true);
        let r = tape.add(x, x);
        if cfg!(debug_assertions) {
            assert!(matches!(r, Err(Error::NonFinite(_))));
        }
    }
}
