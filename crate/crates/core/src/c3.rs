//! The advanced C3-module and its per-layer dilation schedule.
//!
//! A C3-block is a concentration stage (depthwise `3×1` then `1×3`) followed
//! by a comprehensive stage (a depthwise `3×3` with dilation `r`). The
//! advanced module reduces its input to `d` channels, runs three blocks with
//! different dilations on that shared tensor, fuses them hierarchically
//! (`s1 = b1`, `s2 = s1 + b2`, `s3 = s2 + b3`), concatenates `s1, s2, s3` and
//! mixes the `3d` channels back to `Co` with a pointwise convolution.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, GraphBuilder, NodeId};
use crate::kernels::Kernel;
use crate::tensor::{Scalar, Tensor};

/// Dilation triples `(B1, B2, B3)` for the eight CoarseNet modules L1..L8.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[usize; 3]>", into = "Vec<[usize; 3]>")]
pub struct DilationSchedule {
    layers: [[usize; 3]; 8],
}

impl Default for DilationSchedule {
    /// Small ratios near the input, `(2, 4, 8)` for the deep layers.
    fn default() -> Self {
        DilationSchedule {
            layers: [
                [1, 2, 3],
                [1, 3, 4],
                [1, 3, 5],
                [2, 4, 8],
                [2, 4, 8],
                [2, 4, 8],
                [2, 4, 8],
                [2, 4, 8],
            ],
        }
    }
}

impl DilationSchedule {
    pub fn new(layers: [[usize; 3]; 8]) -> Result<Self> {
        for (i, t) in layers.iter().enumerate() {
            ensure!(
                t.iter().all(|&d| d >= 1),
                "dilation triple for L{} must be positive: {t:?}",
                i + 1
            );
            ensure!(
                t[0] <= t[1] && t[1] <= t[2],
                "dilation triple for L{} must be non-decreasing: {t:?}",
                i + 1
            );
        }
        Ok(DilationSchedule { layers })
    }

    /// The same `(2, 4, 8)` triple everywhere.
    pub fn uniform() -> Self {
        DilationSchedule {
            layers: [[2, 4, 8]; 8],
        }
    }

    /// The default schedule in reverse layer order: large ratios first.
    pub fn reversed() -> Self {
        let mut layers = Self::default().layers;
        layers.reverse();
        DilationSchedule { layers }
    }

    /// Triple for layer `index` in `1..=8`.
    pub fn get(&self, index: usize) -> Result<[usize; 3]> {
        ensure!(
            (1..=8).contains(&index),
            "dilation schedule layer index must be in 1..=8, got {index}"
        );
        Ok(self.layers[index - 1])
    }

    pub fn as_array(&self) -> &[[usize; 3]; 8] {
        &self.layers
    }
}

/// Triple for layer `index` of the default schedule.
pub fn dilation_schedule(index: usize) -> Result<[usize; 3]> {
    DilationSchedule::default().get(index)
}

impl TryFrom<Vec<[usize; 3]>> for DilationSchedule {
    type Error = Error;

    fn try_from(v: Vec<[usize; 3]>) -> Result<Self> {
        let layers: [[usize; 3]; 8] = v.try_into().map_err(|v: Vec<[usize; 3]>| {
            Error::Config(format!(
                "dilation_schedule needs 8 entries, got {}",
                v.len()
            ))
        })?;
        DilationSchedule::new(layers)
    }
}

impl From<DilationSchedule> for Vec<[usize; 3]> {
    fn from(s: DilationSchedule) -> Self {
        s.layers.to_vec()
    }
}

impl fmt::Display for DilationSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "L{}=({},{},{})", i + 1, t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct C3BlockSpec {
    pub channels: usize,
    pub dilation: usize,
}

impl C3BlockSpec {
    /// Receptive field side of one block: the `3×1`/`1×3` pair covers `3×3`,
    /// the dilated `3×3` adds `2r` on each axis.
    pub fn receptive_field(&self) -> usize {
        2 * self.dilation + 3
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvancedC3ModuleSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dilations: [usize; 3],
    pub residual: bool,
    /// Internal width `d`. Defaults to `floor(Co / 3)`; modules with fewer than
    /// three output channels must set it explicitly.
    #[serde(default)]
    pub width: Option<usize>,
}

impl AdvancedC3ModuleSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, dilations: [usize; 3]) -> Self {
        AdvancedC3ModuleSpec {
            in_channels,
            out_channels,
            stride,
            dilations,
            residual: false,
            width: None,
        }
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = Some(width);
        self
    }

    pub fn internal_width(&self) -> Result<usize> {
        match self.width {
            Some(d) => {
                ensure!(d >= 1, "internal width must be at least 1");
                Ok(d)
            }
            None => {
                ensure!(
                    self.out_channels >= 3,
                    "module with {} output channels needs an explicit internal width (Co < 3)",
                    self.out_channels
                );
                Ok(self.out_channels / 3)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.in_channels >= 1 && self.out_channels >= 1,
            "module channels must be positive"
        );
        ensure!(
            self.stride == 1 || self.stride == 2,
            "module stride must be 1 or 2, got {}",
            self.stride
        );
        ensure!(
            self.dilations.iter().all(|&d| d >= 1),
            "dilations must be positive: {:?}",
            self.dilations
        );
        ensure!(
            !self.residual || (self.stride == 1 && self.in_channels == self.out_channels),
            "residual connection needs stride 1 and Ci == Co (got stride {}, {} -> {})",
            self.stride,
            self.in_channels,
            self.out_channels
        );
        self.internal_width().map(|_| ())
    }

    /// The reduction convolution: `3×3` carrying the stride when
    /// downsampling, pointwise otherwise.
    pub fn reduction_kernel(&self) -> Result<Kernel> {
        let d = self.internal_width()?;
        Ok(if self.stride == 2 {
            Kernel::square(self.in_channels, d, 3, 2)
        } else {
            Kernel::pointwise(self.in_channels, d)
        })
    }
}

/// Appends one C3-block to the graph.
pub fn build_c3_block(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    spec: &C3BlockSpec,
) -> Result<NodeId> {
    let d = spec.channels;
    ensure!(d >= 1 && spec.dilation >= 1, "invalid block spec {spec:?}");
    ensure!(
        b.channels(x) == d,
        "`{name}`: block expects {d} channels, input has {}",
        b.channels(x)
    );
    let v = b.conv(&format!("{name}.dw3x1"), x, Kernel::depthwise(d, 3, 1, 1))?;
    let h = b.conv(&format!("{name}.dw1x3"), v, Kernel::depthwise(d, 1, 3, 1))?;
    let bn = b.batch_norm(&format!("{name}.bn1"), h);
    let act = b.prelu(&format!("{name}.act1"), bn);
    let dil = b.conv(
        &format!("{name}.dw3x3"),
        act,
        Kernel::depthwise(d, 3, 3, spec.dilation),
    )?;
    Ok(b.batch_norm(&format!("{name}.bn2"), dil))
}

/// Appends one advanced C3-module to the graph.
pub fn build_advanced_c3(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    spec: &AdvancedC3ModuleSpec,
) -> Result<NodeId> {
    spec.validate()?;
    ensure!(
        b.channels(x) == spec.in_channels,
        "`{name}`: module expects {} channels, input has {}",
        spec.in_channels,
        b.channels(x)
    );
    let d = spec.internal_width()?;
    let reduced = b.conv_bn_prelu(&format!("{name}.reduce"), x, spec.reduction_kernel()?)?;
    let mut branches = Vec::with_capacity(3);
    for (i, &r) in spec.dilations.iter().enumerate() {
        let block = C3BlockSpec {
            channels: d,
            dilation: r,
        };
        branches.push(build_c3_block(b, &format!("{name}.b{}", i + 1), reduced, &block)?);
    }
    let s1 = branches[0];
    let s2 = b.add(&format!("{name}.fuse2"), s1, branches[1])?;
    let s3 = b.add(&format!("{name}.fuse3"), s2, branches[2])?;
    let cat = b.concat(&format!("{name}.cat"), &[s1, s2, s3])?;
    let merged = b.conv_bn_prelu(
        &format!("{name}.merge"),
        cat,
        Kernel::pointwise(3 * d, spec.out_channels),
    )?;
    if spec.residual {
        b.add(&format!("{name}.residual"), merged, x)
    } else {
        Ok(merged)
    }
}

/// A graph holding a single block or module, for running either in
/// isolation.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleGraph {
    pub graph: Graph,
    pub output: NodeId,
}

impl ModuleGraph {
    pub fn c3_block(spec: &C3BlockSpec, seed: u64) -> Result<Self> {
        let mut b = GraphBuilder::new(seed);
        let x = b.input(spec.channels);
        let output = build_c3_block(&mut b, "block", x, spec)?;
        Ok(ModuleGraph {
            graph: b.finish(),
            output,
        })
    }

    pub fn advanced_c3(spec: &AdvancedC3ModuleSpec, seed: u64) -> Result<Self> {
        let mut b = GraphBuilder::new(seed);
        let x = b.input(spec.in_channels);
        let output = build_advanced_c3(&mut b, "module", x, spec)?;
        Ok(ModuleGraph {
            graph: b.finish(),
            output,
        })
    }

    /// Eval-mode forward pass.
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.graph.infer(x, &[self.output])?.remove(0))
    }

    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LayerKind;
    use crate::tensor::Shape;

    #[test]
    fn default_schedule_entries() {
        assert_eq!(dilation_schedule(1).unwrap(), [1, 2, 3]);
        assert_eq!(dilation_schedule(2).unwrap(), [1, 3, 4]);
        assert_eq!(dilation_schedule(3).unwrap(), [1, 3, 5]);
        for l in 4..=8 {
            assert_eq!(dilation_schedule(l).unwrap(), [2, 4, 8]);
        }
        assert!(dilation_schedule(0).is_err());
        assert!(dilation_schedule(9).is_err());
    }

    #[test]
    fn schedule_variants() {
        assert!(DilationSchedule::uniform().as_array().iter().all(|t| *t == [2, 4, 8]));
        let r = DilationSchedule::reversed();
        assert_eq!(r.get(1).unwrap(), [2, 4, 8]);
        assert_eq!(r.get(8).unwrap(), [1, 2, 3]);
        assert!(DilationSchedule::new([[3, 2, 1]; 8]).is_err());
        assert!(DilationSchedule::try_from(vec![[1, 2, 3]; 7]).is_err());
    }

    #[test]
    fn block_parameter_count() {
        let g = ModuleGraph::c3_block(&C3BlockSpec { channels: 18, dilation: 2 }, 0).unwrap();
        // 270 depthwise weights, two BN affine pairs, one PReLU
        assert_eq!(g.param_count(), 270 + 2 * (2 * 18) + 18);
    }

    #[test]
    fn receptive_field() {
        for r in 1..5 {
            assert_eq!(C3BlockSpec { channels: 1, dilation: r }.receptive_field(), 2 * r + 3);
        }
    }

    #[test]
    fn module_shape_and_count() {
        let spec = AdvancedC3ModuleSpec::new(56, 56, 1, [2, 4, 8]).with_residual(true);
        let m = ModuleGraph::advanced_c3(&spec, 1).unwrap();
        let shapes = m.graph.infer_shapes(Shape::new(1, 56, 56, 56).unwrap()).unwrap();
        assert_eq!(shapes[m.output], Shape::new(1, 56, 56, 56).unwrap());
        // 1008 + 3·270 + 54·56 = 4842 weights, plus affine and slopes
        let weights: usize = m
            .graph
            .layers()
            .iter()
            .filter_map(|l| match &l.kind {
                LayerKind::Conv { kernel, .. } => Some(kernel.weight_len()),
                _ => None,
            })
            .sum();
        assert_eq!(weights, 4842);
        assert_eq!(m.param_count(), 4842 + 3 * 18 + 3 * (5 * 18) + 3 * 56);
    }

    #[test]
    fn module_errors() {
        assert!(ModuleGraph::advanced_c3(&AdvancedC3ModuleSpec::new(8, 2, 1, [1, 2, 3]), 0).is_err());
        assert!(ModuleGraph::advanced_c3(&AdvancedC3ModuleSpec::new(8, 2, 1, [1, 2, 3]).with_width(2), 0).is_ok());
        let bad_res = AdvancedC3ModuleSpec::new(8, 9, 1, [1, 2, 3]).with_residual(true);
        assert!(ModuleGraph::advanced_c3(&bad_res, 0).is_err());
        let strided_res = AdvancedC3ModuleSpec::new(9, 9, 2, [1, 2, 3]).with_residual(true);
        assert!(ModuleGraph::advanced_c3(&strided_res, 0).is_err());
    }

    #[test]
    fn strided_module_halves_resolution() {
        let spec = AdvancedC3ModuleSpec::new(27, 45, 2, [1, 2, 3]);
        let m = ModuleGraph::advanced_c3(&spec, 0).unwrap();
        let out = m.graph.infer_shapes(Shape::new(2, 27, 112, 112).unwrap()).unwrap()[m.output];
        assert_eq!(out, Shape::new(2, 45, 56, 56).unwrap());
    }
}
