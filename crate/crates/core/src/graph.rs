//! Declarative layer graph shared by execution, training and cost analysis.
//!
//! A [`Graph`] is an ordered list of [`Layer`]s, each naming its inputs by
//! index, plus the parameter and running-statistics storage the layers refer
//! to. Layers are stored in topological order, so a forward pass is a single
//! sweep and the static shape pass in [`Graph::infer_shapes`] never touches
//! data.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, invalid, Result};
use crate::kernels::{self, norm::BN_MOMENTUM, Kernel, Mode, RunningStats};
use crate::tensor::{Scalar, Shape, Tensor};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub usize);

/// Which half of the two-branch network a layer or parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Shared,
    Coarse,
    Fine,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    Conv {
        kernel: Kernel,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    BatchNorm {
        channels: usize,
        gamma: ParamId,
        beta: ParamId,
        stats: StatsId,
    },
    PRelu {
        channels: usize,
        alpha: ParamId,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    Upsample {
        factor: usize,
    },
    Add,
    Concat,
}

impl LayerKind {
    pub fn op_name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::PRelu { .. } => "prelu",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Upsample { .. } => "bilinear",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    pub branch: Branch,
}

/// A trainable tensor. Vectors (BN affine, PReLU slopes, biases) are stored
/// with shape `(1, C, 1, 1)`, convolution weights as `(Co, Ci/g, Kh, Kw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
    pub branch: Branch,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsBuffer {
    pub name: String,
    pub stats: RunningStats<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Graph {
    layers: Vec<Layer>,
    params: Vec<Param>,
    stats: Vec<StatsBuffer>,
}

/// Running-statistics update produced by a train-mode pass.
#[derive(Clone, Debug)]
pub struct StatsUpdate {
    pub stats: StatsId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Result of running part of a graph on a tape.
#[derive(Debug)]
pub struct Execution {
    pub outputs: Vec<Var>,
    /// Every parameter that took part in the pass, with the tape leaf that
    /// carried it.
    pub params: Vec<(ParamId, Var)>,
    pub stat_updates: Vec<StatsUpdate>,
}

impl Execution {
    /// Reads parameter gradients off the tape, as `f32`, in `ParamId` order.
    /// Parameters that received no gradient are omitted.
    pub fn param_grads<T: Scalar>(&self, tape: &Tape<T>) -> Vec<(ParamId, Vec<f32>)> {
        let mut out: Vec<(ParamId, Vec<f32>)> = self
            .params
            .iter()
            .filter_map(|&(id, var)| {
                tape.grad(var)
                    .map(|g| (id, g.iter().map(|v| v.as_f64() as f32).collect()))
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

impl Graph {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, id: NodeId) -> &Layer {
        &self.layers[id]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn stats(&self) -> &[StatsBuffer] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [StatsBuffer] {
        &mut self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Parameters referenced by a layer, in declaration order.
    pub fn layer_params(&self, id: NodeId) -> Vec<ParamId> {
        match &self.layers[id].kind {
            LayerKind::Conv { weight, bias, .. } => std::iter::once(*weight).chain(*bias).collect(),
            LayerKind::BatchNorm { gamma, beta, .. } => vec![*gamma, *beta],
            LayerKind::PRelu { alpha, .. } => vec![*alpha],
            _ => Vec::new(),
        }
    }

    /// Static shape of every layer output for the given input shape.
    pub fn infer_shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let ins: Vec<Shape> = layer.inputs.iter().map(|&i| shapes[i]).collect();
            let s = match &layer.kind {
                LayerKind::Input { channels } => {
                    ensure!(
                        input.c == *channels,
                        "graph input expects {channels} channels, got {}",
                        input.c
                    );
                    input
                }
                LayerKind::Conv { kernel, .. } => kernel.output_shape(ins[0])?,
                LayerKind::BatchNorm { channels, .. } | LayerKind::PRelu { channels, .. } => {
                    ensure!(
                        ins[0].c == *channels,
                        "layer `{}` expects {channels} channels, got {}",
                        layer.name,
                        ins[0].c
                    );
                    ins[0]
                }
                LayerKind::AvgPool { window, stride } => {
                    kernels::avg_pool_output(ins[0], *window, *stride)?
                }
                LayerKind::Upsample { factor } => {
                    kernels::check_upsample_factor(*factor)?;
                    Shape {
                        h: ins[0].h * factor,
                        w: ins[0].w * factor,
                        ..ins[0]
                    }
                }
                LayerKind::Add => {
                    ensure!(
                        ins[0] == ins[1],
                        "layer `{}` adds mismatched shapes {} and {}",
                        layer.name,
                        ins[0],
                        ins[1]
                    );
                    ins[0]
                }
                LayerKind::Concat => kernels::concat_output(&ins)?,
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Marks every layer `targets` depend on.
    pub fn ancestors(&self, targets: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.layers.len()];
        let mut stack: Vec<NodeId> = targets.to_vec();
        while let Some(id) = stack.pop() {
            if !needed[id] {
                needed[id] = true;
                stack.extend(&self.layers[id].inputs);
            }
        }
        needed
    }

    /// Runs the layers `targets` depend on. Parameters are copied onto the
    /// tape as leaves; `trainable` decides which of them require gradients.
    pub fn execute<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        targets: &[NodeId],
        mode: Mode,
        trainable: impl Fn(&Param) -> bool,
    ) -> Result<Execution> {
        let needed = self.ancestors(targets);
        let mut vars: Vec<Option<Var>> = vec![None; self.layers.len()];
        let mut param_vars: Vec<Option<Var>> = vec![None; self.params.len()];
        let mut stat_updates = Vec::new();

        let mut param_var = |tape: &mut Tape<T>, id: ParamId| -> Result<Var> {
            if let Some(v) = param_vars[id.0] {
                return Ok(v);
            }
            let p = &self.params[id.0];
            let value = Tensor::from_vec(p.shape, p.data.iter().map(|&v| T::lit(v as f64)).collect())?;
            let v = tape.leaf(value, trainable(p));
            param_vars[id.0] = Some(v);
            Ok(v)
        };

        for (id, layer) in self.layers.iter().enumerate() {
            if !needed[id] {
                continue;
            }
            let ins: Vec<Var> = layer
                .inputs
                .iter()
                .map(|&i| vars[i].expect("layers are topologically ordered"))
                .collect();
            let out = match &layer.kind {
                LayerKind::Input { channels } => {
                    ensure!(
                        tape.shape(input).c == *channels,
                        "input has {} channels, graph expects {channels}",
                        tape.shape(input).c
                    );
                    input
                }
                LayerKind::Conv {
                    kernel,
                    weight,
                    bias,
                } => {
                    let w = param_var(tape, *weight)?;
                    let b = bias.map(|b| param_var(tape, b)).transpose()?;
                    tape.conv2d(ins[0], w, b, *kernel)?
                }
                LayerKind::BatchNorm {
                    gamma, beta, stats, ..
                } => {
                    let g = param_var(tape, *gamma)?;
                    let b = param_var(tape, *beta)?;
                    let rs = &self.stats[stats.0].stats;
                    let running = RunningStats {
                        mean: rs.mean.iter().map(|&v| T::lit(v as f64)).collect(),
                        var: rs.var.iter().map(|&v| T::lit(v as f64)).collect(),
                    };
                    let (out, batch) = tape.batch_norm(ins[0], g, b, &running, mode)?;
                    if let Some((mean, var)) = batch {
                        stat_updates.push(StatsUpdate {
                            stats: *stats,
                            mean: mean.iter().map(|v| v.as_f64()).collect(),
                            var: var.iter().map(|v| v.as_f64()).collect(),
                        });
                    }
                    out
                }
                LayerKind::PRelu { alpha, .. } => {
                    let a = param_var(tape, *alpha)?;
                    tape.prelu(ins[0], a)?
                }
                LayerKind::AvgPool { window, stride } => tape.avg_pool(ins[0], *window, *stride)?,
                LayerKind::Upsample { factor } => tape.upsample(ins[0], *factor)?,
                LayerKind::Add => tape.add(ins[0], ins[1])?,
                LayerKind::Concat => tape.concat(&ins)?,
            };
            vars[id] = Some(out);
        }

        let outputs = targets
            .iter()
            .map(|&t| vars[t].ok_or_else(|| invalid!("target {t} was not evaluated")))
            .collect::<Result<Vec<_>>>()?;
        let params = param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Execution {
            outputs,
            params,
            stat_updates,
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_stat_updates(&mut self, updates: &[StatsUpdate]) {
        for u in updates {
            let mean: Vec<f32> = u.mean.iter().map(|&v| v as f32).collect();
            let var: Vec<f32> = u.var.iter().map(|&v| v as f32).collect();
            self.stats[u.stats.0]
                .stats
                .update(&mean, &var, BN_MOMENTUM as f32);
        }
    }

    /// Convenience inference pass: eval mode, no backward rules recorded.
    pub fn infer<T: Scalar>(&self, input: &Tensor<T>, targets: &[NodeId]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(input.clone());
        let exec = self.execute(&mut tape, x, targets, Mode::Eval, |_| false)?;
        Ok(exec.outputs.iter().map(|&v| tape.value(v).clone()).collect())
    }
}

/// Incrementally constructs a [`Graph`], drawing initial weights from a
/// seeded generator in declaration order.
pub struct GraphBuilder {
    graph: Graph,
    channels: Vec<usize>,
    rng: ChaCha8Rng,
    branch: Branch,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        GraphBuilder {
            graph: Graph::default(),
            channels: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            branch: Branch::Shared,
        }
    }

    pub fn set_branch(&mut self, branch: Branch) {
        self.branch = branch;
    }

    pub fn channels(&self, node: NodeId) -> usize {
        self.channels[node]
    }

    pub fn finish(self) -> Graph {
        self.graph
    }

    fn push(&mut self, name: String, kind: LayerKind, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        self.graph.layers.push(Layer {
            name,
            kind,
            inputs,
            branch: self.branch,
        });
        self.channels.push(channels);
        self.graph.layers.len() - 1
    }

    fn new_param(&mut self, name: String, shape: Shape, data: Vec<f32>) -> ParamId {
        self.graph.params.push(Param {
            name,
            shape,
            data,
            branch: self.branch,
        });
        ParamId(self.graph.params.len() - 1)
    }

    fn vector(channels: usize) -> Shape {
        Shape {
            n: 1,
            c: channels,
            h: 1,
            w: 1,
        }
    }

    pub fn input(&mut self, channels: usize) -> NodeId {
        self.push("input".into(), LayerKind::Input { channels }, vec![], channels)
    }

    /// Convolution with He-uniform (fan-in) weights and a zero bias.
    pub fn conv(&mut self, name: &str, x: NodeId, kernel: Kernel) -> Result<NodeId> {
        kernel.validate()?;
        ensure!(
            self.channels[x] == kernel.in_channels,
            "`{name}`: input has {} channels, kernel expects {}",
            self.channels[x],
            kernel.in_channels
        );
        let bound = (6.0 / kernel.fan_in() as f64).sqrt() as f32;
        let data: Vec<f32> = (0..kernel.weight_len())
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        let [co, ci, kh, kw] = kernel.weight_shape();
        let weight = self.new_param(format!("{name}.weight"), Shape::new(co, ci, kh, kw)?, data);
        let bias = kernel.bias.then(|| {
            self.new_param(
                format!("{name}.bias"),
                Self::vector(co),
                vec![0.0; co],
            )
        });
        Ok(self.push(
            name.into(),
            LayerKind::Conv {
                kernel,
                weight,
                bias,
            },
            vec![x],
            kernel.out_channels,
        ))
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.channels[x];
        let gamma = self.new_param(format!("{name}.gamma"), Self::vector(c), vec![1.0; c]);
        let beta = self.new_param(format!("{name}.beta"), Self::vector(c), vec![0.0; c]);
        self.graph.stats.push(StatsBuffer {
            name: name.into(),
            stats: RunningStats::new(c),
        });
        let stats = StatsId(self.graph.stats.len() - 1);
        self.push(
            name.into(),
            LayerKind::BatchNorm {
                channels: c,
                gamma,
                beta,
                stats,
            },
            vec![x],
            c,
        )
    }

    pub fn prelu(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.channels[x];
        let alpha = self.new_param(format!("{name}.alpha"), Self::vector(c), vec![0.25; c]);
        self.push(
            name.into(),
            LayerKind::PRelu { channels: c, alpha },
            vec![x],
            c,
        )
    }

    /// Conv, then BN, then PReLU, named `{name}.conv`, `{name}.bn`, `{name}.act`.
    pub fn conv_bn_prelu(&mut self, name: &str, x: NodeId, kernel: Kernel) -> Result<NodeId> {
        let c = self.conv(&format!("{name}.conv"), x, kernel)?;
        let b = self.batch_norm(&format!("{name}.bn"), c);
        Ok(self.prelu(&format!("{name}.act"), b))
    }

    pub fn avg_pool(&mut self, name: &str, x: NodeId, window: usize, stride: usize) -> NodeId {
        let c = self.channels[x];
        self.push(name.into(), LayerKind::AvgPool { window, stride }, vec![x], c)
    }

    pub fn upsample(&mut self, name: &str, x: NodeId, factor: usize) -> Result<NodeId> {
        kernels::check_upsample_factor(factor)?;
        let c = self.channels[x];
        Ok(self.push(name.into(), LayerKind::Upsample { factor }, vec![x], c))
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        ensure!(
            self.channels[a] == self.channels[b],
            "`{name}`: adding {} and {} channels",
            self.channels[a],
            self.channels[b]
        );
        let c = self.channels[a];
        Ok(self.push(name.into(), LayerKind::Add, vec![a, b], c))
    }

    pub fn concat(&mut self, name: &str, parts: &[NodeId]) -> Result<NodeId> {
        ensure!(!parts.is_empty(), "`{name}`: concat needs at least one part");
        let c = parts.iter().map(|&p| self.channels[p]).sum();
        Ok(self.push(name.into(), LayerKind::Concat, parts.to_vec(), c))
    }
}
