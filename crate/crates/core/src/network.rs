//! The two-branch ExtremeC3Net graph.
//!
//! CoarseNet: stride-2 stem, then eight advanced C3-modules at a quarter of
//! the input resolution, with pooled copies of the image concatenated in at
//! the L1 and L2 inputs (and again at L3, alongside the L2 input). A
//! pointwise head maps to class logits, upsampled ×4. FineNet: stride-2 stem
//! and one C3-module at half resolution, upsampled ×2. The two logit maps are
//! summed.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::c3::{build_advanced_c3, AdvancedC3ModuleSpec, DilationSchedule};
use crate::error::{ensure, Result};
use crate::graph::{Branch, Execution, Graph, GraphBuilder, LayerKind, NodeId, Param};
use crate::kernels::{self, Kernel, Mode};
use crate::tensor::{Scalar, Shape, Tensor};

const IMAGE_CHANNELS: usize = 3;

/// Declarative description of the network. Widths not pinned by the layer
/// table default to the values its concatenation arithmetic implies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    /// `[height, width]`, both divisible by 4.
    pub input_size: [usize; 2],
    pub num_classes: usize,
    /// Output channels of both stride-2 stems.
    pub stem_channels: usize,
    /// L1 output channels; L2 runs at `l1_channels + 3`.
    pub l1_channels: usize,
    /// Width of L3..L8.
    pub deep_channels: usize,
    pub residual_deep: bool,
    pub fine_width: usize,
    pub fine_dilations: [usize; 3],
    pub dilation_schedule: DilationSchedule,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            input_size: [224, 224],
            num_classes: 2,
            stem_channels: 24,
            l1_channels: 45,
            deep_channels: 56,
            residual_deep: true,
            fine_width: 6,
            fine_dilations: [1, 2, 3],
            dilation_schedule: DilationSchedule::default(),
        }
    }
}

impl NetworkSpec {
    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = [h, w];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        check_input_hw(h, w)?;
        ensure!(self.num_classes >= 2, "need at least two classes");
        ensure!(
            self.stem_channels > 0 && self.l1_channels > 0 && self.deep_channels > 0,
            "channel widths must be positive"
        );
        ensure!(self.fine_width > 0, "fine_width must be positive");
        Ok(())
    }

    /// Input channels of L1..L8.
    pub fn module_inputs(&self) -> [usize; 8] {
        let l2 = self.l1_channels + IMAGE_CHANNELS;
        let l3 = l2 + l2 + IMAGE_CHANNELS;
        let d = self.deep_channels;
        [self.stem_channels + IMAGE_CHANNELS, l2, l3, d, d, d, d, d]
    }

    /// Module specs of L1..L8 in order.
    pub fn coarse_modules(&self) -> Vec<AdvancedC3ModuleSpec> {
        let ins = self.module_inputs();
        let sched = self.dilation_schedule.as_array();
        let d = self.deep_channels;
        (0..8)
            .map(|i| match i {
                0 => AdvancedC3ModuleSpec::new(ins[0], self.l1_channels, 2, sched[0]),
                1 => AdvancedC3ModuleSpec::new(ins[1], ins[1], 1, sched[1]),
                2 => AdvancedC3ModuleSpec::new(ins[2], d, 1, sched[2]),
                _ => AdvancedC3ModuleSpec::new(d, d, 1, sched[i]).with_residual(self.residual_deep),
            })
            .collect()
    }

    pub fn fine_module(&self) -> AdvancedC3ModuleSpec {
        AdvancedC3ModuleSpec::new(self.stem_channels, self.num_classes, 1, self.fine_dilations)
            .with_width(self.fine_width)
    }
}

fn check_input_hw(h: usize, w: usize) -> Result<()> {
    ensure!(
        h > 0 && w > 0 && h % 4 == 0 && w % 4 == 0,
        "input size {h}x{w} must be divisible by 4"
    );
    Ok(())
}

/// Original image and its ÷2 and ÷4 average-pooled copies.
#[derive(Clone, Debug)]
pub struct ImagePyramid<T> {
    pub full: Tensor<T>,
    pub half: Tensor<T>,
    pub quarter: Tensor<T>,
}

/// `2×2`, stride-2 average pooling applied once and twice.
pub fn image_pyramid<T: Scalar>(image: &Tensor<T>) -> Result<ImagePyramid<T>> {
    let s = image.shape();
    check_input_hw(s.h, s.w)?;
    let half = kernels::avg_pool_forward(image, 2, 2)?;
    let quarter = kernels::avg_pool_forward(&half, 2, 2)?;
    Ok(ImagePyramid {
        full: image.clone(),
        half,
        quarter,
    })
}

/// Which logits a pass produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// CoarseNet alone (stage-one training).
    Coarse,
    /// Sum of both branches.
    Full,
}

/// Which parameters require gradients during a training pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamScope {
    Coarse,
    All,
}

impl ParamScope {
    pub fn includes(&self, p: &Param) -> bool {
        match self {
            ParamScope::All => true,
            ParamScope::Coarse => p.branch == Branch::Coarse,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtremeC3Net {
    spec: NetworkSpec,
    graph: Graph,
    coarse_logits: NodeId,
    fine_logits: NodeId,
    fused: NodeId,
    module_inputs: [NodeId; 8],
    module_outputs: [NodeId; 8],
}

impl ExtremeC3Net {
    /// Builds the graph with He-uniform weights drawn from `seed`; BN
    /// `gamma = 1`, `beta = 0`; PReLU slopes `0.25`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = GraphBuilder::new(seed);
        let image = b.input(IMAGE_CHANNELS);

        b.set_branch(Branch::Coarse);
        let half = b.avg_pool("coarse.pool2", image, 2, 2);
        let quarter = b.avg_pool("coarse.pool4", half, 2, 2);
        let stem = b.conv_bn_prelu(
            "coarse.stem",
            image,
            Kernel::square(IMAGE_CHANNELS, spec.stem_channels, 3, 2),
        )?;
        let modules = spec.coarse_modules();
        let mut inputs = [0; 8];
        let mut outputs = [0; 8];

        inputs[0] = b.concat("coarse.l1.in", &[stem, half])?;
        outputs[0] = build_advanced_c3(&mut b, "coarse.l1", inputs[0], &modules[0])?;
        inputs[1] = b.concat("coarse.l2.in", &[outputs[0], quarter])?;
        outputs[1] = build_advanced_c3(&mut b, "coarse.l2", inputs[1], &modules[1])?;
        inputs[2] = b.concat("coarse.l3.in", &[outputs[1], inputs[1], quarter])?;
        outputs[2] = build_advanced_c3(&mut b, "coarse.l3", inputs[2], &modules[2])?;
        for i in 3..8 {
            inputs[i] = outputs[i - 1];
            outputs[i] = build_advanced_c3(&mut b, &format!("coarse.l{}", i + 1), inputs[i], &modules[i])?;
        }
        let head = b.conv(
            "coarse.head",
            outputs[7],
            Kernel::pointwise(spec.deep_channels, spec.num_classes).with_bias(true),
        )?;
        let coarse_logits = b.upsample("coarse.up4", head, 4)?;

        b.set_branch(Branch::Fine);
        let fstem = b.conv_bn_prelu(
            "fine.stem",
            image,
            Kernel::square(IMAGE_CHANNELS, spec.stem_channels, 3, 2),
        )?;
        let fmod = build_advanced_c3(&mut b, "fine.c3", fstem, &spec.fine_module())?;
        let fine_logits = b.upsample("fine.up2", fmod, 2)?;

        b.set_branch(Branch::Shared);
        let fused = b.add("fuse", coarse_logits, fine_logits)?;

        Ok(ExtremeC3Net {
            spec: spec.clone(),
            graph: b.finish(),
            coarse_logits,
            fine_logits,
            fused,
            module_inputs: inputs,
            module_outputs: outputs,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    pub fn head_node(&self, head: Head) -> NodeId {
        match head {
            Head::Coarse => self.coarse_logits,
            Head::Full => self.fused,
        }
    }

    pub fn fine_node(&self) -> NodeId {
        self.fine_logits
    }

    /// Graph nodes feeding L1..L8.
    pub fn module_input_nodes(&self) -> [NodeId; 8] {
        self.module_inputs
    }

    pub fn module_output_nodes(&self) -> [NodeId; 8] {
        self.module_outputs
    }

    /// Static shapes of the L1..L8 inputs for a batch-1 input of the spec's
    /// size.
    pub fn module_input_shapes(&self) -> Result<[Shape; 8]> {
        let [h, w] = self.spec.input_size;
        let shapes = self.graph.infer_shapes(Shape::new(1, IMAGE_CHANNELS, h, w)?)?;
        Ok(self.module_inputs.map(|i| shapes[i]))
    }

    fn check_image(&self, s: Shape) -> Result<()> {
        ensure!(
            s.c == IMAGE_CHANNELS,
            "image must have {IMAGE_CHANNELS} channels, got {}",
            s.c
        );
        check_input_hw(s.h, s.w)
    }

    /// Runs the network on a tape. In train mode the caller folds
    /// `Execution::stat_updates` back with [`ExtremeC3Net::apply_stat_updates`].
    pub fn forward_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        image: Var,
        head: Head,
        mode: Mode,
        scope: ParamScope,
    ) -> Result<Execution> {
        self.check_image(tape.shape(image))?;
        self.graph
            .execute(tape, image, &[self.head_node(head)], mode, |p| scope.includes(p))
    }

    pub fn apply_stat_updates(&mut self, exec: &Execution) {
        self.graph.apply_stat_updates(&exec.stat_updates);
    }

    /// Full-resolution fused logits. Eval mode records no backward rules; train
    /// mode normalizes with batch statistics and updates the running ones.
    pub fn forward(&mut self, image: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        self.run_mode(image, Head::Full, mode)
    }

    /// CoarseNet logits alone, reusing the same parameters as [`Self::forward`].
    pub fn coarse_forward(&mut self, image: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        self.run_mode(image, Head::Coarse, mode)
    }

    fn run_mode(&mut self, image: &Tensor<f32>, head: Head, mode: Mode) -> Result<Tensor<f32>> {
        if mode == Mode::Eval {
            return self.infer(image, head);
        }
        let mut tape = Tape::no_grad();
        let x = tape.constant(image.clone());
        let exec = self.forward_on_tape(&mut tape, x, head, mode, ParamScope::All)?;
        self.apply_stat_updates(&exec);
        Ok(tape.value(exec.outputs[0]).clone())
    }

    /// Eval-mode pass through a shared reference; safe to call concurrently.
    pub fn infer<T: Scalar>(&self, image: &Tensor<T>, head: Head) -> Result<Tensor<T>> {
        self.check_image(image.shape())?;
        Ok(self.graph.infer(image, &[self.head_node(head)])?.remove(0))
    }

    /// Eval-mode `(coarse, fine, fused)` logits from one pass.
    pub fn infer_parts<T: Scalar>(&self, image: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
        self.check_image(image.shape())?;
        let mut out = self
            .graph
            .infer(image, &[self.coarse_logits, self.fine_logits, self.fused])?;
        let fused = out.pop().expect("three outputs");
        let fine = out.pop().expect("three outputs");
        let coarse = out.pop().expect("three outputs");
        Ok([coarse, fine, fused])
    }

    /// True when no layer in the graph is a transposed convolution. The layer
    /// vocabulary has none, so this is a structural scan for completeness.
    pub fn is_deconvolution_free(&self) -> bool {
        self.graph.layers().iter().all(|l| {
            matches!(
                l.kind,
                LayerKind::Input { .. }
                    | LayerKind::Conv { .. }
                    | LayerKind::BatchNorm { .. }
                    | LayerKind::PRelu { .. }
                    | LayerKind::AvgPool { .. }
                    | LayerKind::Upsample { .. }
                    | LayerKind::Add
                    | LayerKind::Concat
            )
        })
    }
}
