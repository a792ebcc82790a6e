//! Static parameter and FLOPs accounting.
//!
//! Two counting modes:
//!
//! * `all` charges every layer with the per-operation formulas below
//!   (convolution `2·HoWo·KhKw·CiCo/g`, batch norm `2·HWC`, PReLU, average
//!   pooling and elementwise add `HWC`, bilinear upsampling `3·HiWiCi`,
//!   concatenation free).
//! * `conv_bn` keeps only convolution and batch-norm layers, and counts a
//!   convolution as multiply-accumulates (`HoWo·KhKw·CiCo/g`, plus `HoWo·Co`
//!   for a bias), the convention common lightweight-network tables use.
//!
//! Everything is derived from [`Graph::infer_shapes`]; no data is touched.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, LayerKind};
use crate::kernels::Kernel;
use crate::tensor::Shape;

/// Convolution under the `all` convention.
pub fn conv_flops(kernel: &Kernel, output: Shape) -> u64 {
    2 * conv_macs(kernel, output)
}

/// Multiply-accumulates of a convolution, bias excluded.
pub fn conv_macs(kernel: &Kernel, output: Shape) -> u64 {
    let per_pixel = kernel.kh * kernel.kw * kernel.in_per_group() * kernel.out_channels;
    (output.n * output.plane() * per_pixel) as u64
}

/// Transposed convolution, charged by input size. The network never uses
/// one; the formula exists for comparison with decoder-style models.
pub fn deconv_flops(kernel: &Kernel, input: Shape) -> u64 {
    let per_pixel = kernel.kh * kernel.kw * kernel.in_per_group() * kernel.out_channels;
    2 * (input.n * input.plane() * per_pixel) as u64
}

pub fn batch_norm_flops(input: Shape) -> u64 {
    2 * input.numel() as u64
}

pub fn prelu_flops(input: Shape) -> u64 {
    input.numel() as u64
}

pub fn avg_pool_flops(input: Shape) -> u64 {
    input.numel() as u64
}

/// Charged by the input size, whatever the factor.
pub fn bilinear_flops(input: Shape) -> u64 {
    3 * input.numel() as u64
}

pub fn add_flops(input: Shape) -> u64 {
    input.numel() as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    All,
    ConvBn,
}

impl fmt::Display for CountMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CountMode::All => "all",
            CountMode::ConvBn => "conv_bn",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub op: String,
    pub output: [usize; 4],
    pub params: u64,
    pub flops_all: u64,
    pub flops_conv_bn: u64,
    pub counted_in_conv_bn: bool,
}

impl LayerCost {
    pub fn flops(&self, mode: CountMode) -> u64 {
        match mode {
            CountMode::All => self.flops_all,
            CountMode::ConvBn => self.flops_conv_bn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub input: [usize; 4],
    pub layers: Vec<LayerCost>,
    pub params: u64,
    pub flops_all: u64,
    pub flops_conv_bn: u64,
}

impl CostReport {
    pub fn flops(&self, mode: CountMode) -> u64 {
        match mode {
            CountMode::All => self.flops_all,
            CountMode::ConvBn => self.flops_conv_bn,
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Trainable values per layer, in graph order. Layers without parameters
/// are omitted.
pub fn count_parameters(graph: &Graph) -> (u64, Vec<(String, u64)>) {
    let rows: Vec<(String, u64)> = (0..graph.layers().len())
        .filter_map(|id| {
            let n: usize = graph.layer_params(id).iter().map(|&p| graph.param(p).len()).sum();
            (n > 0).then(|| (graph.layer(id).name.clone(), n as u64))
        })
        .collect();
    (rows.iter().map(|(_, n)| n).sum(), rows)
}

/// Per-layer costs for one static input shape.
pub fn count_flops(graph: &Graph, input: Shape) -> Result<CostReport> {
    let shapes = graph.infer_shapes(input)?;
    let mut layers = Vec::with_capacity(shapes.len());
    for (id, layer) in graph.layers().iter().enumerate() {
        let out = shapes[id];
        let inp = layer.inputs.first().map(|&i| shapes[i]);
        let params: usize = graph.layer_params(id).iter().map(|&p| graph.param(p).len()).sum();
        let (all, conv_bn, counted) = match &layer.kind {
            LayerKind::Input { .. } => continue,
            LayerKind::Conv { kernel, bias, .. } => {
                let bias_ops = if bias.is_some() { (out.n * out.plane() * kernel.out_channels) as u64 } else { 0 };
                (conv_flops(kernel, out), conv_macs(kernel, out) + bias_ops, true)
            }
            LayerKind::BatchNorm { .. } => {
                let f = batch_norm_flops(out);
                (f, f, true)
            }
            LayerKind::PRelu { .. } => (prelu_flops(out), 0, false),
            LayerKind::AvgPool { .. } => (avg_pool_flops(inp.unwrap_or(out)), 0, false),
            LayerKind::Upsample { .. } => (bilinear_flops(inp.unwrap_or(out)), 0, false),
            LayerKind::Add => (add_flops(out), 0, false),
            LayerKind::Concat => (0, 0, false),
        };
        layers.push(LayerCost {
            name: layer.name.clone(),
            op: layer.kind.op_name().to_string(),
            output: out.to_array(),
            params: params as u64,
            flops_all: all,
            flops_conv_bn: conv_bn,
            counted_in_conv_bn: counted,
        });
    }
    Ok(CostReport {
        input: input.to_array(),
        params: layers.iter().map(|l| l.params).sum(),
        flops_all: layers.iter().map(|l| l.flops_all).sum(),
        flops_conv_bn: layers.iter().map(|l| l.flops_conv_bn).sum(),
        layers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Text,
    Csv,
}

/// Optional reference totals printed next to the computed ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reference {
    pub params: f64,
    pub flops_all: f64,
    pub flops_conv_bn: f64,
}

/// Published figures for the network: 37.7K parameters, 0.286G / 0.128G FLOPs.
pub const PUBLISHED: Reference = Reference {
    params: 37.7e3,
    flops_all: 0.286e9,
    flops_conv_bn: 0.128e9,
};

const CSV_HEADER: &str = "layer,op,out_n,out_c,out_h,out_w,params,flops_all,flops_conv_bn";

/// Renders per-layer rows followed by totals. Column order is fixed.
pub fn report_table(report: &CostReport, format: TableFormat, reference: Option<&Reference>) -> String {
    let mut s = String::new();
    match format {
        TableFormat::Csv => {
            s.push_str(CSV_HEADER);
            s.push('\n');
            for l in &report.layers {
                let [n, c, h, w] = l.output;
                writeln!(
                    s,
                    "{},{},{n},{c},{h},{w},{},{},{}",
                    l.name, l.op, l.params, l.flops_all, l.flops_conv_bn
                )
                .unwrap();
            }
            writeln!(
                s,
                "total,,,,,,{},{},{}",
                report.params, report.flops_all, report.flops_conv_bn
            )
            .unwrap();
        }
        TableFormat::Text => {
            let width = report.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
            writeln!(
                s,
                "{:<width$}  {:<9}  {:>16}  {:>8}  {:>12}  {:>12}",
                "layer", "op", "output", "params", "flops_all", "flops_conv_bn"
            )
            .unwrap();
            for l in &report.layers {
                let [n, c, h, w] = l.output;
                writeln!(
                    s,
                    "{:<width$}  {:<9}  {:>16}  {:>8}  {:>12}  {:>12}",
                    l.name,
                    l.op,
                    format!("{n}x{c}x{h}x{w}"),
                    l.params,
                    l.flops_all,
                    l.flops_conv_bn
                )
                .unwrap();
            }
            let [n, c, h, w] = report.input;
            writeln!(s, "\ninput {n}x{c}x{h}x{w}").unwrap();
            let params_k = report.params as f64 / 1e3;
            let all_g = report.flops_all as f64 / 1e9;
            let cb_g = report.flops_conv_bn as f64 / 1e9;
            match reference {
                Some(r) => {
                    writeln!(s, "params        {:>10.1}K (reference {:.1}K)", params_k, r.params / 1e3).unwrap();
                    writeln!(s, "flops_all     {:>10.4}G (reference {:.3}G)", all_g, r.flops_all / 1e9).unwrap();
                    writeln!(s, "flops_conv_bn {:>10.4}G (reference {:.3}G)", cb_g, r.flops_conv_bn / 1e9).unwrap();
                }
                None => {
                    writeln!(s, "params        {:>10.1}K", params_k).unwrap();
                    writeln!(s, "flops_all     {:>10.4}G", all_g).unwrap();
                    writeln!(s, "flops_conv_bn {:>10.4}G", cb_g).unwrap();
                }
            }
            writeln!(s, "params (exact) {}", report.params).unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(c: usize, h: usize, w: usize) -> Shape {
        Shape::new(1, c, h, w).unwrap()
    }

    #[test]
    fn unit_formulas() {
        let stem = Kernel::square(3, 24, 3, 2);
        assert_eq!(conv_flops(&stem, shape(24, 112, 112)), 16_257_024);
        assert_eq!(batch_norm_flops(shape(24, 112, 112)), 602_112);
        assert_eq!(bilinear_flops(shape(2, 56, 56)), 18_816);
        assert_eq!(conv_macs(&Kernel::depthwise(56, 3, 3, 1), shape(56, 1, 1)), 504);
        // deconv 2x2 s2 on 4x4x8 -> 8x8x8, charged on the 4x4 input.
        let up = Kernel::square(8, 8, 2, 2);
        assert_eq!(deconv_flops(&up, shape(8, 4, 4)), 2 * 16 * 4 * 64);
    }
}
