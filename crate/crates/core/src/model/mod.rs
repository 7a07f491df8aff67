//! The RepLKNet family: architecture descriptor, layer graph, inference,
//! parameter/MAC accounting, whole-model re-parameterization and weight I/O.

mod deploy;
mod exec;
pub mod io;
mod weights;

use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::reparam::DEFAULT_BN_EPS;
use crate::tensor::Shape;

pub use deploy::reparam_model;
pub use exec::{forward, forward_trace, input_gradient};
pub use weights::{InitOptions, ModelWeights, WeightBlock};

fn default_small_kernel() -> Option<usize> {
    Some(5)
}
fn default_ffn_ratio() -> f64 {
    4.0
}
fn default_dw_expansion() -> f64 {
    1.0
}
fn default_in_channels() -> usize {
    3
}
fn default_num_classes() -> usize {
    1000
}
fn default_with_head() -> bool {
    true
}

/// Architecture descriptor: per-stage block counts `B`, widths `C` and
/// large-kernel sizes `K`, plus block options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    #[serde(rename = "B")]
    pub blocks: [usize; 4],
    #[serde(rename = "C")]
    pub channels: [usize; 4],
    #[serde(rename = "K")]
    pub kernels: [usize; 4],
    /// Size of the parallel re-param branch on every large DW conv.
    #[serde(default = "default_small_kernel")]
    pub small_kernel: Option<usize>,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: f64,
    /// Inverted-bottleneck ratio inside each RepLK Block.
    #[serde(default = "default_dw_expansion")]
    pub dw_expansion: f64,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_with_head")]
    pub with_head: bool,
}

impl ArchSpec {
    pub fn new(blocks: [usize; 4], channels: [usize; 4], kernels: [usize; 4]) -> Self {
        ArchSpec {
            blocks,
            channels,
            kernels,
            small_kernel: default_small_kernel(),
            ffn_ratio: default_ffn_ratio(),
            dw_expansion: default_dw_expansion(),
            in_channels: default_in_channels(),
            num_classes: default_num_classes(),
            with_head: default_with_head(),
        }
    }

    pub fn replknet_31b() -> Self {
        Self::new([2, 2, 18, 2], [128, 256, 512, 1024], [31, 29, 27, 13])
    }

    pub fn replknet_31l() -> Self {
        Self::new([2, 2, 18, 2], [192, 384, 768, 1536], [31, 29, 27, 13])
    }

    pub fn replknet_xl() -> Self {
        ArchSpec {
            dw_expansion: 1.5,
            ..Self::new([2, 2, 18, 2], [256, 512, 1024, 2048], [27, 27, 27, 13])
        }
    }

    /// The small-kernel baseline with the 31B widths: all 3x3, no re-param branch.
    pub fn replknet_3() -> Self {
        ArchSpec {
            small_kernel: None,
            ..Self::new([2, 2, 18, 2], [128, 256, 512, 1024], [3, 3, 3, 3])
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let arch: ArchSpec = serde_json::from_str(text)?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("arch spec serializes")
    }

    fn scaled(width: usize, ratio: f64, what: &str) -> Result<usize> {
        let v = width as f64 * ratio;
        if (v - v.round()).abs() > 1e-9 || v < 1.0 {
            return Err(Error::param(format!(
                "{what} ratio {ratio} x {width} channels is not a positive integer"
            )));
        }
        Ok(v.round() as usize)
    }

    pub fn dw_channels(&self, stage: usize) -> Result<usize> {
        Self::scaled(self.channels[stage], self.dw_expansion, "dw expansion")
    }

    pub fn ffn_channels(&self, stage: usize) -> Result<usize> {
        Self::scaled(self.channels[stage], self.ffn_ratio, "ffn")
    }

    /// `(params, MACs)` of the deploy form at `h x w` without materializing
    /// weights: every BN is folded away, every conv carries a bias and the
    /// small branches are merged into their large kernels.
    pub fn deploy_count(&self, h: usize, w: usize) -> Result<(u64, u64)> {
        let merged = ArchSpec {
            small_kernel: None,
            ..self.clone()
        };
        let graph = LayerGraph::build(&merged)?;
        let shapes = graph.shapes(Shape::new(1, self.in_channels, h, w)?)?;
        let mut params = 0u64;
        let mut macs = 0u64;
        for (n, s) in graph.nodes.iter().zip(&shapes) {
            match n.op {
                Op::Conv { spec, .. } => {
                    params += spec.params(true);
                    macs += spec.macs(s.h, s.w, 1);
                }
                Op::Linear {
                    in_features,
                    out_features,
                } => {
                    params += (in_features * out_features + out_features) as u64;
                    macs += (in_features * out_features) as u64;
                }
                _ => {}
            }
        }
        Ok((params, macs))
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.contains(&0) || self.channels.contains(&0) {
            return Err(Error::param("block counts and widths must be positive"));
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k == 0 || k % 2 == 0) {
            return Err(Error::param(format!("kernel sizes must be odd, got {k}")));
        }
        if let Some(small) = self.small_kernel {
            let min_k = *self.kernels.iter().min().unwrap();
            if small % 2 == 0 || small >= min_k {
                return Err(Error::param(format!(
                    "small kernel {small} must be odd and smaller than every large kernel (min {min_k})"
                )));
            }
        }
        if self.in_channels == 0 || (self.with_head && self.num_classes == 0) {
            return Err(Error::param("in_channels and num_classes must be positive"));
        }
        if !(self.ffn_ratio > 0.0 && self.dw_expansion > 0.0) {
            return Err(Error::param("ratios must be positive"));
        }
        for s in 0..4 {
            self.dw_channels(s)?;
            self.ffn_channels(s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Op {
    Input { channels: usize },
    Conv { spec: ConvSpec, bias: bool },
    BatchNorm { channels: usize, eps: f32 },
    Relu,
    Gelu,
    Add,
    GlobalAvgPool,
    Linear { in_features: usize, out_features: usize },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv { .. } => "conv",
            Op::BatchNorm { .. } => "bn",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Add => "add",
            Op::GlobalAvgPool => "pool",
            Op::Linear { .. } => "linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<usize>,
}

/// A topologically ordered DAG of layers. Node 0 is the input; `output`
/// names the node whose value [`forward`] returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub nodes: Vec<Node>,
    pub output: usize,
}

impl LayerGraph {
    /// Builds the training-form graph: stem, four stages of RepLK + ConvFFN
    /// blocks, transitions, and optionally the classifier head.
    pub fn build(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        let mut g = GraphBuilder::new(arch.in_channels);
        let c0 = arch.channels[0];

        let x = g.input();
        let x = g.conv_bn_relu("stem.0", x, ConvSpec::dense(arch.in_channels, c0, 3, 2, 1)?);
        let x = g.conv_bn_relu("stem.1", x, ConvSpec::depthwise(c0, 3, 1, 1)?);
        let x = g.conv_bn_relu("stem.2", x, ConvSpec::pointwise(c0, c0)?);
        let mut x = g.conv_bn_relu("stem.3", x, ConvSpec::depthwise(c0, 3, 2, 1)?);

        for s in 0..4 {
            let c = arch.channels[s];
            let dw = arch.dw_channels(s)?;
            let hidden = arch.ffn_channels(s)?;
            for b in 0..arch.blocks[s] {
                let p = format!("stages.{s}.blocks.{b}");

                // RepLK Block
                let pre = g.bn(&format!("{p}.replk.prebn"), x, c);
                let h = g.conv_bn_relu(&format!("{p}.replk.pw1"), pre, ConvSpec::pointwise(c, dw)?);
                let large = g.conv_bn(
                    &format!("{p}.replk.large"),
                    h,
                    ConvSpec::depthwise(dw, arch.kernels[s], 1, 1)?,
                );
                let lk = match arch.small_kernel {
                    Some(k) => {
                        let small = g.conv_bn(&format!("{p}.replk.small"), h, ConvSpec::depthwise(dw, k, 1, 1)?);
                        g.add(&format!("{p}.replk.merge"), large, small)
                    }
                    None => large,
                };
                let h = g.relu(&format!("{p}.replk.act"), lk);
                let h = g.conv_bn(&format!("{p}.replk.pw2"), h, ConvSpec::pointwise(dw, c)?);
                x = g.add(&format!("{p}.replk.shortcut"), x, h);

                // ConvFFN Block
                let pre = g.bn(&format!("{p}.ffn.prebn"), x, c);
                let h = g.conv_bn(&format!("{p}.ffn.pw1"), pre, ConvSpec::pointwise(c, hidden)?);
                let h = g.gelu(&format!("{p}.ffn.act"), h);
                let h = g.conv_bn(&format!("{p}.ffn.pw2"), h, ConvSpec::pointwise(hidden, c)?);
                x = g.add(&format!("{p}.ffn.shortcut"), x, h);
            }
            if s < 3 {
                let next = arch.channels[s + 1];
                let t = format!("transitions.{s}");
                x = g.conv_bn_relu(&format!("{t}.0"), x, ConvSpec::pointwise(c, next)?);
                x = g.conv_bn_relu(&format!("{t}.1"), x, ConvSpec::depthwise(next, 3, 2, 1)?);
            }
        }

        if arch.with_head {
            let c = arch.channels[3];
            let h = g.bn("head.bn", x, c);
            let h = g.pool("head.pool", h);
            g.linear("head.fc", h, c, arch.num_classes);
        }
        Ok(g.finish())
    }

    /// `layers` same-padding depth-wise convs over `channels` planes, each
    /// optionally followed by ReLU. No BN, no bias.
    pub fn depthwise_stack(channels: usize, kernel: usize, layers: usize, relu: bool) -> Result<Self> {
        if layers == 0 {
            return Err(Error::param("stack needs at least one layer"));
        }
        let mut g = GraphBuilder::new(channels);
        let mut x = g.input();
        let spec = ConvSpec::depthwise(channels, kernel, 1, 1)?;
        for l in 0..layers {
            x = g.conv(&format!("layers.{l}.conv"), x, spec);
            if relu {
                x = g.relu(&format!("layers.{l}.act"), x);
            }
        }
        Ok(g.finish())
    }

    pub fn input_channels(&self) -> usize {
        match self.nodes.first() {
            Some(Node {
                op: Op::Input { channels },
                ..
            }) => *channels,
            _ => 0,
        }
    }

    pub fn has_head(&self) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n.op, Op::GlobalAvgPool | Op::Linear { .. }))
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Number of consumers of each node.
    pub fn fan_out(&self) -> Vec<usize> {
        let mut uses = vec![0; self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                uses[i] += 1;
            }
        }
        uses
    }

    /// Structural checks: inputs precede their consumers, arities match, the
    /// output exists and a single input node comes first.
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.nodes.first().map(|n| n.op), Some(Op::Input { .. })) {
            return Err(Error::Graph("first node must be the input".into()));
        }
        if self.output >= self.nodes.len() {
            return Err(Error::Graph("output index out of range".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let arity = match n.op {
                Op::Input { .. } => 0,
                Op::Add => 2,
                _ => 1,
            };
            if n.inputs.len() != arity {
                return Err(Error::Graph(format!(
                    "node `{}` has {} inputs, expected {arity}",
                    n.name,
                    n.inputs.len()
                )));
            }
            if i > 0 && matches!(n.op, Op::Input { .. }) {
                return Err(Error::Graph("only node 0 may be an input".into()));
            }
            if n.inputs.iter().any(|&j| j >= i) {
                return Err(Error::Graph(format!("node `{}` reads a later node", n.name)));
            }
        }
        Ok(())
    }

    /// Output shape of every node for a given input shape.
    pub fn shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        self.validate()?;
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let inp = n.inputs.first().map(|&i| shapes[i]);
            let s = match (n.op, inp) {
                (Op::Input { channels }, _) => {
                    if input.c != channels {
                        return Err(Error::shape(format!(
                            "graph expects {channels} input channels, got {input}"
                        )));
                    }
                    input
                }
                (Op::Conv { spec, .. }, Some(x)) => spec.output_shape(x)?,
                (Op::BatchNorm { channels, .. }, Some(x)) => {
                    if x.c != channels {
                        return Err(Error::shape(format!(
                            "`{}`: BN over {channels} channels fed {x}",
                            n.name
                        )));
                    }
                    x
                }
                (Op::Relu | Op::Gelu, Some(x)) => x,
                (Op::Add, Some(x)) => {
                    let y = shapes[n.inputs[1]];
                    if x != y {
                        return Err(Error::shape(format!("`{}`: adding {x} and {y}", n.name)));
                    }
                    x
                }
                (Op::GlobalAvgPool, Some(x)) => Shape { h: 1, w: 1, ..x },
                (
                    Op::Linear {
                        in_features,
                        out_features,
                    },
                    Some(x),
                ) => {
                    if x.c * x.h * x.w != in_features {
                        return Err(Error::shape(format!("`{}`: linear over {in_features} fed {x}", n.name)));
                    }
                    Shape {
                        n: x.n,
                        c: out_features,
                        h: 1,
                        w: 1,
                    }
                }
                (_, None) => unreachable!("validated arity"),
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Total `(params, MACs)` at input resolution `h x w`, batch 1. BN
    /// contributes its two affine vectors; running statistics are buffers.
    pub fn count(&self, h: usize, w: usize) -> Result<(u64, u64)> {
        let shapes = self.shapes(Shape::new(1, self.input_channels(), h, w)?)?;
        let mut params = 0u64;
        let mut macs = 0u64;
        for (n, s) in self.nodes.iter().zip(&shapes) {
            match n.op {
                Op::Conv { spec, bias } => {
                    params += spec.params(bias);
                    macs += spec.macs(s.h, s.w, 1);
                }
                Op::BatchNorm { channels, .. } => params += 2 * channels as u64,
                Op::Linear {
                    in_features,
                    out_features,
                } => {
                    params += (in_features * out_features + out_features) as u64;
                    macs += (in_features * out_features) as u64;
                }
                _ => {}
            }
        }
        Ok((params, macs))
    }

    /// Every conv whose output has no bias is consumed by exactly one BN.
    pub fn every_conv_has_bn(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, n)| match n.op {
            Op::Conv { .. } => self
                .nodes
                .iter()
                .any(|m| matches!(m.op, Op::BatchNorm { .. }) && m.inputs == [i]),
            _ => true,
        })
    }
}

/// Incremental graph construction; every method returns the new node id.
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new(in_channels: usize) -> Self {
        GraphBuilder {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input { channels: in_channels },
                inputs: vec![],
            }],
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn push(&mut self, name: &str, op: Op, inputs: Vec<usize>) -> usize {
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs,
        });
        self.nodes.len() - 1
    }

    pub fn conv(&mut self, name: &str, x: usize, spec: ConvSpec) -> usize {
        self.push(name, Op::Conv { spec, bias: false }, vec![x])
    }

    pub fn bn(&mut self, name: &str, x: usize, channels: usize) -> usize {
        self.push(
            name,
            Op::BatchNorm {
                channels,
                eps: DEFAULT_BN_EPS,
            },
            vec![x],
        )
    }

    pub fn relu(&mut self, name: &str, x: usize) -> usize {
        self.push(name, Op::Relu, vec![x])
    }

    pub fn gelu(&mut self, name: &str, x: usize) -> usize {
        self.push(name, Op::Gelu, vec![x])
    }

    pub fn add(&mut self, name: &str, a: usize, b: usize) -> usize {
        self.push(name, Op::Add, vec![a, b])
    }

    pub fn pool(&mut self, name: &str, x: usize) -> usize {
        self.push(name, Op::GlobalAvgPool, vec![x])
    }

    pub fn linear(&mut self, name: &str, x: usize, in_features: usize, out_features: usize) -> usize {
        self.push(
            name,
            Op::Linear {
                in_features,
                out_features,
            },
            vec![x],
        )
    }

    /// `name.conv` followed by `name.bn`.
    pub fn conv_bn(&mut self, name: &str, x: usize, spec: ConvSpec) -> usize {
        let c = self.conv(&format!("{name}.conv"), x, spec);
        self.bn(&format!("{name}.bn"), c, spec.out_channels)
    }

    pub fn conv_bn_relu(&mut self, name: &str, x: usize, spec: ConvSpec) -> usize {
        let y = self.conv_bn(name, x, spec);
        self.relu(&format!("{name}.relu"), y)
    }

    pub fn finish(self) -> LayerGraph {
        let output = self.nodes.len() - 1;
        LayerGraph {
            nodes: self.nodes,
            output,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchSpec {
        ArchSpec {
            small_kernel: None,
            num_classes: 10,
            ..ArchSpec::new([1, 1, 1, 1], [8, 8, 8, 8], [3, 3, 3, 3])
        }
    }

    #[test]
    fn presets() {
        let b = ArchSpec::replknet_31b();
        assert_eq!(b.blocks, [2, 2, 18, 2]);
        assert_eq!(b.channels, [128, 256, 512, 1024]);
        assert_eq!(b.kernels, [31, 29, 27, 13]);
        let xl = ArchSpec::replknet_xl();
        assert_eq!(xl.kernels, [27, 27, 27, 13]);
        assert_eq!(xl.dw_channels(0).unwrap(), 384);
        for a in [b, xl, ArchSpec::replknet_31l(), ArchSpec::replknet_3(), tiny()] {
            a.validate().unwrap();
            LayerGraph::build(&a).unwrap();
        }
    }

    #[test]
    fn invalid_specs() {
        let mut a = tiny();
        a.kernels[2] = 4;
        assert!(a.validate().is_err());
        let a = ArchSpec {
            small_kernel: Some(5),
            ..tiny()
        };
        assert!(a.validate().is_err());
        let a = ArchSpec {
            dw_expansion: 1.3,
            ..tiny()
        };
        assert!(a.validate().is_err());
        let mut a = tiny();
        a.blocks[0] = 0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn json_keys() {
        let text = r#"{"B":[1,1,1,1],"C":[16,32,64,128],"K":[13,13,13,13],"small_kernel":5,
                       "ffn_ratio":4.0,"dw_expansion":1.0,"num_classes":10,"with_head":false}"#;
        let a = ArchSpec::from_json(text).unwrap();
        assert_eq!(a.channels, [16, 32, 64, 128]);
        assert_eq!(a.small_kernel, Some(5));
        assert!(!a.with_head);
        let a2 = ArchSpec::from_json(&a.to_json()).unwrap();
        assert_eq!(a, a2);
        let nulled = text.replace("\"small_kernel\":5", "\"small_kernel\":null");
        assert_eq!(ArchSpec::from_json(&nulled).unwrap().small_kernel, None);
        assert!(ArchSpec::from_json(r#"{"B":[1,1,1,1],"C":[8,8,8,8],"K":[3,3,3,3],"bogus":1}"#).is_err());
    }

    #[test]
    fn output_shape_law() {
        let mut arch = tiny();
        arch.with_head = false;
        let g = LayerGraph::build(&arch).unwrap();
        let shapes = g.shapes(Shape::new(1, 3, 64, 64).unwrap()).unwrap();
        // The last node of each stage is its final ffn shortcut.
        for s in 0..4 {
            let idx = g
                .nodes
                .iter()
                .position(|n| n.name == format!("stages.{s}.blocks.0.ffn.shortcut"))
                .unwrap();
            assert_eq!(shapes[idx].h, 64 / (4 << s));
        }
        assert_eq!(shapes[g.output].h, 2);
    }

    #[test]
    fn topology_rules() {
        let g = LayerGraph::build(&ArchSpec {
            small_kernel: Some(3),
            kernels: [7, 7, 7, 7],
            ..tiny()
        })
        .unwrap();
        assert!(g.every_conv_has_bn());
        // stem 4 + per stage (replk 4 convs, ffn 2) + transitions 2*3
        assert_eq!(g.count_kind("conv"), 4 + 4 * 6 + 6);
        // The residual branch reaches its shortcut add through a BN, not a ReLU.
        let fan = g.fan_out();
        for n in g.nodes.iter().filter(|n| n.name.ends_with("shortcut")) {
            assert!(matches!(g.nodes[n.inputs[1]].op, Op::BatchNorm { .. }));
        }
        // Every GELU reads a BN, not a ReLU.
        for n in g.nodes.iter().filter(|n| n.op == Op::Gelu) {
            assert!(matches!(g.nodes[n.inputs[0]].op, Op::BatchNorm { .. }));
        }
        assert_eq!(fan[g.output], 0);
    }

    #[test]
    fn single_pointwise_counts() {
        let mut g = GraphBuilder::new(8);
        let x = g.input();
        g.conv("pw", x, ConvSpec::pointwise(8, 8).unwrap());
        let mut graph = g.finish();
        assert_eq!(graph.count(4, 4).unwrap().0, 64);
        if let Op::Conv { bias, .. } = &mut graph.nodes[1].op {
            *bias = true;
        }
        assert_eq!(graph.count(4, 4).unwrap(), (72, 64 * 16));
    }

    #[test]
    fn malformed_graph_rejected() {
        let mut g = LayerGraph::depthwise_stack(2, 3, 2, false).unwrap();
        g.nodes[1].inputs = vec![2];
        assert!(g.validate().is_err());
        let mut g = LayerGraph::depthwise_stack(2, 3, 2, false).unwrap();
        g.output = 10;
        assert!(g.validate().is_err());
    }
}
