use std::collections::BTreeMap;

use super::{LayerGraph, Op};
use crate::conv::{ConvSpec, ConvWeights};
use crate::error::{Error, Result};
use crate::reparam::BnParams;
use crate::tensor::{Dist, Rng, Shape, Tensor};

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlock {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightBlock {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() || shape.is_empty() {
            return Err(Error::shape(format!(
                "block shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(WeightBlock { shape, data })
    }

    pub fn vector(data: Vec<f32>) -> Self {
        WeightBlock {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        WeightBlock {
            shape: t.shape().dims().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        match self.shape[..] {
            [n, c, h, w] => Tensor::from_vec(Shape::new(n, c, h, w)?, self.data.clone()),
            _ => Err(Error::shape(format!("expected a rank-4 block, got {:?}", self.shape))),
        }
    }
}

/// Parameters keyed by `"<node name>.<field>"`, e.g. `stem.0.conv.weight`
/// or `head.bn.var`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelWeights {
    pub blocks: BTreeMap<String, WeightBlock>,
}

#[derive(Debug, Clone, Copy)]
pub struct InitOptions {
    pub conv: Dist,
    /// Draw BN statistics at random instead of the identity transform.
    pub random_bn: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            conv: Dist::DEFAULT_INIT,
            random_bn: false,
        }
    }
}

impl ModelWeights {
    pub fn get(&self, name: &str) -> Result<&WeightBlock> {
        self.blocks
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, block: WeightBlock) {
        self.blocks.insert(name.into(), block);
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn conv(&self, node: &str, spec: &ConvSpec, bias: bool) -> Result<ConvWeights> {
        let weight = self.get(&format!("{node}.weight"))?.to_tensor()?;
        let bias = if bias {
            let b = self.get(&format!("{node}.bias"))?;
            Some(b.data.clone())
        } else {
            None
        };
        let w = ConvWeights::new(weight, bias)?;
        w.check(spec)?;
        Ok(w)
    }

    pub fn set_conv(&mut self, node: &str, w: &ConvWeights) {
        self.insert(format!("{node}.weight"), WeightBlock::from_tensor(&w.weight));
        match &w.bias {
            Some(b) => self.insert(format!("{node}.bias"), WeightBlock::vector(b.clone())),
            None => {
                self.blocks.remove(&format!("{node}.bias"));
            }
        }
    }

    pub fn bn(&self, node: &str, channels: usize, eps: f32) -> Result<BnParams> {
        let field = |f: &str| -> Result<Vec<f32>> {
            let b = self.get(&format!("{node}.{f}"))?;
            if b.data.len() != channels {
                return Err(Error::shape(format!(
                    "`{node}.{f}` has {} entries, expected {channels}",
                    b.data.len()
                )));
            }
            Ok(b.data.clone())
        };
        BnParams::new(field("gamma")?, field("beta")?, field("mean")?, field("var")?, eps)
    }

    pub fn set_bn(&mut self, node: &str, bn: &BnParams) {
        self.insert(format!("{node}.gamma"), WeightBlock::vector(bn.gamma.clone()));
        self.insert(format!("{node}.beta"), WeightBlock::vector(bn.beta.clone()));
        self.insert(format!("{node}.mean"), WeightBlock::vector(bn.mean.clone()));
        self.insert(format!("{node}.var"), WeightBlock::vector(bn.var.clone()));
    }

    /// Row-major `(out, in)` matrix and bias of a linear layer.
    pub fn linear(&self, node: &str, in_features: usize, out_features: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let w = self.get(&format!("{node}.weight"))?;
        let b = self.get(&format!("{node}.bias"))?;
        if w.shape != [out_features, in_features] || b.data.len() != out_features {
            return Err(Error::shape(format!(
                "`{node}` linear weights have shape {:?}",
                w.shape
            )));
        }
        Ok((w.data.clone(), b.data.clone()))
    }

    /// Names of every block the graph needs.
    pub fn required_names(graph: &LayerGraph) -> Vec<String> {
        let mut names = Vec::new();
        for n in &graph.nodes {
            match n.op {
                Op::Conv { bias, .. } => {
                    names.push(format!("{}.weight", n.name));
                    if bias {
                        names.push(format!("{}.bias", n.name));
                    }
                }
                Op::BatchNorm { .. } => {
                    for f in ["gamma", "beta", "mean", "var"] {
                        names.push(format!("{}.{f}", n.name));
                    }
                }
                Op::Linear { .. } => {
                    names.push(format!("{}.weight", n.name));
                    names.push(format!("{}.bias", n.name));
                }
                _ => {}
            }
        }
        names
    }

    /// Checks that every parameterized node has correctly shaped weights.
    pub fn check_coverage(&self, graph: &LayerGraph) -> Result<()> {
        for n in &graph.nodes {
            match n.op {
                Op::Conv { spec, bias } => {
                    self.conv(&n.name, &spec, bias)?;
                }
                Op::BatchNorm { channels, eps } => {
                    self.bn(&n.name, channels, eps)?;
                }
                Op::Linear {
                    in_features,
                    out_features,
                } => {
                    self.linear(&n.name, in_features, out_features)?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Seeded initialization of every parameter in `graph`.
    pub fn random(graph: &LayerGraph, rng: &mut Rng, opts: InitOptions) -> Result<Self> {
        let mut w = ModelWeights::default();
        for n in &graph.nodes {
            match n.op {
                Op::Conv { spec, bias } => {
                    let mut cw = ConvWeights::random(&spec, rng, opts.conv)?;
                    if bias {
                        cw.bias = Some(Dist::Uniform { lo: -0.1, hi: 0.1 }.sample_vec(rng, spec.out_channels)?);
                    }
                    w.set_conv(&n.name, &cw);
                }
                Op::BatchNorm { channels, eps } => {
                    let bn = if opts.random_bn {
                        let mut u = |lo: f32, hi: f32| Dist::Uniform { lo, hi }.sample_vec(rng, channels);
                        BnParams::new(u(0.5, 1.5)?, u(-0.2, 0.2)?, u(-0.2, 0.2)?, u(0.5, 1.5)?, eps)?
                    } else {
                        BnParams {
                            eps,
                            var: vec![1.0 - eps; channels],
                            ..BnParams::identity(channels)
                        }
                    };
                    w.set_bn(&n.name, &bn);
                }
                Op::Linear {
                    in_features,
                    out_features,
                } => {
                    let weight = opts.conv.sample_vec(rng, in_features * out_features)?;
                    w.insert(
                        format!("{}.weight", n.name),
                        WeightBlock::new(vec![out_features, in_features], weight)?,
                    );
                    w.insert(format!("{}.bias", n.name), WeightBlock::vector(vec![0.0; out_features]));
                }
                _ => {}
            }
        }
        Ok(w)
    }
}
