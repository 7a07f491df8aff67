//! Training-form to deploy-form conversion of a whole graph.

use super::{LayerGraph, ModelWeights, Node, Op, WeightBlock};
use crate::conv::ConvWeights;
use crate::error::{Error, Result};
use crate::reparam::{fuse_bn, merge_branches, BranchedConv};

struct Rewriter {
    nodes: Vec<Node>,
    dead: Vec<bool>,
    output: usize,
    weights: ModelWeights,
}

impl Rewriter {
    fn fan_out(&self) -> Vec<usize> {
        let mut uses = vec![0; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if !self.dead[i] {
                for &j in &n.inputs {
                    uses[j] += 1;
                }
            }
        }
        uses[self.output] += 1;
        uses
    }

    /// Routes every reader of `from` to `to` and kills `from`.
    fn alias(&mut self, from: usize, to: usize) {
        for n in self.nodes.iter_mut() {
            for i in n.inputs.iter_mut() {
                if *i == from {
                    *i = to;
                }
            }
        }
        if self.output == from {
            self.output = to;
        }
        self.dead[from] = true;
    }

    fn conv_at(&self, i: usize) -> Option<(crate::conv::ConvSpec, bool)> {
        match self.nodes[i].op {
            Op::Conv { spec, bias } if !self.dead[i] => Some((spec, bias)),
            _ => None,
        }
    }

    fn bn_over_conv(&self, i: usize, fan: &[usize]) -> Option<usize> {
        match self.nodes[i].op {
            Op::BatchNorm { .. } if !self.dead[i] && fan[i] == 1 => {
                let c = self.nodes[i].inputs[0];
                (self.conv_at(c).is_some() && fan[c] == 1).then_some(c)
            }
            _ => None,
        }
    }

    fn load_bn(&self, i: usize) -> Result<crate::reparam::BnParams> {
        match self.nodes[i].op {
            Op::BatchNorm { channels, eps } => self.weights.bn(&self.nodes[i].name, channels, eps),
            _ => Err(Error::Graph(format!("`{}` is not a BN", self.nodes[i].name))),
        }
    }

    fn load_conv(&self, i: usize) -> Result<ConvWeights> {
        let (spec, bias) = self
            .conv_at(i)
            .ok_or_else(|| Error::Graph(format!("`{}` is not a conv", self.nodes[i].name)))?;
        self.weights.conv(&self.nodes[i].name, &spec, bias)
    }

    fn store_conv(&mut self, i: usize, w: &ConvWeights) {
        if let Op::Conv { bias, .. } = &mut self.nodes[i].op {
            *bias = w.bias.is_some();
        }
        let name = self.nodes[i].name.clone();
        self.weights.set_conv(&name, w);
    }

    /// `add(bn(conv_large(x)), bn(conv_small(x)))` becomes one conv.
    fn merge_parallel_branches(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if self.dead[i] || self.nodes[i].op != Op::Add {
                continue;
            }
            let fan = self.fan_out();
            let (p, q) = (self.nodes[i].inputs[0], self.nodes[i].inputs[1]);
            let (Some(cp), Some(cq)) = (self.bn_over_conv(p, &fan), self.bn_over_conv(q, &fan)) else {
                continue;
            };
            let (sp, _) = self.conv_at(cp).unwrap();
            let (sq, _) = self.conv_at(cq).unwrap();
            let same_input = self.nodes[cp].inputs == self.nodes[cq].inputs;
            let compatible = sp.in_channels == sq.in_channels
                && sp.out_channels == sq.out_channels
                && sp.groups == sq.groups
                && sp.stride == sq.stride
                && sp.dilation == 1
                && sq.dilation == 1
                && sp.padding == sp.kernel / 2
                && sq.padding == sq.kernel / 2;
            if !same_input || !compatible || sp.kernel == sq.kernel {
                continue;
            }
            let ((large_c, large_bn), (small_c, small_bn)) = if sp.kernel > sq.kernel {
                ((cp, p), (cq, q))
            } else {
                ((cq, q), (cp, p))
            };
            let merged = merge_branches(&BranchedConv {
                large: (self.load_conv(large_c)?, self.load_bn(large_bn)?),
                small: Some((self.load_conv(small_c)?, self.load_bn(small_bn)?)),
            })?;
            self.store_conv(large_c, &merged.into_conv_weights());
            self.dead[small_c] = true;
            self.dead[small_bn] = true;
            self.dead[large_bn] = true;
            self.alias(i, large_c);
        }
        Ok(())
    }

    /// `bn(conv(x))` becomes a biased conv.
    fn fold_bn_into_producers(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if self.dead[i] || !matches!(self.nodes[i].op, Op::BatchNorm { .. }) {
                continue;
            }
            let fan = self.fan_out();
            let c = self.nodes[i].inputs[0];
            if self.conv_at(c).is_none() || fan[c] != 1 {
                continue;
            }
            let fused = fuse_bn(&self.load_conv(c)?, &self.load_bn(i)?)?;
            self.store_conv(c, &fused.into_conv_weights());
            self.alias(i, c);
        }
        Ok(())
    }

    /// A BN read only by a 1x1 conv (or by pool -> linear) is pushed into
    /// that consumer's weights; this is exact because no padding is involved.
    fn fold_bn_into_consumers(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if self.dead[i] || !matches!(self.nodes[i].op, Op::BatchNorm { .. }) {
                continue;
            }
            let fan = self.fan_out();
            if fan[i] != 1 || self.output == i {
                continue;
            }
            let consumer = (i + 1..self.nodes.len())
                .find(|&k| !self.dead[k] && self.nodes[k].inputs.contains(&i))
                .expect("fan-out 1 implies a consumer");
            let bn = self.load_bn(i)?;
            let (scale, shift) = (bn.scale(), bn.shift());
            let source = self.nodes[i].inputs[0];

            match self.nodes[consumer].op {
                Op::Conv { spec, .. } if spec.kernel == 1 && spec.padding == 0 && spec.groups == 1 => {
                    let w = self.load_conv(consumer)?;
                    let (cout, cin) = (spec.out_channels, spec.in_channels);
                    let mut weight = w.weight.clone();
                    let mut bias = Vec::with_capacity(cout);
                    for o in 0..cout {
                        let row = &mut weight.data_mut()[o * cin..(o + 1) * cin];
                        let mut b = w.bias_or_zero(o) as f64;
                        for (c, v) in row.iter_mut().enumerate() {
                            b += *v as f64 * shift[c] as f64;
                            *v *= scale[c];
                        }
                        bias.push(b as f32);
                    }
                    self.store_conv(
                        consumer,
                        &ConvWeights {
                            weight,
                            bias: Some(bias),
                        },
                    );
                    self.alias(i, source);
                }
                Op::GlobalAvgPool if fan[consumer] == 1 => {
                    let Some(lin) = (consumer + 1..self.nodes.len())
                        .find(|&k| !self.dead[k] && self.nodes[k].inputs.contains(&consumer))
                    else {
                        continue;
                    };
                    let Op::Linear {
                        in_features,
                        out_features,
                    } = self.nodes[lin].op
                    else {
                        continue;
                    };
                    if in_features != scale.len() {
                        continue;
                    }
                    let name = self.nodes[lin].name.clone();
                    let (mut weight, mut bias) = self.weights.linear(&name, in_features, out_features)?;
                    for o in 0..out_features {
                        let row = &mut weight[o * in_features..(o + 1) * in_features];
                        let mut b = bias[o] as f64;
                        for (c, v) in row.iter_mut().enumerate() {
                            b += *v as f64 * shift[c] as f64;
                            *v *= scale[c];
                        }
                        bias[o] = b as f32;
                    }
                    self.weights.insert(
                        format!("{name}.weight"),
                        WeightBlock::new(vec![out_features, in_features], weight)?,
                    );
                    self.weights.insert(format!("{name}.bias"), WeightBlock::vector(bias));
                    self.alias(i, source);
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Drops unreachable nodes and renumbers.
    fn finish(self) -> Result<(LayerGraph, ModelWeights)> {
        let mut live = vec![false; self.nodes.len()];
        let mut stack = vec![self.output];
        while let Some(i) = stack.pop() {
            if !live[i] {
                live[i] = true;
                stack.extend(self.nodes[i].inputs.iter().copied());
            }
        }
        live[0] = true;
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::new();
        for (i, n) in self.nodes.into_iter().enumerate() {
            if live[i] {
                remap[i] = nodes.len();
                let inputs = n.inputs.iter().map(|&j| remap[j]).collect();
                nodes.push(Node { inputs, ..n });
            }
        }
        let graph = LayerGraph {
            nodes,
            output: remap[self.output],
        };
        graph.validate()?;
        let mut weights = ModelWeights::default();
        for name in ModelWeights::required_names(&graph) {
            weights.insert(name.clone(), self.weights.get(&name)?.clone());
        }
        Ok((graph, weights))
    }
}

/// Converts a training-form graph into its deploy form: every parallel
/// small-kernel branch is merged into its large kernel and every BN is folded
/// into an adjacent conv or linear layer. The result computes the same
/// function up to floating-point rounding.
pub fn reparam_model(graph: &LayerGraph, weights: &ModelWeights) -> Result<(LayerGraph, ModelWeights)> {
    graph.validate()?;
    weights.check_coverage(graph)?;
    let mut rw = Rewriter {
        nodes: graph.nodes.clone(),
        dead: vec![false; graph.nodes.len()],
        output: graph.output,
        weights: weights.clone(),
    };
    rw.merge_parallel_branches()?;
    rw.fold_bn_into_producers()?;
    rw.fold_bn_into_consumers()?;
    rw.finish()
}
