use super::{LayerGraph, ModelWeights, Op};
use crate::conv::{conv2d_vjp_input, Backend, ConvSpec, ConvWeights};
use crate::error::{Error, Result};
use crate::reparam::BnParams;
use crate::tensor::{gelu_grad, Shape, Tensor};

enum Layer {
    Plain,
    Conv(ConvSpec, ConvWeights),
    Bn(BnParams),
    Linear {
        weight: Vec<f32>,
        bias: Vec<f32>,
        in_features: usize,
        out_features: usize,
    },
}

fn resolve(graph: &LayerGraph, weights: &ModelWeights) -> Result<Vec<Layer>> {
    graph
        .nodes
        .iter()
        .map(|n| {
            Ok(match n.op {
                Op::Conv { spec, bias } => Layer::Conv(spec, weights.conv(&n.name, &spec, bias)?),
                Op::BatchNorm { channels, eps } => Layer::Bn(weights.bn(&n.name, channels, eps)?),
                Op::Linear {
                    in_features,
                    out_features,
                } => {
                    let (weight, bias) = weights.linear(&n.name, in_features, out_features)?;
                    Layer::Linear {
                        weight,
                        bias,
                        in_features,
                        out_features,
                    }
                }
                _ => Layer::Plain,
            })
        })
        .collect()
}

fn check_input(graph: &LayerGraph, x: &Tensor) -> Result<()> {
    let s = x.shape();
    if graph.has_head() && (!s.h.is_multiple_of(32) || !s.w.is_multiple_of(32)) {
        return Err(Error::shape(format!(
            "classifier input must have spatial size divisible by 32, got {}x{}",
            s.h, s.w
        )));
    }
    graph.shapes(s)?;
    Ok(())
}

fn eval(op: &Op, layer: &Layer, args: &[&Tensor], backend: Backend) -> Result<Tensor> {
    let x = args.first().copied();
    let out = match (op, layer, x) {
        (Op::Conv { .. }, Layer::Conv(spec, w), Some(x)) => backend.conv2d(x, w, spec)?,
        (Op::BatchNorm { .. }, Layer::Bn(bn), Some(x)) => bn.apply(x)?,
        (Op::Relu, _, Some(x)) => x.relu(),
        (Op::Gelu, _, Some(x)) => x.gelu(),
        (Op::Add, _, Some(x)) => x.add(args[1])?,
        (Op::GlobalAvgPool, _, Some(x)) => x.global_avg_pool(),
        (
            Op::Linear { .. },
            Layer::Linear {
                weight,
                bias,
                in_features,
                out_features,
            },
            Some(x),
        ) => {
            let n = x.shape().n;
            let mut data = Vec::with_capacity(n * out_features);
            for row in x.data().chunks(*in_features) {
                for o in 0..*out_features {
                    let wrow = &weight[o * in_features..(o + 1) * in_features];
                    let dot: f32 = wrow.iter().zip(row).map(|(a, b)| a * b).sum();
                    data.push(dot + bias[o]);
                }
            }
            Tensor::from_vec(Shape::new(n, *out_features, 1, 1)?, data)?
        }
        _ => return Err(Error::Graph(format!("cannot evaluate {} here", op.kind()))),
    };
    Ok(out)
}

/// Every node's value for input `x`; index `i` holds node `i`'s output.
pub fn forward_trace(graph: &LayerGraph, weights: &ModelWeights, x: &Tensor, backend: Backend) -> Result<Vec<Tensor>> {
    check_input(graph, x)?;
    let layers = resolve(graph, weights)?;
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for (n, layer) in graph.nodes.iter().zip(&layers) {
        let v = match n.op {
            Op::Input { .. } => x.clone(),
            _ => {
                let args: Vec<&Tensor> = n.inputs.iter().map(|&i| &values[i]).collect();
                eval(&n.op, layer, &args, backend)?
            }
        };
        values.push(v);
    }
    Ok(values)
}

/// Runs the graph and returns the output node's value. Intermediate values
/// are released after their last consumer.
pub fn forward(graph: &LayerGraph, weights: &ModelWeights, x: &Tensor, backend: Backend) -> Result<Tensor> {
    check_input(graph, x)?;
    let layers = resolve(graph, weights)?;
    let mut last_use = vec![0usize; graph.nodes.len()];
    for (i, n) in graph.nodes.iter().enumerate() {
        for &j in &n.inputs {
            last_use[j] = i;
        }
    }
    last_use[graph.output] = usize::MAX;

    let mut values: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    for (i, (n, layer)) in graph.nodes.iter().zip(&layers).enumerate() {
        let v = match n.op {
            Op::Input { .. } => x.clone(),
            _ => {
                let args = n
                    .inputs
                    .iter()
                    .map(|&j| {
                        values[j]
                            .as_ref()
                            .ok_or_else(|| Error::Graph("value released early".into()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                eval(&n.op, layer, &args, backend)?
            }
        };
        values[i] = Some(v);
        for &j in &n.inputs {
            if last_use[j] == i {
                values[j] = None;
            }
        }
        if i == graph.output {
            break;
        }
    }
    values[graph.output]
        .take()
        .ok_or_else(|| Error::Graph("output was not computed".into()))
}

/// Vector-Jacobian product of the whole graph: the gradient of
/// `<grad_out, f(x)>` with respect to the input `x`.
pub fn input_gradient(
    graph: &LayerGraph,
    weights: &ModelWeights,
    x: &Tensor,
    grad_out: &Tensor,
    backend: Backend,
) -> Result<Tensor> {
    let values = forward_trace(graph, weights, x, backend)?;
    if grad_out.shape() != values[graph.output].shape() {
        return Err(Error::shape(format!(
            "seed gradient {} does not match output {}",
            grad_out.shape(),
            values[graph.output].shape()
        )));
    }
    let layers = resolve(graph, weights)?;
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    grads[graph.output] = Some(grad_out.clone());

    for i in (1..=graph.output).rev() {
        let Some(g) = grads[i].take() else {
            continue;
        };
        let node = &graph.nodes[i];
        let input_val = &values[node.inputs[0]];
        let contributions: Vec<(usize, Tensor)> = match (&node.op, &layers[i]) {
            (Op::Conv { .. }, Layer::Conv(spec, w)) => {
                vec![(node.inputs[0], conv2d_vjp_input(&g, w, spec, input_val.shape())?)]
            }
            (Op::BatchNorm { .. }, Layer::Bn(bn)) => {
                let scale = bn.scale();
                let s = g.shape();
                let mut out = g;
                for (p, plane) in out.data_mut().chunks_mut(s.plane()).enumerate() {
                    let k = scale[p % s.c];
                    plane.iter_mut().for_each(|v| *v *= k);
                }
                vec![(node.inputs[0], out)]
            }
            (Op::Relu, _) => vec![(
                node.inputs[0],
                g.zip_with(input_val, |gv, xv| if xv > 0.0 { gv } else { 0.0 })?,
            )],
            (Op::Gelu, _) => vec![(node.inputs[0], g.zip_with(input_val, |gv, xv| gv * gelu_grad(xv))?)],
            (Op::Add, _) => vec![(node.inputs[0], g.clone()), (node.inputs[1], g)],
            (Op::GlobalAvgPool, _) => {
                let s = input_val.shape();
                let inv = 1.0 / s.plane() as f32;
                let mut out = Tensor::zeros(s);
                for (p, plane) in out.data_mut().chunks_mut(s.plane()).enumerate() {
                    plane.fill(g.data()[p] * inv);
                }
                vec![(node.inputs[0], out)]
            }
            (
                Op::Linear { .. },
                Layer::Linear {
                    weight,
                    in_features,
                    out_features,
                    ..
                },
            ) => {
                let s = input_val.shape();
                let mut out = vec![0.0f32; s.numel()];
                for n in 0..s.n {
                    for o in 0..*out_features {
                        let go = g.data()[n * out_features + o];
                        let dst = &mut out[n * in_features..(n + 1) * in_features];
                        for (d, &wv) in dst.iter_mut().zip(&weight[o * in_features..(o + 1) * in_features]) {
                            *d += go * wv;
                        }
                    }
                }
                vec![(node.inputs[0], Tensor::from_vec(s, out)?)]
            }
            _ => return Err(Error::Graph(format!("no VJP for node `{}`", node.name))),
        };
        for (j, c) in contributions {
            grads[j] = Some(match grads[j].take() {
                Some(prev) => prev.add(&c)?,
                None => c,
            });
        }
    }
    Ok(grads[0].take().unwrap_or_else(|| Tensor::zeros(x.shape())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchSpec, GraphBuilder, InitOptions};
    use crate::tensor::{Dist, Rng};

    fn small_arch() -> ArchSpec {
        ArchSpec {
            small_kernel: Some(3),
            num_classes: 7,
            ..ArchSpec::new([1, 1, 1, 1], [8, 8, 8, 8], [5, 5, 5, 5])
        }
    }

    #[test]
    fn smallest_instance_produces_logits() {
        let arch = ArchSpec {
            small_kernel: None,
            num_classes: 10,
            ..ArchSpec::new([1, 1, 1, 1], [8, 8, 8, 8], [3, 3, 3, 3])
        };
        let g = LayerGraph::build(&arch).unwrap();
        let w = ModelWeights::random(&g, &mut Rng::new(0), InitOptions::default()).unwrap();
        let x = Tensor::new_random(
            Shape::new(1, 3, 32, 32).unwrap(),
            &mut Rng::new(1),
            Dist::Uniform { lo: 0.0, hi: 1.0 },
        )
        .unwrap();
        let y = forward(&g, &w, &x, Backend::Blocked).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 10, 1, 1).unwrap());
        assert!(y.all_finite());
        let bad = Tensor::zeros(Shape::new(1, 3, 40, 40).unwrap());
        assert!(forward(&g, &w, &bad, Backend::Blocked).is_err());
    }

    #[test]
    fn forward_matches_trace_and_is_deterministic() {
        let g = LayerGraph::build(&small_arch()).unwrap();
        let w = ModelWeights::random(
            &g,
            &mut Rng::new(3),
            InitOptions {
                random_bn: true,
                ..Default::default()
            },
        )
        .unwrap();
        let x = Tensor::new_random(
            Shape::new(2, 3, 32, 32).unwrap(),
            &mut Rng::new(4),
            Dist::Uniform { lo: 0.0, hi: 1.0 },
        )
        .unwrap();
        let a = forward(&g, &w, &x, Backend::Direct).unwrap();
        let b = forward(&g, &w, &x, Backend::Direct).unwrap();
        let t = forward_trace(&g, &w, &x, Backend::Direct).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a, &t[g.output]);
    }

    #[test]
    fn missing_weights_reported() {
        let g = LayerGraph::build(&small_arch()).unwrap();
        let mut w = ModelWeights::random(&g, &mut Rng::new(3), InitOptions::default()).unwrap();
        w.blocks.remove("stem.2.conv.weight");
        let x = Tensor::zeros(Shape::new(1, 3, 32, 32).unwrap());
        assert!(matches!(
            forward(&g, &w, &x, Backend::Direct),
            Err(Error::MissingWeight(_))
        ));
    }

    #[test]
    fn head_gradient_matches_finite_difference() {
        let mut b = GraphBuilder::new(2);
        let x0 = b.input();
        let h = b.conv("c", x0, ConvSpec::dense(2, 3, 3, 1, 1).unwrap());
        let h = b.bn("bn", h, 3);
        let h = b.gelu("act", h);
        let h = b.pool("pool", h);
        b.linear("fc", h, 3, 4);
        let g = b.finish();
        let w = ModelWeights::random(
            &g,
            &mut Rng::new(5),
            InitOptions {
                conv: Dist::Normal { mean: 0.0, std: 0.5 },
                random_bn: true,
            },
        )
        .unwrap();
        let x = Tensor::new_random(
            Shape::new(1, 2, 32, 32).unwrap(),
            &mut Rng::new(6),
            Dist::Uniform { lo: -1.0, hi: 1.0 },
        )
        .unwrap();
        let seed = Tensor::from_vec(Shape::new(1, 4, 1, 1).unwrap(), vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        let grad = input_gradient(&g, &w, &x, &seed, Backend::Direct).unwrap();
        let objective = |t: &Tensor| -> f64 {
            let y = forward(&g, &w, t, Backend::Direct).unwrap();
            y.data()
                .iter()
                .zip(seed.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        let scale = grad.max_abs() as f64;
        for i in (0..x.len()).step_by(37) {
            let step = 1e-2;
            let mut p = x.clone();
            p.data_mut()[i] += step;
            let mut m = x.clone();
            m.data_mut()[i] -= step;
            let fd = (objective(&p) - objective(&m)) / (2.0 * step as f64);
            assert!(
                (grad.data()[i] as f64 - fd).abs() <= 2e-3 * scale,
                "{i}: {} vs {fd}",
                grad.data()[i]
            );
        }
    }
}
