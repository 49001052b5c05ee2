//! Layer specifications and the parameter container built from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{NnError, Result};
use crate::exec::Execution;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Upsample {
        dim: usize,
        factor: usize,
    },
    Activation {
        activation: Activation,
    },
    /// Per-sample reshape (the batch axis is kept).
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn act(activation: Activation) -> Self {
        LayerSpec::Activation { activation }
    }

    fn conv_params(&self) -> Option<(usize, usize, usize, usize, usize, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Some((2, in_channels, out_channels, kernel, stride, padding)),
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Some((3, in_channels, out_channels, kernel, stride, padding)),
            _ => None,
        }
    }

    /// Weight and bias shapes, for layers that own parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        if let LayerSpec::Dense { inputs, outputs } = *self {
            return Some((vec![outputs, inputs], vec![outputs]));
        }
        self.conv_params().map(|(dim, cin, cout, k, _, _)| {
            let mut w = vec![cout, cin];
            w.extend(std::iter::repeat(k).take(dim));
            (w, vec![cout])
        })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(NnError::Shape(msg));
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                if *inputs == 0 || *outputs == 0 {
                    return bad("dense widths must be positive".into());
                }
                if input != [*inputs] {
                    return bad(format!("dense expects [{inputs}], got {input:?}"));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Upsample { dim, factor } => {
                if !(*dim == 2 || *dim == 3) || *factor == 0 || input.len() != dim + 1 {
                    return bad(format!("upsample{dim}d x{factor} on {input:?}"));
                }
                let mut out = input.to_vec();
                out[1..].iter_mut().for_each(|s| *s *= factor);
                Ok(out)
            }
            LayerSpec::Activation { .. } => Ok(input.to_vec()),
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return bad(format!("reshape {input:?} into {shape:?}"));
                }
                Ok(shape.clone())
            }
            _ => {
                let (dim, cin, cout, k, stride, pad) = self.conv_params().expect("conv layer");
                if cin == 0 || cout == 0 || k == 0 || stride == 0 {
                    return bad("conv parameters must be positive".into());
                }
                if input.len() != dim + 1 || input[0] != cin {
                    return bad(format!("conv{dim}d with {cin} channels on {input:?}"));
                }
                let mut out = vec![cout];
                for &s in &input[1..] {
                    if s + 2 * pad < k {
                        return bad(format!("kernel {k} exceeds padded size {}", s + 2 * pad));
                    }
                    out.push((s + 2 * pad - k) / stride + 1);
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape (no batch axis).
    pub input_shape: Vec<usize>,
    /// Weights and biases in layer order: `[w0, b0, w1, b1, ...]`.
    pub params: Vec<Tensor>,
    pub seed: u64,
    /// Free-form creation config recorded alongside checkpoints.
    pub config: String,
}

/// Recorded forward pass used by [`NetworkModel::backward`].
pub struct ForwardTrace {
    graph: Graph,
    params: Vec<Var>,
    output: Var,
    param_count: usize,
}

impl ForwardTrace {
    pub fn output(&self) -> &Tensor {
        self.graph.value(self.output)
    }
}

/// Fan-in/fan-out scaled uniform initialisation, zero biases.
pub fn init_network(layers: Vec<LayerSpec>, input_shape: &[usize], seed: u64) -> Result<NetworkModel> {
    let mut shape = input_shape.to_vec();
    for l in &layers {
        shape = l.output_shape(&shape)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for l in &layers {
        if let Some((ws, bs)) = l.param_shapes() {
            let receptive: usize = ws[2..].iter().product();
            let fan_in = ws[1] * receptive;
            let fan_out = ws[0] * receptive;
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = ws.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
            params.push(Tensor::from_vec(&ws, data)?);
            params.push(Tensor::zeros(&bs));
        }
    }
    Ok(NetworkModel {
        layers,
        input_shape: input_shape.to_vec(),
        params,
        seed,
        config: String::new(),
    })
}

impl NetworkModel {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for l in &self.layers {
            shape = l.output_shape(&shape)?;
        }
        Ok(shape)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Registers the parameters on a graph, as trainable or frozen leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.input(p.clone()) })
            .collect()
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(NnError::Shape(format!(
                "model expects [batch, {:?}], got {shape:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Applies the layer chain to `x` (`[batch, input_shape...]`) on a graph.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, params: &[Var]) -> Result<Var> {
        self.check_batch(g.value(x).shape())?;
        let batch = g.value(x).shape()[0];
        let mut h = x;
        let mut p = 0;
        for l in &self.layers {
            h = match l {
                LayerSpec::Dense { .. } => {
                    let y = g.linear(h, params[p], Some(params[p + 1]), None)?;
                    p += 2;
                    y
                }
                LayerSpec::Conv2d { stride, padding, .. } | LayerSpec::Conv3d { stride, padding, .. } => {
                    let y = g.conv(h, params[p], params[p + 1], *stride, *padding)?;
                    p += 2;
                    y
                }
                LayerSpec::Upsample { dim, factor } => g.upsample(h, *dim, *factor)?,
                LayerSpec::Activation { activation } => g.activation(h, *activation),
                LayerSpec::Reshape { shape } => {
                    let mut s = vec![batch];
                    s.extend_from_slice(shape);
                    g.reshape(h, &s)?
                }
            };
        }
        Ok(h)
    }

    /// Inference without recording gradients.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_with(input, Execution::default())
    }

    pub fn forward_with(&self, input: &Tensor, exec: Execution) -> Result<Tensor> {
        let mut g = Graph::new(exec);
        let x = g.input(input.clone());
        let params = self.bind(&mut g, false);
        let y = self.forward_graph(&mut g, x, &params)?;
        Ok(g.value(y).clone())
    }

    /// Forward pass that keeps the intermediate activations for [`Self::backward`].
    pub fn forward_trace(&self, input: &Tensor, exec: Execution) -> Result<ForwardTrace> {
        let mut graph = Graph::new(exec);
        let x = graph.input(input.clone());
        let params = self.bind(&mut graph, true);
        let output = self.forward_graph(&mut graph, x, &params)?;
        Ok(ForwardTrace {
            graph,
            params,
            output,
            param_count: self.params.len(),
        })
    }

    /// Parameter gradients of `<upstream, output>` for a recorded pass.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &Tensor) -> Result<Vec<Tensor>> {
        if trace.param_count != self.params.len()
            || trace
                .params
                .iter()
                .zip(&self.params)
                .any(|(v, p)| trace.graph.value(*v).shape() != p.shape())
        {
            return Err(NnError::MissingTrace);
        }
        let mut grads = trace.graph.backward_with(trace.output, upstream.clone())?;
        Ok(trace
            .params
            .iter()
            .zip(&self.params)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pinn_layers(inputs: usize) -> Vec<LayerSpec> {
        let mut layers = vec![LayerSpec::dense(inputs, 100), LayerSpec::act(Activation::Tanh)];
        for _ in 0..3 {
            layers.push(LayerSpec::dense(100, 100));
            layers.push(LayerSpec::act(Activation::Tanh));
        }
        layers.push(LayerSpec::dense(100, 1));
        layers.push(LayerSpec::act(Activation::Softplus));
        layers
    }

    #[test]
    fn pinn_parameter_count() {
        let m = init_network(pinn_layers(3), &[3], 1).unwrap();
        // 100*3+100 + 3*(100*100+100) + 100+1
        assert_eq!(m.parameter_count(), 30_801);
        let m3 = init_network(pinn_layers(4), &[4], 1).unwrap();
        assert_eq!(m3.parameter_count(), 30_901);
    }

    #[test]
    fn dense_shapes_and_determinism() {
        let a = init_network(vec![LayerSpec::dense(3, 100)], &[3], 7).unwrap();
        assert_eq!(a.params[0].shape(), &[100, 3]);
        assert_eq!(a.params[1].shape(), &[100]);
        let b = init_network(vec![LayerSpec::dense(3, 100)], &[3], 7).unwrap();
        assert_eq!(a, b);
        let c = init_network(vec![LayerSpec::dense(3, 100)], &[3], 8).unwrap();
        assert_ne!(a.params[0], c.params[0]);
    }

    #[test]
    fn inconsistent_chain_rejected() {
        let r = init_network(vec![LayerSpec::dense(3, 10), LayerSpec::dense(11, 1)], &[3], 0);
        assert!(r.is_err());
    }

    #[test]
    fn zero_softplus_head_gives_log2() {
        let mut m = init_network(pinn_layers(3), &[3], 1).unwrap();
        m.params.iter_mut().for_each(|p| p.scale(0.0));
        let x = Tensor::from_vec(&[2, 3], vec![0.1, 2.0, -1.0, 3.0, 0.0, 0.5]).unwrap();
        let y = m.forward(&x).unwrap();
        for v in y.data() {
            assert!((v - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_dense_passes_input() {
        let mut m = init_network(vec![LayerSpec::dense(3, 3)], &[3], 1).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        m.params[0] = eye;
        let x = Tensor::from_vec(&[1, 3], vec![0.3, -2.0, 5.0]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let a = init_network(vec![LayerSpec::dense(2, 3)], &[2], 1).unwrap();
        let b = init_network(vec![LayerSpec::dense(2, 4)], &[2], 1).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        let trace = a.forward_trace(&x, Execution::Sequential).unwrap();
        let up = Tensor::zeros(&[1, 3]);
        assert!(matches!(b.backward(&trace, &up), Err(NnError::MissingTrace)));
        let g = a.backward(&trace, &up).unwrap();
        assert!(g.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }
}
