//! Exact input derivatives of dense networks by forward jet propagation.
//!
//! A jet stacks, row-block by row-block, the point values, the directional
//! first derivatives along each requested input coordinate, and (for order
//! two) the pure second derivatives along the same coordinates. Dense layers
//! act linearly on every block (the bias only touches the value block), and
//! activations use the chain rule up to second order. Everything is recorded
//! on a [`Graph`], so parameter gradients of any loss built from the jet come
//! from the ordinary reverse sweep.

use crate::error::{NnError, Result};
use crate::exec::Execution;
use crate::graph::{Graph, JetLayout, Var};
use crate::model::{LayerSpec, NetworkModel};
use crate::tensor::Tensor;

/// Value, first and (optionally) second derivatives at each input point.
#[derive(Debug, Clone)]
pub struct JetOutput {
    /// `[points]` network outputs (single-output networks).
    pub value: Vec<f64>,
    /// One `[points]` vector per requested direction.
    pub first: Vec<Vec<f64>>,
    /// One `[points]` vector per requested direction when `order == 2`.
    pub second: Vec<Vec<f64>>,
}

/// Builds the seeded input jet for `points [n, in]`.
pub fn seed_jet(points: &Tensor, directions: &[usize], order: usize) -> Result<(Tensor, JetLayout)> {
    let s = points.shape();
    if s.len() != 2 {
        return Err(NnError::Shape(format!("jet points must be [n, in], got {s:?}")));
    }
    if !(1..=2).contains(&order) {
        return Err(NnError::Unsupported(format!("jet order {order}")));
    }
    let (n, width) = (s[0], s[1]);
    if let Some(&bad) = directions.iter().find(|&&d| d >= width) {
        return Err(NnError::Shape(format!("direction {bad} of a {width}-wide input")));
    }
    let layout = JetLayout {
        points: n,
        directions: directions.len(),
        order,
    };
    let mut data = Vec::with_capacity(n * width * layout.blocks());
    data.extend_from_slice(points.data());
    for &d in directions {
        for _ in 0..n {
            data.extend((0..width).map(|c| if c == d { 1.0 } else { 0.0 }));
        }
    }
    if order == 2 {
        data.resize(n * width * layout.blocks(), 0.0);
    }
    Ok((Tensor::from_vec(&[n * layout.blocks(), width], data)?, layout))
}

/// Propagates a seeded jet through a dense network on `g`.
pub fn jet_graph(model: &NetworkModel, g: &mut Graph, jet: Var, layout: JetLayout, params: &[Var]) -> Result<Var> {
    let mut h = jet;
    let mut p = 0;
    for l in &model.layers {
        h = match l {
            LayerSpec::Dense { .. } => {
                let y = g.linear(h, params[p], Some(params[p + 1]), Some(layout.points))?;
                p += 2;
                y
            }
            LayerSpec::Activation { activation } => g.activation_jet(h, *activation, layout)?,
            other => {
                return Err(NnError::Unsupported(format!(
                    "input jets need a dense network, found {other:?}"
                )))
            }
        };
    }
    Ok(h)
}

fn split_blocks(t: &Tensor, layout: JetLayout) -> JetOutput {
    let n = layout.points;
    let d = t.data();
    let block = |b: usize| d[b * n..(b + 1) * n].to_vec();
    JetOutput {
        value: block(0),
        first: (0..layout.directions).map(|k| block(1 + k)).collect(),
        second: if layout.order == 2 {
            (0..layout.directions).map(|k| block(1 + layout.directions + k)).collect()
        } else {
            Vec::new()
        },
    }
}

/// Exact derivatives of a single-output dense network at `points [n, in]`
/// along the input coordinates listed in `directions`.
pub fn input_jet(model: &NetworkModel, points: &Tensor, order: usize, directions: &[usize]) -> Result<JetOutput> {
    if model.output_shape()? != [1] {
        return Err(NnError::Shape("input jets need a single-output network".into()));
    }
    let (seed, layout) = seed_jet(points, directions, order)?;
    let mut g = Graph::new(Execution::default());
    let x = g.input(seed);
    let params = model.bind(&mut g, false);
    let out = jet_graph(model, &mut g, x, layout, &params)?;
    Ok(split_blocks(g.value(out), layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::model::init_network;

    fn small_mlp(seed: u64) -> NetworkModel {
        init_network(
            vec![
                LayerSpec::dense(3, 8),
                LayerSpec::act(Activation::Tanh),
                LayerSpec::dense(8, 8),
                LayerSpec::act(Activation::Tanh),
                LayerSpec::dense(8, 1),
                LayerSpec::act(Activation::Softplus),
            ],
            &[3],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn single_tanh_unit() {
        let mut m = init_network(vec![LayerSpec::dense(1, 1), LayerSpec::act(Activation::Tanh)], &[1], 0).unwrap();
        let w = 1.7;
        m.params[0] = Tensor::from_vec(&[1, 1], vec![w]).unwrap();
        let x = 0.4;
        let pts = Tensor::from_vec(&[1, 1], vec![x]).unwrap();
        let j = input_jet(&m, &pts, 2, &[0]).unwrap();
        let t = (w * x).tanh();
        assert!((j.first[0][0] - w * (1.0 - t * t)).abs() < 1e-14);
        let h = 1e-5;
        let fd = ((w * (x + h)).tanh() - (w * (x - h)).tanh()) / (2.0 * h);
        assert!((j.first[0][0] - fd).abs() < 1e-7);
    }

    #[test]
    fn matches_finite_differences() {
        let m = small_mlp(11);
        let pts = Tensor::from_vec(&[2, 3], vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4]).unwrap();
        let j = input_jet(&m, &pts, 2, &[0, 1, 2]).unwrap();
        let h = 1e-4;
        for p in 0..2 {
            for (k, dir) in [0usize, 1, 2].iter().enumerate() {
                let eval = |delta: f64| {
                    let mut q = pts.clone();
                    q.data_mut()[p * 3 + dir] += delta;
                    m.forward(&q).unwrap().data()[p]
                };
                let (fp, f0, fm) = (eval(h), eval(0.0), eval(-h));
                let d1 = (fp - fm) / (2.0 * h);
                let d2 = (fp - 2.0 * f0 + fm) / (h * h);
                assert!((f0 - j.value[p]).abs() < 1e-14);
                assert!((d1 - j.first[k][p]).abs() <= 1e-7 * (1.0 + d1.abs()));
                assert!((d2 - j.second[k][p]).abs() <= 1e-5 * (1.0 + d2.abs()));
            }
        }
    }

    #[test]
    fn constant_network_has_zero_derivatives() {
        let mut m = small_mlp(2);
        for (i, p) in m.params.iter_mut().enumerate() {
            if i % 2 == 0 {
                p.scale(0.0);
            }
        }
        let pts = Tensor::from_vec(&[1, 3], vec![0.5, 0.5, 0.5]).unwrap();
        let j = input_jet(&m, &pts, 2, &[0, 2]).unwrap();
        assert!(j.first.iter().chain(&j.second).all(|v| v[0] == 0.0));
    }

    #[test]
    fn conv_layers_rejected() {
        let m = init_network(
            vec![LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 3,
                stride: 1,
                padding: 1,
            }],
            &[1, 4, 4],
            0,
        )
        .unwrap();
        let pts = Tensor::zeros(&[1, 16]);
        assert!(input_jet(&m, &pts, 1, &[0]).is_err());
    }
}
